"""Dataset file format: line-delimited JSON with a header line followed by
one record per image. The canonical serialization (sorted keys, compact
separators) round-trips bit-exactly through parse and serialize."""

from __future__ import annotations

import csv
import json
import os
import tempfile
from dataclasses import dataclass

import numpy as np

from .core import CameraPose, ObservationSet

FORMAT_VERSION = 1


@dataclass(frozen=True)
class Dataset:
    observations: ObservationSet
    image_ids: tuple
    groups: tuple
    k_hint: int
    gt_poses: tuple | None
    gt_shapes: np.ndarray | None

    @property
    def has_ground_truth(self) -> bool:
        return self.gt_poses is not None and self.gt_shapes is not None


def _canonical_line(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")) + "\n"


def dataset_to_text(ds: Dataset) -> str:
    obs = ds.observations
    n, p = obs.n_images, obs.n_pairs
    header = {
        "version": FORMAT_VERSION,
        "n_images": n,
        "n_pairs": p,
        "k_hint": ds.k_hint,
        "symmetry_axis": "x",
        "groups": sorted(set(ds.groups)),
    }
    lines = [_canonical_line(header)]
    for i in range(n):
        keypoints = []
        for j in range(p):
            u, v = obs.image(i)[:, j]
            um, vm = obs.image_mirror(i)[:, j]
            keypoints.append([[u, v, bool(obs.visible[i, j])],
                              [um, vm, bool(obs.visible_mirror[i, j])]])
        record = {
            "id": ds.image_ids[i],
            "group": ds.groups[i],
            "keypoints": keypoints,
        }
        if ds.gt_poses is not None:
            pose = ds.gt_poses[i]
            record["gt_pose"] = {
                "rotation": pose.rotation.tolist(),
                "scale": pose.scale,
                "translation": pose.translation.tolist(),
            }
        if ds.gt_shapes is not None:
            record["gt_shape"] = ds.gt_shapes[3 * i:3 * i + 3].tolist()
        lines.append(_canonical_line(record))
    return "".join(lines)


def dataset_from_text(text: str) -> Dataset:
    lines = [line for line in text.splitlines() if line.strip()]
    if not lines:
        raise ValueError("empty dataset file")
    header = json.loads(lines[0])
    if header.get("version") != FORMAT_VERSION:
        raise ValueError(f"unrecognized dataset version {header.get('version')!r}")
    n, p = header["n_images"], header["n_pairs"]
    if len(lines) != n + 1:
        raise ValueError(f"expected {n} records, found {len(lines) - 1}")
    y = np.zeros((2 * n, p))
    ym = np.zeros((2 * n, p))
    vis = np.zeros((n, p), dtype=bool)
    vis_m = np.zeros((n, p), dtype=bool)
    ids, groups, poses = [], [], []
    shapes = np.zeros((3 * n, p))
    have_pose = have_shape = True
    for i, line in enumerate(lines[1:]):
        rec = json.loads(line)
        ids.append(rec["id"])
        groups.append(rec["group"])
        kp = rec["keypoints"]
        if len(kp) != p:
            raise ValueError(f"record {i} has {len(kp)} pairs, header says {p}")
        for j, (primary, mirror) in enumerate(kp):
            y[2 * i, j], y[2 * i + 1, j] = primary[0], primary[1]
            vis[i, j] = bool(primary[2])
            ym[2 * i, j], ym[2 * i + 1, j] = mirror[0], mirror[1]
            vis_m[i, j] = bool(mirror[2])
        if "gt_pose" in rec:
            gp = rec["gt_pose"]
            poses.append(CameraPose(np.array(gp["rotation"]), gp["scale"],
                                    np.array(gp["translation"])))
        else:
            have_pose = False
        if "gt_shape" in rec:
            shapes[3 * i:3 * i + 3] = np.array(rec["gt_shape"])
        else:
            have_shape = False
    obs = ObservationSet(y, ym, vis, vis_m, np.zeros((n, 2)))
    return Dataset(obs, tuple(ids), tuple(groups), header.get("k_hint", 3),
                   tuple(poses) if have_pose else None,
                   shapes if have_shape else None)


def write_atomic(path: str, text: str):
    """Write through a temporary file and rename, so readers never observe a
    partial file."""
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp_", text=True)
    try:
        with os.fdopen(fd, "w") as handle:
            handle.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_dataset(path: str, ds: Dataset):
    write_atomic(path, dataset_to_text(ds))


def load_dataset(path: str) -> Dataset:
    with open(path) as handle:
        return dataset_from_text(handle.read())


def import_p3d_csv(path: str, k_hint: int = 3) -> Dataset:
    """Convert an externally prepared keypoint export to a Dataset.

    Expected CSV columns: image_id, group, point_id, side, u, v, visible,
    with side 0 for the primary half and 1 for the mirror half. Entries not
    present in the file are marked invisible.
    """
    rows = []
    with open(path, newline="") as handle:
        reader = csv.DictReader(handle)
        required = {"image_id", "group", "point_id", "side", "u", "v", "visible"}
        if reader.fieldnames is None or not required.issubset(reader.fieldnames):
            raise ValueError(f"CSV must have columns {sorted(required)}")
        rows = list(reader)
    if not rows:
        raise ValueError("CSV contains no keypoint rows")
    image_ids = list(dict.fromkeys(r["image_id"] for r in rows))
    point_ids = sorted({r["point_id"] for r in rows})
    groups = {}
    n, p = len(image_ids), len(point_ids)
    img_index = {v: i for i, v in enumerate(image_ids)}
    pt_index = {v: j for j, v in enumerate(point_ids)}
    y = np.zeros((2 * n, p))
    ym = np.zeros((2 * n, p))
    vis = np.zeros((n, p), dtype=bool)
    vis_m = np.zeros((n, p), dtype=bool)
    for r in rows:
        i = img_index[r["image_id"]]
        j = pt_index[r["point_id"]]
        groups[r["image_id"]] = r["group"]
        side = int(r["side"])
        visible = r["visible"].strip().lower() in ("1", "true", "yes")
        u, v = float(r["u"]), float(r["v"])
        if side == 0:
            y[2 * i, j], y[2 * i + 1, j] = u, v
            vis[i, j] = visible
        elif side == 1:
            ym[2 * i, j], ym[2 * i + 1, j] = u, v
            vis_m[i, j] = visible
        else:
            raise ValueError(f"side must be 0 or 1, got {r['side']!r}")
    obs = ObservationSet(y, ym, vis, vis_m, np.zeros((n, 2)))
    return Dataset(obs, tuple(image_ids),
                   tuple(groups[i] for i in image_ids), k_hint, None, None)
