"""Command-line surface: dataset synthesis, fitting, evaluation and noise
sweeps.

Exit codes: 0 success, 2 bad flags or validation failure, 3 I/O failure,
4 non-convergence under --strict, 5 missing ground truth.
"""

from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from .core import CameraPose, DegenerateInputError
from .dataset import (
    Dataset,
    dataset_to_text,
    import_p3d_csv,
    load_dataset,
    save_dataset,
    write_atomic,
)
from .evaluation import evaluate, full_shapes_from_halves, run_noise_sweep
from .pipelines import METHODS, fit_method
from .synth import SynthConfig, generate_scene
from .validation import check_observations

EXIT_OK = 0
EXIT_BAD_ARGS = 2
EXIT_IO = 3
EXIT_NOT_CONVERGED = 4
EXIT_NO_GROUND_TRUTH = 5


def _fmt(value: float) -> str:
    return f"{value:.6g}"


def cmd_synth(args) -> int:
    try:
        cfg = SynthConfig(n_images=args.n, n_pairs=args.p, n_bases=args.k,
                          scale_range=(args.scale_lo, args.scale_hi),
                          deform_scale=args.deform, noise_s=args.noise_s,
                          occlusion_rate=args.occlusion, seed=args.seed)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_BAD_ARGS
    obs, poses, gt = generate_scene(cfg)
    ds = Dataset(obs, tuple(f"img{i:04d}" for i in range(cfg.n_images)),
                 ("synthetic",) * cfg.n_images, cfg.n_bases,
                 tuple(poses), gt.shapes)
    try:
        save_dataset(args.out, ds)
    except OSError as exc:
        print(f"error: cannot write {args.out}: {exc}", file=sys.stderr)
        return EXIT_IO
    print(f"wrote {args.out}: N={cfg.n_images} P={cfg.n_pairs} K={cfg.n_bases}")
    return EXIT_OK


def _model_text(method, outcome, ids) -> str:
    shapes = outcome.shapes_full
    header = {
        "method": method,
        "n_images": shapes.shape[0],
        "n_points": shapes.shape[2],
        "converged": bool(outcome.report.converged),
        "flags": list(outcome.report.flags),
    }
    lines = [json.dumps(header, sort_keys=True, separators=(",", ":")) + "\n"]
    for i, pose in enumerate(outcome.poses):
        record = {
            "id": ids[i],
            "rotation": pose.rotation.tolist(),
            "scale": pose.scale,
            "translation": pose.translation.tolist(),
            "shape": shapes[i].tolist(),
        }
        lines.append(json.dumps(record, sort_keys=True, separators=(",", ":")) + "\n")
    return "".join(lines)


def _load_model(path):
    with open(path) as handle:
        lines = [line for line in handle.read().splitlines() if line.strip()]
    header = json.loads(lines[0])
    poses, shapes, ids = [], [], []
    for line in lines[1:]:
        rec = json.loads(line)
        ids.append(rec["id"])
        poses.append(CameraPose(np.array(rec["rotation"]), rec["scale"],
                                np.array(rec["translation"])))
        shapes.append(np.array(rec["shape"]))
    return header, poses, np.array(shapes), ids


def cmd_fit(args) -> int:
    if args.method not in METHODS:
        print(f"error: unknown method {args.method!r}", file=sys.stderr)
        return EXIT_BAD_ARGS
    if args.k < 1:
        print("error: --k must be at least 1", file=sys.stderr)
        return EXIT_BAD_ARGS
    try:
        ds = load_dataset(args.data)
    except (OSError, ValueError) as exc:
        print(f"error: cannot read {args.data}: {exc}", file=sys.stderr)
        return EXIT_IO
    try:
        check_observations(ds.observations)
        outcome = fit_method(args.method, ds.observations, n_bases=args.k,
                             coupling=args.coupling, max_iters=args.max_iters,
                             tol=args.tol)
    except (DegenerateInputError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_BAD_ARGS
    log_path = args.log or args.out + ".log"
    trace = outcome.report.objective_trace
    log_lines = [f"{i} {_fmt(v)}\n" for i, v in enumerate(trace)]
    log_lines.append(f"converged {str(outcome.report.converged).lower()}\n")
    for flag in outcome.report.flags:
        log_lines.append(f"flag {flag}\n")
    try:
        write_atomic(args.out, _model_text(args.method, outcome, ds.image_ids))
        write_atomic(log_path, "".join(log_lines))
    except OSError as exc:
        print(f"error: cannot write output: {exc}", file=sys.stderr)
        return EXIT_IO
    final = trace[-1] if trace else float("nan")
    print(f"fit {args.method}: {outcome.report.n_iter} iterations, "
          f"final objective {_fmt(final)}, converged={outcome.report.converged}")
    if args.strict and not outcome.report.converged:
        print("error: did not converge under --strict", file=sys.stderr)
        return EXIT_NOT_CONVERGED
    return EXIT_OK


def _report_rows(report):
    rows = [("group", "e_S_mean", "e_S_median")]
    for label in report.groups:
        rows.append((label, _fmt(report.e_s_mean[label]),
                     _fmt(report.e_s_median[label])))
    rows.append(("rotation", _fmt(report.e_r_mean), _fmt(report.e_r_median)))
    return rows


def _print_aligned(rows):
    widths = [max(len(str(r[c])) for r in rows) for c in range(len(rows[0]))]
    for row in rows:
        print("  ".join(str(cell).ljust(w) for cell, w in zip(row, widths)))


def cmd_eval(args) -> int:
    try:
        ds = load_dataset(args.data)
        header, poses_est, shapes_est, _ = _load_model(args.model)
    except (OSError, ValueError, KeyError) as exc:
        print(f"error: cannot read inputs: {exc}", file=sys.stderr)
        return EXIT_IO
    if not ds.has_ground_truth:
        print("error: dataset carries no ground truth", file=sys.stderr)
        return EXIT_NO_GROUND_TRUTH
    gt_full = full_shapes_from_halves(ds.gt_shapes)
    report = evaluate(shapes_est, poses_est, gt_full, list(ds.gt_poses),
                      groups=list(ds.groups))
    rows = _report_rows(report)
    _print_aligned(rows)
    if args.out:
        text = "".join("\t".join(str(c) for c in row) + "\n" for row in rows)
        try:
            write_atomic(args.out, text)
        except OSError as exc:
            print(f"error: cannot write {args.out}: {exc}", file=sys.stderr)
            return EXIT_IO
    return EXIT_OK


def cmd_sweep(args) -> int:
    try:
        s_values = [float(tok) for tok in args.s_values.split(",") if tok]
        methods = [tok for tok in args.methods.split(",") if tok]
    except ValueError as exc:
        print(f"error: bad --s-values: {exc}", file=sys.stderr)
        return EXIT_BAD_ARGS
    for method in methods:
        if method not in METHODS:
            print(f"error: unknown method {method!r}", file=sys.stderr)
            return EXIT_BAD_ARGS
    try:
        cfg = SynthConfig(n_images=args.n, n_pairs=args.p, n_bases=args.k,
                          seed=args.seed)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_BAD_ARGS
    cells = run_noise_sweep(cfg, s_values, methods, repetitions=args.reps)
    rows = [("method", "s", "e_S", "e_R", "ok", "failed")]
    for method in methods:
        for s in s_values:
            cell = cells[(method, s)]
            rows.append((method, _fmt(s), _fmt(cell.e_s), _fmt(cell.e_r),
                         str(cell.n_ok), str(cell.n_failed)))
    _print_aligned(rows)
    if args.out:
        text = "".join("\t".join(str(c) for c in row) + "\n" for row in rows)
        try:
            write_atomic(args.out, text)
        except OSError as exc:
            print(f"error: cannot write {args.out}: {exc}", file=sys.stderr)
            return EXIT_IO
    return EXIT_OK


def cmd_import_p3d(args) -> int:
    try:
        ds = import_p3d_csv(args.csv, k_hint=args.k)
    except (OSError, ValueError) as exc:
        print(f"error: cannot import {args.csv}: {exc}", file=sys.stderr)
        return EXIT_BAD_ARGS if isinstance(exc, ValueError) else EXIT_IO
    try:
        save_dataset(args.out, ds)
    except OSError as exc:
        print(f"error: cannot write {args.out}: {exc}", file=sys.stderr)
        return EXIT_IO
    obs = ds.observations
    print(f"wrote {args.out}: N={obs.n_images} P={obs.n_pairs}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="symnrsfm",
        description="Symmetric non-rigid structure from motion toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p_synth = sub.add_parser("synth", help="generate a synthetic dataset")
    p_synth.add_argument("--n", type=int, default=20)
    p_synth.add_argument("--p", type=int, default=8)
    p_synth.add_argument("--k", type=int, default=2)
    p_synth.add_argument("--noise-s", type=float, default=0.0)
    p_synth.add_argument("--occlusion", type=float, default=0.0)
    p_synth.add_argument("--seed", type=int, default=0)
    p_synth.add_argument("--scale-lo", type=float, default=1.0)
    p_synth.add_argument("--scale-hi", type=float, default=1.0)
    p_synth.add_argument("--deform", type=float, default=0.2)
    p_synth.add_argument("--out", required=True)
    p_synth.set_defaults(func=cmd_synth)

    p_fit = sub.add_parser("fit", help="fit a model to a dataset")
    p_fit.add_argument("--data", required=True)
    p_fit.add_argument("--method", required=True)
    p_fit.add_argument("--k", type=int, default=3)
    p_fit.add_argument("--coupling", "--lambda", dest="coupling",
                       type=float, default=1.0)
    p_fit.add_argument("--max-iters", type=int, default=None)
    p_fit.add_argument("--tol", type=float, default=None)
    p_fit.add_argument("--out", required=True)
    p_fit.add_argument("--log", default=None)
    p_fit.add_argument("--strict", action="store_true")
    p_fit.set_defaults(func=cmd_fit)

    p_eval = sub.add_parser("eval", help="score a fitted model against ground truth")
    p_eval.add_argument("--data", required=True)
    p_eval.add_argument("--model", required=True)
    p_eval.add_argument("--out", default=None)
    p_eval.set_defaults(func=cmd_eval)

    p_sweep = sub.add_parser("sweep", help="noise-robustness grid")
    p_sweep.add_argument("--n", type=int, default=20)
    p_sweep.add_argument("--p", type=int, default=8)
    p_sweep.add_argument("--k", type=int, default=2)
    p_sweep.add_argument("--seed", type=int, default=0)
    p_sweep.add_argument("--s-values", default="0.03,0.05,0.07")
    p_sweep.add_argument("--reps", type=int, default=10)
    p_sweep.add_argument("--methods", default=",".join(METHODS))
    p_sweep.add_argument("--out", default=None)
    p_sweep.set_defaults(func=cmd_sweep)

    p_imp = sub.add_parser("import-p3d", help="convert a keypoint CSV export")
    p_imp.add_argument("--csv", required=True)
    p_imp.add_argument("--k", type=int, default=3)
    p_imp.add_argument("--out", required=True)
    p_imp.set_defaults(func=cmd_import_p3d)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_BAD_ARGS if exc.code not in (0, None) else 0
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
