"""Uniform dispatch over the four fitting methods.

Each method returns per-image full symmetric point sets (N, 3, 2P) and
poses regardless of its internal parameterization, so evaluation and the
CLI can treat them interchangeably.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import ObservationSet, SymmetryOp
from .em_ppca import EmConfig, as_columns, fit_em_ppca, fit_sym_em_ppca
from .priorfree import PriorFreeConfig, fit_priorfree, fit_sym_priorfree

_A = SymmetryOp().matrix

METHODS = ("sym-em-ppca", "sym-priorfree", "em-ppca", "priorfree")


@dataclass(frozen=True)
class FitOutcome:
    method: str
    shapes_full: np.ndarray
    poses: tuple
    report: object
    detail: object


def _em_full_shapes(model, coeffs):
    n = coeffs.shape[0]
    p = model.n_pairs
    out = np.zeros((n, 3, 2 * p))
    for i in range(n):
        half = as_columns(model.mean_shape + model.bases @ coeffs[i], 3)
        half_m = as_columns(model.mirror_mean_shape + model.mirror_bases @ coeffs[i], 3)
        out[i] = np.hstack([half, half_m])
    return out


def _plain_full_shapes(model, coeffs):
    n = coeffs.shape[0]
    out = np.zeros((n, 3, model.n_points))
    for i in range(n):
        out[i] = as_columns(model.mean_shape + model.bases @ coeffs[i], 3)
    return out


def _halves_full_shapes(shapes):
    n = shapes.shape[0] // 3
    out = np.zeros((n, 3, 2 * shapes.shape[1]))
    for i in range(n):
        half = shapes[3 * i:3 * i + 3]
        out[i] = np.hstack([half, _A @ half])
    return out


def fit_method(method: str, obs: ObservationSet, n_bases: int = 3,
               coupling: float = 1.0, max_iters: int | None = None,
               tol: float | None = None) -> FitOutcome:
    """Run one of the four registered methods on an observation set."""
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}, expected one of {METHODS}")
    if method in ("sym-em-ppca", "em-ppca"):
        cfg = EmConfig(n_bases=n_bases, coupling=coupling,
                       max_em_iters=max_iters or 100, rel_tol=tol or 1e-6)
        fit = fit_sym_em_ppca if method == "sym-em-ppca" else fit_em_ppca
        model, poses, report = fit(obs, cfg)
        shapes = (_em_full_shapes(model, model.coeffs) if method == "sym-em-ppca"
                  else _plain_full_shapes(model, model.coeffs))
        return FitOutcome(method, shapes, tuple(poses), report, model)
    cfg = PriorFreeConfig(n_bases=n_bases, max_refine_iters=max_iters or 50,
                          rel_tol=tol or 1e-6)
    fit = fit_sym_priorfree if method == "sym-priorfree" else fit_priorfree
    shape_set, poses, report = fit(obs, cfg)
    if method == "sym-priorfree":
        shapes = _halves_full_shapes(shape_set.shapes)
    else:
        shapes = np.stack([shape_set.shape(i) for i in range(shape_set.n_images)])
    return FitOutcome(method, shapes, tuple(poses), report, shape_set)


def method_shapes_and_poses(outcome: FitOutcome):
    return outcome.shapes_full, list(outcome.poses)
