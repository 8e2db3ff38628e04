"""Scikit-learn style estimators wrapping the fitting pipelines.

The estimators follow the fit/predict protocol with get_params/set_params
from BaseEstimator, take an :class:`ObservationSet` as ``X`` and expose the
fitted structure through trailing-underscore attributes.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .core import ObservationSet, SymmetryOp
from .pipelines import fit_method
from .validation import check_observations

_A = SymmetryOp().matrix


class _NrsfmEstimator(BaseEstimator):
    """Shared plumbing: fit dispatches to the method registry and stores the
    recovered shapes, poses and report."""

    _method = ""

    def __init__(self, n_bases=3, coupling=1.0, max_iters=None, tol=None):
        self.n_bases = n_bases
        self.coupling = coupling
        self.max_iters = max_iters
        self.tol = tol

    def fit(self, X: ObservationSet, y=None):
        check_observations(X)
        outcome = fit_method(self._method, X, n_bases=self.n_bases,
                             coupling=self.coupling, max_iters=self.max_iters,
                             tol=self.tol)
        self.shapes_ = outcome.shapes_full
        self.poses_ = list(outcome.poses)
        self.report_ = outcome.report
        self.detail_ = outcome.detail
        self.n_iter_ = outcome.report.n_iter
        return self

    def predict(self, X=None):
        """Reproject the fitted structure: (2N, 2P) image coordinates with
        the primary half in the first P columns."""
        check_is_fitted(self, "shapes_")
        n = len(self.poses_)
        p2 = self.shapes_.shape[2]
        out = np.zeros((2 * n, p2))
        for i, pose in enumerate(self.poses_):
            proj = pose.scale * pose.rotation @ self.shapes_[i]
            out[2 * i:2 * i + 2] = proj + pose.translation[:, None]
        return out

    def score(self, X: ObservationSet, y=None):
        """Negative reprojection error on the visible entries of ``X``."""
        check_is_fitted(self, "shapes_")
        pred = self.predict()
        p = X.n_pairs
        total = 0.0
        for i in range(X.n_images):
            rows = slice(2 * i, 2 * i + 2)
            diff = X.y[rows] - pred[rows, :p]
            diff_m = X.y_mirror[rows] - pred[rows, p:]
            total += float((diff[:, X.visible[i]] ** 2).sum())
            total += float((diff_m[:, X.visible_mirror[i]] ** 2).sum())
        return -total


class SymEMPPCA(_NrsfmEstimator):
    """Symmetric EM-PPCA: mean shape, mirrored deformation bases and weak
    perspective cameras fitted by expectation maximization."""

    _method = "sym-em-ppca"


class SymPriorFree(_NrsfmEstimator):
    """Symmetric prior-free factorization with coordinate-descent
    refinement."""

    _method = "sym-priorfree"

    def __init__(self, n_bases=3, max_iters=None, tol=None):
        super().__init__(n_bases=n_bases, coupling=1.0, max_iters=max_iters, tol=tol)


class EMPPCA(_NrsfmEstimator):
    """Baseline EM-PPCA ignoring the symmetric pairing."""

    _method = "em-ppca"


class PriorFree(_NrsfmEstimator):
    """Baseline prior-free factorization ignoring the symmetric pairing."""

    _method = "priorfree"

    def __init__(self, n_bases=3, max_iters=None, tol=None):
        super().__init__(n_bases=n_bases, coupling=1.0, max_iters=max_iters, tol=tol)
