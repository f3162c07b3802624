"""Estimator-style front end: fit a localization to a data provider, then
transform point clouds into metric components of the localized data."""

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .adm import LocalizedEvaluator
from .geometry import ConeSpec, GridParams, WeightParams
from .picard import localize

__all__ = ["ConeLocalizer"]


class ConeLocalizer(BaseEstimator, TransformerMixin):
    """Thin wrapper over the localization pipeline.

    fit(provider) runs the rough-patch + fixed-point solve on the cone
    annulus; transform(X) evaluates the resulting metric at points X and
    returns the flattened components, one row per point.
    """

    def __init__(self, vertex=(0.0, 0.0, -200.0), theta1=np.pi / 6,
                 theta2=np.pi / 3, N=12, p=0.75, nt=32, ntheta=16,
                 r_min=1.0, r_max=None):
        self.vertex = vertex
        self.theta1 = theta1
        self.theta2 = theta2
        self.N = N
        self.p = p
        self.nt = nt
        self.ntheta = ntheta
        self.r_min = r_min
        self.r_max = r_max

    def fit(self, X, y=None):
        """X: a data provider with metric/momentum point evaluators."""
        cone = ConeSpec(tuple(self.vertex), self.theta1, self.theta2)
        weights = WeightParams(N=self.N, p=self.p)
        gp = GridParams(nt=self.nt, ntheta=self.ntheta, r_min=self.r_min,
                        r_max=self.r_max)
        out, trace, diag = localize(X, cone, weights, gp)
        self.output_ = out
        self.trace_ = trace
        self.diagnostics_ = diag
        self.evaluator_ = LocalizedEvaluator(out, X, weights)
        self.n_features_in_ = out.g.grid.n
        return self

    def transform(self, X):
        check_is_fitted(self, "evaluator_")
        X = np.atleast_2d(np.asarray(X, float))
        g = self.evaluator_.metric(X)
        return g.reshape(X.shape[0], -1)

    def momentum(self, X):
        check_is_fitted(self, "evaluator_")
        X = np.atleast_2d(np.asarray(X, float))
        return self.evaluator_.momentum(X).reshape(X.shape[0], -1)
