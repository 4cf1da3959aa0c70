"""Scikit-learn style estimator wrappers around the two fit-shaped algorithms.

The functional modules stay the source of truth; these classes add the
fit/get_params/set_params surface so token ranking and ratio calibration
drop into sklearn tooling (clone, grid search over alpha or epsilon, etc.).
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator

from .errors import InvalidParam, ShapeError
from .kvcore import KvChunk, SeqTensor
from .scheduler import SearchConfig, calibrate
from .spectral import (complement_for_ratio, indices_for_ratio, low_freq_scores,
                       rank_chunk)


def as_seq_tensor(x) -> SeqTensor:
    """Coerce a SeqTensor, an [N, H, D] array, or an [N, F] matrix (H=1)."""
    if isinstance(x, SeqTensor):
        return x
    a = np.asarray(x, dtype=np.float64)
    if a.ndim == 2:
        a = a[:, None, :]
    if a.ndim != 3:
        raise ShapeError(f"expected 2-d or 3-d array, got ndim={a.ndim}")
    return SeqTensor(a.astype(np.float32))


class FrequencyTokenRanker(BaseEstimator):
    """Rank a chunk's tokens by low-frequency reconstruction energy.

    Parameters
    ----------
    alpha : float, default=0.5
        Fraction of low frequency bins kept by the band-pass step.

    Attributes (after fit)
    ----------------------
    ranking_ : ImportanceRanking
    scores_ : ndarray of shape [n_layers, n_tokens]
    aggregate_order_ : ndarray, descending importance permutation
    """

    def __init__(self, alpha: float = 0.5):
        self.alpha = alpha

    def fit(self, X, y=None):
        """X is a KvChunk, or a (keys, values) pair of token-major arrays."""
        if isinstance(X, KvChunk):
            chunk = X
        else:
            try:
                keys, values = X
            except (TypeError, ValueError):
                raise ShapeError("X must be a KvChunk or a (keys, values) pair")
            chunk = KvChunk(chunk_id="fit", keys_raw=(as_seq_tensor(keys),),
                            values=(as_seq_tensor(values),))
        self.ranking_ = rank_chunk(chunk, self.alpha)
        self.scores_ = self.ranking_.per_layer_scores
        self.aggregate_order_ = self.ranking_.aggregate_order
        self.n_tokens_ = self.ranking_.n_tokens
        return self

    def transform(self, X=None, r: float = 0.15) -> np.ndarray:
        """Recompute-token indices at ratio r, ascending."""
        self._check_fitted()
        return indices_for_ratio(self.ranking_, r)

    def complement(self, r: float = 0.15) -> np.ndarray:
        self._check_fitted()
        return complement_for_ratio(self.ranking_, r)

    def score_tokens(self, keys, values) -> np.ndarray:
        """Stateless per-token scores for one layer's (keys, values)."""
        return low_freq_scores(as_seq_tensor(keys), as_seq_tensor(values),
                               self.alpha)

    def _check_fitted(self):
        if not hasattr(self, "ranking_"):
            raise InvalidParam("call fit before transform/complement")


class RatioCalibrator(BaseEstimator):
    """Fit the TTFT-optimal recompute ratio on a calibration set.

    Parameters mirror the search configuration; `evaluator` maps
    (sample, r) to a TTFT measurement and `profile` supplies the roofline
    prior (see scheduler.calibrate for the measured alternative).

    Attributes (after fit): r_star_, r0_, eval_count_, trace_, report_.
    """

    def __init__(self, evaluator=None, profile=None, r_min: float = 0.15,
                 r_max: float = 0.9, epsilon: float = 0.01,
                 pool=None, tier=None, t_c=None, t_o=None):
        self.evaluator = evaluator
        self.profile = profile
        self.r_min = r_min
        self.r_max = r_max
        self.epsilon = epsilon
        self.pool = pool
        self.tier = tier
        self.t_c = t_c
        self.t_o = t_o

    def fit(self, X, y=None):
        """X is the calibration set: a sequence of request descriptors."""
        if self.evaluator is None:
            raise InvalidParam("RatioCalibrator needs an evaluator")
        cfg = SearchConfig(r_min=self.r_min, r_max=self.r_max,
                           epsilon=self.epsilon)
        report = calibrate(self.pool, self.tier, self.evaluator, list(X), cfg,
                           profile=self.profile, t_c=self.t_c, t_o=self.t_o)
        self.report_ = report
        self.r_star_ = report.r_star
        self.r0_ = report.r0
        self.eval_count_ = report.eval_count
        self.trace_ = report.trace
        return self

    def predict(self, X=None) -> float:
        if not hasattr(self, "r_star_"):
            raise InvalidParam("call fit before predict")
        return self.r_star_
