import numpy as np
import pytest
from sklearn.base import clone

from cachetune.errors import InvalidParam
from cachetune.estimators import FrequencyTokenRanker, RatioCalibrator
from cachetune.pipesim import RequestSpec
from cachetune.scheduler import HardwareProfile, ttft_model
from cachetune.spectral import indices_for_ratio, rank_chunk

from conftest import random_chunk


def test_ranker_get_set_params_and_clone():
    est = FrequencyTokenRanker(alpha=0.3)
    assert est.get_params() == {"alpha": 0.3}
    est.set_params(alpha=0.7)
    assert est.alpha == 0.7
    cloned = clone(est)
    assert cloned.get_params() == {"alpha": 0.7}


def test_ranker_matches_functional_core(rng):
    chunk = random_chunk(rng, n=18, layers=2)
    est = FrequencyTokenRanker(alpha=0.5).fit(chunk)
    want = rank_chunk(chunk, 0.5)
    assert np.array_equal(est.aggregate_order_, want.aggregate_order)
    assert np.array_equal(est.transform(r=0.2), indices_for_ratio(want, 0.2))
    got = set(est.transform(r=0.3).tolist()) | set(est.complement(0.3).tolist())
    assert got == set(range(18))


def test_ranker_accepts_array_pair(rng):
    keys = rng.standard_normal((12, 2, 4))
    values = rng.standard_normal((12, 2, 4))
    est = FrequencyTokenRanker().fit((keys, values))
    assert est.n_tokens_ == 12
    assert est.scores_.shape == (1, 12)


def test_ranker_requires_fit(rng):
    with pytest.raises(InvalidParam):
        FrequencyTokenRanker().transform(r=0.1)


def test_calibrator_fits_r_star():
    p = HardwareProfile(t_c=2e-6, t_i=3e-6, t_o=0.0)
    est = RatioCalibrator(
        evaluator=lambda s, r: ttft_model(r, s.n_tokens, s.n_layers, p),
        profile=p)
    est.fit([RequestSpec(chunk_tokens=(64, 64), n_layers=4)] * 5)
    assert abs(est.r_star_ - 0.6) < est.epsilon
    assert est.predict() == est.r_star_
    assert est.r0_ == pytest.approx(0.6)
    assert len(est.trace_) == est.eval_count_


def test_calibrator_clone_keeps_params():
    est = RatioCalibrator(epsilon=0.02, r_min=0.2)
    cloned = clone(est)
    assert cloned.epsilon == 0.02 and cloned.r_min == 0.2
    with pytest.raises(InvalidParam):
        RatioCalibrator().fit([1, 2])
