import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.stats import chi2

from geoanchor.fusion import (
    CHI2_2DOF_99,
    FilterState,
    FusionConfig,
    NotInitialized,
    check_covariance,
    initialize,
    mahalanobis2,
    predict,
    update_instant,
    update_memory,
)
from geoanchor.geometry import GeoPoint

CFG = FusionConfig()


def started(pos=(0.0, 0.0), cfg=CFG):
    return initialize(FilterState(), GeoPoint(*pos), cfg)


def test_defaults():
    assert CFG.process_noise_per_meter == 0.05
    assert CFG.memory_obs_variance == pytest.approx(400 / 3)
    assert CFG.instant_obs_variance == 900
    assert CFG.gate_threshold == CHI2_2DOF_99 == 9.21
    # 9.21 is the 99% point of chi-square with 2 dof
    assert chi2.ppf(0.99, 2) == pytest.approx(9.21, abs=0.005)
    with pytest.raises(ValueError):
        FusionConfig(instant_obs_variance=0)


def test_initialize():
    s = started((500, 300))
    assert s.initialized and s.position.tolist() == [500, 300]
    assert np.allclose(s.covariance, CFG.memory_obs_variance * np.eye(2))
    with pytest.raises(RuntimeError):
        initialize(s, GeoPoint(0, 0), CFG)
    with pytest.raises(NotInitialized):
        predict(FilterState(), (1, 0), CFG)
    with pytest.raises(NotInitialized):
        update_memory(FilterState(), GeoPoint(0, 0), CFG)


def test_predict():
    s = started()
    same = predict(s, (0, 0), CFG)
    assert np.array_equal(same.position, s.position) and np.array_equal(same.covariance, s.covariance)
    cfg = FusionConfig(process_noise_per_meter=0.01)
    moved = predict(s, (10, 0), cfg)
    assert np.allclose(moved.covariance - s.covariance, 0.1 * np.eye(2))
    for d in [(30, 10), (20, 20), (50, 20)]:
        s = predict(s, d, CFG)
    assert s.position.tolist() == [100, 50]


@pytest.mark.parametrize("update, var", [(update_memory, CFG.memory_obs_variance), (update_instant, CFG.instant_obs_variance)])
def test_update_examples(update, var):
    s = started((10, 10))
    same = update(s, GeoPoint(10, 10), CFG)
    assert np.allclose(same.position, s.position)
    assert np.trace(same.covariance) < np.trace(s.covariance)

    equal = replace_cov(s, var * np.eye(2))
    half = update(equal, GeoPoint(16, 2), CFG)
    assert np.allclose(half.position, [13, 6])

    sigma = math.sqrt(var + var)  # innovation SD with P = R = var * I
    far = GeoPoint(10 + 10 * sigma, 10)
    # hand-evaluated gate: d^2 = (10 sigma)^2 / sigma^2 = 100 > 9.21
    assert mahalanobis2(equal, far.as_array(), var) == pytest.approx(100.0)
    rejected = update(equal, far, CFG)
    assert np.array_equal(rejected.position, equal.position)
    assert np.array_equal(rejected.covariance, equal.covariance)
    assert rejected.rejected == equal.rejected + 1


def replace_cov(s, p):
    return FilterState(s.position, p, True, s.last_timestamp)


@given(st.integers(0, 100_000))
def test_covariance_stays_spd_and_contracts(seed):
    rng = np.random.default_rng(seed)
    s = started(rng.uniform(-100, 100, 2))
    for _ in range(40):
        kind = rng.integers(3)
        if kind == 0:
            s = predict(s, rng.normal(0, 20, 2), CFG)
        else:
            update = update_memory if kind == 1 else update_instant
            before = s
            s = update(s, GeoPoint(*(s.position + rng.normal(0, 15, 2))), CFG)
            if s.accepted > before.accepted:
                assert np.trace(s.covariance) <= np.trace(before.covariance) + 1e-12
        check_covariance(s.covariance)


@given(st.integers(0, 100_000))
def test_update_order_irrelevant(seed):
    rng = np.random.default_rng(seed)
    cfg = FusionConfig(gate_threshold=1e12)
    s = predict(started(rng.uniform(-50, 50, 2), cfg), rng.normal(0, 30, 2), cfg)
    zm = GeoPoint(*rng.normal(0, 20, 2))
    zi = GeoPoint(*rng.normal(0, 20, 2))
    a = update_instant(update_memory(s, zm, cfg), zi, cfg)
    b = update_memory(update_instant(s, zi, cfg), zm, cfg)
    assert np.allclose(a.position, b.position, atol=1e-9, rtol=0)
    assert np.allclose(a.covariance, b.covariance, atol=1e-9, rtol=0)


def test_gated_outliers_never_move_state():
    rng = np.random.default_rng(3)
    s = started()
    for _ in range(200):
        z = s.position + rng.normal(0, 1, 2) * 1e4
        nxt = update_memory(s, GeoPoint(*z), CFG)
        if nxt.rejected > s.rejected:
            assert np.array_equal(nxt.position, s.position)
            assert np.array_equal(nxt.covariance, s.covariance)
        s = nxt
