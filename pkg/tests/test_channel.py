import numpy as np
import pytest
from hypothesis import given, strategies as st

from oracles import scalar_inner
from rsvr.channel import (SystemConfig, dbm_to_watt, gains, load_channels, received_power,
                          sample_channels, save_channels)
from rsvr.errors import ConstructionError, DomainError


def test_deterministic():
    cfg = SystemConfig(M=4, K=2, N=4)
    a, b = sample_channels(cfg, 7), sample_channels(cfg, 7)
    assert a.h.tobytes() == b.h.tobytes()
    assert not np.array_equal(a.h, sample_channels(cfg, 8).h)


def test_zero_pathloss_user():
    cfg = SystemConfig(M=2, K=2, N=4, pathloss=(1.0, 0.0))
    ch = sample_channels(cfg, 0)
    assert np.all(ch.h[1] == 0)
    assert np.all(ch.h[0] != 0)


def test_unit_variance_monte_carlo():
    cfg = SystemConfig(M=2, K=2, N=4, pathloss=(1.0, 0.25))
    acc = np.zeros(2)
    for seed in range(10_000):
        acc += np.mean(np.abs(sample_channels(cfg, seed).h) ** 2, axis=(1, 2))
    assert np.allclose(acc / 10_000, [1.0, 0.25], rtol=0.05)


def test_received_power_examples():
    e1 = np.array([1, 0, 0], dtype=complex)
    assert received_power(e1, e1) == 1.0
    assert received_power(e1, np.array([0, 1, 0])) == 0.0
    h, w = np.array([1, 1j]), np.array([1, 1]) / np.sqrt(2)
    assert received_power(h, w) == pytest.approx(1.0, abs=1e-15)
    assert received_power(h, w) == pytest.approx(abs(scalar_inner(h, w)) ** 2, abs=1e-15)
    with pytest.raises(DomainError):
        received_power(h, np.ones(3))


@given(st.integers(0, 2**31), st.complex_numbers(max_magnitude=10, allow_nan=False, allow_infinity=False))
def test_received_power_scaling(seed, alpha):
    rng = np.random.default_rng(seed)
    h = rng.standard_normal(4) + 1j * rng.standard_normal(4)
    w = rng.standard_normal(4) + 1j * rng.standard_normal(4)
    assert received_power(h, alpha * w) == pytest.approx(abs(alpha) ** 2 * received_power(h, w),
                                                         rel=1e-9, abs=1e-12)


def test_gains_matches_loops():
    cfg = SystemConfig(M=3, K=2, N=2)
    ch = sample_channels(cfg, 1)
    rng = np.random.default_rng(0)
    w = rng.standard_normal((3, 2, 3)) + 1j * rng.standard_normal((3, 2, 3))
    G = gains(ch, w)
    for k in range(2):
        for j in range(3):
            for n in range(2):
                assert G[k, j, n] == pytest.approx(abs(scalar_inner(ch.h[k, n], w[j, n])) ** 2)


def test_dump_roundtrip(tmp_path):
    cfg = SystemConfig(M=2, K=3, N=4, P=0.5, pathloss=(1.0, 0.5, 0.1))
    ch = sample_channels(cfg, 11)
    save_channels(tmp_path / "ch.npz", ch)
    back = load_channels(tmp_path / "ch.npz")
    assert back.h.tobytes() == ch.h.tobytes()
    assert back.seed == 11 and back.config == cfg


def test_config_validation():
    with pytest.raises(ConstructionError):
        SystemConfig(M=0, K=1, N=1)
    with pytest.raises(ConstructionError):
        SystemConfig(M=1, K=2, N=1, pathloss=(1.0,))
    assert dbm_to_watt(30) == pytest.approx(1.0)
