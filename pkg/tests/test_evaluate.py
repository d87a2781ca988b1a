import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ncdsfl.errors import CoverageError, ParameterError, SizeError
from ncdsfl.evaluate import (
    ber,
    exponential_pdp,
    frequency_correlation,
    label_means,
    mmse_channel_estimate,
    mmse_detect,
    track_collapse,
)
from ncdsfl.net import init_net
from ncdsfl.ofdm import (
    BITS_PER_FRAME,
    N_SUBCARRIERS,
    PilotConfig,
    noise_variance,
    qpsk_demap,
    qpsk_modulate_frame,
    realize_pool,
    receive_to_sample,
    sample_pdp,
    transmit,
)


def link(bits, pilots, taps, snr_db=None, seed=0):
    frame = qpsk_modulate_frame(bits, pilots)
    return receive_to_sample(transmit(frame, taps, snr_db, seed), bits, 4)


# ber


def test_ber_basic():
    a = np.array([0, 1, 1, 0, 1, 0])
    assert ber(a, a) == 0.0
    assert ber(a, 1 - a) == 1.0
    b = a.copy()
    b[:3] ^= 1
    assert ber(a, b) == 0.5


def test_ber_length_mismatch():
    with pytest.raises(SizeError):
        ber(np.zeros(3), np.zeros(4))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10**6), st.integers(1, 200))
def test_ber_symmetric_and_permutation_invariant(seed, n):
    rng = np.random.default_rng(seed)
    a = rng.integers(0, 2, n)
    b = rng.integers(0, 2, n)
    p = rng.permutation(n)
    assert ber(a, b) == ber(b, a) == ber(a[p], b[p])
    assert ber(a, b) == np.count_nonzero(a != b) / n


# MMSE receiver


def test_frequency_correlation_is_hermitian_psd():
    R = frequency_correlation(exponential_pdp(1.5))
    np.testing.assert_allclose(R, R.conj().T, atol=1e-14)
    assert np.linalg.eigvalsh(R).min() > -1e-12
    np.testing.assert_allclose(np.diag(R).real, 1.0, rtol=1e-12)


def test_flat_channel_noiseless():
    pilots = PilotConfig().symbols()
    bits = np.random.default_rng(0).integers(0, 2, (10, BITS_PER_FRAME))
    s = link(bits, pilots, np.array([1.0 + 0j]))
    res = mmse_detect(s.rx_freq, np.arange(64), pilots, 0.0, bits)
    assert res.ber == 0.0


def test_noiseless_full_pilots_random_channels():
    pilots = PilotConfig().symbols()
    rng = np.random.default_rng(1)
    taps = (rng.standard_normal((50, 17)) + 1j * rng.standard_normal((50, 17))) / math.sqrt(34)
    bits = rng.integers(0, 2, (50, BITS_PER_FRAME))
    s = link(bits, pilots, taps)
    res = mmse_detect(s.rx_freq, np.arange(64), pilots, np.zeros(50), bits)
    assert res.ber == 0.0


def test_coin_flip_at_very_low_snr():
    pilots = PilotConfig().symbols()
    pdp = sample_pdp(0, 0)
    taps = realize_pool(pdp, 100, seed=3)
    bits = np.random.default_rng(2).integers(0, 2, (100, BITS_PER_FRAME))
    s = link(bits, pilots, taps, snr_db=-30.0, seed=5)
    res = mmse_detect(s.rx_freq, np.arange(64), pilots, noise_variance(taps, -30.0), bits)
    assert res.bits.size >= 10**4
    assert 0.45 <= res.ber <= 0.55


def test_mmse_beats_ls_interpolation_baseline():
    # Moderate noise: smoothing across subcarriers must help over raw per-subcarrier LS.
    pilots = PilotConfig().symbols()
    pdp = sample_pdp(1, 0)
    taps = realize_pool(pdp, 400, seed=4)
    bits = np.random.default_rng(3).integers(0, 2, (400, BITS_PER_FRAME))
    s = link(bits, pilots, taps, snr_db=5.0, seed=6)
    mm = mmse_detect(s.rx_freq, np.arange(64), pilots, noise_variance(taps, 5.0), bits)
    h_ls = s.rx_freq[:, 0] / pilots
    assert mm.ber < ber(qpsk_demap(s.rx_freq[:, 1] / h_ls), bits)


def test_comb_pilots_interpolate():
    cfg = PilotConfig(comb=8)
    pilots = cfg.symbols()
    pdp = sample_pdp(2, 0)
    taps = realize_pool(pdp, 200, seed=5)
    bits = np.random.default_rng(4).integers(0, 2, (200, BITS_PER_FRAME))
    s = link(bits, pilots, taps, snr_db=20.0, seed=7)
    res = mmse_detect(s.rx_freq, cfg.positions, pilots, noise_variance(taps, 20.0), bits)
    assert res.ber < 0.1
    assert res.channel_estimate.shape == (200, 64)


def test_mmse_rejects_bad_pilots():
    rx = np.zeros((1, 64), dtype=complex)
    with pytest.raises(ParameterError):
        mmse_channel_estimate(rx, np.array([], dtype=int), np.ones(64), 0.1)
    p = np.ones(64, dtype=complex)
    p[3] = 0
    with pytest.raises(ParameterError):
        mmse_channel_estimate(rx, np.arange(8), p, 0.1)


def test_mmse_shape_check():
    with pytest.raises(SizeError):
        mmse_detect(np.zeros((2, 3, 64)), np.arange(64), np.ones(64), 0.1)


# collapse tracking


def collapsed_net(I=3, d=6, offset=5.0):
    """Identity backbone fed with NC-aligned features plus a constant offset."""
    net = init_net([d, d, d], I, mu=0.0, seed=1)
    for layer in net.backbone:
        layer.weights[...] = np.eye(d)
        layer.bias[...] = 0
    W = net.output_head.weights.T
    j = np.arange(2**I)
    bits = (j[:, None] >> np.arange(I)) & 1
    target = (2.0 * bits - 1.0) @ (W[:, I:] - W[:, :I]).T
    return net, np.repeat(target + offset, 3, axis=0), np.repeat(bits, 3, axis=0)


def test_track_collapse_exact_point():
    net, x, bits = collapsed_net()
    theta, vartheta = track_collapse(net, x, bits)
    assert theta < 1e-12 and vartheta < 1e-12


def test_track_collapse_random_init():
    rng = np.random.default_rng(0)
    net = init_net([20, 30, 16], 4, trainable_head=True, seed=3)
    x = rng.standard_normal((200, 20))
    bits = rng.integers(0, 2, (200, 4))
    theta, vartheta = track_collapse(net, x, bits)
    assert theta > 0.1 and vartheta > 0.1


def test_track_collapse_requires_coverage():
    net = init_net([5, 8, 6], 2, seed=0)
    bits = np.zeros((10, 2), dtype=int)
    bits[:, 0] = np.arange(10) % 2
    with pytest.raises(CoverageError):
        track_collapse(net, np.ones((10, 5)), bits)


@settings(max_examples=20, deadline=None)
@given(st.floats(1e-2, 1e2))
def test_track_collapse_scale_invariant(c):
    rng = np.random.default_rng(1)
    net = init_net([10, 12, 8], 3, trainable_head=True, seed=2)
    x = rng.standard_normal((64, 10))
    bits = rng.integers(0, 2, (64, 3))
    before = track_collapse(net, x, bits)
    net.backbone[-1].weights *= c
    net.backbone[-1].bias *= c
    after = track_collapse(net, x, bits)
    assert math.isclose(before[0], after[0], rel_tol=1e-12)
    assert math.isclose(before[1], after[1], rel_tol=1e-9)


def test_label_means():
    feats = np.array([[1.0, 0.0], [3.0, 2.0], [5.0, 5.0]])
    bits = np.array([[0], [0], [1]])
    means, labels = label_means(feats, bits)
    np.testing.assert_allclose(means, [[2.0, 1.0], [5.0, 5.0]])
    np.testing.assert_array_equal(labels, [[0], [1]])
