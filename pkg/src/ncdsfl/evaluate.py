"""Bit error rates, the pilot-aided MMSE receiver, and collapse tracking on trained nets."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import CoverageError, ParameterError, SizeError
from .nc_core import theta_metric, vartheta_from_labels
from .net import forward
from .ofdm import N_SUBCARRIERS, N_TAPS, qpsk_demap


def ber(pred, truth):
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise SizeError(f"bit arrays differ in shape: {pred.shape} vs {truth.shape}")
    if pred.size == 0:
        raise SizeError("no bits to compare")
    return float(np.count_nonzero(pred != truth) / pred.size)


@dataclass
class DetectorResult:
    bits: np.ndarray
    ber: float | None
    symbols: np.ndarray | None = None
    channel_estimate: np.ndarray | None = None


def exponential_pdp(rms_delay_samples, n_taps=N_TAPS):
    """Normalized ``exp(-tau / rms)`` profile over ``n_taps`` sample delays."""
    if rms_delay_samples <= 0:
        p = np.zeros(n_taps)
        p[0] = 1.0
        return p
    p = np.exp(-np.arange(n_taps) / rms_delay_samples)
    return p / p.sum()


def frequency_correlation(pdp, n=N_SUBCARRIERS):
    """``R[a, b] = sum_tau p_tau exp(-2j pi (a - b) tau / n)``."""
    k = np.arange(n)
    tau = np.arange(pdp.size)
    F = np.exp(-2j * np.pi * np.outer(k, tau) / n)
    return (F * pdp) @ F.conj().T


def mmse_channel_estimate(pilot_rx, pilot_positions, pilot_symbols, noise_var, rms_delay_samples=1.518):
    """LS at the pilots followed by linear MMSE interpolation to all 64 subcarriers.

    ``pilot_rx`` is ``n x 64`` (frequency domain, pilot symbol) and ``pilot_symbols``
    the known 64-entry pilot spectrum.  ``noise_var`` is a scalar or per-frame array.
    """
    pilot_rx = np.atleast_2d(np.asarray(pilot_rx))
    pos = np.asarray(pilot_positions)
    if pos.size == 0:
        raise ParameterError("at least one pilot subcarrier is required")
    ap = np.asarray(pilot_symbols)[pos]
    if np.any(np.abs(ap) == 0):
        raise ParameterError("pilot symbols must be nonzero at pilot positions")
    h_ls = pilot_rx[:, pos] / ap
    R = frequency_correlation(exponential_pdp(rms_delay_samples))
    R_fp = R[:, pos]
    R_pp = R[np.ix_(pos, pos)]
    nv = np.broadcast_to(np.asarray(noise_var, dtype=float), (pilot_rx.shape[0],))
    out = np.empty((pilot_rx.shape[0], R.shape[0]), dtype=complex)
    inv_ap2 = 1.0 / np.abs(ap) ** 2
    # Frames sharing a noise level share the interpolation matrix.
    for level in np.unique(nv):
        sel = nv == level
        if level == 0:
            M = R_fp @ np.linalg.pinv(R_pp)
        else:
            M = R_fp @ np.linalg.inv(R_pp + np.diag(level * inv_ap2))
        out[sel] = h_ls[sel] @ M.T
    return out


def mmse_detect(rx_freq, pilot_positions, pilot_symbols, noise_var, truth_bits=None, rms_delay_samples=1.518):
    """Classical receiver: MMSE channel estimate, one-tap equalization, QPSK slicing.

    ``rx_freq`` is ``n x 2 x 64`` (pilot symbol, data symbol).  With ``truth_bits``
    (``n x 128``) the BER is filled in.
    """
    rx_freq = np.asarray(rx_freq)
    if rx_freq.ndim == 2:
        rx_freq = rx_freq[None]
    if rx_freq.shape[1:] != (2, N_SUBCARRIERS):
        raise SizeError("rx_freq must be n x 2 x 64")
    H = mmse_channel_estimate(rx_freq[:, 0], pilot_positions, pilot_symbols, noise_var, rms_delay_samples)
    mag = np.abs(H) ** 2
    sym = rx_freq[:, 1] * np.conj(H) / np.where(mag > 0, mag, 1.0)
    bits = qpsk_demap(sym)
    rate = None if truth_bits is None else ber(bits, np.asarray(truth_bits)[..., : bits.shape[-1]])
    return DetectorResult(bits, rate, sym, H)


def label_means(features, bits):
    """Collapse duplicate labels to their mean feature; returns ``(means, unique_bits)``."""
    uniq, inv = np.unique(np.asarray(bits), axis=0, return_inverse=True)
    inv = inv.ravel()
    sums = np.zeros((uniq.shape[0], features.shape[1]))
    np.add.at(sums, inv, features)
    return sums / np.bincount(inv)[:, None], uniq


def track_collapse(net, inputs, bits, center=True):
    """``(theta, vartheta)`` of a network on a probe batch.

    ``theta`` is read off the output head (identically 0 for a frozen NC head).
    ``vartheta`` compares label-mean penultimate features, centered on their global
    mean when ``center`` is set, with the NC direction of the output head.  Every bit
    must take both values somewhere in the probe batch.
    """
    bits = np.asarray(bits)
    if bits.ndim != 2 or bits.shape[1] != net.num_bits:
        raise SizeError("probe bits must be n x num_bits")
    lo, hi = bits.min(axis=0), bits.max(axis=0)
    if np.any(lo == hi):
        raise CoverageError("probe batch leaves some bit constant; cannot measure collapse")
    hidden, _, _ = forward(net, inputs)
    feats = hidden[-1]
    means, labels = label_means(feats, bits)
    if center:
        means = means - feats.mean(axis=0)
    W = net.output_head.weights.T
    I = net.num_bits
    return theta_metric(W[:, :I], W[:, I:]), vartheta_from_labels(W, means, labels)
