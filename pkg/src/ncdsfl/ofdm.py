"""OFDM link: per-client power-delay profiles, tapped-delay-line fading, QPSK frames, samples.

A frame is one pilot OFDM symbol followed by one data OFDM symbol, each 64
subcarriers with a 16-sample cyclic prefix.  The detector input is the 128
post-prefix received samples interleaved as ``(Re, Im, Re, Im, ...)``; the labels
of head ``e`` are the 32 data bits carried on subcarriers ``16e .. 16e+15``.

All randomness is drawn from generators keyed by explicit integer tuples so every
dataset is a pure function of its seeds.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import SizeError

N_SUBCARRIERS = 64
CP_LEN = 16
N_TAPS = 17
BITS_PER_FRAME = 2 * N_SUBCARRIERS
SUBCARRIERS_PER_HEAD = 16
BITS_PER_HEAD = 2 * SUBCARRIERS_PER_HEAD
FRAME_LEN = 2 * (N_SUBCARRIERS + CP_LEN)
INPUT_DIM = 2 * 2 * N_SUBCARRIERS

# Stream tags keep the generators for different purposes independent.
_PDP, _TAPS, _POOL, _PILOT, _BATCH, _VALID = 11, 12, 13, 14, 15, 16


def rng_for(*keys):
    return np.random.default_rng([int(k) for k in keys])


@dataclass(frozen=True)
class ChannelParams:
    """Statistical tapped-delay-line parameters (urban-microcell NLoS figures)."""

    n_paths: int = 24
    max_delay: int = 16
    sample_rate_hz: float = 20e6
    carrier_hz: float = 2.6e9  # recorded only; the channel is time invariant
    log10_delay_spread_mean: float = -7.12
    log10_delay_spread_std: float = 0.12
    delay_scaling: float = 2.4
    path_shadow_std_db: float = 3.0
    shadow_std_db: float = 4.0

    @property
    def mean_rms_delay_samples(self):
        return 10.0**self.log10_delay_spread_mean * self.sample_rate_hz


@dataclass(frozen=True)
class PowerDelayProfile:
    path_powers: np.ndarray
    path_delays: np.ndarray
    shadow_db: float
    client_id: int
    rms_delay_s: float = 0.0

    def tap_powers(self, n_taps=N_TAPS):
        """Expected ``|h[tau]|^2`` per delay bin (paths sharing a bin add up)."""
        return np.bincount(self.path_delays, weights=self.path_powers, minlength=n_taps)


def sample_pdp(client_id, seed=0, params=ChannelParams()):
    """Draw one client's power-delay profile.

    The RMS delay spread is log-normal.  Path delays are exponential with mean
    ``delay_scaling * DS`` and are shifted to start at zero; powers decay exponentially
    in delay with a per-path log-normal perturbation, then are normalized to sum to one.
    Delays are quantized to sample periods and clipped to ``max_delay``.  A common
    shadowing gain is drawn and recorded; normalized ratios are unaffected by it.
    """
    rng = rng_for(_PDP, seed, client_id)
    ds = 10.0 ** rng.normal(params.log10_delay_spread_mean, params.log10_delay_spread_std)
    r = params.delay_scaling
    tau = -r * ds * np.log(rng.uniform(size=params.n_paths))
    tau = np.sort(tau - tau.min())
    z = rng.normal(0.0, params.path_shadow_std_db, size=params.n_paths)
    powers = np.exp(-tau * (r - 1.0) / (r * ds)) * 10.0 ** (-z / 10.0)
    powers = powers / powers.sum()
    delays = np.minimum(np.rint(tau * params.sample_rate_hz).astype(np.int64), params.max_delay)
    shadow_db = float(rng.normal(0.0, params.shadow_std_db))
    return PowerDelayProfile(powers, delays, shadow_db, int(client_id), float(ds))


@dataclass(frozen=True)
class ChannelRealization:
    taps: np.ndarray
    client_id: int
    rician_k_db: float | None = None


def _draw_taps(rng, pdp, n, rician_k_db, n_taps):
    g = (rng.standard_normal((n, pdp.path_powers.size)) + 1j * rng.standard_normal((n, pdp.path_powers.size)))
    g *= np.sqrt(pdp.path_powers / 2.0)
    taps = np.zeros((n, n_taps), dtype=complex)
    for m, tau in enumerate(pdp.path_delays):
        taps[:, tau] += g[:, m]
    if rician_k_db is not None:
        k = 10.0 ** (rician_k_db / 10.0)
        los = np.exp(1j * rng.uniform(0.0, 2.0 * np.pi, size=n))
        taps *= np.sqrt(1.0 / (1.0 + k))
        taps[:, 0] += np.sqrt(k / (1.0 + k)) * los
    return taps


def realize_taps(pdp, seed=0, rician_k_db=None, n_taps=N_TAPS):
    """One time-invariant channel: complex Gaussian path gains of power ``P_m``.

    With a Rician factor ``K`` (dB) the scattered part is scaled by ``1/(1+K)`` in power
    and a unit-modulus line-of-sight term of power ``K/(1+K)`` is added at delay 0.
    """
    rng = rng_for(_TAPS, seed, pdp.client_id)
    taps = _draw_taps(rng, pdp, 1, rician_k_db, n_taps)[0]
    return ChannelRealization(taps, pdp.client_id, rician_k_db)


def realize_pool(pdp, n_channels, seed=0, rician_k_db=None, stream=_POOL, n_taps=N_TAPS):
    """``n_channels x n_taps`` array of independent realizations from one profile."""
    rng = rng_for(stream, seed, pdp.client_id)
    return _draw_taps(rng, pdp, n_channels, rician_k_db, n_taps)


# -- modulation -----------------------------------------------------------------


def qpsk_map(bits):
    """Bit pairs ``(b_re, b_im)`` -> ``((2 b_re - 1) + j (2 b_im - 1)) / sqrt(2)`` along the last axis."""
    bits = np.asarray(bits)
    if bits.shape[-1] % 2:
        raise SizeError("QPSK needs an even number of bits")
    b = 2.0 * bits.astype(float) - 1.0
    return (b[..., 0::2] + 1j * b[..., 1::2]) / np.sqrt(2.0)


def qpsk_demap(symbols):
    """Hard decisions: sign of real and imaginary parts, interleaved ``(re, im)``."""
    symbols = np.asarray(symbols)
    out = np.empty(symbols.shape[:-1] + (2 * symbols.shape[-1],), dtype=np.int8)
    out[..., 0::2] = symbols.real > 0
    out[..., 1::2] = symbols.imag > 0
    return out


@dataclass(frozen=True)
class PilotConfig:
    """Known pilot symbol.

    ``comb`` > 0 keeps only ``comb`` evenly spaced subcarriers.  With ``boost`` they are
    scaled so the pilot symbol keeps unit average power.
    """

    comb: int = 0
    seed: int = 2024
    boost: bool = False

    @property
    def positions(self):
        if not self.comb:
            return np.arange(N_SUBCARRIERS)
        if N_SUBCARRIERS % self.comb:
            raise SizeError("comb pilot count must divide 64")
        return np.arange(0, N_SUBCARRIERS, N_SUBCARRIERS // self.comb)

    def symbols(self):
        """Full 64-entry pilot spectrum (zeros off-comb), unit average power."""
        bits = rng_for(_PILOT, self.seed).integers(0, 2, size=BITS_PER_FRAME)
        full = qpsk_map(bits)
        if not self.comb:
            return full
        out = np.zeros(N_SUBCARRIERS, dtype=complex)
        pos = self.positions
        out[pos] = full[pos] * (np.sqrt(N_SUBCARRIERS / pos.size) if self.boost else 1.0)
        return out


def ofdm_symbol(spectrum):
    """IDFT (unitary) plus cyclic prefix along the last axis."""
    x = np.fft.ifft(spectrum, axis=-1, norm="ortho")
    return np.concatenate([x[..., -CP_LEN:], x], axis=-1)


@dataclass(frozen=True)
class OfdmFrame:
    pilot_symbols: np.ndarray
    data_bits: np.ndarray
    data_symbols: np.ndarray
    tx_time: np.ndarray
    n_subcarriers: int = N_SUBCARRIERS
    cp_len: int = CP_LEN


def qpsk_modulate_frame(data_bits, pilot_symbols):
    """Build the transmit side of a frame (works on a batch if ``data_bits`` is ``n x 128``)."""
    data_bits = np.asarray(data_bits)
    if data_bits.shape[-1] != BITS_PER_FRAME:
        raise SizeError(f"a frame carries {BITS_PER_FRAME} data bits, got {data_bits.shape[-1]}")
    pilot_symbols = np.asarray(pilot_symbols, dtype=complex)
    if pilot_symbols.shape != (N_SUBCARRIERS,):
        raise SizeError("pilot spectrum must have 64 entries")
    data = qpsk_map(data_bits)
    pilot_time = np.broadcast_to(ofdm_symbol(pilot_symbols), data.shape[:-1] + (N_SUBCARRIERS + CP_LEN,))
    tx = np.concatenate([pilot_time, ofdm_symbol(data)], axis=-1)
    return OfdmFrame(pilot_symbols, data_bits, data, tx)


def noise_variance(taps, snr_db, tx_power=1.0):
    """Per-sample noise power for a target SNR relative to the received signal power."""
    taps = np.asarray(taps)
    return tx_power * np.sum(np.abs(taps) ** 2, axis=-1) / 10.0 ** (snr_db / 10.0)


def channel_filter(tx_time, taps):
    """Linear convolution truncated to the frame length (tails past the frame are dropped)."""
    tx_time = np.asarray(tx_time)
    taps = np.asarray(taps)
    if taps.shape[-1] - 1 > CP_LEN:
        raise SizeError("channel longer than the cyclic prefix")
    out = np.zeros(np.broadcast_shapes(tx_time.shape[:-1], taps.shape[:-1]) + tx_time.shape[-1:], dtype=complex)
    n = tx_time.shape[-1]
    for tau in range(taps.shape[-1]):
        out[..., tau:] += taps[..., tau, None] * tx_time[..., : n - tau]
    return out


def complex_noise(rng, shape, variance):
    variance = np.asarray(variance, dtype=float)[..., None] if np.ndim(variance) else variance
    return np.sqrt(variance / 2.0) * (rng.standard_normal(shape) + 1j * rng.standard_normal(shape))


def transmit(frame, taps, snr_db=None, seed=0):
    """Received sequence for a frame; ``snr_db=None`` gives the noiseless output."""
    tx = frame.tx_time if isinstance(frame, OfdmFrame) else np.asarray(frame)
    clean = channel_filter(tx, taps)
    if snr_db is None:
        return clean
    rng = np.random.default_rng(seed) if not isinstance(seed, np.random.Generator) else seed
    return clean + complex_noise(rng, clean.shape, noise_variance(taps, snr_db))


@dataclass
class SupervisedSample:
    """``x`` is ``n x 256``; ``y_bits[e]`` is ``n x 32``; ``rx_freq`` is ``n x 2 x 64`` (pilot, data)."""

    x: np.ndarray
    y_bits: list
    rx_freq: np.ndarray
    data_bits: np.ndarray = field(default=None, repr=False)


def strip_cp(rx):
    rx = np.asarray(rx)
    if rx.shape[-1] != FRAME_LEN:
        raise SizeError(f"received frame must have {FRAME_LEN} samples, got {rx.shape[-1]}")
    sym = N_SUBCARRIERS + CP_LEN
    return np.concatenate([rx[..., CP_LEN:sym], rx[..., sym + CP_LEN :]], axis=-1)


def interleave_re_im(z):
    z = np.asarray(z)
    out = np.empty(z.shape[:-1] + (2 * z.shape[-1],))
    out[..., 0::2] = z.real
    out[..., 1::2] = z.imag
    return out


def receive_to_sample(rx, data_bits, n_heads=4):
    """Strip prefixes, DFT each symbol, and cut labels for ``n_heads`` detector heads."""
    data_bits = np.asarray(data_bits)
    if not 1 <= n_heads <= N_SUBCARRIERS // SUBCARRIERS_PER_HEAD:
        raise SizeError("n_heads must be between 1 and 4")
    body = strip_cp(rx)
    freq = np.fft.fft(body.reshape(body.shape[:-1] + (2, N_SUBCARRIERS)), axis=-1, norm="ortho")
    y = [data_bits[..., BITS_PER_HEAD * e : BITS_PER_HEAD * (e + 1)].astype(np.int8) for e in range(n_heads)]
    return SupervisedSample(interleave_re_im(body), y, freq, data_bits)


def frequency_response(taps, n=N_SUBCARRIERS):
    return np.fft.fft(taps, n=n, axis=-1)


def post_cp_samples(data_bits, pilot_symbols, taps, snr_db, rng):
    """The 128 post-prefix received samples of each frame, computed per subcarrier.

    Because the prefix covers the channel memory, these samples equal the output of
    :func:`transmit` followed by :func:`strip_cp` (noise statistics included); this path
    just skips the time-domain convolution.
    """
    data_bits = np.asarray(data_bits)
    n = data_bits.shape[0]
    spectra = np.empty((n, 2, N_SUBCARRIERS), dtype=complex)
    spectra[:, 0] = pilot_symbols
    spectra[:, 1] = qpsk_map(data_bits)
    spectra *= frequency_response(taps)[:, None, :]
    body = np.fft.ifft(spectra, axis=-1, norm="ortho").reshape(n, 2 * N_SUBCARRIERS)
    if snr_db is not None:
        scale = np.sqrt(noise_variance(taps, snr_db) / 2.0)
        body += scale[:, None] * rng.standard_normal((n, 4 * N_SUBCARRIERS)).view(complex)
    return body


# -- per-client datasets ----------------------------------------------------------


@dataclass
class ClientDataset:
    """One client's frozen channel pool; mini-batches draw fresh bits and noise per call."""

    client_id: int
    pdp: PowerDelayProfile
    channel_pool: np.ndarray
    pilot_symbols: np.ndarray
    snr_db: float | None
    rician_k_db: float | None
    seed: int

    def __post_init__(self):
        self.channel_pool.setflags(write=False)
        self.pilot_symbols.setflags(write=False)

    def frames(self, rng, n):
        """Draw ``n`` frames; returns channel indices, data bits and post-prefix samples."""
        idx = rng.integers(0, self.channel_pool.shape[0], size=n)
        taps = self.channel_pool[idx]
        bits = rng.integers(0, 2, size=(n, BITS_PER_FRAME), dtype=np.int8)
        body = post_cp_samples(bits, self.pilot_symbols, taps, self.snr_db, rng)
        return idx, bits, body

    def batch(self, n, round_index, iteration, n_heads=1):
        """Mini-batch from the stream keyed by ``(seed, client, round, iteration)``."""
        rng = rng_for(_BATCH, self.seed, self.client_id, round_index, iteration)
        _, bits, body = self.frames(rng, n)
        y = [bits[:, BITS_PER_HEAD * e : BITS_PER_HEAD * (e + 1)] for e in range(n_heads)]
        return SupervisedSample(interleave_re_im(body), y, None, bits)

    def export_csv(self, path):
        """Channel pool as rows ``channel, tap, re, im``."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["channel", "tap", "re", "im"])
            for c, taps in enumerate(self.channel_pool):
                for t, h in enumerate(taps):
                    w.writerow([c, t, repr(float(h.real)), repr(float(h.imag))])

    def describe(self):
        return {
            "client_id": self.client_id,
            "n_channels": int(self.channel_pool.shape[0]),
            "snr_db": self.snr_db,
            "rician_k_db": self.rician_k_db,
            "seed": self.seed,
            "rms_delay_s": self.pdp.rms_delay_s,
            "shadow_db": self.pdp.shadow_db,
            "path_powers": self.pdp.path_powers.tolist(),
            "path_delays": self.pdp.path_delays.tolist(),
        }


def build_client_dataset(
    client_id, n_channels=500, snr_db=10.0, rician_k_db=None, seed=0, pilots=PilotConfig(), params=ChannelParams()
):
    if n_channels < 1:
        raise SizeError("n_channels must be at least 1")
    pdp = sample_pdp(client_id, seed, params)
    pool = realize_pool(pdp, n_channels, seed, rician_k_db)
    return ClientDataset(int(client_id), pdp, pool, pilots.symbols(), snr_db, rician_k_db, int(seed))


@dataclass
class ValidationSet:
    """Fixed frames drawn from every listed client profile with fresh channels."""

    x: np.ndarray
    data_bits: np.ndarray
    rx_freq: np.ndarray
    taps: np.ndarray
    snr_db: np.ndarray
    client_ids: np.ndarray

    def head_bits(self, e):
        return self.data_bits[:, BITS_PER_HEAD * e : BITS_PER_HEAD * (e + 1)]

    def subset(self, mask):
        return ValidationSet(*(getattr(self, f)[mask] for f in
                               ("x", "data_bits", "rx_freq", "taps", "snr_db", "client_ids")))


def build_validation_set(datasets, frames_per_client, seed):
    """Frames from each client's profile on fresh channel draws, that client's SNR and Rician factor."""
    parts = []
    for ds in datasets:
        rng = rng_for(_VALID, seed, ds.client_id)
        taps = _draw_taps(rng, ds.pdp, frames_per_client, ds.rician_k_db, ds.channel_pool.shape[1])
        bits = rng.integers(0, 2, size=(frames_per_client, BITS_PER_FRAME), dtype=np.int8)
        body = post_cp_samples(bits, ds.pilot_symbols, taps, ds.snr_db, rng)
        freq = np.fft.fft(body.reshape(-1, 2, N_SUBCARRIERS), axis=-1, norm="ortho")
        snr = np.full(frames_per_client, np.inf if ds.snr_db is None else ds.snr_db)
        parts.append((interleave_re_im(body), bits, freq, taps, snr, np.full(frames_per_client, ds.client_id)))
    return ValidationSet(*(np.concatenate(p) for p in zip(*parts)))


def params_to_json(params):
    return json.dumps(asdict(params))
