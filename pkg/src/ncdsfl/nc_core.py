"""Layer-peeled model for multi-binary classification and its neural-collapse optimum.

Notation follows the usual layer-peeled conventions:

* ``W`` is ``d x 2I``; columns ``0..I-1`` are the bit-0 classifiers ``w_{i,0}`` and
  columns ``I..2I-1`` the bit-1 classifiers ``w_{i,1}``.
* ``H`` is ``d x K*2^I``; column ``k*2^I + j`` is the feature of replica ``k`` of the
  sample whose label is the binary expansion of ``j`` (bit ``i`` = ``(j >> i) & 1``).
* ``vec`` stacks columns (Fortran order).

The sign/replication operator ``A`` maps ``vec(H)`` to ``vec(H @ S_K.T)`` where ``S_K``
is the ``I x K*2^I`` sign pattern tiled ``K`` times.  It is only densified on request.

At a global minimizer the features point along ``A.T @ vec(W1 - W0)``: the feature of a
sample with bit ``i`` set leans toward ``w_{i,1}``.  :func:`nc_direction` returns that
direction and both :func:`vartheta_metric` and :func:`check_nc` measure alignment with it.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .errors import (
    DegenerateInputError,
    InfeasibleOrthogonalityError,
    ParameterError,
    SizeError,
    StepSizeError,
)

MAX_BITS = 20

# Norms below this are treated as exact zeros by the scale-normalized metrics.
_UNDERFLOW = 1e-150


def _readonly(a):
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class SignPattern:
    """``I x 2^I`` matrix of +-1 whose column ``j`` encodes the label ``j``."""

    num_bits: int
    signs: np.ndarray = field(repr=False)

    def __post_init__(self):
        object.__setattr__(self, "signs", _readonly(self.signs))
        if self.signs.shape != (self.num_bits, 2**self.num_bits):
            raise SizeError(f"sign matrix shape {self.signs.shape} does not fit I={self.num_bits}")

    @property
    def num_labels(self):
        return 2**self.num_bits

    def to_json(self):
        return json.dumps(
            {
                "type": "SignPattern",
                "num_bits": self.num_bits,
                "rows": self.signs.shape[0],
                "cols": self.signs.shape[1],
                "data": self.signs.astype(int).ravel().tolist(),
            }
        )

    @classmethod
    def from_json(cls, text):
        obj = json.loads(text)
        signs = np.asarray(obj["data"], dtype=np.int8).reshape(obj["rows"], obj["cols"])
        return cls(int(obj["num_bits"]), signs)


def build_sign_pattern(num_bits):
    """Closed-form sign pattern: ``signs[i, j] = 2 * bit_i(j) - 1``."""
    if not isinstance(num_bits, (int, np.integer)) or not 1 <= num_bits <= MAX_BITS:
        raise SizeError(f"num_bits must be an integer in [1, {MAX_BITS}], got {num_bits!r}")
    j = np.arange(2**num_bits)
    bits = (j[None, :] >> np.arange(num_bits)[:, None]) & 1
    return SignPattern(int(num_bits), (2 * bits - 1).astype(np.int8))


def sign_pattern_by_recurrence(num_bits, feature_dim=1):
    """Dense ``B^I`` built literally from the block recurrence.

    ``B^1 = [-I_d, I_d]`` and ``B^{i+1} = [[B^i, B^i], [-C^i, C^i]]`` with
    ``C^i = [I_d, ..., I_d]`` (``2^i`` copies).  Integer valued.
    """
    if not 1 <= num_bits <= MAX_BITS:
        raise SizeError(f"num_bits must be in [1, {MAX_BITS}]")
    eye = np.eye(feature_dim, dtype=np.int64)
    B = np.hstack([-eye, eye])
    for i in range(1, num_bits):
        C = np.tile(eye, (1, 2**i))
        B = np.block([[B, B], [-C, C]])
    return B


@dataclass(frozen=True)
class OperatorA:
    """Structured ``dI x dK2^I`` operator ``[B^I, ..., B^I]`` (``K`` copies)."""

    sign_pattern: SignPattern
    feature_dim: int
    replication: int

    def __post_init__(self):
        if self.feature_dim < 1 or self.replication < 1:
            raise SizeError("feature_dim and replication must be positive")

    @classmethod
    def build(cls, num_bits, feature_dim, replication):
        return cls(build_sign_pattern(num_bits), int(feature_dim), int(replication))

    @property
    def num_bits(self):
        return self.sign_pattern.num_bits

    @property
    def num_columns(self):
        """Number of feature columns ``K * 2^I``."""
        return self.replication * self.sign_pattern.num_labels

    @property
    def shape(self):
        return (self.feature_dim * self.num_bits, self.feature_dim * self.num_columns)

    def tiled_signs(self):
        return np.tile(self.sign_pattern.signs, (1, self.replication)).astype(float)

    def dense(self, dtype=np.int64):
        """Materialize ``A``.  Intended for tests and small sizes only."""
        S = np.tile(self.sign_pattern.signs.astype(dtype), (1, self.replication))
        return np.kron(S, np.eye(self.feature_dim, dtype=dtype))


def apply_A(op, h):
    """``A @ h`` for ``h = vec(H)`` of length ``d*K*2^I``; returns length ``d*I``."""
    h = np.asarray(h, dtype=float)
    if h.ndim != 1 or h.size != op.shape[1]:
        raise SizeError(f"expected vector of length {op.shape[1]}, got shape {h.shape}")
    H = h.reshape(op.num_columns, op.feature_dim).T
    return (H @ op.tiled_signs().T).ravel(order="F")


def apply_A_transpose(op, w):
    """``A.T @ w`` for ``w`` of length ``d*I``; returns length ``d*K*2^I``."""
    w = np.asarray(w, dtype=float)
    if w.ndim != 1 or w.size != op.shape[0]:
        raise SizeError(f"expected vector of length {op.shape[0]}, got shape {w.shape}")
    Wd = w.reshape(op.num_bits, op.feature_dim).T
    return (Wd @ op.tiled_signs()).ravel(order="F")


@dataclass(frozen=True)
class NcClassifier:
    """Fixed classifier rows ``w_{1,0}..w_{I,0}, w_{1,1}..w_{I,1}`` (``2I x d``)."""

    num_bits: int
    feature_dim: int
    rows: np.ndarray = field(repr=False)
    column_norm: float
    seed: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "rows", _readonly(np.asarray(self.rows, dtype=float)))
        if self.rows.shape != (2 * self.num_bits, self.feature_dim):
            raise SizeError(f"rows shape {self.rows.shape} does not fit I={self.num_bits}, d={self.feature_dim}")

    @property
    def W(self):
        """Classifier collection in ``d x 2I`` column layout."""
        return self.rows.T

    def to_json(self):
        return json.dumps(
            {
                "type": "NcClassifier",
                "num_bits": self.num_bits,
                "feature_dim": self.feature_dim,
                "column_norm": self.column_norm,
                "seed": self.seed,
                "rows": self.rows.shape[0],
                "cols": self.rows.shape[1],
                "data": self.rows.ravel().tolist(),
            }
        )

    @classmethod
    def from_json(cls, text):
        obj = json.loads(text)
        rows = np.asarray(obj["data"], dtype=float).reshape(obj["rows"], obj["cols"])
        return cls(obj["num_bits"], obj["feature_dim"], rows, obj["column_norm"], obj["seed"])


def generate_nc_weights(num_bits, feature_dim, column_norm=1.0, seed=0):
    """Orthogonal, equal-norm, antipodal classifier pairs.

    A seeded Gaussian ``d x I`` matrix is orthonormalized (QR with the sign of
    ``diag(R)`` absorbed, so the frame is Haar distributed) and scaled to
    ``column_norm``.  ``w_{i,1} = -w_{i,0}``.
    """
    if num_bits < 1:
        raise SizeError("num_bits must be positive")
    if num_bits > feature_dim:
        raise InfeasibleOrthogonalityError(
            f"cannot place {num_bits} orthogonal vectors in {feature_dim} dimensions"
        )
    if not column_norm > 0:
        raise ParameterError("column_norm must be positive")
    rng = np.random.default_rng(seed)
    G = rng.standard_normal((feature_dim, num_bits))
    Q, R = np.linalg.qr(G)
    Q = Q * np.sign(np.diag(R))
    W0 = column_norm * Q
    rows = np.vstack([W0.T, -W0.T])
    return NcClassifier(int(num_bits), int(feature_dim), rows, float(column_norm), seed)


def nc_direction(W, op):
    """Target feature direction ``A.T vec(W1 - W0)`` reshaped to ``d x K2^I``."""
    W = np.asarray(W, dtype=float)
    I = op.num_bits
    if W.shape != (op.feature_dim, 2 * I):
        raise SizeError(f"W must be {op.feature_dim}x{2 * I}, got {W.shape}")
    return (W[:, I:] - W[:, :I]) @ op.tiled_signs()


def _gram_deviation(M):
    G = M.T @ M
    nuc = np.trace(G)  # G is PSD, so its nuclear norm is its trace
    if nuc <= _UNDERFLOW:
        raise DegenerateInputError("classifier block is zero")
    return np.linalg.norm(M.shape[1] * G / nuc - np.eye(M.shape[1]))


def theta_metric(W0, W1):
    """Classifier-collapse deviation of two ``d x I`` classifier blocks.

    ``||I W0'W0 / ||W0'W0||_* - Id||_F + (same for W1)``.  The nuclear norm in the
    denominator makes the value exactly zero for orthogonal equal-norm columns.
    """
    W0 = np.asarray(W0, dtype=float)
    W1 = np.asarray(W1, dtype=float)
    if W0.shape != W1.shape or W0.ndim != 2:
        raise SizeError(f"W0 {W0.shape} and W1 {W1.shape} must be matching matrices")
    return float(_gram_deviation(W0) + _gram_deviation(W1))


def _unit_distance(a, b):
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na <= _UNDERFLOW or nb <= _UNDERFLOW:
        raise DegenerateInputError("cannot normalize a zero vector")
    return float(np.linalg.norm(a / na - b / nb))


def vartheta_metric(W, H, op):
    """Distance between unit ``vec(H)`` and the unit NC direction; lies in ``[0, 2]``."""
    H = np.asarray(H, dtype=float)
    if H.shape != (op.feature_dim, op.num_columns):
        raise SizeError(f"H must be {op.feature_dim}x{op.num_columns}, got {H.shape}")
    return _unit_distance(H.ravel(order="F"), nc_direction(W, op).ravel(order="F"))


def vartheta_from_labels(W, features, bits):
    """Alignment metric for an arbitrary labelled feature set.

    ``features`` is ``n x d`` (one row per sample or per label mean) and ``bits`` is
    ``n x I``.  Each row is compared with ``sum_i (2 b_i - 1)(w_{i,1} - w_{i,0})``.
    For a balanced, complete label set this equals :func:`vartheta_metric`.
    """
    W = np.asarray(W, dtype=float)
    features = np.asarray(features, dtype=float)
    bits = np.asarray(bits)
    I = W.shape[1] // 2
    if bits.shape != (features.shape[0], I) or features.shape[1] != W.shape[0]:
        raise SizeError("features, bits and W have inconsistent shapes")
    target = (2.0 * bits - 1.0) @ (W[:, I:] - W[:, :I]).T
    return _unit_distance(features.ravel(), target.ravel())


@dataclass(frozen=True)
class LayerPeeledState:
    W: np.ndarray
    H: np.ndarray
    lam: float

    def __post_init__(self):
        W = np.asarray(self.W, dtype=float)
        H = np.asarray(self.H, dtype=float)
        if W.ndim != 2 or H.ndim != 2 or W.shape[0] != H.shape[0] or W.shape[1] % 2:
            raise SizeError(f"incompatible W {W.shape} and H {H.shape}")
        I = W.shape[1] // 2
        if I > MAX_BITS or H.shape[1] % (2**I):
            raise SizeError(f"H has {H.shape[1]} columns, not a multiple of 2^{I}")
        if not self.lam > 0:
            raise ParameterError("lambda must be positive")
        object.__setattr__(self, "W", _readonly(W))
        object.__setattr__(self, "H", _readonly(H))

    @property
    def num_bits(self):
        return self.W.shape[1] // 2

    @property
    def replication(self):
        return self.H.shape[1] // 2**self.num_bits

    @property
    def operator(self):
        return OperatorA.build(self.num_bits, self.W.shape[0], self.replication)


def _margins(state):
    I = state.num_bits
    S = state.operator.tiled_signs()
    D = state.W[:, :I] - state.W[:, I:]
    # phi[i, col] = <w_{i,1-s_i} - w_{i,s_i}, h_col> = s_sign * <w_{i,0} - w_{i,1}, h_col>
    return S, D, S * (D.T @ state.H)


def layer_peeled_loss(state):
    _, _, phi = _margins(state)
    reg = state.lam * (np.sum(state.W**2) + np.sum(state.H**2))
    return float(reg + np.mean(np.logaddexp(0.0, phi)))


def layer_peeled_grad(state):
    """Analytic ``(dL/dW, dL/dH)`` of :func:`layer_peeled_loss`."""
    S, D, phi = _margins(state)
    G = expit(phi) * S / phi.size
    gD = state.H @ G.T
    gW = np.hstack([gD, -gD]) + 2.0 * state.lam * state.W
    gH = D @ G + 2.0 * state.lam * state.H
    return gW, gH


def peel_rate(num_bits, replication):
    """``t = 1 / (I sqrt(2 K 2^I))``, the slope of the loss lower bound in ``rho``."""
    return 1.0 / (num_bits * math.sqrt(2.0 * replication * 2**num_bits))


def lower_bound_loss(rho, num_bits, replication, lam):
    """``ln(1 + exp(-t rho)) + lam rho`` with ``rho = ||W||^2 + ||H||^2``."""
    t = peel_rate(num_bits, replication)
    return float(np.logaddexp(0.0, -t * rho) + lam * rho)


def rho_opt(num_bits, replication, lam):
    """Minimizer of :func:`lower_bound_loss`; zero when ``lam >= t/2``."""
    if not lam > 0:
        raise ParameterError("lambda must be positive")
    t = peel_rate(num_bits, replication)
    if lam >= t / 2:
        return 0.0
    return math.log((t - lam) / lam) / t


def optimal_loss(num_bits, replication, lam):
    return lower_bound_loss(rho_opt(num_bits, replication, lam), num_bits, replication, lam)


def solve_layer_peeled(
    num_bits, replication, feature_dim, lam, max_iters=20000, step_size=1.0, seed=0, grad_tol=1e-12
):
    """Plain gradient descent on the layer-peeled loss from a seeded N(0, 0.1^2) start.

    Returns the final state and the loss trace (one entry per evaluated iterate).
    Raises :class:`StepSizeError` if the loss grows past ten times its initial value.
    """
    if num_bits > feature_dim:
        raise InfeasibleOrthogonalityError("num_bits must not exceed feature_dim")
    if not lam > 0:
        raise ParameterError("lambda must be positive")
    rng = np.random.default_rng(seed)
    n_cols = replication * 2**num_bits
    W = 0.1 * rng.standard_normal((feature_dim, 2 * num_bits))
    H = 0.1 * rng.standard_normal((feature_dim, n_cols))
    state = LayerPeeledState(W, H, lam)
    trace = [layer_peeled_loss(state)]
    limit = 10.0 * trace[0]
    for _ in range(max_iters):
        gW, gH = layer_peeled_grad(state)
        if math.sqrt(np.sum(gW**2) + np.sum(gH**2)) < grad_tol:
            break
        state = LayerPeeledState(state.W - step_size * gW, state.H - step_size * gH, lam)
        loss = layer_peeled_loss(state)
        if not math.isfinite(loss) or loss > limit:
            raise StepSizeError(f"loss {loss:.4g} exceeded 10x initial {trace[0]:.4g}; reduce step_size")
        trace.append(loss)
    return state, np.asarray(trace)


@dataclass(frozen=True)
class NcResidualReport:
    nc1_residual: float
    nc2_residual: float
    nc3_residual: float
    degenerate: bool
    tol: float = 1e-2

    @property
    def collapsed(self):
        return not self.degenerate and max(self.nc1_residual, self.nc2_residual, self.nc3_residual) < self.tol


def check_nc(W, H, op, tol=1e-2):
    """Residuals of the three collapse conditions at ``(W, H)``.

    NC1 is the largest deviation of a feature from its label mean, relative to
    ``1 + ||H||``.  NC2 is :func:`theta_metric` plus the largest ``||w_{i,1} + w_{i,0}||``.
    NC3 is :func:`vartheta_metric`.  When ``W`` or ``H`` is numerically zero the
    scale-normalized parts cannot be formed; they are reported as 0 and
    ``degenerate`` is set.
    """
    W = np.asarray(W, dtype=float)
    H = np.asarray(H, dtype=float)
    I = op.num_bits
    if W.shape != (op.feature_dim, 2 * I) or H.shape != (op.feature_dim, op.num_columns):
        raise SizeError("W and H do not match the operator")
    L = op.sign_pattern.num_labels
    blocks = H.T.reshape(op.replication, L, op.feature_dim)
    spread = np.linalg.norm(blocks - blocks.mean(axis=0), axis=2)
    nc1 = float(spread.max() / (1.0 + np.linalg.norm(H)))
    antipodal = float(np.linalg.norm(W[:, :I] + W[:, I:], axis=0).max())
    degenerate = False
    try:
        nc2 = theta_metric(W[:, :I], W[:, I:]) + antipodal
    except DegenerateInputError:
        nc2, degenerate = antipodal, True
    try:
        nc3 = vartheta_metric(W, H, op)
    except DegenerateInputError:
        nc3, degenerate = 0.0, True
    return NcResidualReport(nc1, float(nc2), float(nc3), degenerate, tol)


def nc_point(num_bits, replication, feature_dim, column_norm=1.0, scale=1.0, seed=0):
    """An exact collapse point: NC classifier plus features ``scale * nc_direction``."""
    clf = generate_nc_weights(num_bits, feature_dim, column_norm, seed)
    op = OperatorA.build(num_bits, feature_dim, replication)
    return clf.W, scale * nc_direction(clf.W, op), op
