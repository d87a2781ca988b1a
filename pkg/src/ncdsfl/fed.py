"""Federated training of deep-supervised detectors: NCDSFL, FedAvg and independent learning.

Every client owns ``E`` networks (one per group of 16 subcarriers).  A round is
broadcast -> ``U`` local RMSprop steps per client -> equal-weight averaging of the
trainable parameters.  Independent learning skips broadcast and averaging.

Mini-batches come from generators keyed by ``(seed, client, round, iteration)`` and
clients are reduced in a fixed order, so histories do not depend on how many worker
threads run the local updates.
"""

from __future__ import annotations

import csv
import json
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConfigError, DivergenceError, SizeError
from .evaluate import track_collapse
from .net import OptimizerState, ds_grads, init_net, predict_bits, rmsprop_step
from .ofdm import BITS_PER_HEAD, INPUT_DIM, interleave_re_im, rng_for

ALGORITHMS = ("ncdsfl", "fedavg", "il")

_PROBE = 17
_PARTICIPATION = 18


@dataclass
class FedConfig:
    algorithm: str = "ncdsfl"
    n_clients: int = 10
    heads_per_client: int = 4
    rounds: int = 200
    local_iters: int = 50
    batch_size: int = 64
    hidden_dims: list = field(default_factory=lambda: [500, 250, 128])
    mu: float = 0.5
    nc_norm: float = 1.0
    step_size: float = 1e-3
    final_step_size: float | None = None
    decay: float = 0.99
    epsilon: float = 1e-8
    weight_decay: float = 0.0
    participation: float = 1.0
    seed: int = 0
    probe_size: int = 256
    track_every: int = 1

    def validate(self):
        if self.algorithm not in ALGORITHMS:
            raise ConfigError(f"algorithm must be one of {ALGORITHMS}, got {self.algorithm!r}")
        for name in ("n_clients", "heads_per_client", "rounds", "local_iters", "batch_size"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be at least 1")
        if not 1 <= self.heads_per_client <= 4:
            raise ConfigError("heads_per_client must be between 1 and 4")
        if len(self.hidden_dims) < 2 or min(self.hidden_dims[-2:]) < BITS_PER_HEAD:
            raise ConfigError(f"need two or more hidden layers, the last two at least {BITS_PER_HEAD} wide")
        if self.mu < 0 or self.nc_norm <= 0 or self.step_size <= 0 or not 0 <= self.decay < 1:
            raise ConfigError("mu >= 0, nc_norm > 0, step_size > 0 and 0 <= decay < 1 are required")
        if self.final_step_size is not None and not self.final_step_size > 0:
            raise ConfigError("final_step_size must be positive when set")
        if not 0 < self.participation <= 1:
            raise ConfigError("participation must lie in (0, 1]")
        return self

    @property
    def trainable_head(self):
        return self.algorithm == "fedavg"

    @property
    def effective_mu(self):
        """FedAvg is the plain detector: trainable output head and no auxiliary loss."""
        return 0.0 if self.algorithm == "fedavg" else self.mu

    @property
    def layer_dims(self):
        return [INPUT_DIM] + [int(d) for d in self.hidden_dims]

    def step_size_at(self, round_index):
        """Geometric schedule from ``step_size`` (round 1) to ``final_step_size`` (last round)."""
        if self.final_step_size is None or self.rounds == 1:
            return self.step_size
        frac = (round_index - 1) / (self.rounds - 1)
        return float(self.step_size * (self.final_step_size / self.step_size) ** frac)

    def with_algorithm(self, algorithm):
        d = asdict(self)
        d["algorithm"] = algorithm
        return FedConfig(**d).validate()


def init_model_set(config):
    """``E`` networks sharing one pair of NC heads; backbones differ per head index."""
    nets = []
    for e in range(config.heads_per_client):
        net = init_net(
            config.layer_dims,
            BITS_PER_HEAD,
            mu=config.effective_mu,
            nc_norm=config.nc_norm,
            seed=[config.seed, e],
            trainable_head=config.trainable_head,
            weight_decay=config.weight_decay,
            nc_seed=config.seed,
        )
        nets.append(net)
    return nets


def transmitted_param_count(models):
    """Number of scalars a client uploads per round (trainable parameters only)."""
    return int(sum(p.size for net in models for p in net.trainable_params()))


def aggregate(model_sets):
    """Equal-weight average of trainable parameters over clients.

    ``model_sets`` is a list (clients) of lists (heads) of networks.  Frozen parameters
    are copied from the first client after checking they agree everywhere.
    """
    if not model_sets:
        raise SizeError("nothing to aggregate")
    ref = model_sets[0]
    for models in model_sets[1:]:
        if len(models) != len(ref):
            raise SizeError("clients hold different numbers of networks")
        for a, b in zip(ref, models):
            pa, pb = a.trainable_params(), b.trainable_params()
            if len(pa) != len(pb) or any(x.shape != y.shape for x, y in zip(pa, pb)):
                raise SizeError("trainable parameter shapes differ between clients")
            fa, fb = a.frozen_params(), b.frozen_params()
            if len(fa) != len(fb) or any(not np.array_equal(x, y) for x, y in zip(fa, fb)):
                raise SizeError("frozen parameters differ between clients")
    out = []
    for e, net in enumerate(ref):
        merged = net.copy()
        sums = [np.zeros_like(p) for p in merged.trainable_params()]
        for models in model_sets:
            for s, p in zip(sums, models[e].trainable_params()):
                s += p
        merged.set_trainable_params([s / len(model_sets) for s in sums])
        out.append(merged)
    return out


def local_update(models, opt_states, dataset, local_iters, batch_size, round_index, copy=True):
    """Run ``local_iters`` RMSprop steps on every head; returns ``(models, states, mean_loss)``.

    All heads see the same frames (shared input, different label slices).
    """
    if copy:
        models = [m.copy() for m in models]
        opt_states = [s.copy() for s in opt_states]
    total = 0.0
    for u in range(local_iters):
        sample = dataset.batch(batch_size, round_index, u, n_heads=len(models))
        for e, (net, state) in enumerate(zip(models, opt_states)):
            loss, grads = ds_grads(net, sample.x, sample.y_bits[e])
            if not math.isfinite(loss):
                raise DivergenceError(
                    f"non-finite loss at round {round_index}, client {dataset.client_id}, iteration {u}",
                    round_index,
                    dataset.client_id,
                )
            rmsprop_step(net.trainable_params(), grads, state)
            total += loss
    mean = total / (local_iters * len(models)) if local_iters else float("nan")
    return models, opt_states, mean


def evaluate_models(models, validation):
    """Validation BER of one model set, pooled over its heads."""
    wrong = 0
    count = 0
    for e, net in enumerate(models):
        pred = predict_bits(net, validation.x)
        truth = validation.head_bits(e)
        wrong += np.count_nonzero(pred != truth)
        count += truth.size
    return wrong / count


def probe_batch(datasets, size, seed):
    """Fixed training-distribution probe spread evenly over clients."""
    per = max(1, size // len(datasets))
    xs, bits = [], []
    for ds in datasets:
        _, b, body = ds.frames(rng_for(_PROBE, seed, ds.client_id), per)
        xs.append(interleave_re_im(body))
        bits.append(b)
    return np.concatenate(xs), np.concatenate(bits)


@dataclass
class RoundRecord:
    round: int
    algorithm: str
    ber: float
    loss: float
    theta: float
    vartheta: float
    seconds: float
    client_ber: list = field(default_factory=list)
    aggregated: bool = True


@dataclass
class TrainingHistory:
    config: FedConfig
    records: list = field(default_factory=list)
    models: list = field(default_factory=list)
    transmitted_params: int = 0
    events: list = field(default_factory=list)

    def bers(self):
        return np.array([r.ber for r in self.records])

    def final_ber(self, last=1):
        return float(np.mean(self.bers()[-last:]))

    def rounds_to_threshold(self, threshold, window=5):
        return rounds_to_threshold(self.bers(), threshold, window)

    def write_csv(self, path, seed=None):
        """Full history: round, algo, ber, loss, theta, vartheta, seconds."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["round", "algo", "ber", "loss", "theta", "vartheta", "seconds"])
            for r in self.records:
                w.writerow([r.round, r.algorithm, repr(r.ber), repr(r.loss), repr(r.theta), repr(r.vartheta),
                            f"{r.seconds:.3f}"])

    def summary(self, threshold=0.05, window=5):
        return {
            "algorithm": self.config.algorithm,
            "seed": self.config.seed,
            "rounds": len(self.records),
            "final_ber": self.final_ber(),
            "rounds_to_threshold": self.rounds_to_threshold(threshold, window),
            "threshold": threshold,
            "transmitted_params_per_round": self.transmitted_params,
        }


def rounds_to_threshold(bers, threshold, window=5):
    """First 1-based round whose trailing ``window``-round mean BER is <= ``threshold``."""
    bers = np.asarray(bers, dtype=float)
    for r in range(len(bers)):
        if bers[max(0, r - window + 1) : r + 1].mean() <= threshold:
            return r + 1
    return None


def _collapse(models, probe):
    if probe is None:
        return float("nan"), float("nan")
    x, bits = probe
    th, va = [], []
    for e, net in enumerate(models):
        t, v = track_collapse(net, x, bits[:, BITS_PER_HEAD * e : BITS_PER_HEAD * (e + 1)])
        th.append(t)
        va.append(v)
    return float(np.mean(th)), float(np.mean(va))


def _active_clients(config, n, round_index):
    n_active = max(1, int(round(config.participation * n)))
    if n_active >= n:
        return list(range(n))
    order = rng_for(_PARTICIPATION, config.seed, round_index).permutation(n)
    return sorted(order[:n_active].tolist())


def run_training(config, datasets, validation, jobs=1, callback=None, track=True, inspect=None):
    """Algorithm loop for ``ncdsfl``, ``fedavg`` or ``il``; returns a :class:`TrainingHistory`.

    ``callback(record)`` runs after every round.  ``inspect(stage, round, client_models)``
    sees the per-client model sets right after broadcast (``"broadcast"``) and after the
    local updates (``"local"``); it must not modify them.
    """
    config.validate()
    if len(datasets) != config.n_clients:
        raise ConfigError(f"config expects {config.n_clients} clients, got {len(datasets)} datasets")
    initial = init_model_set(config)
    client_models = [[m.copy() for m in initial] for _ in datasets]
    opt_states = [
        [OptimizerState.for_params(m.trainable_params(), config.step_size, config.decay, config.epsilon)
         for m in initial]
        for _ in datasets
    ]
    history = TrainingHistory(config, transmitted_params=transmitted_param_count(initial))
    federated = config.algorithm != "il"
    global_models = initial
    probe = probe_batch(datasets, config.probe_size, config.seed) if track else None
    pool = ThreadPoolExecutor(max_workers=jobs) if jobs > 1 else None
    try:
        for k in range(1, config.rounds + 1):
            t0 = time.perf_counter()
            lr = config.step_size_at(k)
            for states in opt_states:
                for state in states:
                    state.step_size = lr
            if federated:
                client_models = [[m.copy() for m in global_models] for _ in datasets]
                if inspect is not None:
                    inspect("broadcast", k, client_models)
            active = _active_clients(config, len(datasets), k)

            def work(i):
                return local_update(client_models[i], opt_states[i], datasets[i], config.local_iters,
                                    config.batch_size, k, copy=False)

            results = list(pool.map(work, active)) if pool else [work(i) for i in active]
            if inspect is not None:
                inspect("local", k, client_models)
            losses = [r[2] for r in results]
            tracked = probe is not None and config.track_every and k % config.track_every == 0
            if federated:
                global_models = aggregate([client_models[i] for i in active])
                history.events.append(("aggregate", k, len(active)))
                client_ber = []
                rate = evaluate_models(global_models, validation)
                theta, vartheta = _collapse(global_models, probe) if tracked else (math.nan, math.nan)
            else:
                client_ber = [evaluate_models(m, validation) for m in client_models]
                rate = float(np.mean(client_ber))
                if tracked:
                    pairs = [_collapse(m, probe) for m in client_models]
                    theta, vartheta = (float(np.mean(v)) for v in zip(*pairs))
                else:
                    theta, vartheta = math.nan, math.nan
            rec = RoundRecord(k, config.algorithm, float(rate), float(np.mean(losses)), theta, vartheta,
                              time.perf_counter() - t0, client_ber, federated)
            history.records.append(rec)
            if callback is not None:
                callback(rec)
    finally:
        if pool is not None:
            pool.shutdown()
    history.models = [global_models] if federated else client_models
    return history


def write_convergence_csv(path, histories):
    """Deterministic per-round table: round, algo, seed, ber, theta, vartheta."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["round", "algo", "seed", "ber", "theta", "vartheta"])
        for h in histories:
            for r in h.records:
                w.writerow([r.round, r.algorithm, h.config.seed, repr(r.ber), repr(r.theta), repr(r.vartheta)])


def write_summary_json(path, histories, threshold=0.05, window=5, extra=None):
    obj = {"threshold": threshold, "window": window, "runs": [h.summary(threshold, window) for h in histories]}
    if extra:
        obj.update(extra)
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
