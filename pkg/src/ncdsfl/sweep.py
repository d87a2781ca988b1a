"""Experiment drivers: one training run with its output files, and sweeps over SNR or channel type."""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, NcdsflError
from .evaluate import mmse_detect
from .fed import rounds_to_threshold, run_training, write_convergence_csv, write_summary_json
from .net import save_checkpoint
from .ofdm import PilotConfig, build_client_dataset, build_validation_set, noise_variance

MIXED_EXTRA_CLIENTS = 5
MIXED_RICIAN_K_DB = 0.0
MIXED_SNR_DB = 10.0


@dataclass
class ClientSetup:
    snr_db: float | None
    rician_k_db: float | None = None


def pilot_config(cfg):
    d = cfg.data
    return PilotConfig(comb=d.pilot_comb, seed=d.pilot_seed, boost=d.pilot_boost)


def default_setups(cfg):
    return [ClientSetup(cfg.data.snr_db, cfg.data.rician_k_db) for _ in range(cfg.fed.n_clients)]


def pair_assignment(values, n_clients):
    """Spread ``values`` over consecutive client pairs, cycling if there are more pairs than values."""
    if not values:
        raise ConfigError("no values to assign")
    return [values[(j // 2) % len(values)] for j in range(n_clients)]


def build_federation(cfg, setups, seed):
    """Client datasets for ``setups`` plus the shared validation set."""
    pilots = pilot_config(cfg)
    datasets = [
        build_client_dataset(j, cfg.data.n_channels, s.snr_db, s.rician_k_db, seed, pilots, cfg.channel)
        for j, s in enumerate(setups)
    ]
    validation = build_validation_set(datasets, cfg.data.validation_frames, cfg.data.validation_seed + seed)
    return datasets, validation


def mmse_ber(cfg, validation, mask=None):
    """BER of the pilot-aided MMSE receiver on (a subset of) the validation frames."""
    v = validation if mask is None else validation.subset(mask)
    pilots = pilot_config(cfg)
    nv = noise_variance(v.taps, v.snr_db)
    res = mmse_detect(v.rx_freq, pilots.positions, pilots.symbols(), nv, v.data_bits,
                      cfg.channel.mean_rms_delay_samples)
    heads = cfg.fed.heads_per_client
    return float(np.mean(res.bits[:, : 32 * heads] != v.data_bits[:, : 32 * heads]))


def model_ber(models, validation, mask=None):
    from .fed import evaluate_models

    v = validation if mask is None else validation.subset(mask)
    return float(evaluate_models(models, v))


def train_run(cfg, out_dir=None, setups=None, seed=None, algorithm=None, jobs=None, checkpoint=True):
    """Train one configuration and write ``history.csv``, ``convergence.csv``, ``summary.json``
    and (optionally) ``checkpoint.json`` into ``out_dir``.  Returns ``(history, validation)``."""
    seed = cfg.seed if seed is None else int(seed)
    fed = cfg.fed.with_algorithm(algorithm or cfg.fed.algorithm)
    fed.seed = seed
    setups = setups or default_setups(cfg)
    fed.n_clients = len(setups)
    datasets, validation = build_federation(cfg, setups, seed)
    history = run_training(fed, datasets, validation, jobs=jobs or cfg.jobs)
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        history.write_csv(os.path.join(out_dir, "history.csv"))
        write_convergence_csv(os.path.join(out_dir, "convergence.csv"), [history])
        write_summary_json(os.path.join(out_dir, "summary.json"), [history], cfg.threshold, cfg.window)
        if checkpoint:
            nets = [n for models in history.models for n in models]
            save_checkpoint(nets, os.path.join(out_dir, "checkpoint.json"))
    return history, validation


@dataclass
class SweepResult:
    rows: list = field(default_factory=list)
    runs: list = field(default_factory=list)
    failures: list = field(default_factory=list)
    skipped: list = field(default_factory=list)


def _points(cfg):
    """``(label, setups, groups)``; ``groups`` maps an x-axis value to a client-id set."""
    sw = cfg.sweep
    n = cfg.fed.n_clients
    if sw.axis == "snr":
        for v in sw.values:
            setups = [ClientSetup(float(v), cfg.data.rician_k_db) for _ in range(n)]
            yield f"snr_{v:g}", setups, {float(v): list(range(n))}
    elif sw.axis == "hetero_snr":
        snrs = pair_assignment([float(v) for v in sw.values], n)
        setups = [ClientSetup(s, cfg.data.rician_k_db) for s in snrs]
        yield "hetero_snr", setups, _groups(snrs)
    elif sw.axis == "rician":
        ks = pair_assignment([float(v) for v in sw.values], n)
        setups = [ClientSetup(cfg.data.snr_db, k) for k in ks]
        yield "rician", setups, _groups(ks)
    elif sw.axis == "mixed":
        base = [ClientSetup(cfg.data.snr_db, cfg.data.rician_k_db) for _ in range(n)]
        extra = [ClientSetup(MIXED_SNR_DB, MIXED_RICIAN_K_DB) for _ in range(MIXED_EXTRA_CLIENTS)]
        yield "mixed", base + extra, {"base": list(range(n)), "rician": list(range(n, n + MIXED_EXTRA_CLIENTS))}
    else:
        raise ConfigError(f"unknown sweep axis {sw.axis!r}")


def _groups(values):
    out = {}
    for j, v in enumerate(values):
        out.setdefault(v, []).append(j)
    return out


_X_COLUMN = {"snr": "snr_db", "hetero_snr": "snr_db", "rician": "rician_k_db", "mixed": "clients"}
_TABLE = {"snr": "ber_vs_snr.csv", "hetero_snr": "ber_vs_snr.csv", "rician": "ber_vs_rician.csv",
          "mixed": "ber_vs_clients.csv"}


def run_sweep(cfg, out_dir, resume=None, jobs=None, log=None):
    """Every axis point x algorithm x seed; per-run results land in their own directory.

    With ``resume`` a run whose ``result.json`` already exists is read back instead of
    recomputed.  Failed runs are recorded and the remaining ones still execute.
    """
    cfg.sweep.validate()
    resume = cfg.sweep.resume if resume is None else resume
    os.makedirs(out_dir, exist_ok=True)
    result = SweepResult()
    per_point = {}
    for label, setups, groups in _points(cfg):
        for seed in cfg.sweep.seeds:
            validation = None
            for algo in cfg.sweep.algorithms:
                run_dir = os.path.join(out_dir, label, f"{algo}_seed{seed}")
                done = os.path.join(run_dir, "result.json")
                if resume and os.path.exists(done):
                    with open(done) as fh:
                        rec = json.load(fh)
                    result.skipped.append(run_dir)
                else:
                    try:
                        rec = _one_run(cfg, setups, groups, seed, algo, run_dir, jobs)
                    except NcdsflError as exc:
                        result.failures.append({"point": label, "algo": algo, "seed": seed, "error": str(exc)})
                        if log:
                            log(f"{label} {algo} seed {seed}: failed: {exc}")
                        continue
                    with open(done, "w") as fh:
                        json.dump(rec, fh, indent=2, sort_keys=True)
                if log:
                    log(f"{label} {algo} seed {seed}: ber {rec['final_ber']:.4f}")
                result.runs.append(rec)
                for key, value in rec["group_ber"].items():
                    per_point.setdefault((key, algo), []).append(value)
    xcol = _X_COLUMN[cfg.sweep.axis]
    for (key, algo), values in per_point.items():
        result.rows.append({xcol: key, "algo": algo, "ber": float(np.median(values))})
    _write_table(os.path.join(out_dir, _TABLE[cfg.sweep.axis]), xcol, result.rows)
    with open(os.path.join(out_dir, "summary.json"), "w") as fh:
        json.dump({"axis": cfg.sweep.axis, "runs": result.runs, "failures": result.failures}, fh, indent=2,
                  sort_keys=True)
    return result


def _one_run(cfg, setups, groups, seed, algo, run_dir, jobs):
    os.makedirs(run_dir, exist_ok=True)
    if algo == "mmse":
        datasets, validation = build_federation(cfg, setups, seed)
        group_ber = {_key(k): mmse_ber(cfg, validation, np.isin(validation.client_ids, ids))
                     for k, ids in groups.items()}
        return {"algo": algo, "seed": seed, "final_ber": mmse_ber(cfg, validation), "rounds_to_threshold": None,
                "group_ber": group_ber}
    history, validation = train_run(cfg, run_dir, setups, seed, algo, jobs, checkpoint=False)
    models = history.models[0] if algo != "il" else None
    group_ber = {}
    for k, ids in groups.items():
        mask = np.isin(validation.client_ids, ids)
        if models is not None:
            group_ber[_key(k)] = model_ber(models, validation, mask)
        else:
            group_ber[_key(k)] = float(np.mean([model_ber(m, validation, mask) for m in history.models]))
    return {
        "algo": algo,
        "seed": seed,
        "final_ber": history.final_ber(),
        "rounds_to_threshold": rounds_to_threshold(history.bers(), cfg.threshold, cfg.window),
        "group_ber": group_ber,
    }


def _key(k):
    return k if isinstance(k, str) else repr(float(k))


def _write_table(path, xcol, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([xcol, "algo", "ber"])
        for r in rows:
            w.writerow([r[xcol], r["algo"], repr(r["ber"])])
