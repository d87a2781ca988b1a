import json

import pytest

from ncdsfl import config
from ncdsfl.errors import ConfigError
from ncdsfl.sweep import MIXED_EXTRA_CLIENTS, _points, pair_assignment, run_sweep


def small():
    cfg = config.profile("paper-small")
    cfg.data.n_channels = 6
    cfg.data.validation_frames = 12
    cfg.fed.n_clients = 4
    cfg.fed.rounds = 2
    cfg.fed.local_iters = 2
    cfg.fed.batch_size = 8
    cfg.fed.hidden_dims = [40, 34, 32]
    cfg.fed.probe_size = 32
    return cfg


def test_pair_assignment():
    assert pair_assignment([0, 10], 4) == [0, 0, 10, 10]
    assert pair_assignment([0, 10], 6) == [0, 0, 10, 10, 0, 0]
    assert pair_assignment([5], 3) == [5, 5, 5]
    with pytest.raises(ConfigError):
        pair_assignment([], 4)


def test_hetero_points_group_clients():
    cfg = small()
    cfg.sweep.axis = "hetero_snr"
    cfg.sweep.values = [0.0, 20.0]
    [(label, setups, groups)] = list(_points(cfg))
    assert [s.snr_db for s in setups] == [0.0, 0.0, 20.0, 20.0]
    assert groups == {0.0: [0, 1], 20.0: [2, 3]}


def test_mixed_adds_rician_clients():
    cfg = small()
    cfg.sweep.axis = "mixed"
    [(label, setups, groups)] = list(_points(cfg))
    assert len(setups) == cfg.fed.n_clients + MIXED_EXTRA_CLIENTS == 9
    assert all(s.rician_k_db is not None for s in setups[4:])
    assert groups["rician"] == list(range(4, 9))


def test_failed_run_recorded_and_sweep_continues(tmp_path):
    cfg = small()
    cfg.sweep.axis = "snr"
    cfg.sweep.values = [10.0]
    cfg.sweep.algorithms = ["ncdsfl", "mmse"]
    cfg.fed.step_size = 1e200
    cfg.fed.epsilon = 1e-300
    with pytest.warns(RuntimeWarning):
        res = run_sweep(cfg, str(tmp_path))
    assert [f["algo"] for f in res.failures] == ["ncdsfl"]
    assert [r["algo"] for r in res.runs] == ["mmse"]
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert len(summary["failures"]) == 1


def test_il_group_ber_is_mean_over_client_models(tmp_path):
    cfg = small()
    cfg.sweep.axis = "hetero_snr"
    cfg.sweep.values = [0.0, 20.0]
    cfg.sweep.algorithms = ["il"]
    res = run_sweep(cfg, str(tmp_path))
    rec = res.runs[0]
    assert set(rec["group_ber"]) == {"0.0", "20.0"}
    assert rec["final_ber"] == pytest.approx(sum(rec["group_ber"].values()) / 2)
