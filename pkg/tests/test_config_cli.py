import csv
import json

import numpy as np
import pytest
import yaml

from ncdsfl import config
from ncdsfl.cli import main
from ncdsfl.errors import ConfigError

TINY = """
data:
  n_channels: 6
  validation_frames: 12
fed:
  n_clients: 2
  heads_per_client: 1
  rounds: 3
  local_iters: 2
  batch_size: 8
  hidden_dims: [40, 34, 32]
  probe_size: 32
"""


def write_cfg(tmp_path, extra="", name="cfg.yaml"):
    path = tmp_path / name
    base = yaml.safe_load(TINY)
    over = yaml.safe_load(extra) or {}
    path.write_text(yaml.safe_dump(config._merge(base, over)))
    return str(path)


def read_csv(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


# config


@pytest.mark.parametrize("name", config.PROFILES)
def test_profile_round_trip(name):
    cfg = config.profile(name)
    again = config.loads(cfg.dump())
    assert again.to_dict() == cfg.to_dict()


def test_partial_file_inherits_profile(tmp_path):
    base = config.profile("paper-small")
    cfg = config.load(write_cfg(tmp_path), base)
    assert cfg.fed.n_clients == 2 and cfg.fed.hidden_dims == [40, 34, 32]
    assert cfg.fed.step_size == base.fed.step_size
    assert cfg.threshold == base.threshold


@pytest.mark.parametrize(
    "text",
    [
        "nc_validate: {loss_tol: -1e-3}",
        "fed: {algorithm: fedsgd}",
        "fed: {rounds: 0}",
        "bogus: 1",
        "data: {n_channels: 'many'}",
        "sweep: {axis: snr, values: []}",
        "sweep: {axis: doppler}",
        "jobs: 0",
        "threshold: 2.0",
        "- just\n- a list",
        "key: [unclosed",
    ],
)
def test_bad_configs_raise(text):
    with pytest.raises(ConfigError):
        config.loads(text, config.profile("paper-small"))


def test_unknown_profile():
    with pytest.raises(ConfigError):
        config.profile("paper-huge")


# cli


def test_negative_tolerance_exits_2(tmp_path):
    path = write_cfg(tmp_path, "nc_validate: {collapse_tol: -0.01}")
    assert main(["nc-validate", "--config", path, "--out", str(tmp_path / "o")]) == 2


def test_missing_config_and_bad_flags_exit_2(tmp_path):
    assert main(["train", "--config", str(tmp_path / "nope.yaml")]) == 2
    assert main(["train", "--profile", "paper-huge"]) == 2
    assert main(["frobnicate"]) == 2
    assert main(["train", "--jobs", "0", "--out", str(tmp_path / "o")]) == 2


def test_nc_validate_defaults(tmp_path):
    out = tmp_path / "nc"
    assert main(["nc-validate", "--out", str(out)]) == 0
    report = json.loads((out / "nc_validate.json").read_text())
    assert report["passed"]
    assert all(report[k]["passed"] for k in report if isinstance(report[k], dict))


def test_nc_validate_trivial_regime(tmp_path):
    # lambda above t/2: the minimizer is the origin and the checks must still pass
    path = write_cfg(tmp_path, "nc_validate: {lam: 0.5}")
    assert main(["nc-validate", "--config", path, "--out", str(tmp_path / "o")]) == 0


def test_train_writes_one_row_per_round(tmp_path):
    out = tmp_path / "t"
    assert main(["train", "--config", write_cfg(tmp_path), "--out", str(out), "--seed", "3"]) == 0
    rows = read_csv(out / "convergence.csv")
    assert [int(r["round"]) for r in rows] == [1, 2, 3]
    assert {r["algo"] for r in rows} == {"ncdsfl"} and {r["seed"] for r in rows} == {"3"}
    assert all(0 <= float(r["ber"]) <= 1 for r in rows)
    for name in ("history.csv", "summary.json", "checkpoint.json", "config.yaml", "run.log"):
        assert (out / name).exists()
    saved = config.load(out / "config.yaml")
    assert saved.seed == 3
    assert (out / "run.log").read_text().count("aggregate round=") == 3


def test_train_deterministic_across_jobs(tmp_path):
    path = write_cfg(tmp_path)
    main(["train", "--config", path, "--out", str(tmp_path / "a"), "--jobs", "1"])
    main(["train", "--config", path, "--out", str(tmp_path / "b"), "--jobs", "2"])
    assert (tmp_path / "a" / "convergence.csv").read_bytes() == (tmp_path / "b" / "convergence.csv").read_bytes()


def test_train_il_never_aggregates(tmp_path):
    out = tmp_path / "il"
    path = write_cfg(tmp_path, "fed: {algorithm: il}")
    assert main(["train", "--config", path, "--out", str(out)]) == 0
    assert "aggregate" not in (out / "run.log").read_text()
    assert len(read_csv(out / "convergence.csv")) == 3


def test_train_divergence_exits_1(tmp_path):
    path = write_cfg(tmp_path, "fed: {step_size: 1.0e+200, epsilon: 1.0e-300}")
    with np.errstate(all="ignore"):
        assert main(["train", "--config", path, "--out", str(tmp_path / "d")]) == 1


def test_sweep_snr_table(tmp_path):
    out = tmp_path / "s"
    path = write_cfg(tmp_path, "sweep: {axis: snr, values: [0, 10], algorithms: [ncdsfl, mmse], seeds: [0]}")
    assert main(["sweep", "--config", path, "--out", str(out)]) == 0
    rows = read_csv(out / "ber_vs_snr.csv")
    assert len(rows) == 4
    assert {(float(r["snr_db"]), r["algo"]) for r in rows} == {
        (0.0, "ncdsfl"), (10.0, "ncdsfl"), (0.0, "mmse"), (10.0, "mmse")
    }
    mm = {float(r["snr_db"]): float(r["ber"]) for r in rows if r["algo"] == "mmse"}
    assert mm[0.0] > mm[10.0]


def test_sweep_resume_skips_finished_runs(tmp_path):
    out = tmp_path / "s"
    path = write_cfg(tmp_path, "sweep: {axis: snr, values: [10], algorithms: [ncdsfl], seeds: [0]}")
    assert main(["sweep", "--config", path, "--out", str(out)]) == 0
    done = out / "snr_10" / "ncdsfl_seed0" / "result.json"
    rec = json.loads(done.read_text())
    rec["final_ber"] = 0.123
    done.write_text(json.dumps(rec))
    resume = write_cfg(tmp_path, "sweep: {axis: snr, values: [10], algorithms: [ncdsfl], seeds: [0], resume: true}",
                       name="resume.yaml")
    assert main(["sweep", "--config", resume, "--out", str(out)]) == 0
    summary = json.loads((out / "summary.json").read_text())
    assert summary["runs"][0]["final_ber"] == 0.123


def test_sweep_empty_axis_exit_2(tmp_path):
    path = write_cfg(tmp_path, "sweep: {axis: rician, values: []}")
    assert main(["sweep", "--config", path, "--out", str(tmp_path / "o")]) == 2


def test_gen_data(tmp_path):
    out = tmp_path / "g"
    assert main(["gen-data", "--config", write_cfg(tmp_path), "--out", str(out)]) == 0
    for j in range(2):
        meta = json.loads((out / f"client{j}.json").read_text())
        assert meta["client_id"] == j and len(meta["pdp"]["path_powers"]) > 0
        assert len(read_csv(out / f"client{j}_channels.csv")) > 0
    val = np.load(out / "validation.npz")
    assert val["x"].shape == (24, 256)
    assert set(val["client_ids"]) == {0, 1}
