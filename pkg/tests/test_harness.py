import csv
import json

import numpy as np
import pytest

from bilevel.exceptions import ConfigurationError, NumericError
from bilevel.harness import (Checkpoint, RunConfig, RunLock, execute, format_table, load_checkpoint, load_config,
                             save_checkpoint, select_horizon)
from bilevel.harness import cli
from bilevel.harness.config import CheckGradConfig
from bilevel.problems import HyperParams

TINY = {
    "generator": {"observed_dim": 8, "latent_dim": 3, "num_latent_classes": 15, "split": [7, 4, 4]},
    "episode": {"n_way": 3, "k_shot": 1, "val_per_class": 3},
    "model": {"output_dim": 6},
    "outer": {"lr": 0.01},
    "train": {"horizon": 3, "meta_batch": 2, "max_iters": 10, "eval_interval": 5, "eval_episodes": 4,
              "test_episodes": 6, "patience": 3},
    "ho": {"n_classes": 3, "train_per_class": 4, "val_per_class": 5, "batch_size": 4, "horizon": 8,
           "interval": 4, "outer_steps": 2},
    "check_grad": {"count": 3},
    "pretrain": {"steps": 10, "batch_size": 8, "examples_per_class": 5},
    "sweep": {"T_values": [0, 1, 2]},
}


def tiny(**top):
    return RunConfig.from_json(TINY | top)


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    out = tmp_path_factory.mktemp("train")
    return out, execute(tiny(mode="meta_train"), out)


def write_config(path, data):
    path.write_text(json.dumps(data))
    return str(path)


def test_config_defaults_and_partial_sections(tmp_path):
    cfg = load_config(write_config(tmp_path / "c.json", {"train": {"horizon": 7}}))
    assert cfg.train.horizon == 7 and cfg.train.meta_batch == 4
    assert cfg.model.hidden == () and cfg.ho.outer_lr == 5.0
    assert RunConfig.from_json(cfg.to_json()) == cfg
    assert cfg.hash() == RunConfig.from_json(cfg.to_json()).hash()
    assert cfg.hash() != cfg.with_section("train", horizon=8).hash()


@pytest.mark.parametrize("data", [
    {"colour": 1},
    {"train": {"horizonn": 3}},
    {"train": {"variant": "magic"}},
    {"train": 5},
    {"ho": {"horizon": 10, "interval": 3}},
    {"mode": "dance"},
    [1, 2],
])
def test_config_rejects_bad_input(data):
    with pytest.raises(ConfigurationError):
        RunConfig.from_json(data)


def test_config_file_errors(tmp_path):
    with pytest.raises(ConfigurationError):
        load_config(tmp_path / "missing.json")
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(ConfigurationError):
        load_config(bad)


def test_empty_problem_list_rejected():
    with pytest.raises(ConfigurationError):
        CheckGradConfig(problems=())


def test_cli_exit_codes(tmp_path, monkeypatch):
    cfg = write_config(tmp_path / "c.json", TINY)
    assert cli.main(["check-grad", "--config", cfg, "--out", str(tmp_path / "ok")]) == cli.EXIT_OK
    unknown = write_config(tmp_path / "u.json", {"bogus": 1})
    assert cli.main(["ho", "--config", unknown, "--out", str(tmp_path / "u")]) == cli.EXIT_CONFIG
    strict = write_config(tmp_path / "s.json", TINY | {"check_grad": {"count": 2, "fd_tol": 0.0}})
    assert cli.main(["check-grad", "--config", strict, "--out", str(tmp_path / "s")]) == cli.EXIT_CHECK

    def explode(cfg, out):
        raise NumericError("non-finite loss")
    monkeypatch.setattr(cli, "execute", explode)
    assert cli.main(["meta-train", "--config", cfg, "--out", str(tmp_path / "n")]) == cli.EXIT_NUMERIC


def test_run_lock(tmp_path):
    with RunLock(tmp_path):
        with pytest.raises(ConfigurationError, match="locked"):
            execute(tiny(mode="check_grad"), tmp_path)
    assert not (tmp_path / ".lock").exists()
    execute(tiny(mode="check_grad"), tmp_path)


def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    rng = np.random.default_rng(0)
    lam = HyperParams.from_groups({"log_step": -1.0, "repr.0.weight": rng.normal(size=(3, 2))})
    save_checkpoint(tmp_path, Checkpoint(lam, {"a": 1}, "abc", 7, [{"iter": 0}]))
    back = load_checkpoint(tmp_path)
    assert back.lam.values.tobytes() == lam.values.tobytes()
    assert back.lam.layout == lam.layout
    assert (back.config, back.config_hash, back.iteration, back.history) == ({"a": 1}, "abc", 7, [{"iter": 0}])
    (tmp_path / "lambda.bin").write_bytes(b"\0" * 8)
    with pytest.raises(ConfigurationError):
        load_checkpoint(tmp_path)
    with pytest.raises(ConfigurationError):
        load_checkpoint(tmp_path / "nowhere")


def test_meta_train_outputs(trained):
    out, result = trained
    records = [json.loads(l) for l in (out / "metrics.jsonl").read_text().splitlines()]
    assert [r["iter"] for r in records] == [0, 5, 10][:len(records)]
    assert list(records[0]) == ["iter", "f_train_batch", "metaval_acc", "metaval_ci", "wallclock"]
    assert all(r["wallclock"] is None for r in records)
    assert result["best_metaval_acc"] == max(r["metaval_acc"] for r in records)
    assert result["episodes"] == 6
    assert load_checkpoint(out / "checkpoint").iteration == result["best_iter"]


def test_repeated_runs_write_identical_bytes(trained, tmp_path):
    out, _ = trained
    execute(tiny(mode="meta_train"), tmp_path)
    for name in ("metrics.jsonl", "result.json", "checkpoint/lambda.bin"):
        assert (tmp_path / name).read_bytes() == (out / name).read_bytes()


def test_reloaded_checkpoint_reproduces_test_accuracy(trained, tmp_path):
    out, result = trained
    ev = execute(tiny(mode="meta_eval", checkpoint=str(out / "checkpoint")), tmp_path)
    assert ev["mean"] == result["mean"] and ev["ci95"] == result["ci95"]


def test_meta_eval_needs_matching_checkpoint(trained, tmp_path):
    out, _ = trained
    with pytest.raises(ConfigurationError):
        execute(tiny(mode="meta_eval"), tmp_path / "a")
    wide = tiny(mode="meta_eval", checkpoint=str(out / "checkpoint")).with_section("model", output_dim=7)
    with pytest.raises(ConfigurationError):
        execute(wide, tmp_path / "b")


def test_sweep_from_checkpoint(trained, tmp_path):
    out, _ = trained
    rows = execute(tiny(mode="sweep_T", checkpoint=str(out / "checkpoint")), tmp_path)
    assert [r["T"] for r in rows] == [0, 1, 2]
    assert rows[0]["acc"] == pytest.approx(1 / 3, abs=1e-15) and rows[0]["ci"] == 0.0
    with open(tmp_path / "sweep_T.csv") as fh:
        table = list(csv.DictReader(fh))
    assert [r["T"] for r in table] == ["0", "1", "2"]
    assert sum(int(r["selected"]) for r in table) == 1
    assert float(table[0]["acc"]) == rows[0]["acc"]


def test_selection_prefers_smaller_horizon_on_ties():
    rows = [{"T": 0, "acc": 0.4}, {"T": 1, "acc": 0.7}, {"T": 3, "acc": 0.7}, {"T": 2, "acc": 0.6}]
    assert select_horizon(rows) == 1
    assert select_horizon([{"T": 5, "acc": 0.5}, {"T": 4, "acc": 0.5}]) == 1


def test_ho_run_and_zero_outer_rate(tmp_path):
    res = execute(tiny(mode="ho"), tmp_path / "a")
    assert set(res) >= {"initial_val_loss", "final_val_loss", "best_grid_loss", "passed"}
    assert len(res["grid"]) == 4
    frozen = tiny(mode="ho").with_section("ho", outer_lr=0.0)
    res0 = execute(frozen, tmp_path / "b")
    assert res0["final_step_size"] == pytest.approx(frozen.ho.init_step, rel=1e-15)
    steps = {json.loads(l)["step_size"] for l in (tmp_path / "b" / "metrics.jsonl").read_text().splitlines()}
    assert len(steps) == 1


def test_pretrain_with_zero_steps(tmp_path):
    cfg = tiny(mode="pretrain_baseline").with_section("pretrain", steps=0)
    res = execute(cfg, tmp_path)
    assert res["steps_run"] == 0 and res["best_iter"] == 0
    assert res["method"] == "pretrain"


def test_report_table(tmp_path):
    for name, mean, ci in (("full", 0.8125, 0.0105), ("approx", 0.5, 0.02)):
        (tmp_path / name).mkdir()
        (tmp_path / name / "result.json").write_text(json.dumps(
            {"method": name, "split": "meta_test", "mean": mean, "ci95": ci}))
    table = execute(tiny(mode="report", logs=[str(tmp_path / "full"), str(tmp_path / "approx" / "result.json")]),
                    tmp_path / "rep")
    assert table == ("| method | split | accuracy (%) |\n|---|---|---|\n"
                     "| full | meta_test | 81.25 ± 1.05 |\n| approx | meta_test | 50.00 ± 2.00 |\n")
    assert (tmp_path / "rep" / "report.md").read_text() == table


def test_report_from_metrics_log(trained, tmp_path):
    out, result = trained
    table = execute(tiny(mode="report", logs=[str(out / "metrics.jsonl")]), tmp_path)
    assert f"{100 * result['best_metaval_acc']:.2f}" in table and "meta_val" in table
    with pytest.raises(ConfigurationError):
        execute(tiny(mode="report"), tmp_path / "empty")


def test_format_table_empty():
    assert format_table([]) == "| method | split | accuracy (%) |\n|---|---|---|\n"


@pytest.mark.parametrize("variant", ["approx", "bilevel_train", "classic"])
def test_other_variants_run(variant, tmp_path):
    cfg = tiny(mode="meta_train").with_section("train", variant=variant)
    res = execute(cfg, tmp_path)
    assert res["method"] == variant and 0.0 <= res["mean"] <= 1.0
