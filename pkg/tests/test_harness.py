import json
import subprocess
import sys
import warnings
from pathlib import Path

import numpy as np
import pytest

from gatekeeper.cascade import DominanceWarning, read_records_csv
from gatekeeper.errors import ConfigError, DependencyError, ParseError
from gatekeeper.harness import cli, pipeline, report
from gatekeeper.harness.acceptance import CriterionResult, kl_sign_flip, mutation_canary
from gatekeeper.harness.config import (DEFAULT_ALPHAS, ExperimentConfig, config_from_dict, config_hash,
                                       derive_seed, dump_config, load_config)
from gatekeeper.metrics import METRIC_COLUMNS
from gatekeeper.models import MlpParams, load_checkpoint

ROOT = Path(__file__).resolve().parents[1]


def tiny(out, **changes) -> ExperimentConfig:
    base = config_from_dict({
        "dataset": {"n_train": 300, "n_eval": 150},
        "small_model": {"hidden": [4]},
        "pretrain": {"epochs": 3},
        "finetune": {"epochs": 2},
        "alphas": [0.7, 0.3],
        "seeds": [0, 1],
        "output_dir": str(out),
    })
    return base.replace(**changes)


def quiet(fn, *args):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", DominanceWarning)
        return fn(*args)


# -------------------------------------------------------------------- config


def test_defaults():
    cfg = ExperimentConfig()
    assert cfg.alphas == DEFAULT_ALPHAS and cfg.seeds == (0, 1, 2, 3, 4)


def test_config_validation():
    for bad in ({"alphas": [0.0]}, {"alphas": [1.0]}, {"alphas": []}, {"alphas": [0.5, 0.5]},
                {"seeds": [1, 1]}, {"gating": "entropy"}, {"workers": 0}, {"bogus": 1},
                {"dataset": {"kind": "sequences"}},  # needs entropy gating
                {"dataset": {"kind": "csv"}}, {"finetune": {"lr": 0}}, {"pretrain": {"epoch": 3}}):
        with pytest.raises(ConfigError):
            config_from_dict(bad)


def test_yaml_roundtrip_and_errors(tmp_path):
    cfg = tiny(tmp_path / "o")
    p = tmp_path / "c.yaml"
    p.write_text(dump_config(cfg))
    assert load_config(p) == cfg
    p.write_text("alphas: [0.5\nseeds: 1\n")
    with pytest.raises(ParseError, match="line"):
        load_config(p)
    p.write_text("- 1\n- 2\n")
    with pytest.raises(ConfigError):
        load_config(p)
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.yaml")


def test_shipped_configs_load():
    from gatekeeper.harness.acceptance import blob_reference_config, token_reference_config
    assert load_config(ROOT / "configs" / "blobs.yaml").replace(output_dir="x") == blob_reference_config("x")
    assert load_config(ROOT / "configs" / "tokens.yaml").replace(output_dir="x") == token_reference_config("x")


def test_config_hash_ignores_output_location():
    a = tiny("a")
    assert config_hash(a) == config_hash(a.replace(output_dir="b", workers=3))
    assert config_hash(a) != config_hash(a.replace(master_seed=1))


def test_derive_seed_keyed_by_value():
    s = derive_seed(0, "finetune", 0.3, 2)
    assert s == derive_seed(0, "finetune", 0.3, 2)
    assert len({s, derive_seed(0, "finetune", 0.7, 2), derive_seed(0, "finetune", 0.3, 1),
                derive_seed(1, "finetune", 0.3, 2), derive_seed(0, "pretrain", 0.3, 2)}) == 5
    with pytest.raises(ValueError):
        derive_seed(0, "warmup")


# ------------------------------------------------------------------ pipeline


def test_grid_produces_all_checkpoints(tmp_path):
    cfg = tiny(tmp_path, alphas=(0.9, 0.5, 0.1), seeds=(0, 1, 2, 3, 4), pretrain=tiny(tmp_path).pretrain)
    pipeline.cmd_pretrain(cfg)
    pipeline.cmd_finetune(cfg)
    tuned = sorted((tmp_path / "checkpoints").glob("a*_seed*.json"))
    assert len(tuned) == 15
    baseline = json.loads((tmp_path / "baseline.json").read_text())
    assert len(baseline["checkpoints"]) == 5
    stats = (tmp_path / "stats" / "finetune_a0.5_seed3.csv").read_text().splitlines()
    assert len(stats) == 1 + cfg.finetune.epochs


def test_cell_order_does_not_matter(tmp_path):
    a = tiny(tmp_path / "a")
    b = tiny(tmp_path / "b", alphas=(0.3, 0.7), seeds=(1, 0))
    for cfg in (a, b):
        quiet(pipeline.run_all, cfg)
    for rel in ("checkpoints/a0.3_seed1.json", "checkpoints/small_seed0.json", "records/a0.7_seed0.csv"):
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()
    rows = {(r.alpha, r.seed): r.values for r in report.read_metrics_csv(tmp_path / "a" / "metrics.csv")}
    rows_b = {(r.alpha, r.seed): r.values for r in report.read_metrics_csv(tmp_path / "b" / "metrics.csv")}
    assert rows == rows_b


def test_parallel_workers_match_serial(tmp_path):
    serial = tiny(tmp_path / "s")
    parallel = tiny(tmp_path / "p", workers=2)
    quiet(pipeline.run_all, serial)
    quiet(pipeline.run_all, parallel)
    for rel in ("metrics.csv", "plots/s_d_vs_alpha.svg", "checkpoints/a0.7_seed1.json"):
        assert (tmp_path / "s" / rel).read_bytes() == (tmp_path / "p" / rel).read_bytes()


def test_metrics_rows_and_manifest(tmp_path):
    cfg = tiny(tmp_path)
    manifest = quiet(pipeline.run_all, cfg)
    lines = (tmp_path / "metrics.csv").read_text().splitlines()
    assert lines[0] == ",".join(METRIC_COLUMNS)
    rows = report.read_metrics_csv(tmp_path / "metrics.csv")
    assert len(rows) == len(cfg.seeds) * (1 + len(cfg.alphas))
    assert [r.alpha for r in rows if r.seed == 0] == [None, 0.7, 0.3]
    assert manifest["config_hash"] == config_hash(cfg)
    assert set(manifest["stages"]) == {"pretrain", "finetune", "evaluate", "report"}
    for stage in manifest["stages"].values():
        for rel in stage["paths"]:
            assert (tmp_path / rel).exists()
    assert load_config(tmp_path / "config.yaml") == cfg


def test_oracle_signal_gives_s_d_one(tmp_path):
    # overlapping classes keep the small model below the Bayes classifier, so s_d is defined
    cfg = tiny(tmp_path)
    cfg = cfg.replace(dataset=cfg.dataset.__class__(radius=1.5, n_train=300, n_eval=150))
    quiet(pipeline.cmd_pretrain, cfg)
    quiet(pipeline.cmd_finetune, cfg)
    quiet(pipeline.cmd_evaluate, cfg, True)
    for r in report.read_metrics_csv(tmp_path / "metrics.csv"):
        assert r.get("s_d") == pytest.approx(1.0, abs=1e-12)


def test_stage_dependencies(tmp_path):
    cfg = tiny(tmp_path)
    with pytest.raises(DependencyError):
        pipeline.cmd_finetune(cfg)
    with pytest.raises(DependencyError):
        pipeline.cmd_report(cfg)
    pipeline.cmd_pretrain(cfg)
    with pytest.raises(DependencyError):
        pipeline.cmd_evaluate(cfg)
    with pytest.raises(DependencyError, match="rerun pretrain"):
        pipeline.cmd_finetune(cfg.replace(small_model=cfg.small_model.__class__(hidden=(8,))))


def test_large_model_modes(tmp_path):
    bayes = tiny(tmp_path / "b")
    pipeline.cmd_pretrain(bayes)
    assert not (tmp_path / "b" / "checkpoints" / "large.json").exists()
    trained = tiny(tmp_path / "t", large_model_mode="trained_mlp",
                   large_pretrain=bayes.pretrain, large_model=bayes.small_model.__class__(hidden=(8,)))
    quiet(pipeline.run_all, trained)
    assert isinstance(load_checkpoint(tmp_path / "t" / "checkpoints" / "large.json"), MlpParams)


def test_well_separated_blobs_are_learned(tmp_path):
    cfg = config_from_dict({"dataset": {"radius": 10.0, "flip_rate": 0.0, "n_train": 2000, "n_eval": 500},
                            "alphas": [0.5], "seeds": [0], "finetune": {"epochs": 0},
                            "output_dir": str(tmp_path)})
    quiet(pipeline.run_all, cfg)
    base = [r for r in report.read_metrics_csv(tmp_path / "metrics.csv") if r.alpha is None][0]
    assert base.get("acc_s") >= 0.95


def test_token_pipeline_smoke(tmp_path):
    cfg = config_from_dict({
        "dataset": {"kind": "sequences", "vocab_size": 4, "length": 6, "n_train": 200, "n_eval": 100,
                    "eos_token": 3},
        "small_model": {"hidden": [8], "context_window": 2},
        "pretrain": {"epochs": 2, "batch_size": 16}, "finetune": {"epochs": 1, "batch_size": 16},
        "gating": "neg_pred_entropy", "alphas": [0.5], "seeds": [0], "output_dir": str(tmp_path),
    })
    quiet(pipeline.run_all, cfg)
    rec = read_records_csv(tmp_path / "records" / "a0.5_seed0.csv")
    assert len(rec) == 100 and np.all(rec.signal <= 0)


def test_csv_dataset_pipeline(tmp_path):
    r = np.random.default_rng(0)
    y = r.integers(0, 2, 200)
    x = r.normal(size=(200, 2)) + 3 * y[:, None]
    lines = ["f1,f2,label"] + [f"{a},{b},{c}" for (a, b), c in zip(x.tolist(), y.tolist())]
    (tmp_path / "d.csv").write_text("\n".join(lines) + "\n")
    cfg = config_from_dict({
        "dataset": {"kind": "csv", "path": str(tmp_path / "d.csv")},
        "large_model_mode": "trained_mlp", "large_model": {"hidden": [8]},
        "pretrain": {"epochs": 2}, "large_pretrain": {"epochs": 2}, "finetune": {"epochs": 1},
        "alphas": [0.5], "seeds": [0], "output_dir": str(tmp_path / "out"),
    })
    quiet(pipeline.run_all, cfg)
    assert len(report.read_metrics_csv(tmp_path / "out" / "metrics.csv")) == 2


# -------------------------------------------------------------------- report


def _metrics_file(tmp_path, rows):
    p = tmp_path / "m.csv"
    body = [",".join(METRIC_COLUMNS)] + rows
    p.write_text("\n".join(body) + "\n")
    return p


def test_single_run_degenerate_band(tmp_path):
    p = _metrics_file(tmp_path, ["blobs,0.5,0,max_softmax,0.8,0.9,0.0,0.3,0.7,0.4,"])
    b = report.band(report.read_metrics_csv(p), "s_d")
    assert b.median == b.low == b.high == [0.4]
    assert b.baseline is None


def test_band_statistics(tmp_path):
    rows = [f"blobs,{a},{s},max_softmax,0.8,0.9,0.0,0.3,0.7,{v},"
            for a, s, v in [("baseline", 0, 0.1), ("baseline", 1, 0.3), (0.5, 0, 0.2), (0.5, 1, 0.6),
                            (0.5, 2, 0.5), (0.1, 0, 0.9)]]
    b = report.band(report.read_metrics_csv(_metrics_file(tmp_path, rows)), "s_d")
    assert b.alphas == [0.1, 0.5]
    assert b.median == [0.9, 0.5] and b.low == [0.9, 0.2] and b.high == [0.9, 0.6]
    assert b.baseline == pytest.approx(0.2)


def test_malformed_metrics_csv(tmp_path):
    p = _metrics_file(tmp_path, ["blobs,0.5,0,max_softmax,0.8,0.9,0.0,0.3,0.7,0.4,",
                                 "blobs,0.5,x,max_softmax,0.8,0.9,0.0,0.3,0.7,0.4,"])
    with pytest.raises(ParseError, match="row 3"):
        report.read_metrics_csv(p)
    p = _metrics_file(tmp_path, ["blobs,0.5,0,max_softmax"])
    with pytest.raises(ParseError, match="row 2"):
        report.read_metrics_csv(p)
    p.write_text("a,b\n")
    with pytest.raises(ParseError, match="row 1"):
        report.read_metrics_csv(p)


def test_report_is_byte_stable(tmp_path):
    cfg = tiny(tmp_path)
    quiet(pipeline.run_all, cfg)
    first = {p.name: p.read_bytes() for p in (tmp_path / "plots").iterdir()}
    pipeline.cmd_report(cfg)
    second = {p.name: p.read_bytes() for p in (tmp_path / "plots").iterdir()}
    assert first == second
    assert {"s_o_vs_alpha.svg", "s_d_vs_alpha.svg", "acc_s_vs_alpha.svg",
            "curves_baseline_seed0.svg"} <= set(first)
    assert first["s_d_vs_alpha.svg"].startswith(b"<svg")
    assert "| baseline |" in (tmp_path / "summary.md").read_text()


# ------------------------------------------------------------ cli & canary


def test_cli_exit_codes(tmp_path, capsys):
    assert cli.main(["run", "--config", str(ROOT / "configs" / "blobs.yaml"), "--alpha", "2.0",
                     "--out", str(tmp_path)]) == 1
    bad = tmp_path / "bad.yaml"
    bad.write_text("alphas: [0.5\n")
    assert cli.main(["pretrain", "--config", str(bad)]) == 1
    with pytest.raises(SystemExit) as exc:
        cli.main(["pretrain", "--gating", "nope"])
    assert exc.value.code == 1
    assert cli.main(["finetune", "--out", str(tmp_path / "empty")]) == 2


def test_cli_run_and_overrides(tmp_path, capsys):
    cfgfile = tmp_path / "c.yaml"
    cfgfile.write_text(dump_config(tiny(tmp_path / "ignored")))
    out = tmp_path / "run"
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", DominanceWarning)
        code = cli.main(["run", "--config", str(cfgfile), "--out", str(out), "--alpha", "0.2",
                         "--seed", "3", "--gating", "max-softmax"])
    assert code == 0
    saved = load_config(out / "config.yaml")
    assert saved.alphas == (0.2,) and saved.master_seed == 3
    assert "done" in capsys.readouterr().out


def test_cli_selfcheck_subset(capsys):
    assert cli.main(["selfcheck", "--only", "9", "--only", "2"]) == 0
    out = capsys.readouterr().out
    assert "[PASS] criterion  9" in out and "mutation canary" in out


def test_console_script_entry_point():
    res = subprocess.run([sys.executable, "-m", "gatekeeper.harness.cli", "--help"],
                         capture_output=True, text=True)
    assert res.returncode == 0 and "selfcheck" in res.stdout


def test_mutation_canary_is_caught():
    caught, detail = mutation_canary()
    assert caught, detail
    # the flip is undone after the context exits
    from gatekeeper import numerics
    with kl_sign_flip():
        assert numerics.kl_to_uniform(np.array([1.0, 0.0])) < 0
    assert numerics.kl_to_uniform(np.array([1.0, 0.0])) > 0


def test_criterion_line_format():
    r = CriterionResult(3, "ideal curve", True, "ok", 0.5, 10.0)
    assert r.line().startswith("[PASS] criterion  3 ideal curve: ok")
