import json
import os
from pathlib import Path

import pytest

from splitgp import harness
from splitgp.cli import main
from splitgp.config import ConfigError, load_config, parse_config, preset
from splitgp.harness import StageError, emit_report, run_experiment


def smoke():
    return parse_config(preset("smoke"))


def csv_bytes(root: Path) -> dict:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*.csv"))}


def files_on_disk(root: Path) -> set:
    return {str(p.relative_to(root)) for p in root.rglob("*") if p.is_file()}


@pytest.fixture(scope="module")
def smoke_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("smoke")
    manifest = run_experiment(smoke(), out)
    return out, manifest


class TestRunExperiment:
    def test_expected_artifacts(self, smoke_run):
        out, _ = smoke_run
        for rel in (
            "config.json", "manifest.json", "summary.json", "summary.txt",
            "eval/accuracy.csv", "eval/best.csv", "eval/clients.csv",
            "history/splitgp-seed0.csv", "checkpoints/fedavg-seed0.json",
            "latency/sweep_pc.csv", "latency/sweep_r.csv", "latency/resources.csv",
            "bound/bound.csv", "convergence/splitgp-seed0.csv",
            "figures/accuracy_vs_rho.png", "figures/latency_vs_pc.png",
        ):
            assert (out / rel).is_file(), rel

    def test_manifest_lists_every_file(self, smoke_run):
        out, manifest = smoke_run
        doc = json.loads((out / "manifest.json").read_text())
        assert set(doc["outputs"]) == files_on_disk(out)
        assert doc["failed_stage"] is None
        assert doc["config_hash"] == smoke().digest()

    def test_rerun_is_byte_identical(self, smoke_run, tmp_path):
        out, _ = smoke_run
        run_experiment(smoke(), tmp_path)
        assert csv_bytes(tmp_path) == csv_bytes(out)
        assert (tmp_path / "summary.json").read_bytes() == (out / "summary.json").read_bytes()

    def test_worker_count_is_invisible(self, smoke_run, tmp_path):
        out, _ = smoke_run
        run_experiment(smoke(), tmp_path, workers=3)
        assert csv_bytes(tmp_path) == csv_bytes(out)

    def test_summary_contents(self, smoke_run):
        out, _ = smoke_run
        summary = json.loads((out / "summary.json").read_text())
        modes = {a["mode"] for a in summary["accuracy"]}
        assert modes == {"personalized", "fedavg", "splitgp"}
        assert {b["rho"] for b in summary["best_threshold"]} == {0.0, 0.5}
        assert summary["latency"]["rate_threshold_exact"]["kind"] == "always"
        text = (out / "summary.txt").read_text()
        assert "Accuracy" in text and "Latency" in text

    def test_empty_rho_list_reports_training_only(self, tmp_path):
        doc = preset("smoke")
        doc["eval"]["rhos"] = []
        del doc["latency"], doc["bound"]
        run_experiment(parse_config(doc), tmp_path)
        summary = json.loads((tmp_path / "summary.json").read_text())
        assert summary["training"] and not summary["accuracy"] and summary["latency"] is None

    def test_stage_failure_keeps_earlier_outputs(self, tmp_path, monkeypatch):
        def boom(*args, **kwargs):
            raise FloatingPointError("synthetic failure")

        monkeypatch.setattr(harness, "run_latency", boom)
        with pytest.raises(StageError, match="latency"):
            run_experiment(smoke(), tmp_path)
        doc = json.loads((tmp_path / "manifest.json").read_text())
        assert doc["failed_stage"] == "latency"
        assert (tmp_path / "eval" / "best.csv").is_file()
        assert set(doc["outputs"]) == files_on_disk(tmp_path)


class TestReport:
    def test_standalone_report_matches(self, smoke_run, tmp_path):
        out, _ = smoke_run
        summary = emit_report(out)
        assert summary == json.loads((out / "summary.json").read_text())

    def test_missing_files_are_listed(self, tmp_path):
        run_experiment(smoke(), tmp_path)
        os.remove(tmp_path / "eval" / "best.csv")
        os.remove(tmp_path / "latency" / "sweep_r.csv")
        with pytest.raises(FileNotFoundError) as err:
            emit_report(tmp_path)
        assert "eval/best.csv" in str(err.value) and "latency/sweep_r.csv" in str(err.value)


class TestConfig:
    @pytest.mark.parametrize(
        "patch, field",
        [
            ({"train": {"gamma": 2.0}}, "train"),
            ({"train": {"modes": ["centralized"]}}, "train.modes"),
            ({"train": {}, "partition": {"num_shards": 7}}, "partition.num_shards"),
            ({"train": {}, "dataset": {"bogus": 1}}, "dataset.bogus"),
            ({"train": {}, "eval": {"rhos": [-0.1]}}, "eval.rhos"),
            ({"latency": {"P_C": -1}}, "latency"),
            ({"colour": "red"}, "colour"),
        ],
    )
    def test_field_level_errors(self, patch, field):
        with pytest.raises(ConfigError, match=field.replace(".", r"\.")):
            parse_config(patch)

    def test_load_rejects_bad_json(self, tmp_path):
        p = tmp_path / "c.json"
        p.write_text("{not json")
        with pytest.raises(ConfigError):
            load_config(p)

    def test_presets_validate(self):
        for name in ("table2", "lambda", "eth", "fig3", "convergence", "smoke"):
            parse_config(preset(name))

    def test_digest_ignores_key_order(self):
        a = parse_config({"seed": 1, "latency": preset("fig3")["latency"]})
        b = parse_config({"latency": preset("fig3")["latency"], "seed": 1})
        assert a.digest() == b.digest()


class TestCli:
    def test_show_config_round_trips(self, capsys, tmp_path):
        assert main(["show-config", "smoke"]) == 0
        doc = json.loads(capsys.readouterr().out)
        assert doc == preset("smoke")

    def test_latency_defaults_to_published_setting(self, capsys, tmp_path):
        assert main(["latency", "--out", str(tmp_path)]) == 0
        out = capsys.readouterr().out
        assert "tau_splitgp: 24103.23" in out
        assert (tmp_path / "latency" / "sweep_pc.csv").is_file()

    def test_bound(self, capsys):
        assert main(["bound", "--lam", "0.2", "--T", "10", "100"]) == 0
        out = capsys.readouterr().out.splitlines()
        assert out[0].startswith("epsilon(0.2) = 6.8055")
        assert out[1] == "T,Gamma_T,bound_rhs"
        assert len(out) == 4

    def test_train_then_eval_then_report(self, capsys, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps(preset("smoke")))
        out = tmp_path / "run"
        assert main(["train", "--config", str(cfg), "--out", str(out), "--mode", "splitgp"]) == 0
        assert (out / "checkpoints" / "splitgp-seed0.json").is_file()
        assert not (out / "eval").exists()
        assert main(["eval", "--config", str(cfg), "--out", str(out), "--mode", "splitgp"]) == 0
        assert (out / "eval" / "best.csv").is_file()
        capsys.readouterr()
        assert main(["report", str(out)]) == 0
        assert "splitgp" in capsys.readouterr().out

    def test_eval_without_checkpoints_fails_with_stage(self, capsys, tmp_path):
        assert main(["eval", "--preset", "smoke", "--out", str(tmp_path)]) == 3
        assert "load" in capsys.readouterr().err

    def test_config_error_exit_code(self, capsys, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"train": {"lam": 3}}))
        assert main(["train", "--config", str(cfg), "--out", str(tmp_path)]) == 2
        assert "config error: train" in capsys.readouterr().err

    def test_report_missing_run(self, capsys, tmp_path):
        assert main(["report", str(tmp_path / "nothing")]) == 1
        assert "missing files" in capsys.readouterr().err
