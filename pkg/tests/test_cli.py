"""End-to-end command line tests at toy scale: artifact layout, byte
determinism of reruns, exit codes, and the train/eval consistency
contract."""

import csv
import json
from pathlib import Path

import pytest

from imo.cli import main
from imo.trainer import METRICS_COLUMNS


def base_config():
    return {
        "corpus": {"splits": {"train": 48, "val": 24, "test": 24}, "seed": 3},
        "encoder": {"d_model": 8, "n_layers": 2, "n_heads": 2, "d_ff": 16,
                    "max_len": 32},
        "trainer": {"epochs_per_stage": 1, "batch_size": 16},
    }


def write_config(tmp_path, payload, name="config.json"):
    path = tmp_path / name
    path.write_text(json.dumps(payload))
    return str(path)


def run_cli(*argv):
    return main(list(argv))


def tree_bytes(root):
    return {str(p.relative_to(root)): p.read_bytes()
            for p in sorted(Path(root).rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def trained_run(tmp_path_factory):
    """One toy training run shared by the read-only tests."""
    tmp = tmp_path_factory.mktemp("trained")
    config = base_config()
    config["run"] = {"eval_domains": ["source", "target_b"]}
    cfg = write_config(tmp, config)
    out = tmp / "run"
    assert run_cli("train", "--config", cfg, "--out", str(out)) == 0
    return {"config": config, "config_path": cfg, "out": out}


# ---- gen-data --------------------------------------------------------------

class TestGenData:
    def test_writes_manifest_and_splits(self, tmp_path):
        cfg = write_config(tmp_path, base_config())
        out = tmp_path / "corpus"
        assert run_cli("gen-data", "--config", cfg, "--out", str(out)) == 0
        manifest = json.loads((out / "manifest.json").read_text())
        assert len(manifest["files"]) == 12
        for entry in manifest["files"].values():
            assert (out / entry["path"]).exists()
        sidecar = json.loads((out / "config.json").read_text())
        assert sidecar["command"] == "gen-data"

    def test_rerun_is_byte_identical(self, tmp_path):
        cfg = write_config(tmp_path, base_config())
        trees = []
        for name in ("a", "b"):
            out = tmp_path / name
            assert run_cli("gen-data", "--config", cfg, "--out", str(out)) == 0
            trees.append(tree_bytes(out))
        assert trees[0] == trees[1]

    def test_seed_flag_overrides_corpus_seed(self, tmp_path):
        cfg = write_config(tmp_path, base_config())
        out_a, out_b = tmp_path / "a", tmp_path / "b"
        assert run_cli("gen-data", "--config", cfg, "--out", str(out_a)) == 0
        assert run_cli("gen-data", "--config", cfg, "--out", str(out_b),
                       "--seed", "9") == 0
        spec_a = json.loads((out_a / "manifest.json").read_text())["spec"]
        spec_b = json.loads((out_b / "manifest.json").read_text())["spec"]
        assert spec_a["seed"] == 3 and spec_b["seed"] == 9
        sidecar = json.loads((out_b / "config.json").read_text())
        assert sidecar["seed_override"] == 9


# ---- train -----------------------------------------------------------------

class TestTrain:
    def test_artifact_layout(self, trained_run):
        out = trained_run["out"]
        for name in ("config.json", "metrics.csv", "checkpoint.json",
                     "masks.json", "run.json", "figures/masks.png",
                     "figures/training_curves.png"):
            assert (out / name).exists(), name

    def test_metrics_csv_schema(self, trained_run):
        with open(trained_run["out"] / "metrics.csv", newline="") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == list(METRICS_COLUMNS)
        assert all(len(row) == len(METRICS_COLUMNS) for row in rows[1:])
        assert all(row[-1] == "" for row in rows[1:])  # wallclock never in CSV

    def test_run_json_matches_terminal_val_row(self, trained_run):
        run = json.loads((trained_run["out"] / "run.json").read_text())
        with open(trained_run["out"] / "metrics.csv", newline="") as fh:
            rows = list(csv.DictReader(fh))
        terminal = [row for row in rows if row["split"] == "val" and row["epoch"] == ""]
        assert len(terminal) == 1
        assert float(terminal[0]["value"]) == run["val_metric"]
        assert terminal[0]["stage"] == str(run["selected_stage"])

    def test_rerun_reproduces_metrics_byte_for_byte(self, tmp_path):
        cfg = write_config(tmp_path, base_config())
        blobs = []
        for name in ("a", "b"):
            out = tmp_path / name
            assert run_cli("train", "--config", cfg, "--out", str(out)) == 0
            blobs.append((out / "metrics.csv").read_bytes())
        assert blobs[0] == blobs[1]

    def test_seed_override_changes_run(self, tmp_path):
        cfg = write_config(tmp_path, base_config())
        out_a, out_b = tmp_path / "a", tmp_path / "b"
        assert run_cli("train", "--config", cfg, "--out", str(out_a)) == 0
        assert run_cli("train", "--config", cfg, "--out", str(out_b),
                       "--seed", "5") == 0
        run_b = json.loads((out_b / "run.json").read_text())
        assert run_b["seed"] == 5
        assert (out_a / "metrics.csv").read_bytes() != (out_b / "metrics.csv").read_bytes()

    def test_maskless_variant_skips_mask_artifacts(self, tmp_path):
        config = base_config()
        config["run"] = {"variant": "wo_am", "eval_domains": ["source"]}
        cfg = write_config(tmp_path, config)
        out = tmp_path / "plain"
        assert run_cli("train", "--config", cfg, "--out", str(out)) == 0
        assert not (out / "masks.json").exists()
        assert (out / "checkpoint.json").exists()


# ---- eval ------------------------------------------------------------------

class TestEval:
    def eval_config(self, trained_run, **overrides):
        payload = {
            "checkpoint": str(trained_run["out"] / "checkpoint.json"),
            "corpus": dict(trained_run["config"]["corpus"]),
            "eval": {"domain": "source", "split": "val", "metric": "accuracy",
                     **overrides},
        }
        return payload

    def test_matches_training_validation_row(self, trained_run, tmp_path):
        cfg = write_config(tmp_path, self.eval_config(trained_run))
        out = tmp_path / "ev"
        assert run_cli("eval", "--config", cfg, "--out", str(out)) == 0
        report = json.loads((out / "report.json").read_text())
        with open(trained_run["out"] / "metrics.csv", newline="") as fh:
            rows = list(csv.DictReader(fh))
        terminal = [row for row in rows if row["split"] == "val" and row["epoch"] == ""]
        assert report["value"] == float(terminal[0]["value"])
        assert (out / "figures" / "confusion.png").exists()

    def test_never_writes_outside_its_run_directory(self, trained_run, tmp_path):
        before = set(tree_bytes(trained_run["out"]))
        cfg = write_config(tmp_path, self.eval_config(trained_run))
        out = tmp_path / "ev"
        assert run_cli("eval", "--config", cfg, "--out", str(out)) == 0
        assert set(tree_bytes(trained_run["out"])) == before

    def test_confusion_counts_sum_to_dataset(self, trained_run, tmp_path):
        cfg = write_config(tmp_path, self.eval_config(trained_run, split="test"))
        out = tmp_path / "ev"
        assert run_cli("eval", "--config", cfg, "--out", str(out)) == 0
        report = json.loads((out / "report.json").read_text())
        assert sum(sum(row) for row in report["confusion"]) == report["n_examples"]

    def test_missing_checkpoint_key_is_config_error(self, trained_run, tmp_path, capsys):
        payload = self.eval_config(trained_run)
        del payload["checkpoint"]
        cfg = write_config(tmp_path, payload)
        assert run_cli("eval", "--config", cfg, "--out", str(tmp_path / "ev")) == 2
        assert "field=checkpoint" in capsys.readouterr().err

    def test_unknown_eval_domain_is_config_error(self, trained_run, tmp_path, capsys):
        cfg = write_config(tmp_path, self.eval_config(trained_run, domain="mars"))
        assert run_cli("eval", "--config", cfg, "--out", str(tmp_path / "ev")) == 2
        assert "field=eval.domain" in capsys.readouterr().err

    def test_missing_checkpoint_file_is_runtime_error(self, trained_run, tmp_path, capsys):
        payload = self.eval_config(trained_run)
        payload["checkpoint"] = str(tmp_path / "nope.json")
        cfg = write_config(tmp_path, payload)
        assert run_cli("eval", "--config", cfg, "--out", str(tmp_path / "ev")) == 1
        err = capsys.readouterr().err
        assert "kind=runtime" in err and "run=eval-" in err


# ---- grid commands ---------------------------------------------------------

class TestAblate:
    def test_csv_layout_and_thread_independence(self, tmp_path):
        config = base_config()
        config["ablate"] = {"variants": ["full", "wo_am"], "seeds": [0, 1],
                            "eval_domains": ["target_b"]}
        cfg = write_config(tmp_path, config)
        blobs = []
        for name, threads in (("t1", "1"), ("t2", "2")):
            out = tmp_path / name
            assert run_cli("ablate", "--config", cfg, "--out", str(out),
                           "--threads", threads) == 0
            blobs.append((out / "ablation.csv").read_bytes())
            assert (out / "figures" / "ablation.png").exists()
        assert blobs[0] == blobs[1]
        with open(tmp_path / "t1" / "ablation.csv", newline="") as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 4
        assert {row["variant"] for row in rows} == {"full", "wo_am"}

    def test_unknown_variant_is_config_error(self, tmp_path, capsys):
        config = base_config()
        config["ablate"] = {"variants": ["fancy"], "seeds": [0]}
        cfg = write_config(tmp_path, config)
        assert run_cli("ablate", "--config", cfg, "--out", str(tmp_path / "o")) == 2
        assert "field=variant" in capsys.readouterr().err


class TestAnalyzeMasks:
    def test_agreement_artifacts(self, tmp_path):
        config = base_config()
        config["agreement"] = {"seeds": [0], "draws": 20}
        cfg = write_config(tmp_path, config)
        out = tmp_path / "agree"
        assert run_cli("analyze-masks", "--config", cfg, "--out", str(out)) == 0
        with open(out / "agreement.csv", newline="") as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 1
        assert set(rows[0]) == {"seed", "cosine", "cosine_baseline", "jaccard",
                                "jaccard_baseline", "kept_a", "kept_b"}
        run = json.loads((out / "run.json").read_text())
        assert 0 <= run["pairs_above_baseline"] <= 1
        assert (out / "figures" / "similarity.png").exists()


class TestReverseMask:
    def test_report_and_figure(self, trained_run, tmp_path):
        payload = {
            "checkpoint": str(trained_run["out"] / "checkpoint.json"),
            "corpus": dict(trained_run["config"]["corpus"]),
            "trainer": dict(trained_run["config"]["trainer"]),
            "reverse": {"eval_domains": ["source", "target_b"]},
        }
        cfg = write_config(tmp_path, payload)
        out = tmp_path / "rev"
        assert run_cli("reverse-mask", "--config", cfg, "--out", str(out)) == 0
        report = json.loads((out / "reverse.json").read_text())
        for key in ("baseline", "reversed", "delta", "kept_fraction"):
            assert key in report
        assert set(report["delta"]) == {"source", "target_b"}
        assert (out / "figures" / "reverse.png").exists()

    def test_checkpoint_required(self, tmp_path, capsys):
        config = base_config()
        config["reverse"] = {}
        cfg = write_config(tmp_path, config)
        assert run_cli("reverse-mask", "--config", cfg, "--out", str(tmp_path / "o")) == 2
        assert "field=checkpoint" in capsys.readouterr().err


class TestSizeSweep:
    def test_rows_and_gap_summary(self, tmp_path):
        config = base_config()
        config["sweep"] = {"sizes": [16, 32], "seeds": [0]}
        cfg = write_config(tmp_path, config)
        out = tmp_path / "sw"
        assert run_cli("size-sweep", "--config", cfg, "--out", str(out)) == 0
        with open(out / "sizes.csv", newline="") as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 4
        assert {row["size"] for row in rows} == {"16", "32"}
        run = json.loads((out / "run.json").read_text())
        assert set(run["gap_by_size"]) == {"16", "32"}
        assert (out / "figures" / "size_sweep.png").exists()


# ---- run directory and error contract --------------------------------------

class TestErrorContract:
    def test_refuses_nonempty_out_without_force(self, tmp_path, capsys):
        cfg = write_config(tmp_path, base_config())
        out = tmp_path / "corpus"
        assert run_cli("gen-data", "--config", cfg, "--out", str(out)) == 0
        assert run_cli("gen-data", "--config", cfg, "--out", str(out)) == 1
        err = capsys.readouterr().err
        assert err.startswith("error kind=runtime run=gen-data-")
        assert "--force" in err
        assert run_cli("gen-data", "--config", cfg, "--out", str(out), "--force") == 0

    def test_bad_field_names_itself(self, tmp_path, capsys):
        config = base_config()
        config["trainer"]["max_masked_layers"] = 9
        cfg = write_config(tmp_path, config)
        assert run_cli("train", "--config", cfg, "--out", str(tmp_path / "o")) == 2
        err = capsys.readouterr().err
        assert err.startswith("error kind=config field=trainer.max_masked_layers")

    def test_unknown_section_key_names_itself(self, tmp_path, capsys):
        config = base_config()
        config["corpus"]["bogus"] = 1
        cfg = write_config(tmp_path, config)
        assert run_cli("train", "--config", cfg, "--out", str(tmp_path / "o")) == 2
        assert "field=corpus.bogus" in capsys.readouterr().err

    def test_invalid_json_is_config_error(self, tmp_path, capsys):
        path = tmp_path / "broken.json"
        path.write_text("{nope")
        assert run_cli("train", "--config", str(path), "--out", str(tmp_path / "o")) == 2
        assert "field=config" in capsys.readouterr().err

    def test_missing_config_file_is_config_error(self, tmp_path, capsys):
        assert run_cli("train", "--config", str(tmp_path / "gone.json"),
                       "--out", str(tmp_path / "o")) == 2
        assert "field=config" in capsys.readouterr().err

    def test_invalid_log_level_rejected(self, tmp_path, capsys, monkeypatch):
        monkeypatch.setenv("IMO_LOG_LEVEL", "chatty")
        cfg = write_config(tmp_path, base_config())
        assert run_cli("gen-data", "--config", cfg, "--out", str(tmp_path / "o")) == 2
        assert "field=IMO_LOG_LEVEL" in capsys.readouterr().err

    def test_zero_threads_rejected(self, tmp_path, capsys):
        cfg = write_config(tmp_path, base_config())
        assert run_cli("gen-data", "--config", cfg, "--out", str(tmp_path / "o"),
                       "--threads", "0") == 2
        assert "field=threads" in capsys.readouterr().err

    def test_empty_existing_directory_is_fine(self, tmp_path):
        cfg = write_config(tmp_path, base_config())
        out = tmp_path / "empty"
        out.mkdir()
        assert run_cli("gen-data", "--config", cfg, "--out", str(out)) == 0
