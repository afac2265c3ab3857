import csv
import json

import numpy as np
import pytest

from mrpf import cli
from mrpf import pipeline as pl
from mrpf.data import make_synthetic_dataset
from mrpf.mrs import MrsReport, compute_mrs
from mrpf.attacks import generate_adversarial_set
from mrpf.network import load_checkpoint
from mrpf.runstore import FORMAT_VERSION, RunFormatError, load_run, persist_partial, persist_run, read_manifest

SMALL = dict(preset="toy", n_train=100, n_test=40, hidden=[8, 6], epochs=1, train_epochs=2, batch_size=50,
             attack_iterations=2, eval_iterations=3, eval_every=0)


@pytest.fixture(scope="module")
def record():
    cfg = pl.toy_config(**{k: v for k, v in SMALL.items() if k != "preset"})
    split = make_synthetic_dataset(cfg.dataset_spec())
    dense, _ = pl.train_dense(pl.build_network(cfg), split.train, cfg)
    _, rec = pl.mrpf_run(dense, split.train, cfg, split.test)
    return rec


def _config(tmp_path, **kw):
    path = tmp_path / "exp.json"
    path.write_text(json.dumps({**SMALL, **kw}))
    return path


class TestRunStore:
    def test_round_trip(self, record, tmp_path):
        persist_run(record, tmp_path / "run")
        back = load_run(tmp_path / "run")
        assert back == record
        assert back.plan == record.plan and back.mrs.values.tolist() == record.mrs.values.tolist()
        for name, net in record.checkpoints.items():
            assert back.checkpoints[name] == net

    def test_manifest_version(self, record, tmp_path):
        persist_run(record, tmp_path)
        assert read_manifest(tmp_path)["format_version"] == FORMAT_VERSION

    def test_version_mismatch(self, record, tmp_path):
        persist_run(record, tmp_path)
        m = json.loads((tmp_path / "manifest.json").read_text())
        m["format_version"] = FORMAT_VERSION + 1
        (tmp_path / "manifest.json").write_text(json.dumps(m))
        with pytest.raises(RunFormatError, match="version"):
            load_run(tmp_path)

    def test_truncated_tensor_names_file(self, record, tmp_path):
        persist_run(record, tmp_path)
        victim = sorted((tmp_path / "checkpoints").glob("final.*.mrpt"))[0]
        victim.write_bytes(victim.read_bytes()[:-5])
        with pytest.raises(RunFormatError, match=victim.name):
            load_run(tmp_path)

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(RunFormatError, match="missing"):
            load_run(tmp_path)

    def test_malformed_record(self, record, tmp_path):
        persist_run(record, tmp_path)
        (tmp_path / "record.json").write_text(json.dumps({"config": {}}))
        with pytest.raises(RunFormatError, match="malformed"):
            load_run(tmp_path)

    def test_partial_run_refused(self, record, tmp_path):
        partial = {"config": record.config, "mrs": record.mrs, "checkpoints": {"original": record.checkpoints["original"]}}
        persist_partial(partial, "prune", RuntimeError("boom"), tmp_path)
        failure = json.loads((tmp_path / "failure.json").read_text())
        assert failure["stage"] == "prune" and "boom" in failure["error"]
        assert MrsReport.from_dict(json.loads((tmp_path / "mrs.json").read_text())).values.tolist() == record.mrs.values.tolist()
        with pytest.raises(RunFormatError, match="incomplete"):
            load_run(tmp_path)

    def test_recorded_flops_match_checkpoints(self, record, tmp_path):
        from mrpf.network import flops_reduction

        persist_run(record, tmp_path)
        back = load_run(tmp_path)
        assert back.flops_reduction == flops_reduction(back.checkpoints["original"], back.checkpoints["pruned"])


class TestCli:
    def test_full_run_and_report(self, tmp_path, capsys):
        run = tmp_path / "run"
        cfg = _config(tmp_path, sweep_ratios=[0.0, 0.5])
        assert cli.run_command(["mrpf", "--config", str(cfg), "--run", str(run)]) == 0
        for name in ("manifest.json", "record.json", "plan.json", "mrs.json", "checkpoints/final.json"):
            assert (run / name).exists()
        assert cli.run_command(["report", "--config", str(cfg), "--run", str(run)]) == 0
        rec = load_run(run)
        with open(run / "mrs_table.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == len(rec.checkpoints["original"].prunable_layers)
        with open(run / "sparsity_sweep.csv") as fh:
            sweep = list(csv.DictReader(fh))
        assert [r["finetuned"] for r in sweep] == ["0", "0", "1"]
        assert float(sweep[0]["flops_reduction"]) == 0.0
        assert "finished" in capsys.readouterr().out

    def test_stagewise_commands(self, tmp_path):
        run = tmp_path / "run"
        cfg = _config(tmp_path)
        for cmd in ("train", "mrs", "allocate", "prune", "finetune", "attack-eval"):
            assert cli.run_command([cmd, "--config", str(cfg), "--run", str(run)]) == 0, cmd
        plan = json.loads((run / "plan.json").read_text())
        pruned = load_checkpoint(run / "checkpoints" / "pruned.json")
        for layer, n in plan["counts"].items():
            assert pruned.channels(int(layer)) == plan["channels"][layer] - n
        assert json.loads((run / "attack_eval.json").read_text())["checkpoint"] == "final"

    def test_mrs_matches_library(self, tmp_path):
        run = tmp_path / "run"
        path = _config(tmp_path)
        assert cli.run_command(["mrs", "--config", str(path), "--run", str(run)]) == 0
        cfg, extras = cli.load_config(path)
        split = cli.load_data(cfg, extras)
        dense = load_checkpoint(run / "checkpoints" / "dense.json")
        ae = generate_adversarial_set(dense, split.train, cfg.ae_method, cfg.ae_config(), seed=cfg.seed)
        direct = compute_mrs(dense, ae, cfg.mrs_config())
        assert json.loads((run / "mrs.json").read_text()) == json.loads(json.dumps(direct.to_dict()))

    def test_seed_override(self, tmp_path):
        path = _config(tmp_path, seed=1)
        cfg, _ = cli.load_config(path, {"seed": 9})
        assert cfg.seed == 9
        run = tmp_path / "run"
        assert cli.run_command(["train", "--config", str(path), "--run", str(run), "--seed", "5"]) == 0
        assert load_checkpoint(run / "checkpoints" / "dense.json").seed == 5

    def test_run_dir_from_config(self, tmp_path):
        path = _config(tmp_path, run_dir=str(tmp_path / "elsewhere"))
        assert cli.run_command(["train", "--config", str(path)]) == 0
        assert (tmp_path / "elsewhere" / "checkpoints" / "dense.json").exists()

    @pytest.mark.parametrize("body", ["{not json", json.dumps({"bogus": 1}), json.dumps({"preset": "huge"}),
                                      json.dumps({"r_at": 2.0}), json.dumps([1, 2])])
    def test_config_errors_exit_2(self, tmp_path, capsys, body):
        path = tmp_path / "bad.json"
        path.write_text(body)
        assert cli.run_command(["train", "--config", str(path), "--run", str(tmp_path)]) == 2
        assert "config error" in capsys.readouterr().err

    def test_missing_config_file(self, tmp_path):
        assert cli.run_command(["train", "--config", str(tmp_path / "nope.json")]) == 2

    def test_usage_errors_exit_2(self, capsys):
        assert cli.run_command(["explode"]) == 2
        assert cli.run_command(["train", "--variant", "uniform"]) == 2
        assert "usage" in capsys.readouterr().err

    def test_runtime_failure_exit_3(self, tmp_path, capsys):
        cfg = _config(tmp_path)
        assert cli.run_command(["finetune", "--config", str(cfg), "--run", str(tmp_path / "empty")]) == 3
        assert "stage load failed" in capsys.readouterr().err

    def test_stage_failure_persists_partial(self, tmp_path, monkeypatch, capsys):
        def boom(*a, **k):
            raise RuntimeError("out of memory")

        monkeypatch.setattr(pl, "finetune", boom)
        monkeypatch.setattr(cli, "_dense", lambda run, cfg, split: pl.build_network(cfg))
        run = tmp_path / "run"
        assert cli.run_command(["mrpf", "--config", str(_config(tmp_path)), "--run", str(run)]) == 3
        assert "stage finetune failed" in capsys.readouterr().err
        assert json.loads((run / "manifest.json").read_text())["complete"] is False
        assert (run / "plan.json").exists() and (run / "checkpoints" / "pruned.json").exists()

    def test_report_needs_complete_run(self, tmp_path):
        assert cli.run_command(["report", "--config", str(_config(tmp_path)), "--run", str(tmp_path / "r")]) == 3

    def test_main_exits_with_code(self, tmp_path):
        with pytest.raises(SystemExit) as info:
            cli.main(["train", "--config", str(tmp_path / "missing.json")])
        assert info.value.code == 2

    def test_csv_data_source(self, tmp_path):
        from mrpf.data import write_csv

        cfg = pl.toy_config(n_train=60, n_test=20)
        split = make_synthetic_dataset(cfg.dataset_spec())
        write_csv(split.train, tmp_path / "train.csv")
        write_csv(split.test, tmp_path / "test.csv")
        path = _config(tmp_path, train_csv=str(tmp_path / "train.csv"), test_csv=str(tmp_path / "test.csv"))
        c, extras = cli.load_config(path)
        loaded = cli.load_data(c, extras)
        np.testing.assert_allclose(loaded.train.x, split.train.x)
        assert cli.run_command(["train", "--config", str(path), "--run", str(tmp_path / "r")]) == 0
