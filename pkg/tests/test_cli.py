import json
from pathlib import Path

import pytest
import yaml

from splitee.cli import main

BASE_CONFIG = {
    "version": 1,
    "strategy": "sequential",
    "dataset": {
        "kind": "synthetic",
        "classes": 4,
        "train_per_class": 12,
        "test_per_class": 4,
        "input_shape": [1, 16, 16],
        "difficulty": 0.3,
        "seed": 7,
    },
    "model": {"depth": 3, "channel_scale": 0.125},
    "train": {
        "clients": 2,
        "end_layers": [1, 2],
        "rounds": 2,
        "batch_size": 16,
        "seed": 5,
        "eval_every": 2,
    },
}


def write_config(tmp_path, **overrides):
    cfg = json.loads(json.dumps(BASE_CONFIG))
    for key, value in overrides.items():
        node = cfg
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        if value is None:
            node.pop(parts[-1], None)
        else:
            node[parts[-1]] = value
    path = tmp_path / "config.yaml"
    path.write_text(yaml.safe_dump(cfg))
    return str(path)


def run_train(tmp_path, out="run", **overrides):
    cfg = write_config(tmp_path, **overrides)
    outdir = tmp_path / out
    code = main(["train", cfg, "--out", str(outdir)])
    return code, outdir


class TestTrain:
    def test_success_writes_artifacts(self, tmp_path):
        code, out = run_train(tmp_path)
        assert code == 0
        assert (out / "manifest.json").is_file()
        assert (out / "summary.json").is_file()
        logs = (out / "logs.jsonl").read_text().strip().split("\n")
        assert len(logs) == 2
        first = json.loads(logs[0])
        assert first["round"] == 0
        assert "wall_clock" not in first
        assert (out / "client_1.splitee").is_file()
        assert (out / "server_shared.splitee").is_file()

    def test_averaging_writes_per_client_servers(self, tmp_path):
        code, out = run_train(tmp_path, **{"strategy": "averaging"})
        assert code == 0
        assert (out / "server_1.splitee").is_file()
        assert (out / "server_2.splitee").is_file()

    def test_missing_strategy_exits_2(self, tmp_path, capsys):
        code, _ = run_train(tmp_path, strategy=None)
        assert code == 2
        assert "strategy" in capsys.readouterr().err

    def test_bad_strategy_exits_2(self, tmp_path):
        code, _ = run_train(tmp_path, strategy="bogus")
        assert code == 2

    def test_bad_end_layers_exits_2(self, tmp_path, capsys):
        code, _ = run_train(tmp_path, **{"train.end_layers": [1, 9]})
        assert code == 2
        assert "end layer" in capsys.readouterr().err

    def test_missing_config_file_exits_2(self, tmp_path):
        assert main(["train", str(tmp_path / "nope.yaml")]) == 2

    def test_malformed_yaml_exits_2(self, tmp_path):
        p = tmp_path / "bad.yaml"
        p.write_text("strategy: [unclosed")
        assert main(["train", str(p)]) == 2

    def test_seed_env_override(self, tmp_path, monkeypatch):
        monkeypatch.setenv("SPLITEE_SEED", "99")
        code, out = run_train(tmp_path)
        assert code == 0
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["train"]["seed"] == 99

    def test_rerun_is_byte_identical(self, tmp_path):
        _, out_a = run_train(tmp_path, out="a")
        _, out_b = run_train(tmp_path, out="b")
        for name in ("manifest.json", "logs.jsonl", "summary.json",
                     "client_1.splitee", "server_shared.splitee"):
            assert (out_a / name).read_bytes() == (out_b / name).read_bytes()

    def test_dry_run_caps_work(self, tmp_path):
        cfg = write_config(tmp_path, **{"train.rounds": 40})
        out = tmp_path / "dry"
        assert main(["train", cfg, "--out", str(out), "--dry-run"]) == 0
        logs = (out / "logs.jsonl").read_text().strip().split("\n")
        assert len(logs) == 1


class TestPaperScale:
    def test_validates_and_echoes_manifest(self, capsys):
        assert main(["train", "--paper-scale"]) == 0
        manifest = json.loads(capsys.readouterr().out)
        t = manifest["train"]
        assert t["clients"] == 12
        assert t["end_layers"] == [3] * 4 + [4] * 4 + [5] * 4
        assert t["rounds"] == 600
        assert t["batch_size"] == 1024
        assert manifest["strategy"] == "averaging"
        assert len(manifest["model_spec"]["layers"]) == 6


class TestSweepCommand:
    @pytest.fixture()
    def run_dir(self, tmp_path):
        _, out = run_train(tmp_path)
        main(["make-dataset", "--classes", "4", "--per-class", "5",
              "--difficulty", "0.3", "--seed", "9",
              "--out", str(tmp_path / "eval.splitee")])
        return tmp_path, out

    def test_default_grid_81_rows(self, run_dir, capsys):
        tmp_path, out = run_dir
        code = main(["sweep", "--client", str(out / "client_2.splitee"),
                     "--server", str(out / "server_shared.splitee"),
                     "--dataset", str(tmp_path / "eval.splitee")])
        assert code == 0
        lines = capsys.readouterr().out.strip().split("\n")
        assert lines[0] == "tau,accuracy,client_ratio,server_ratio,avg_entropy"
        assert len(lines) == 82

    def test_custom_grid(self, run_dir, capsys):
        tmp_path, out = run_dir
        code = main(["sweep", "--client", str(out / "client_2.splitee"),
                     "--server", str(out / "server_shared.splitee"),
                     "--dataset", str(tmp_path / "eval.splitee"),
                     "--grid", "0:1:0.5"])
        assert code == 0
        assert len(capsys.readouterr().out.strip().split("\n")) == 4

    def test_output_files_byte_identical(self, run_dir):
        tmp_path, out = run_dir
        args = ["sweep", "--client", str(out / "client_2.splitee"),
                "--server", str(out / "server_shared.splitee"),
                "--dataset", str(tmp_path / "eval.splitee"), "--json"]
        assert main(args + ["--out", str(tmp_path / "a.csv")]) == 0
        assert main(args + ["--out", str(tmp_path / "b.csv")]) == 0
        assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
        assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()

    def test_wrong_checkpoint_kind_exits_2(self, run_dir):
        tmp_path, out = run_dir
        code = main(["sweep", "--client", str(out / "server_shared.splitee"),
                     "--server", str(out / "server_shared.splitee"),
                     "--dataset", str(tmp_path / "eval.splitee")])
        assert code == 2

    def test_bad_grid_exits_2(self, run_dir):
        tmp_path, out = run_dir
        code = main(["sweep", "--client", str(out / "client_2.splitee"),
                     "--server", str(out / "server_shared.splitee"),
                     "--dataset", str(tmp_path / "eval.splitee"),
                     "--grid", "1:0:0.5"])
        assert code == 2


class TestReport:
    def test_two_strategy_rows_ordered(self, tmp_path, capsys):
        run_train(tmp_path, out="runs/avg", **{"strategy": "averaging"})
        run_train(tmp_path, out="runs/seq")
        capsys.readouterr()
        assert main(["report", str(tmp_path / "runs"),
                     "--csv", str(tmp_path / "table.csv")]) == 0
        text = capsys.readouterr().out
        lines = text.strip().split("\n")
        assert lines[0].startswith("Method")
        assert lines[1].startswith("Sequential")
        assert any(l.startswith("Averaging") for l in lines)
        assert text.index("Sequential") < text.index("Averaging")
        # CSV carries the same numbers
        csv_lines = (tmp_path / "table.csv").read_text().strip().split("\n")
        assert csv_lines[0] == "method,location,end_layer,accuracy"
        for line in csv_lines[1:]:
            method, location, layer, acc = line.split(",")
            assert f"{float(acc) * 100:.2f}" in text

    def test_single_run_has_both_locations(self, tmp_path, capsys):
        run_train(tmp_path, out="runs/one", **{"strategy": "distributed"})
        capsys.readouterr()
        assert main(["report", str(tmp_path / "runs")]) == 0
        out = capsys.readouterr().out
        assert "Server" in out and "Client" in out

    def test_empty_dir_exits_2(self, tmp_path):
        (tmp_path / "empty").mkdir()
        assert main(["report", str(tmp_path / "empty")]) == 2

    def test_missing_dir_exits_2(self, tmp_path):
        assert main(["report", str(tmp_path / "nope")]) == 2


class TestPartition:
    def test_json_dump(self, tmp_path):
        out = tmp_path / "part.json"
        assert main(["partition", "--size", "10", "--clients", "3",
                     "--seed", "1", "--out", str(out)]) == 0
        part = json.loads(out.read_text())
        assert sorted(part) == ["1", "2", "3"]
        all_idx = sorted(i for v in part.values() for i in v)
        assert all_idx == list(range(10))

    def test_deterministic(self, capsys):
        assert main(["partition", "--size", "20", "--clients", "4"]) == 0
        a = capsys.readouterr().out
        assert main(["partition", "--size", "20", "--clients", "4"]) == 0
        assert capsys.readouterr().out == a
