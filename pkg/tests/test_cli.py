import json
import os

import numpy as np
import pytest

from subalign.cli import main


def write_config(path, **overrides):
    payload = {
        "methods": ["target_only", "knowledge_single:phase"],
        "seeds": [0],
        "task": "classification",
        "lam": 0.1,
        "embed_dim": 3,
        "hidden": [6],
        "head_hidden": [4],
        "knowledge": [
            {"id": "phase", "method": "dp_1d", "m": 2},
            {"id": "region", "method": "graph", "m": 2, "kappa_quantile": 0.3},
        ],
        "train": {"epochs": 3, "warmup_epochs": 1, "refresh_every": 1,
                  "batch_size": 16, "learning_rate": 0.05},
        "synth": {"n_subdomains": 2, "src_per_subdomain": 20,
                  "tgt_train_per_subdomain": 8, "tgt_test_per_subdomain": 12,
                  "n_core_features": 3, "label_noise": 0.4, "shift": 1.0},
    }
    payload.update(overrides)
    path.write_text(json.dumps(payload))
    return path


def synth_dir(tmp_path, capsys):
    out = tmp_path / "data"
    cfg = tmp_path / "synth.json"
    cfg.write_text(json.dumps({"n_subdomains": 2, "src_per_subdomain": 16,
                               "tgt_train_per_subdomain": 8,
                               "tgt_test_per_subdomain": 10,
                               "n_core_features": 3}))
    code = main(["synth", "--config", str(cfg), "--out", str(out), "--seed", "4"])
    capsys.readouterr()
    assert code == 0
    return out


def test_synth_writes_datasets_and_sidecars(tmp_path, capsys):
    out = synth_dir(tmp_path, capsys)
    for name in ("source", "target_train", "target_test"):
        assert (out / (name + ".csv")).exists()
        assert (out / (name + ".csv.schema.json")).exists()
    schema = json.loads((out / "source.csv.schema.json").read_text())
    assert set(schema["knowledge"]) == {"phase", "region", "true_subdomain"}


def test_synth_rejects_unknown_config_keys(tmp_path, capsys):
    cfg = tmp_path / "synth.json"
    cfg.write_text(json.dumps({"samples": 10}))
    code = main(["synth", "--config", str(cfg), "--out", str(tmp_path / "x")])
    err = capsys.readouterr().err
    assert code == 2
    assert "unknown keys" in err


def test_screen_reports_every_knowledge_group(tmp_path, capsys):
    out = synth_dir(tmp_path, capsys)
    report = tmp_path / "screen.csv"
    code = main(["screen", "--data", str(out / "source.csv"),
                 "--out", str(report)])
    captured = capsys.readouterr().out
    assert code == 0
    lines = report.read_text().splitlines()
    assert lines[0] == "knowledge,gap,threshold,passes"
    assert len(lines) == 4
    assert "phase:" in captured and "region:" in captured


def test_divide_exports_assignment(tmp_path, capsys):
    out = synth_dir(tmp_path, capsys)
    cfg = tmp_path / "divide.json"
    cfg.write_text(json.dumps({"knowledge": [{"id": "phase", "method": "dp_1d",
                                              "m": 2}]}))
    dest = tmp_path / "assign.csv"
    code = main(["divide", "--data", str(out / "source.csv"),
                 "--knowledge-id", "phase", "--config", str(cfg),
                 "--out", str(dest)])
    capsys.readouterr()
    assert code == 0
    lines = dest.read_text().splitlines()
    assert lines[0] == "sample_index,subdomain"
    assert len(lines) == 33
    subs = {int(line.split(",")[1]) for line in lines[1:]}
    assert subs <= {0, 1}


def test_divide_unknown_group_is_config_error(tmp_path, capsys):
    out = synth_dir(tmp_path, capsys)
    code = main(["divide", "--data", str(out / "source.csv"),
                 "--knowledge-id", "altitude", "--out", str(tmp_path / "a.csv")])
    err = capsys.readouterr().err
    assert code == 2
    assert "altitude" in err


def test_train_single_method(tmp_path, capsys):
    cfg = write_config(tmp_path / "exp.json")
    out = tmp_path / "run"
    code = main(["train", "--config", str(cfg), "--method", "target_only",
                 "--out", str(out)])
    captured = capsys.readouterr().out
    assert code == 0
    assert "target_only seed=0" in captured
    assert "auc=" in captured
    assert (out / "models" / "target_only_seed0.txt").exists()


def test_train_method_must_be_known(tmp_path, capsys):
    cfg = write_config(tmp_path / "exp.json")
    code = main(["train", "--config", str(cfg), "--method", "boosting",
                 "--out", str(tmp_path / "run")])
    assert code == 2
    assert "unknown method" in capsys.readouterr().err


def test_bench_end_to_end_with_figures(tmp_path, capsys):
    cfg = write_config(tmp_path / "exp.json")
    out = tmp_path / "bench"
    code = main(["bench", "--config", str(cfg), "--out", str(out)])
    captured = capsys.readouterr().out
    assert code == 0
    assert "report written" in captured
    assert (out / "report.csv").exists()
    assert (out / "runs.jsonl").exists()
    assert (out / "metrics.png").exists()
    assert (out / "loss_curves.png").exists()
    scatter = [p for p in os.listdir(out) if p.startswith("embeddings_")]
    assert scatter
    header = (out / "report.csv").read_text().splitlines()[0]
    assert header == "method,metric,mean,std,n_seeds"


def test_bench_failure_exit_code(tmp_path, capsys):
    # region is two columns in the data; a dp_1d spec for it fails at run time
    cfg = write_config(
        tmp_path / "exp.json",
        methods=["knowledge_single:region"],
        knowledge=[{"id": "region", "method": "dp_1d", "m": 2}],
    )
    code = main(["bench", "--config", str(cfg), "--out", str(tmp_path / "b"),
                 "--no-figures"])
    err = capsys.readouterr().err
    assert code == 1
    assert "FAILED" in err


def test_missing_config_is_exit_2(tmp_path, capsys):
    code = main(["bench", "--config", str(tmp_path / "nope.json"),
                 "--out", str(tmp_path / "b")])
    assert code == 2
    assert "cannot read config" in capsys.readouterr().err


def test_invalid_json_is_exit_2(tmp_path, capsys):
    cfg = tmp_path / "broken.json"
    cfg.write_text("{not json")
    code = main(["bench", "--config", str(cfg), "--out", str(tmp_path / "b")])
    assert code == 2
    assert "not valid JSON" in capsys.readouterr().err


def test_missing_data_file_is_runtime_error(tmp_path, capsys):
    code = main(["screen", "--data", str(tmp_path / "ghost.csv")])
    assert code == 1


def test_dump_embeddings_roundtrip(tmp_path, capsys):
    data = synth_dir(tmp_path, capsys)
    cfg = write_config(
        tmp_path / "exp.json",
        methods=["knowledge_single:phase"],
        synth=None,
        data={"source": str(data / "source.csv"),
              "target_train": str(data / "target_train.csv"),
              "target_test": str(data / "target_test.csv")},
    )
    out = tmp_path / "run"
    assert main(["train", "--config", str(cfg), "--method",
                 "knowledge_single:phase", "--out", str(out)]) == 0
    capsys.readouterr()
    model = out / "models" / "knowledge_single_phase_seed0.txt"
    dest = tmp_path / "z.csv"
    fig = tmp_path / "z.png"
    code = main(["dump-embeddings", "--model", str(model),
                 "--data", str(data / "target_test.csv"),
                 "--out", str(dest), "--figure", str(fig)])
    capsys.readouterr()
    assert code == 0
    lines = dest.read_text().splitlines()
    assert len(lines) == 21
    assert lines[0].startswith("sample_index,label,domain,z_1")
    assert fig.exists()
    values = np.array([[float(v) for v in line.split(",")[3:]]
                       for line in lines[1:]])
    assert np.all(np.isfinite(values))
