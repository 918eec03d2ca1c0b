import json

from jointrecall.cli import main


def test_usage_errors(capsys):
    assert main([]) == 2
    assert main(["frobnicate"]) == 2
    assert main(["gen", "--config"]) == 2


def test_gen(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"w": 2, "low": 2, "high": 3, "value_size": 4}))
    out = tmp_path / "d.jsonl"
    assert main(["gen", "--config", str(cfg), "--out", str(out), "--count", "5", "--seed", "3"]) == 0
    assert len(out.read_text().splitlines()) == 5
    cfg.write_text(json.dumps({"low": 0}))
    assert main(["gen", "--config", str(cfg), "--out", str(out)]) == 1


def test_verify_theory(tmp_path, capsys):
    out = tmp_path / "t.json"
    assert main(["verify-theory", "--max-n", "4", "--instances", "20", "--out", str(out)]) == 0
    assert json.loads(out.read_text())


def test_train(tmp_path):
    cfg = tmp_path / "t.json"
    cfg.write_text(json.dumps({
        "arch": "hax",
        "model": {"d": 8, "k": 4},
        "train": {"steps": 2, "batch_size": 2, "eval_every": 1, "val_count": 5,
                  "data": {"low": 2, "high": 2, "value_size": 4}},
    }))
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "run")]) == 0
    assert {p.name for p in (tmp_path / "run").iterdir()} >= {"metrics.jsonl", "model.npz", "config.json"}


def test_bench_then_report(tmp_path):
    grid = tmp_path / "g.json"
    grid.write_text(json.dumps({
        "archs": ["base", "ks"], "lrs": [1e-3], "seeds": [0], "steps": 1,
        "data": {"low": 2, "high": 2, "value_size": 4},
        "model": {"d": 8, "k": 4}, "train": {"batch_size": 2}, "val_count": 5,
    }))
    rep = tmp_path / "r.json"
    assert main(["bench", "--grid", str(grid), "--out", str(rep), "--format", "json"]) == 0
    md = tmp_path / "r.md"
    assert main(["report", "--in", str(rep), "--format", "md", "--out", str(md)]) == 0
    assert md.read_text().startswith("| Architecture")
    csv_out = tmp_path / "r.csv"
    assert main(["report", "--in", str(rep), "--format", "csv", "--out", str(csv_out)]) == 0
    assert len(csv_out.read_text().splitlines()) == 3
    assert main(["report", "--in", str(tmp_path / "missing.json"), "--format", "csv"]) == 1
