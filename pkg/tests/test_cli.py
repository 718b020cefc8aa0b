import json

from cotprune import cli


def write_config(tmp_path, outdir):
    cfg = {
        "task": {"n_train": 50, "n_val": 12, "n_heldout": 8,
                 "corruption_rate": 0.1, "seed": 3},
        "model": {"embed_dim": 12, "hidden_dim": 10, "mlp_layers": 1,
                  "window": 16, "seed": 0},
        "train": {"epochs": 2, "peak_lr": 0.15, "batch_size": 16,
                  "snapshot_every": 2, "seed": 0},
        "pretrain": {"n_examples": 60, "epochs": 2, "peak_lr": 0.2,
                     "batch_size": 16},
        "eval": {"n_samples": 2, "max_new_tokens": 8},
        "strategies": [],
        "baselines": ["random"],
        "seeds": [0],
        "outdir": str(outdir),
    }
    path = tmp_path / "config.json"
    path.write_text(json.dumps(cfg))
    return path


def test_cli_run_all_and_stage_commands(tmp_path, capsys):
    cfg_path = write_config(tmp_path, tmp_path / "out")
    assert cli.main(["generate", "--config", str(cfg_path)]) == 0
    assert (tmp_path / "out" / "seed_0" / "train.jsonl").exists()
    assert cli.main(["run-all", "--config", str(cfg_path)]) == 0
    assert (tmp_path / "out" / "manifest.json").exists()
    assert (tmp_path / "out" / "results_table.csv").exists()
    assert cli.main(["eval", "--config", str(cfg_path), "--strategy", "random"]) == 0
    out = capsys.readouterr().out
    assert '"strategy": "random"' in out


def test_cli_reports_failures_nonzero(tmp_path, capsys):
    cfg_path = write_config(tmp_path, tmp_path / "out2")
    assert cli.main(["generate", "--config", str(cfg_path)]) == 0
    (tmp_path / "out2" / "seed_0" / "train.jsonl").write_text("{broken\n")
    code = cli.main(["train", "--config", str(cfg_path)])
    assert code == 1
    assert "error" in capsys.readouterr().err


def test_cli_loo_command(tmp_path, capsys):
    cfg_path = write_config(tmp_path, tmp_path / "out3")
    assert cli.main(["loo", "--config", str(cfg_path), "--candidates", ""]) == 0
    doc = json.loads(capsys.readouterr().out)
    assert doc == {"candidate_ids": [], "deltas": []}
