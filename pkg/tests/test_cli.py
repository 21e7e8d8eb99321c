import json

import pytest

from deskfed.cli import main

TINY = """
dataset = synthetic
synth_classes = 3
synth_per_class = 20
synth_features = 12
model_layers = 12,6,3
num_clients = 5
select_k = 3
rounds = 3
repeats = 1
episodes = 2
val_holdout = 20
defect_m = 2
defect_degree = 0.5
corpus_models = 16
quality_epochs = 2
embed_dim = 8
enc_hidden = 16
quality_hidden = 8
agent_hidden = 16
update_batch = 4
buffer_c_min = 4
seed = 7
"""


@pytest.fixture()
def cfg_file(tmp_path):
    p = tmp_path / "tiny.cfg"
    p.write_text(TINY)
    return p


def test_run_ok(cfg_file, tmp_path, capsys):
    rc = main(["run", "--config", str(cfg_file), "--out",
               str(tmp_path / "out")])
    assert rc == 0
    out = capsys.readouterr().out
    assert "Acc_avg" in out and "metrics.csv" in out
    assert (tmp_path / "out" / "metrics.csv").exists()
    assert (tmp_path / "out" / "manifest.json").exists()


def test_train_then_report_renders_pngs(cfg_file, tmp_path, capsys):
    rc = main(["train", "--config", str(cfg_file), "--out",
               str(tmp_path / "tr")])
    assert rc == 0
    rc = main(["report", str(tmp_path / "tr")])
    assert rc == 0
    out = capsys.readouterr().out
    pngs = sorted((tmp_path / "tr").glob("*.png"))
    assert {p.name for p in pngs} == {"reward_curve.png", "train_rounds.png"}
    for p in pngs:
        assert p.read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"
        assert str(p) in out


def test_report_renders_metrics_figure(cfg_file, tmp_path):
    main(["run", "--config", str(cfg_file), "--out", str(tmp_path / "out")])
    rc = main(["report", str(tmp_path / "out")])
    assert rc == 0
    png = tmp_path / "out" / "metrics.png"
    assert png.exists() and png.read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"


def test_ablate_cli(cfg_file, tmp_path, capsys):
    rc = main(["ablate", "--config", str(cfg_file), "--out",
               str(tmp_path / "ab")])
    assert rc == 0
    assert (tmp_path / "ab" / "ablation_curves.csv").exists()
    for variant in ("full", "embedding", "original"):
        assert (tmp_path / "ab" / variant / "reward_curve.csv").exists()
    capsys.readouterr()


def test_sweep_cli(cfg_file, tmp_path, capsys):
    rc = main(["sweep", "--config", str(cfg_file), "--out",
               str(tmp_path / "sw"), "--axis", "defect_m",
               "--values", "0,2", "--strategies", "fedavg"])
    assert rc == 0
    text = (tmp_path / "sw" / "sweep_summary.csv").read_text()
    assert len(text.splitlines()) == 3  # header + 2 rows
    capsys.readouterr()


def test_inspect_checkpoint_cli(cfg_file, tmp_path, capsys):
    main(["train", "--config", str(cfg_file), "--out", str(tmp_path / "tr")])
    capsys.readouterr()
    rc = main(["inspect-checkpoint", str(tmp_path / "tr" / "agent.ckpt")])
    assert rc == 0
    doc = json.loads(capsys.readouterr().out)
    assert doc["kind"] == "sac_agent"
    assert doc["meta"]["k"] == 3


def test_exit_code_config(tmp_path, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text("rounds = never\n")
    rc = main(["run", "--config", str(bad), "--out", str(tmp_path / "x")])
    assert rc == 2
    err = capsys.readouterr().err
    assert err.startswith("error[config]:")
    assert "rounds" in err


def test_exit_code_missing_config(tmp_path, capsys):
    rc = main(["run", "--config", str(tmp_path / "nope.cfg"), "--out",
               str(tmp_path / "x")])
    assert rc == 2
    assert "error[config]" in capsys.readouterr().err


def test_exit_code_data(tmp_path, capsys):
    cfg = tmp_path / "d.cfg"
    cfg.write_text("dataset = idx\n"
                   "idx_train_images = /no/such\n"
                   "idx_train_labels = /no/such\n"
                   "idx_test_images = /no/such\n"
                   "idx_test_labels = /no/such\n")
    rc = main(["run", "--config", cfg.as_posix(), "--out",
               str(tmp_path / "x")])
    assert rc == 3
    assert "error[data]" in capsys.readouterr().err


def test_exit_code_checkpoint(cfg_file, tmp_path, capsys):
    cfg = tmp_path / "c.cfg"
    cfg.write_text(TINY + "strategy = dearfsac\n"
                   f"agent_checkpoint = {tmp_path}/missing.ckpt\n")
    rc = main(["run", "--config", str(cfg), "--out", str(tmp_path / "x")])
    assert rc == 4
    assert "error[checkpoint]" in capsys.readouterr().err

    rc = main(["inspect-checkpoint", str(tmp_path / "missing.ckpt")])
    assert rc == 4
    assert "error[checkpoint]" in capsys.readouterr().err


def test_report_missing_dir(tmp_path, capsys):
    rc = main(["report", str(tmp_path / "ghost")])
    assert rc == 3
    assert "error[data]" in capsys.readouterr().err


def test_usage_error_exits_two():
    with pytest.raises(SystemExit) as exc:
        main(["frobnicate"])
    assert exc.value.code == 2
