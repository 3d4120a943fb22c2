import csv

import pytest
import yaml
from PIL import Image

import vlcl.cli as cli
from vlcl.cli import run_cli

TINY = {
    "data": {"image_size": 16, "train_classes": 4,
             "synthetic": {"num_coarse_classes": 6, "subcats_per_class": 2, "samples_per_subcat": 6,
                           "image_size": 16}},
    "encoder": {"conv_channels": [4, 4], "feature_dim": 8, "proj_dim": 8, "proj_hidden": 8, "image_size": 16},
    "views": {"conv_channels": [2], "image_size": 16, "norm_groups": 1},
    "contrast": {"queue_capacity": 32},
    "train": {"epochs": 2, "iterations_per_epoch": 2, "m_query_train": 2, "n_way": 3, "lr_milestones": [], "lr_values": []},
    "eval": {"n_episodes": 5, "m_query": 3, "n_way": 2},
}


@pytest.fixture
def workdir(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    cfg = dict(TINY, output_dir=str(tmp_path / "run"))
    (tmp_path / "run.yaml").write_text(yaml.safe_dump(cfg))
    return tmp_path


def test_train_then_eval_last(workdir, capsys):
    assert run_cli(["train", "--config", "run.yaml", "--seed", "7"]) == 0
    run = workdir / "run"
    assert (run / "metrics.csv").is_file()
    assert sorted(p.name for p in (run / "checkpoints").iterdir()) == ["epoch_1.npz", "epoch_2.npz"]
    assert yaml.safe_load((run / "config.yaml").read_text())["train"]["seed"] == 7

    assert run_cli(["eval", "--checkpoint", "last"]) == 0
    out = capsys.readouterr().out
    assert "2-way 1-shot" in out
    with open(run / "eval_report.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [r["split"] for r in rows] == ["held_out", "held_out_fine"]
    assert rows[0]["checkpoint"].endswith("epoch_2.npz")


def test_export_and_dump_views(workdir):
    assert run_cli(["train", "--config", "run.yaml"]) == 0
    assert run_cli(["export-embeddings", "--checkpoint", "last"]) == 0
    with open(workdir / "run" / "embeddings.csv") as fh:
        rows = list(csv.reader(fh))
    assert len(rows) == 1 + 4 * 2 * 6 and len(rows[0]) == 8 + 2

    assert run_cli(["dump-views", "--checkpoint", "last", "--n", "16"]) == 0
    views = workdir / "run" / "views"
    for i in range(16):
        for part in ("orig", "v1", "v2"):
            assert Image.open(views / f"{i}_{part}.png").size == (16, 16)
    assert len(list(views.iterdir())) == 48


def test_explicit_checkpoint_path_and_run_dir(workdir):
    assert run_cli(["train", "--config", "run.yaml"]) == 0
    ck = workdir / "run" / "checkpoints" / "epoch_1.npz"
    assert run_cli(["eval", "--checkpoint", str(ck), "--run-dir", "run", "--out", "e1.csv"]) == 0
    assert (workdir / "e1.csv").is_file()


def test_sweep(workdir, capsys):
    assert run_cli(["sweep", "--config", "run.yaml", "--betas", "0,1"]) == 0
    out = capsys.readouterr().out
    assert "beta" in out and "fine silhouette" in out
    assert (workdir / "run" / "sweep" / "sweep.csv").is_file()


def test_bad_flags_and_config_exit_2(workdir, capsys):
    assert run_cli(["train", "--no-such-flag"]) == 2
    assert run_cli(["frobnicate"]) == 2
    assert run_cli(["train", "--config", "missing.yaml"]) == 2
    (workdir / "bad.yaml").write_text(yaml.safe_dump({"train": {"betta": 1}}))
    assert run_cli(["train", "--config", "bad.yaml"]) == 2
    assert "unknown key" in capsys.readouterr().err
    assert run_cli(["eval", "--checkpoint", "nowhere.npz"]) == 2
    assert run_cli(["eval", "--run-dir", "empty"]) == 2


def test_runtime_failure_exit_1(workdir, monkeypatch):
    def boom(args):
        raise RuntimeError("disk on fire")

    parser = cli.build_parser()
    args = parser.parse_args(["train"])
    args.func = boom
    monkeypatch.setattr(cli, "build_parser", lambda: _FixedParser(args))
    assert run_cli(["train"]) == 1


class _FixedParser:
    def __init__(self, args):
        self.args = args

    def parse_args(self, argv):
        return self.args


def test_gradcheck_subcommand(monkeypatch):
    import vlcl.gradcheck as gc

    monkeypatch.setattr(gc, "run_all", lambda: True)
    assert run_cli(["gradcheck"]) == 0
    monkeypatch.setattr(gc, "run_all", lambda: False)
    assert run_cli(["gradcheck"]) == 1
