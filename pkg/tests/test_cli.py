import json

import numpy as np
import pytest

from wctdefense import cli
from wctdefense import data

from conftest import small_config


@pytest.fixture(scope="module")
def config_file(mini_root, tmp_path_factory):
    tmp = tmp_path_factory.mktemp("cli")
    cfg = {"data_root": str(mini_root), "train_size": 300, "eval_size": 12,
           "model": small_config(input_shape=(1, 28, 28)).to_dict(),
           "train": {"lr": 0.01, "epochs": 1, "batch_size": 32, "momentum": 0.9},
           "defense": {"taps": [3], "ref_layer": 0, "eps_eig": 1e-5, "samples_per_class": 4},
           "eps_grid": [0.0, 0.3], "cache_dir": str(tmp / "cache"), "out": str(tmp / "out")}
    path = tmp / "cfg.json"
    path.write_text(json.dumps(cfg))
    return path


def run(capsys, *argv):
    code = cli.main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def test_stage_subcommands_need_their_producers(config_file, capsys, tmp_path):
    fresh = ["--config", str(config_file), "--cache-dir", str(tmp_path / "c")]
    code, _, err = run(capsys, "attack", *fresh)
    assert code == 4 and "run `wctdefense train` first" in err
    code, out, _ = run(capsys, "train", *fresh)
    assert code == 0 and out.startswith("checkpoint ")
    code, _, err = run(capsys, "report", *fresh)
    assert code == 4 and "wctdefense attack" in err
    assert run(capsys, "attack", *fresh)[0] == 0
    code, _, err = run(capsys, "report", *fresh)
    assert code == 4 and "wctdefense gallery" in err
    code, out, _ = run(capsys, "gallery", *fresh)
    assert code == 0 and "layer 0:" in out
    code, out, _ = run(capsys, "report", *fresh, "--out", str(tmp_path / "r"))
    assert code == 0
    assert (tmp_path / "r" / "report.csv").exists() and (tmp_path / "r" / "drift_table.png").exists()


def test_run_then_report_are_identical(config_file, capsys, tmp_path):
    code, out, _ = run(capsys, "run", "--config", str(config_file), "--out", str(tmp_path / "a"))
    assert code == 0 and "report.csv" in out
    code, _, _ = run(capsys, "report", "--config", str(config_file), "--out", str(tmp_path / "b"))
    assert code == 0
    files = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert files == sorted(p.name for p in (tmp_path / "b").iterdir())
    for name in files:
        if name.endswith((".csv", ".json")) and name != "timing.json":
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes(), name


def test_defend_eval_formats(config_file, capsys, tmp_path, mnist_small):
    assert run(capsys, "run", "--config", str(config_file), "--experiments", "drift_table",
               "--out", str(tmp_path / "o"))[0] == 0
    _, test = mnist_small
    imgs = test.images[:3]
    np.save(tmp_path / "x.npy", imgs[:, 0] * 255)
    code, out, _ = run(capsys, "defend-eval", "--config", str(config_file), "--input", str(tmp_path / "x.npy"))
    lines = out.strip().splitlines()
    assert code == 0 and lines[0] == "index,vanilla,defended" and len(lines) == 4
    idx = tmp_path / "idx"
    idx.mkdir()
    data.write_idx(idx / "a-images", idx / "a-labels", imgs, [0, 0, 0])
    code, out2, _ = run(capsys, "defend-eval", "--config", str(config_file), "--input", str(idx))
    assert code == 0 and out2 == out
    code, out, _ = run(capsys, "defend-eval", "--config", str(config_file), "--input", str(tmp_path / "x.npy"),
                       "--no-defense")
    rows = [l.split(",") for l in out.strip().splitlines()[1:]]
    assert all(r[1] == r[2] for r in rows)
    code, out, _ = run(capsys, "defend-eval", "--config", str(config_file), "--input", str(tmp_path / "x.npy"),
                       "--self-reference")
    rows = [l.split(",") for l in out.strip().splitlines()[1:]]
    assert code == 0 and all(r[1] == r[2] for r in rows)


@pytest.mark.parametrize("args, code, needle", [
    (["--taps", "7"], 1, "not a model tap"),
    (["--data-root", "/nonexistent/dir"], 1, "data_root"),
    (["--experiments", "bogus"], 1, "unknown experiments"),
    (["--attack", "DEEPFOOL"], 1, "unknown attack"),
])
def test_config_errors_exit_1(config_file, capsys, args, code, needle):
    got, _, err = run(capsys, "run", "--config", str(config_file), *args)
    assert got == code and needle in err


def test_truncated_idx_exits_2(config_file, capsys, tmp_path, mini_root):
    bad = tmp_path / "data"
    bad.mkdir()
    for name in data.SPLITS["train"] + data.SPLITS["test"]:
        (bad / name).write_bytes((mini_root / name).read_bytes()[:100])
    code, _, err = run(capsys, "train", "--config", str(config_file), "--data-root", str(bad),
                       "--cache-dir", str(tmp_path / "c"))
    assert code == 2 and "truncated" in err


def test_defend_eval_bad_input(config_file, capsys, tmp_path):
    code, _, err = run(capsys, "defend-eval", "--config", str(config_file), "--input", str(tmp_path / "none"))
    assert code == 2
    np.save(tmp_path / "wrong.npy", np.zeros((2, 5, 5)))
    code, _, err = run(capsys, "defend-eval", "--config", str(config_file), "--input", str(tmp_path / "wrong.npy"))
    assert code == 1 and "model expects" in err


def test_bad_config_file(capsys, tmp_path):
    (tmp_path / "c.yaml").write_text("unknown_key: 1\n")
    code, _, err = run(capsys, "train", "--config", str(tmp_path / "c.yaml"))
    assert code == 1 and "unknown_key" in err


def test_missing_subcommand():
    with pytest.raises(SystemExit) as info:
        cli.main([])
    assert info.value.code == 2
