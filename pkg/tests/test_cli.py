import json

import numpy as np
import pytest

from wsag._io import write_png
from wsag.cli import main
from wsag.pipeline import Config, load_config

FAST = ["--config", "tiny", "--set", "fixture_objects=2", "--set", "fixture_affordances=1", "--set", "fixture_ego=4",
        "--set", "fixture_exo=3", "--set", "fixture_test=2", "--set", "epochs=1", "--set", "refine_epochs=1"]


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    root = tmp_path_factory.mktemp("run")
    for cmd in ("fixture", "gen-labels", "pair", "train"):
        assert main([cmd, "--workdir", str(root), *FAST]) == 0
    return root


def test_pipeline_artifacts(workdir, capsys):
    assert (workdir / "checkpoints" / "seed1.pt").exists()
    assert (workdir / "pairs.tsv").exists()
    lines = (workdir / "logs" / "seed1.jsonl").read_text().splitlines()
    assert lines and "l_kl" in json.loads(lines[0])
    assert main(["eval", "--workdir", str(workdir), "--checkpoint", str(workdir / "checkpoints" / "seed1.pt"), *FAST]) == 0
    assert "KLD=" in capsys.readouterr().out
    assert (workdir / "reports" / "seed1.kv").exists()


def test_refine(workdir):
    assert main(["refine", "--workdir", str(workdir), *FAST]) == 0
    assert json.loads((workdir / "refine" / "losses.json").read_text())
    assert list((workdir / "labels_refined").rglob("*.png"))


def test_predict_sums_to_one(workdir, tmp_path, rng):
    image = tmp_path / "img.png"
    write_png(image, rng.integers(0, 255, (40, 50, 3), dtype=np.uint8))
    out, ov = tmp_path / "heat.npy", tmp_path / "ov.png"
    rc = main(["predict", "--checkpoint", str(workdir / "checkpoints" / "seed1.pt"), "--image", str(image),
               "--query", "hold", "--out", str(out), "--overlay", str(ov)])
    assert rc == 0
    heat = np.load(out)
    assert heat.shape == (40, 50) and heat.sum() == pytest.approx(1.0, abs=1e-9)
    assert ov.exists()


def test_config_mismatch(workdir, capsys):
    ckpt = str(workdir / "checkpoints" / "seed1.pt")
    args = ["eval", "--workdir", str(workdir), "--checkpoint", ckpt, *FAST, "--set", "lr=0.5"]
    assert main(args) == 1
    assert "config" in capsys.readouterr().err
    assert main(args + ["--allow-config-mismatch"]) == 0


def test_grasp_select(tmp_path, capsys):
    heat = np.zeros((6, 6))
    heat[2, 4] = 1.0
    np.save(tmp_path / "h.npy", heat)
    (tmp_path / "c.txt").write_text("a 0 0\nb 4 2\n")
    assert main(["grasp-select", "--heatmap", str(tmp_path / "h.npy"), "--candidates", str(tmp_path / "c.txt")]) == 0
    assert capsys.readouterr().out.split() == ["b", "4", "2"]


def test_eval_requires_checkpoint(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["eval"])
    assert exc.value.code == 2
    assert "usage" in capsys.readouterr().err


def test_unknown_command():
    with pytest.raises(SystemExit) as exc:
        main(["bogus"])
    assert exc.value.code == 2


def test_missing_input_is_error(tmp_path, capsys):
    assert main(["gen-labels", "--workdir", str(tmp_path / "empty"), *FAST]) == 1
    assert "error" in capsys.readouterr().err


class TestConfig:
    def test_defaults_follow_recipe(self):
        cfg = Config.defaults()
        assert (cfg["epochs"], cfg["batch"], cfg["lr"], cfg["encoder_lr"]) == (40, 20, 1e-4, 1e-5)

    def test_file_and_overrides(self, tmp_path):
        path = tmp_path / "c.cfg"
        path.write_text("# comment\nepochs = 3\nflip = no\n")
        cfg = load_config(path, ["batch=4"])
        assert (cfg["epochs"], cfg["flip"], cfg["batch"]) == (3, False, 4)

    def test_bad_entries(self, tmp_path):
        path = tmp_path / "c.cfg"
        path.write_text("epochs 3\n")
        with pytest.raises(ValueError, match=":1:"):
            load_config(path)
        with pytest.raises(KeyError):
            load_config(None, ["nonsense=1"])
        with pytest.raises(FileNotFoundError):
            load_config(tmp_path / "absent.cfg")

    def test_hash_ignores_runtime_keys(self):
        a, b = load_config("tiny"), load_config("tiny", ["seeds=3,4", "cache_dir=/tmp/x"])
        assert a.hash() == b.hash()
        assert a.hash() != load_config("tiny", ["lr=0.1"]).hash()
