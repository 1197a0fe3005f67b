import json
import subprocess
import sys

import numpy as np
import pytest

from spx.cli import main
from spx.imageio import read_pnm, write_ppm

TINY = ["image_h=32", "image_w=32", "channels=8", "backbone_channels=4,4,8,8,8", "grid_h=2", "grid_w=2",
        "tok_layers=1", "tok_heads=2", "cls_layers=1", "cls_heads=2", "n_classes=3"]


def sets(pairs):
    out = []
    for p in pairs:
        out += ["--set", p]
    return out


def run(capsys, *argv):
    code = main(list(argv))
    cap = capsys.readouterr()
    return code, cap.out, cap.err


@pytest.fixture
def cfg_file(tmp_path):
    path = tmp_path / "c.cfg"
    path.write_text("\n".join(p.replace("=", " = ") for p in TINY) + "\n# comment line\n")
    return path


class TestFlopsCommand:
    def test_table_and_json_agree(self, capsys, cfg_file):
        code, table, _ = run(capsys, "flops", "--config", str(cfg_file))
        assert code == 0 and "Superpixel Association" in table
        code, js, _ = run(capsys, "flops", "--config", str(cfg_file), "--json")
        d = json.loads(js)
        for row in d["rows"]:
            line = next(l for l in table.splitlines() if l.startswith(row["name"]))
            assert line.split()[-3:-1] == [str(row["params"]), str(row["flops"])]
        assert d["spatial_ratio"] == "1/256"

    def test_console_script(self, cfg_file):
        out = subprocess.run([sys.executable, "-m", "spx.cli", "flops", "--config", str(cfg_file), "--json"],
                             capture_output=True, text=True, check=True)
        assert json.loads(out.stdout)["total"]["flops"] > 0


class TestErrors:
    def test_unknown_key_exit_2(self, capsys):
        code, _, err = run(capsys, "flops", "--set", "bogus_key=1")
        assert code == 2 and "bogus_key" in err

    def test_bad_value_exit_2(self, capsys):
        code, _, err = run(capsys, "flops", "--set", "grid_h=abc")
        assert code == 2 and "grid_h" in err

    def test_invalid_model_exit_2(self, capsys):
        code, _, err = run(capsys, "flops", "--set", "image_h=48")
        assert code == 2 and "image_h" in err

    def test_heads_not_dividing(self, capsys):
        code, _, err = run(capsys, "flops", *sets(TINY), "--set", "tok_heads=3")
        assert code == 2 and "tok_heads" in err

    def test_missing_file_exit_1(self, capsys, tmp_path):
        code, _, err = run(capsys, "ssn", "--image", str(tmp_path / "none.ppm"), "--out", str(tmp_path))
        assert code == 1 and "none.ppm" in err

    def test_unknown_subcommand(self):
        with pytest.raises(SystemExit) as e:
            main(["frobnicate"])
        assert e.value.code == 2


class TestGenData:
    def test_twice_identical(self, capsys, tmp_path):
        for d in ("a", "b"):
            assert run(capsys, "gen-data", "--seed", "7", "--count", "10", "--out", str(tmp_path / d))[0] == 0
        files = sorted(p.name for p in (tmp_path / "a").iterdir())
        assert len(files) == 21
        for f in files:
            assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()

    def test_start_offset(self, capsys, tmp_path):
        run(capsys, "gen-data", "--seed", "3", "--count", "4", "--out", str(tmp_path / "all"))
        run(capsys, "gen-data", "--seed", "3", "--count", "2", "--start", "2", "--out", str(tmp_path / "tail"))
        assert (tmp_path / "all" / "img_00002.ppm").read_bytes() == (tmp_path / "tail" / "img_00000.ppm").read_bytes()


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("trained")
    args = sets(TINY + ["total_steps=20", "warmup_steps=2", "batch_size=4", "train_count=16", "val_count=8",
                        "eval_interval=10", "base_lr=3e-3"])
    assert main(["train", *args, "--out", str(root / "run")]) == 0
    assert main(["gen-data", *args, "--count", "8", "--start", "16", "--out", str(root / "val")]) == 0
    return root


class TestTrainedCheckpoint:
    def test_infer_reproduces_stored_miou(self, capsys, trained, tmp_path):
        code, out, _ = run(capsys, "infer", "--ckpt", str(trained / "run" / "model.spxf"), "--data",
                           str(trained / "val"), "--out", str(tmp_path), "--json")
        d = json.loads(out)
        assert code == 0
        assert d["miou"] == pytest.approx(d["stored_miou"], abs=1e-6)
        assert read_pnm(tmp_path / "00000_labels.pgm").shape == (32, 32)
        assert read_pnm(tmp_path / "00000_overlay.ppm").shape == (32, 32, 3)
        assert len((tmp_path / "palette.txt").read_text().splitlines()) == 3

    def test_eval_matches_infer(self, capsys, trained):
        code, out, _ = run(capsys, "eval", "--ckpt", str(trained / "run" / "model.spxf"), "--json")
        d = json.loads(out)
        assert code == 0 and d["count"] == 8
        assert d["miou"] == pytest.approx(d["stored_miou"], abs=1e-6)

    def test_visualize_single_image(self, capsys, trained, tmp_path):
        img = (np.random.default_rng(0).random((32, 32, 3)) * 255).astype(np.uint8)
        write_ppm(tmp_path / "pic.ppm", img)
        code, out, _ = run(capsys, "visualize", "--ckpt", str(trained / "run" / "model.spxf"), "--image",
                           str(tmp_path / "pic.ppm"), "--out", str(tmp_path / "o"), "--json", "--png")
        assert code == 0
        sp = read_pnm(tmp_path / "o" / "pic_superpixels.ppm")
        assert sp.shape == (32, 32, 3)
        assert (tmp_path / "o" / "pic_superpixels.png").exists()
        assert 0.0 <= json.loads(out)["connected_fraction"] <= 1.0

    def test_wrong_image_size(self, capsys, trained, tmp_path):
        write_ppm(tmp_path / "big.ppm", np.zeros((64, 64, 3), np.uint8))
        code, _, err = run(capsys, "infer", "--ckpt", str(trained / "run" / "model.spxf"), "--image",
                           str(tmp_path / "big.ppm"), "--out", str(tmp_path / "o"))
        assert code == 1 and "32x32" in err

    def test_train_logs(self, trained):
        lines = (trained / "run" / "metrics.jsonl").read_text().splitlines()
        assert len(lines) == 20
        assert (trained / "run" / "config.cfg").exists()


def test_ssn_command(capsys, tmp_path):
    img = np.zeros((32, 32, 3), np.uint8)
    img[:, 16:] = 200
    write_ppm(tmp_path / "two.ppm", img)
    code, out, _ = run(capsys, "ssn", "--image", str(tmp_path / "two.ppm"), "--out", str(tmp_path), "--json",
                       "--set", "grid_h=4", "--set", "grid_w=4", "--iters", "5")
    d = json.loads(out)
    assert code == 0 and d["iters"] == 5 and d["superpixels"] <= 16
    assert read_pnm(tmp_path / "two_ssn.ppm").shape == (32, 32, 3)


def test_ssn_grid_must_divide(capsys, tmp_path):
    write_ppm(tmp_path / "x.ppm", np.zeros((30, 32, 3), np.uint8))
    code, _, err = run(capsys, "ssn", "--image", str(tmp_path / "x.ppm"), "--out", str(tmp_path),
                       "--set", "grid_h=4")
    assert code == 2 and "grid_h" in err


def test_bench_json(capsys):
    code, out, _ = run(capsys, "bench", *sets(TINY), "--repeats", "2", "--json")
    d = json.loads(out)
    assert code == 0
    assert [r["name"] for r in d["rows"]] == ["Backbone", "Hypercolumn", "Superpixel Tokenization",
                                              "Superpixel Self-Attention", "Superpixel Association"]
    assert d["total"]["ms"] == pytest.approx(sum(r["ms"] for r in d["rows"]), abs=1e-3)
