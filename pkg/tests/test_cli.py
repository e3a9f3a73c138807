import csv

import numpy as np
import pytest
import yaml
from PIL import Image

from camodiff import ablation
from camodiff.cli import main
from camodiff.data import synthesize_dataset, write_dataset
from camodiff.viz import panel_png, render_panel


@pytest.fixture
def tiny_yaml(tmp_path, tiny_cfg):
    path = tmp_path / "tiny.yaml"
    path.write_text(yaml.safe_dump(tiny_cfg.override(trainer__epochs=1).to_dict()))
    return path


@pytest.fixture
def trained(tmp_path, tiny_yaml):
    out = tmp_path / "run"
    assert main(["train", "--config", str(tiny_yaml), "--synthetic", "4", "--out", str(out)]) == 0
    return out


def test_missing_config_exit_2(tmp_path, capsys):
    missing = tmp_path / "nope.yaml"
    assert main(["train", "--config", str(missing)]) == 2
    assert str(missing) in capsys.readouterr().err


def test_bad_config_key_exit_2(tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text("bdlu:\n  radius: 3\n")
    assert main(["train", "--config", str(bad)]) == 2
    assert "bdlu.radius" in capsys.readouterr().err


def test_usage_error_exit_2():
    assert main(["frobnicate"]) == 2


def test_train_outputs_and_determinism(tmp_path, tiny_yaml, trained):
    assert (trained / "ckpt.npz").is_file() and (trained / "loss.csv").is_file()
    again = tmp_path / "again"
    main(["train", "--config", str(tiny_yaml), "--synthetic", "4", "--out", str(again)])
    assert (again / "loss.csv").read_bytes() == (trained / "loss.csv").read_bytes()


def test_train_uses_env_out_dir(tmp_path, tiny_yaml, monkeypatch):
    monkeypatch.setenv("CAMODIFF_OUT", str(tmp_path / "envout"))
    assert main(["train", "--config", str(tiny_yaml), "--synthetic", "2"]) == 0
    assert (tmp_path / "envout" / "train" / "ckpt.npz").is_file()


def test_infer_rounds_skip_and_determinism(tmp_path, trained):
    imgs = tmp_path / "imgs"
    write_dataset(synthesize_dataset(2, 48, seed=9), tmp_path / "ds")
    imgs.mkdir()
    for p in sorted((tmp_path / "ds" / "images").iterdir()):
        p.rename(imgs / p.name)
    (imgs / "broken.png").write_bytes(b"not a png")
    out1, out2 = tmp_path / "o1", tmp_path / "o2"
    ckpt = str(trained / "ckpt.npz")
    assert main(["infer", ckpt, str(imgs), "--out", str(out1), "--save-rounds"]) == 1
    assert main(["infer", ckpt, str(imgs), "--out", str(out2), "--save-rounds"]) == 1
    preds = sorted(p.name for p in out1.glob("*.png"))
    assert preds == ["syn_9_00000.png", "syn_9_00001.png"]
    assert len(list((out1 / "rounds").glob("syn_9_00000_round*.png"))) == 4
    for name in preds:
        a = Image.open(out1 / name)
        assert a.mode == "L" and a.size == (48, 48)
        assert (out1 / name).read_bytes() == (out2 / name).read_bytes()


def test_infer_missing_checkpoint(tmp_path):
    assert main(["infer", str(tmp_path / "x.npz"), str(tmp_path)]) == 2


def test_synth_then_eval(tmp_path, capsys):
    assert main(["synth", str(tmp_path / "d"), "--count", "3", "--size", "32"]) == 0
    masks = tmp_path / "d" / "train" / "masks"
    assert main(["eval", str(masks), str(masks), "--csv", str(tmp_path / "r.csv")]) == 0
    out = capsys.readouterr().out
    assert "mae\t0.0000" in out
    assert (tmp_path / "r.csv").read_text().splitlines()[-1].startswith("MEAN,")


def test_ablation_grid_building():
    cells = ablation.build_grid({"b": [1.0, 0.5, 0.1, 0.05], "steps": [2, 4, 6, 8]})
    assert [(c.factor, c.value) for c in cells][:4] == [("b", 1.0), ("b", 0.5), ("b", 0.1), ("b", 0.05)]
    assert dict(cells[5].overrides) == {"sampler__steps": 4}
    with pytest.raises(ValueError):
        ablation.build_grid({})
    with pytest.raises(ValueError):
        ablation.build_grid({"r": []})
    with pytest.raises(ValueError):
        ablation.build_grid({"mask_variant": ["z"]})
    assert ablation.parse_factor("r=1, 2") == ("r", ["1", "2"])


def test_ablate_empty_grid_writes_nothing(tmp_path, tiny_yaml):
    out = tmp_path / "res.csv"
    assert main(["ablate", "--config", str(tiny_yaml), "--factor", "r=", "--out", str(out)]) == 2
    assert not out.exists()


def test_ablate_rows_and_failures(tmp_path, tiny_yaml):
    out = tmp_path / "res.csv"
    code = main(["ablate", "--config", str(tiny_yaml), "--synthetic", "2", "--factor", "steps=2,4",
                 "--factor", "b=0.1,0", "--out", str(out)])
    rows = list(csv.DictReader(out.open()))
    assert [(r["factor"], r["value"], r["status"]) for r in rows] == [
        ("steps", "2", "ok"), ("steps", "4", "ok"), ("b", "0.1", "ok"), ("b", "0", "failed")]
    assert "schedule.b" in rows[-1]["error"]
    assert float(rows[0]["mae"]) >= 0
    assert code == 1


def test_visualize_layout_and_bytes(tmp_path):
    rng = np.random.default_rng(0)
    img = (rng.random((16, 20, 3)) * 255).astype(np.uint8)
    pred = (rng.random((16, 20)) * 255).astype(np.uint8)
    gt = ((rng.random((16, 20)) > 0.5) * 255).astype(np.uint8)
    for name, arr in (("i.png", img), ("p.png", pred), ("g.png", gt)):
        Image.fromarray(arr).save(tmp_path / name)
    args = ["visualize", "--image", str(tmp_path / "i.png"), "--pred", str(tmp_path / "p.png")]
    assert main(args + ["--gt", str(tmp_path / "g.png"), "--out", str(tmp_path / "a.png")]) == 0
    assert main(args + ["--gt", str(tmp_path / "g.png"), "--out", str(tmp_path / "b.png")]) == 0
    assert Image.open(tmp_path / "a.png").size == (80, 16)
    assert (tmp_path / "a.png").read_bytes() == (tmp_path / "b.png").read_bytes()
    assert main(args + ["--out", str(tmp_path / "c.png")]) == 0
    assert Image.open(tmp_path / "c.png").size == (60, 16)
    Image.fromarray(pred[:8]).save(tmp_path / "small.png")
    bad = ["visualize", "--image", str(tmp_path / "i.png"), "--pred", str(tmp_path / "small.png"),
           "--out", str(tmp_path / "d.png")]
    assert main(bad) == 2


def test_render_panel_rejects_misaligned():
    with pytest.raises(ValueError):
        render_panel(np.zeros((4, 4, 3)), np.zeros((4, 5)))
    assert panel_png(np.zeros((4, 4, 3)), np.zeros((4, 4))) == panel_png(np.zeros((4, 4, 3)), np.zeros((4, 4)))
