import csv
import json
import logging

import numpy as np
import pytest
from PIL import Image

from dmfn.cli import EXIT_CONFIG, EXIT_DATA, main
from dmfn.config import RunConfig
from dmfn.serialization import read_header
from tiny import tiny_run_config


def _write_cfg(path, cfg):
    path.write_text(json.dumps(cfg))
    return str(path)


@pytest.fixture(scope="module")
def trained(tmp_path_factory, small_corpus, vgg_path):
    root = tmp_path_factory.mktemp("cli_run")
    cfg = _write_cfg(root / "cfg.json", tiny_run_config(small_corpus, vgg_path, root / "out", sample_every=3))
    assert main(["train", "--config", cfg]) == 0
    return root, cfg


def test_ablate(capsys):
    assert main(["ablate", "--json"]) == 0
    table = json.loads(capsys.readouterr().out)
    assert table["full_dmfb"] == 471808 and table["no_Ki"] == 361024 and table["no_combination"] == 361024
    assert main(["ablate"]) == 0
    assert "471,808" in capsys.readouterr().out


def test_default_config_values():
    cfg = RunConfig()
    w, t = cfg.loss_weights(), cfg.train_config()
    assert (w.lambda_, w.eta, w.mu, w.gamma) == (25, 5, 0.003, 1)
    assert (t.learning_rate, t.adam_beta1, t.adam_beta2, t.batch_size) == (2e-4, 0.5, 0.9, 16)


def test_train_outputs(trained):
    root, _ = trained
    out = root / "out"
    h = json.loads((out / "run.json").read_text())["config_hash"]
    assert read_header(out / "checkpoint.dmfn")["meta"]["config_hash"] == h
    rows = list(csv.reader((out / "losses.csv").open()))
    assert len(rows) == 4
    with Image.open(out / "sample_000003.png") as im:
        assert im.text["dmfn_config_hash"] == h


def test_train_ablation_logs_block_count(tmp_path, small_corpus, vgg_path, caplog):
    cfg = tiny_run_config(small_corpus, vgg_path, tmp_path / "out", iterations=1)
    cfg["generator"] = {}
    path = _write_cfg(tmp_path / "cfg.json", cfg)
    with caplog.at_level(logging.INFO, logger="dmfn"):
        assert main(["train", "--config", path, "--ablation", "no_Ki"]) == 0
    assert "block parameter count 361024" in caplog.text
    assert json.loads((tmp_path / "out" / "run.json").read_text())["block_parameters"] == 361024


def test_metric_override_changes_hash(tmp_path, small_corpus, vgg_path):
    cfg = tiny_run_config(small_corpus, vgg_path, tmp_path / "a", iterations=1)
    path = _write_cfg(tmp_path / "cfg.json", cfg)
    assert main(["train", "--config", path]) == 0
    assert main(["train", "--config", path, "--output-dir", str(tmp_path / "b"),
                 "--loss.metric", "gaussian", "--loss.sigma", "1.0"]) == 0
    a = json.loads((tmp_path / "a" / "run.json").read_text())
    b = json.loads((tmp_path / "b" / "run.json").read_text())
    assert b["config"]["loss"]["metric"] == "gaussian" and a["config_hash"] != b["config_hash"]


def test_resume_continues(tmp_path, small_corpus, vgg_path):
    cfg = tiny_run_config(small_corpus, vgg_path, tmp_path / "out", iterations=2)
    path = _write_cfg(tmp_path / "cfg.json", cfg)
    assert main(["train", "--config", path]) == 0
    assert main(["train", "--config", path, "--resume", "--train.iterations", "4"]) == 0
    rows = list(csv.reader((tmp_path / "out" / "losses.csv").open()))
    assert [r[0] for r in rows[1:]] == ["1", "2", "3", "4"]


def test_eval_byte_identical(trained, tmp_path):
    root, cfg = trained
    ck = str(root / "out" / "checkpoint.dmfn")
    for d in ("x", "y"):
        assert main(["eval", "--checkpoint", ck, "--protocol", "center", "--out", str(tmp_path / d)]) == 0
    a, b = (tmp_path / "x" / "eval_center.csv").read_bytes(), (tmp_path / "y" / "eval_center.csv").read_bytes()
    assert a == b and a.count(b"\n") == 5
    summary = json.loads((tmp_path / "x" / "eval_center.json").read_text())
    assert summary["lpips"] == "absent" and summary["config_hash"]
    assert main(["eval", "--config", cfg, "--checkpoint", ck, "--protocol", "random", "--region", "hole",
                 "--out", str(tmp_path / "z")]) == 0


def test_eval_irregular(trained, tmp_path):
    root, cfg = trained
    masks = tmp_path / "masks"
    masks.mkdir()
    m = np.zeros((64, 64), np.uint8)
    m[10:30, 5:50] = 255
    Image.fromarray(m).save(masks / "m0.png")
    ck = str(root / "out" / "checkpoint.dmfn")
    assert main(["eval", "--config", cfg, "--checkpoint", ck, "--protocol", "irregular",
                 "--paths.irregular_mask_dir", json.dumps(str(masks)), "--out", str(tmp_path / "e")]) == 0
    assert main(["eval", "--config", cfg, "--checkpoint", ck, "--protocol", "irregular",
                 "--out", str(tmp_path / "f")]) == EXIT_DATA


def _img(path, size, seed=0):
    arr = np.random.default_rng(seed).integers(0, 256, (size, size, 3)).astype(np.uint8)
    Image.fromarray(arr).save(path)
    return arr


def _mask(path, size, value):
    Image.fromarray(np.full((size, size), value, np.uint8)).save(path)


def test_inpaint(trained, tmp_path):
    root, _ = trained
    ck = str(root / "out" / "checkpoint.dmfn")
    src = _img(tmp_path / "in.png", 64)
    _mask(tmp_path / "zero.png", 64, 0)
    _mask(tmp_path / "one.png", 64, 255)
    assert main(["inpaint", "--checkpoint", ck, "--image", str(tmp_path / "in.png"), "--mask",
                 str(tmp_path / "zero.png"), "--out", str(tmp_path / "o0.png")]) == 0
    assert np.array_equal(np.asarray(Image.open(tmp_path / "o0.png")), src)
    assert main(["inpaint", "--checkpoint", ck, "--image", str(tmp_path / "in.png"), "--mask",
                 str(tmp_path / "one.png"), "--out", str(tmp_path / "o1.png")]) == 0
    assert not np.array_equal(np.asarray(Image.open(tmp_path / "o1.png")), src)
    big = _img(tmp_path / "big.png", 512, 1)
    m = np.zeros((512, 512), np.uint8)
    m[100:200, 300:420] = 255
    Image.fromarray(m).save(tmp_path / "bigmask.png")
    assert main(["inpaint", "--checkpoint", ck, "--image", str(tmp_path / "big.png"), "--mask",
                 str(tmp_path / "bigmask.png"), "--out", str(tmp_path / "o2.png")]) == 0
    res = np.asarray(Image.open(tmp_path / "o2.png"))
    assert res.shape == (512, 512, 3)
    assert np.array_equal(res[m == 0], big[m == 0])
    assert main(["inpaint", "--checkpoint", ck, "--image", str(tmp_path / "big.png"), "--mask",
                 str(tmp_path / "zero.png"), "--out", str(tmp_path / "bad.png")]) == EXIT_DATA


def test_inspect(trained, tmp_path):
    root, _ = trained
    ck = str(root / "out" / "checkpoint.dmfn")
    _img(tmp_path / "in.png", 64)
    _mask(tmp_path / "zero.png", 64, 0)
    out = tmp_path / "maps"
    assert main(["inspect", "--checkpoint", ck, "--image", str(tmp_path / "in.png"), "--mask",
                 str(tmp_path / "zero.png"), "--out", str(out)]) == 0
    g1, g2 = np.asarray(Image.open(out / "guidance_l1.png")), np.asarray(Image.open(out / "guidance_l2.png"))
    assert not g1.any() and not g2.any()
    assert g2.shape == (g1.shape[0] // 2, g1.shape[1] // 2)
    side = json.loads((out / "maps.json").read_text())
    assert side["maps"]["guidance_l2.png"]["size"] == [32, 32]
    feat = side["maps"]["avgfeat_out_relu3_1.png"]
    assert feat["min"] <= feat["max"] and feat["size"] == [16, 16]
    assert (out / "avgfeat_gt_relu5_1.png").exists()


def test_exit_codes(tmp_path, small_corpus, vgg_path, monkeypatch):
    monkeypatch.delenv("DMFN_VGG_WEIGHTS", raising=False)
    bad = tiny_run_config(small_corpus, vgg_path, tmp_path / "o")
    bad["train"]["batch_size"] = 0
    assert main(["train", "--config", _write_cfg(tmp_path / "bad.json", bad)]) == EXIT_CONFIG
    unknown = tiny_run_config(small_corpus, vgg_path, tmp_path / "o")
    unknown["train"]["learnin_rate"] = 1
    assert main(["train", "--config", _write_cfg(tmp_path / "unk.json", unknown)]) == EXIT_CONFIG
    novgg = tiny_run_config(small_corpus, tmp_path / "missing.dmfn", tmp_path / "o")
    assert main(["train", "--config", _write_cfg(tmp_path / "novgg.json", novgg)]) == EXIT_DATA
    nodata = tiny_run_config(tmp_path / "nothing", vgg_path, tmp_path / "o")
    assert main(["train", "--config", _write_cfg(tmp_path / "nodata.json", nodata)]) == EXIT_DATA
    assert main(["eval", "--checkpoint", str(tmp_path / "none.dmfn")]) == EXIT_DATA
    assert main(["train", "--config", _write_cfg(tmp_path / "ok.json", nodata), "--loss.metric", "cosine"]) == EXIT_CONFIG
