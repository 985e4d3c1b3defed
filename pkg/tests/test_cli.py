import json

import numpy as np
import pytest

from xtransct import metrics
from xtransct.cli import run
from xtransct.drr import load_projection
from xtransct.volume import Volume, load_mask, load_volume, save_volume

SMALL = """\
[phantom]
dims = 16

[geometry]
detector = 32

[model]
d_model = 32
heads = 4
encoder_layers = 1
decoder_layers = 1
ff_dim = 32
image_size = 32
stem_channels = 4
backbone_channels = 8, 8
query_grid = 4
block = 4
head_hidden = 32
head_layers = 1

[train]
lr_stage1_rest = 1e-3
max_steps = 4
"""


@pytest.fixture()
def small_cfg(tmp_path):
    p = tmp_path / "small.ini"
    p.write_text(SMALL)
    return str(p)


@pytest.fixture()
def workspace(tmp_path, small_cfg):
    """Phantom, its projections and a trained checkpoint at the small scale."""
    assert run(["phantom", "--config", small_cfg, "--seed", "7", "--out", str(tmp_path / "ph")]) == 0
    assert run(["drr", str(tmp_path / "ph/phantom.vol"), "--config", small_cfg, "--out", str(tmp_path / "drr")]) == 0
    assert run(["train", "--config", small_cfg, "--seed", "7", "--overfit", "1", "--out", str(tmp_path / "tr")]) == 0
    return tmp_path


def test_phantom_files(tmp_path, capsys):
    out = tmp_path / "a"
    assert run(["phantom", "--kind", "nested", "--dims", "32", "--seed", "7", "--out", str(out)]) == 0
    v = load_volume(out / "phantom.vol")
    m = load_mask(out / "phantom.mask")
    assert v.dims == (32, 32, 32) and m.count > 0
    text = capsys.readouterr().out
    assert "32x32x32" in text and "deciles" in text
    out2 = tmp_path / "b"
    run(["phantom", "--kind", "nested", "--dims", "32", "--seed", "7", "--out", str(out2)])
    for name in ("phantom.vol", "phantom.vol.json", "phantom.mask", "phantom.mask.json"):
        assert (out / name).read_bytes() == (out2 / name).read_bytes()


def test_phantom_dims_too_small(tmp_path, capsys):
    out = tmp_path / "bad"
    assert run(["phantom", "--dims", "4", "--out", str(out)]) == 2
    assert "below the minimum" in capsys.readouterr().err
    assert not out.exists()


def test_drr_defaults_and_equal_angles(tmp_path, small_cfg):
    run(["phantom", "--config", small_cfg, "--out", str(tmp_path / "ph")])
    vol = str(tmp_path / "ph/phantom.vol")
    assert run(["drr", vol, "--config", small_cfg, "--out", str(tmp_path / "d")]) == 0
    meta = json.loads((tmp_path / "d/phantom_geometry.json").read_text())
    assert meta["version"] == 1
    assert [v["angle_deg"] for v in meta["views"]] == [45.0, 135.0]
    assert run(["drr", vol, "--config", small_cfg, "--angles", "0,0", "--out", str(tmp_path / "z")]) == 0
    a, b = (load_projection(tmp_path / f"z/phantom_view{i}.png").pixels for i in (0, 1))
    assert np.array_equal(a, b)


def test_drr_zero_volume_black(tmp_path, small_cfg):
    save_volume(Volume(np.zeros((16, 16, 16))), tmp_path / "zero.vol")
    assert run(["drr", str(tmp_path / "zero.vol"), "--config", small_cfg, "--out", str(tmp_path / "d")]) == 0
    for i in (0, 1):
        assert load_projection(tmp_path / f"d/zero_view{i}.png").pixels.max() == 0.0


def test_train_outputs_and_seed_reproducibility(tmp_path, small_cfg):
    for d in ("r1", "r2"):
        assert run(["train", "--config", small_cfg, "--seed", "3", "--out", str(tmp_path / d)]) == 0
    a, b = ((tmp_path / d / "loss_trace.csv").read_bytes() for d in ("r1", "r2"))
    assert a == b and a.startswith(b"step,loss,stage,lr_backbone,lr_rest,wall_ms")
    summary = json.loads((tmp_path / "r1/train.json").read_text())
    assert summary["version"] == 1 and summary["steps"] == 4
    assert (tmp_path / "r1/model.ckpt").exists()


def test_train_missing_dataset(tmp_path, small_cfg, capsys):
    missing = tmp_path / "no_such_dir"
    assert run(["train", "--config", small_cfg, "--data", str(missing), "--out", str(tmp_path / "o")]) == 3
    assert str(missing) in capsys.readouterr().err


def test_train_validation_lists_all(tmp_path, capsys):
    code = run(["train", "--set", "model.d_model=30", "--set", "phantom.dims=20", "--set", "train.batch_size=0",
                "--out", str(tmp_path / "o")])
    err = capsys.readouterr().err
    assert code == 2
    assert "3 configuration problem(s)" in err
    assert not (tmp_path / "o").exists()


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_train_nan_exit_and_dump(tmp_path, small_cfg):
    out = tmp_path / "nan"
    code = run(["train", "--config", small_cfg, "--set", "train.lr_stage1_rest=1e300", "--set",
                "train.clip_norm=none", "--steps", "6", "--out", str(out)])
    assert code == 4
    dump = json.loads((out / "nan_dump.json").read_text())
    assert dump["version"] == 1 and dump["step"] >= 1


def test_infer_outputs(workspace):
    t = workspace
    args = ["infer", str(t / "tr/model.ckpt"), str(t / "drr/phantom_view0.png"), str(t / "drr/phantom_view1.png")]
    assert run(args + ["--out", str(t / "i1")]) == 0
    assert run(args + ["--out", str(t / "i2"), "--chunk-size", "7"]) == 0
    timing = json.loads((t / "i1/timing.json").read_text())
    assert timing["version"] == 1 and timing["query_count"] == (16 // 4) ** 3
    assert {"infer_ms", "chunk_size"} <= set(timing)
    v = load_volume(t / "i1/recon.vol")
    assert v.dims == (16, 16, 16)
    assert (t / "i1/recon_montage.png").stat().st_size > 0
    assert run(args + ["--out", str(t / "i3")]) == 0
    assert (t / "i1/recon.vol").read_bytes() == (t / "i3/recon.vol").read_bytes()


def test_infer_config_mismatch(workspace, tmp_path, capsys):
    t = workspace
    bad = tmp_path / "bad.ini"
    bad.write_text(SMALL.replace("d_model = 32", "d_model = 16"))
    code = run(["infer", str(t / "tr/model.ckpt"), str(t / "drr/phantom_view0.png"),
                str(t / "drr/phantom_view1.png"), "--config", str(bad), "--out", str(t / "x")])
    assert code == 2
    err = capsys.readouterr().err
    assert "token_pos" in err and "(32, 32)" in err


def test_eval_report_matches_csv(workspace, small_cfg):
    t = workspace
    run(["phantom", "--config", small_cfg, "--seed", "11", "--count", "2", "--out", str(t / "ph")])
    assert run(["eval", str(t / "tr/model.ckpt"), str(t / "ph"), "--config", small_cfg, "--out", str(t / "ev")]) == 0
    rep = json.loads((t / "ev/report.json").read_text())
    rows = metrics.read_sample_csv(t / "ev/samples.csv")
    assert rep["version"] == 1 and rep["sample_count"] == len(rows) == 3
    for key in ("ssim", "psnr_db", "dice"):
        assert abs(rep[key]["mean"] - np.mean([getattr(r, key) for r in rows])) <= 1e-12
    assert (t / "ev/montage_phantom.png").exists()


def test_bench_json(tmp_path, small_cfg, capsys):
    assert run(["bench", "--config", small_cfg, "--repeats", "3", "--out", str(tmp_path / "b")]) == 0
    rep = json.loads((tmp_path / "b/bench.json").read_text())
    assert rep["version"] == 1
    assert rep["block1"]["query_count"] == 64 * rep["block4"]["query_count"]
    assert rep["speedup"] > 1
    assert rep["machine"]["cpu_count"] >= 1 and "model" in rep["config"]
    assert len(rep["block4"]["times_ms"]) == 3
    assert "speedup," in capsys.readouterr().out


def test_bad_override_and_usage(tmp_path):
    assert run(["phantom", "--set", "nonsense", "--out", str(tmp_path)]) == 2
    assert run(["phantom", "--set", "phantom.colour=red", "--out", str(tmp_path)]) == 2
    assert run(["frobnicate"]) == 2
