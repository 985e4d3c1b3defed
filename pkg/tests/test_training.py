import math

import numpy as np
import pytest

from xtransct.drr import biplanar_pair, detector_for
from xtransct.errors import ConfigurationError, ContractError, NumericError
from xtransct.model import ModelConfig, XTransCT
from xtransct.phantom import PhantomSpec, make_phantom
from xtransct.training import (
    OptimState, Sample, TrainConfig, TraceWriter, adam_step, clip_global_norm, mse_loss, plateaued,
    prefetch, read_trace, train_loop, two_stage_schedule,
)
from xtransct.volume import Volume

TINY = ModelConfig(d_model=16, heads=2, encoder_layers=1, decoder_layers=1, ff_dim=16, image_size=16,
                   stem_channels=4, backbone_channels=(4, 8), query_grid=4, block=2, head_hidden=16,
                   head_layers=1, init_seed=2)


def sample(seed=0, n=8):
    v, m = make_phantom(PhantomSpec("nested-ellipsoids", (n, n, n), seed))
    geo = detector_for(v.dims).__class__(detector=(16, 16))
    return Sample(f"s{seed}", v, m, render=lambda vol: biplanar_pair(vol, geometry=geo))


# -- loss -----------------------------------------------------------------------

def test_mse_loss():
    a = Volume(np.zeros((4, 4, 4)))
    b = Volume(np.full((4, 4, 4), 0.5))
    assert mse_loss(a, b) == 0.25
    assert mse_loss(a, a) == 0.0
    with pytest.raises(ContractError):
        mse_loss(a, Volume(np.zeros((4, 4, 5))))


# -- Adam -----------------------------------------------------------------------

def test_adam_first_step_is_signed_lr():
    p = {"w": np.array([1.0, -2.0, 3.0])}
    g = {"w": np.array([5.0, -0.3, 1e-3])}
    st = OptimState(lrs={"rest": 0.01})
    adam_step(p, g, st)
    assert np.allclose(p["w"] - [1.0, -2.0, 3.0], -0.01 * np.sign(g["w"]), atol=1e-6 * 0.01)


def test_adam_zero_grad_no_change():
    p = {"w": np.array([1.0, 2.0])}
    adam_step(p, {"w": np.zeros(2)}, OptimState(lrs={"rest": 0.1}))
    assert np.array_equal(p["w"], [1.0, 2.0])


def test_adam_two_step_hand_trace():
    # minimize (x - 3)^2 from x = 0, lr 0.1
    lr, b1, b2, eps = 0.1, 0.9, 0.999, 1e-8
    x = 0.0
    g1 = 2 * (x - 3)
    m1, v1 = (1 - b1) * g1, (1 - b2) * g1 ** 2
    x1 = x - lr * (m1 / (1 - b1)) / (math.sqrt(v1 / (1 - b2)) + eps)
    g2 = 2 * (x1 - 3)
    m2, v2 = b1 * m1 + (1 - b1) * g2, b2 * v1 + (1 - b2) * g2 ** 2
    x2 = x1 - lr * (m2 / (1 - b1 ** 2)) / (math.sqrt(v2 / (1 - b2 ** 2)) + eps)

    p = {"x": np.array([0.0])}
    st = OptimState(lrs={"rest": lr})
    adam_step(p, {"x": 2 * (p["x"] - 3)}, st)
    assert abs(p["x"][0] - x1) < 1e-10
    adam_step(p, {"x": 2 * (p["x"] - 3)}, st)
    assert abs(p["x"][0] - x2) < 1e-10


def test_adam_frozen_group_untouched():
    p = {"a": np.array([1.0]), "b": np.array([1.0])}
    st = OptimState(lrs={"backbone": 0.0, "rest": 0.1})
    adam_step(p, {"a": np.array([1.0]), "b": np.array([1.0])}, st, {"a": "backbone", "b": "rest"})
    assert p["a"][0] == 1.0 and p["b"][0] != 1.0
    assert "a" not in st.m


def test_clip_global_norm():
    g = {"a": np.array([3.0]), "b": np.array([4.0])}
    assert clip_global_norm(g, 1.0) == 5.0
    assert math.isclose(math.hypot(g["a"][0], g["b"][0]), 1.0, rel_tol=1e-9)
    g = {"a": np.array([0.3])}
    clip_global_norm(g, 1.0)
    assert g["a"][0] == 0.3


# -- schedule -------------------------------------------------------------------

def test_flat_history_switches_at_k():
    cfg = TrainConfig(plateau_k=10, max_steps=10 ** 6)
    stage = 1
    for n in range(1, 15):
        _, stage = two_stage_schedule([1.0] * n, cfg, step=n * 100, stage=stage)
        assert stage == (2 if n >= 10 else 1)


def test_improving_history_stays_stage1_until_cap():
    cfg = TrainConfig(plateau_k=10, stage2_step_cap=5000, max_steps=10 ** 6)
    hist = [0.9 ** i for i in range(60)]  # 10% per evaluation
    lrs, stage = two_stage_schedule(hist, cfg, step=4999, stage=1)
    assert stage == 1 and lrs == {"backbone": 0.0, "rest": 1e-5}
    lrs, stage = two_stage_schedule(hist, cfg, step=5000, stage=1)
    assert stage == 2 and lrs == {"backbone": 1e-6, "rest": 1e-5}


def test_plateau_rule_exact():
    # 0.9% vs 1.1% improvement over the window
    assert plateaued([1.0] + [0.995] * 8 + [0.991], 10, 0.01)
    assert not plateaued([1.0] + [0.995] * 8 + [0.989], 10, 0.01)
    assert not plateaued([1.0] * 9, 10, 0.01)


def test_stage_never_reverts():
    cfg = TrainConfig(plateau_k=3)
    _, stage = two_stage_schedule([1, 1, 1], cfg, 300, 1)
    assert stage == 2
    _, stage = two_stage_schedule([1.0, 0.5, 0.1], cfg, 400, stage)
    assert stage == 2


def test_unfrozen_stage1_mode():
    assert TrainConfig(freeze_backbone_stage1=False).stage_lrs(1) == {"backbone": 1e-5, "rest": 1e-5}


def test_train_config_validation():
    with pytest.raises(ConfigurationError) as err:
        TrainConfig(lr_stage1_rest=0, batch_size=0).validate()
    assert "lr_stage1_rest" in str(err.value) and "batch_size" in str(err.value)


# -- prefetch -------------------------------------------------------------------

def test_prefetch_preserves_order():
    out = [(i, r) for i, r in prefetch(range(20), lambda x: x * x, maxsize=2)]
    assert out == [(i, i * i) for i in range(20)]


def test_prefetch_propagates_errors():
    def boom(x):
        if x == 3:
            raise ValueError("bad")
        return x

    with pytest.raises(ValueError):
        list(prefetch(range(6), boom))


# -- loop -----------------------------------------------------------------------

def test_empty_dataset():
    with pytest.raises(ConfigurationError):
        train_loop([], TrainConfig(), XTransCT(TINY))


def test_step0_loss_is_untrained_mse():
    s = sample()
    model = XTransCT(TINY)
    pred, _ = model.infer(*s.projections())
    res = train_loop([s], TrainConfig(max_steps=2), model)
    assert abs(res.trace[0].loss - mse_loss(s.volume, pred)) < 1e-12
    assert [r.step for r in res.trace] == [0, 1, 2]


def test_trace_deterministic(tmp_path):
    traces = []
    for i in range(2):
        data = [sample(0), sample(1)]
        w = TraceWriter(tmp_path / f"t{i}.csv")
        train_loop(data, TrainConfig(max_steps=6, seed=7, lr_stage1_rest=1e-3), XTransCT(TINY), on_trace=w)
        w.close()
        traces.append((tmp_path / f"t{i}.csv").read_bytes())
    assert traces[0] == traces[1]
    rows = read_trace(tmp_path / "t0.csv")
    assert len(rows) == 7 and rows[0].wall_ms is None


def test_stage1_backbone_bit_identical():
    model = XTransCT(TINY)
    before = {n: p.values.copy() for n, p in model.named_parameters()}
    res = train_loop([sample()], TrainConfig(max_steps=5, lr_stage1_rest=1e-3), model)
    assert all(r.stage == 1 for r in res.trace[:-1])
    for n, p in model.named_parameters():
        same = np.array_equal(p.values, before[n])
        assert same == n.startswith("backbone."), n


def test_overfit_loss_decreases():
    model = XTransCT(TINY)
    res = train_loop([sample(), sample(1)], TrainConfig(max_steps=150, lr_stage1_rest=3e-3), model, overfit=True)
    assert res.trace[-1].loss < 0.2 * res.trace[0].loss


def test_nan_raises():
    model = XTransCT(TINY)
    model.head.out.bias.values[...] = np.nan
    with pytest.raises(NumericError):
        train_loop([sample()], TrainConfig(max_steps=1), model)


def test_dims_mismatch():
    with pytest.raises(ConfigurationError, match="dims"):
        train_loop([sample(n=10)], TrainConfig(max_steps=1), XTransCT(TINY))


def test_checkpoint_callback_and_stage_switch():
    seen = []
    cfg = TrainConfig(max_steps=6, stage2_step_cap=3, checkpoint_every=2, lr_stage1_rest=1e-3)
    res = train_loop([sample()], cfg, XTransCT(TINY), on_checkpoint=seen.append)
    assert [c.step for c in seen] == [2, 4, 6]
    stages = [r.stage for r in res.trace]
    assert stages == [1, 1, 1, 2, 2, 2, 2]
    assert res.checkpoint.stage == 2 and res.trace[3].lr_backbone == 1e-6
