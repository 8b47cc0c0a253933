import numpy as np
import pytest

from cspdet import numerics as nx
from cspdet.codec import CodecConfig, encode_targets, stack_targets
from cspdet.geometry import ObjectAnnotation
from cspdet.gradcheck import check_model, tiny_model_config
from cspdet.loss import LossConfig
from cspdet.network import (ModelConfig, Prediction, backward, build_model, compute_loss,
                            forward, train_step)


def batch_targets(cfg, objs_per_image, size=64):
    codec = CodecConfig(r=cfg.r, scale_mode=cfg.scale_mode, offset_enabled=cfg.offset_enabled)
    return stack_targets([encode_targets(o, size, size, codec) for o in objs_per_image])


def test_same_seed_identical_params():
    a, b = build_model(ModelConfig(seed=3)), build_model(ModelConfig(seed=3))
    assert a.params.keys() == b.params.keys()
    assert all(np.array_equal(a.params[k], b.params[k]) for k in a.params)
    c = build_model(ModelConfig(seed=4))
    assert not np.array_equal(a.params["stem.w"], c.params["stem.w"])


def test_center_bias_prior():
    m = build_model(ModelConfig())
    np.testing.assert_allclose(m.params["head.center.b"], np.log(0.01 / 0.99))


def test_default_shapes():
    m = build_model(ModelConfig())
    pred, _ = forward(m, np.zeros((1, 3, 64, 64)))
    assert pred.center.shape == (1, 1, 16, 16)
    assert pred.scale.shape == (1, 1, 16, 16)
    assert pred.offset.shape == (1, 2, 16, 16)
    assert pred.center.min() > 0 and pred.center.max() < 1


@pytest.mark.parametrize("r", [2, 4, 8, 16])
@pytest.mark.parametrize("hw", [(32, 48), (64, 16)])
def test_shape_contract(r, hw):
    m = build_model(ModelConfig(stage_channels=(4, 4, 4, 4), head_channels=4, r=r))
    pred, _ = forward(m, np.zeros((2, 3) + hw))
    assert pred.center.shape == (2, 1, hw[0] // r, hw[1] // r)


def test_height_width_and_offset_free_shapes():
    base = build_model(ModelConfig())
    hw = build_model(ModelConfig(scale_mode="height_width"))
    assert forward(hw, np.zeros((1, 3, 32, 32)))[0].scale.shape == (1, 2, 8, 8)
    no_off = build_model(ModelConfig(offset_enabled=False))
    assert forward(no_off, np.zeros((1, 3, 32, 32)))[0].offset is None
    extra = set(base.params) - set(no_off.params)
    assert extra == {"head.offset.w", "head.offset.b"}
    assert all(base.params[k].shape == no_off.params[k].shape for k in no_off.params)


def test_stages_subset_omits_parameters():
    m = build_model(ModelConfig(stages_fused=(3, 4)))
    assert not any(k.startswith("fuse5") or k.startswith("stage5") for k in m.params)
    full = build_model(ModelConfig())
    assert any(k.startswith("fuse5") for k in full.params)


def test_indivisible_input_rejected():
    m = build_model(ModelConfig())
    with pytest.raises(ValueError, match="pad by 6 rows and 0 columns"):
        forward(m, np.zeros((1, 3, 58, 64)))


def test_fused_features_have_norm_ten():
    m = build_model(ModelConfig())
    x = np.random.default_rng(0).uniform(size=(1, 3, 64, 64))
    _, cache = forward(m, x)
    # the last cached step of each branch holds the normalized output
    for s in m.cfg.stages_fused:
        out = m.branches[s][-1].forward(cache.branches[s][-1][0], m.params)[0]
        np.testing.assert_allclose(np.sqrt((out ** 2).sum(axis=1)), 10.0, atol=1e-9)


def test_dilated_last_stage_keeps_sixteenth_resolution():
    cfg = ModelConfig()
    assert cfg.stage_stride(5) == 16 and cfg.input_multiple == 16
    m = build_model(cfg)
    _, cache = forward(m, np.zeros((1, 3, 64, 64)))
    assert cache.stages[5][-1][0].shape[-1] == 4  # input to last relu
    assert ModelConfig(dilate_last_stage=False).input_multiple == 32


def test_whole_model_gradient_check():
    results = check_model(seed=0)
    assert results and all(r.passed for r in results), [r.line() for r in results]


def test_whole_model_gradient_check_height_width_r8():
    cfg = tiny_model_config(1, scale_mode="height_width", r=8, stages_fused=(2, 4))
    results = check_model(seed=1, cfg=cfg)
    assert all(r.passed for r in results), [r.line() for r in results]


def test_zero_upstream_gradient_gives_zero_parameter_gradients():
    m = build_model(tiny_model_config())
    pred, cache = forward(m, np.random.default_rng(0).uniform(size=(1, 3, 32, 32)))
    zero = Prediction(np.zeros_like(pred.center), np.zeros_like(pred.scale), np.zeros_like(pred.offset))
    grads = backward(m, cache, zero)
    assert all(not g.any() for g in grads.values())


def test_stale_cache_rejected():
    m = build_model(tiny_model_config())
    x = np.zeros((1, 3, 32, 32))
    pred, cache = forward(m, x)
    m.set_params({"stem.b": m.params["stem.b"] + 1})
    with pytest.raises(RuntimeError, match="stale"):
        backward(m, cache, Prediction(pred.center, pred.scale, pred.offset))


def test_lr_zero_leaves_parameters_unchanged():
    m = build_model(tiny_model_config())
    before = {k: v.copy() for k, v in m.params.items()}
    t = batch_targets(m.cfg, [[ObjectAnnotation(10, 12, 14, 5.74)]], 32)
    rep = train_step(m, np.random.default_rng(0).uniform(size=(1, 3, 32, 32)), t, LossConfig(),
                     nx.OptimState(lr=0.0))
    assert rep.total > 0 and rep.positives == 1
    assert all(np.array_equal(before[k], m.params[k]) for k in before)


def _overfit(seed, steps=50):
    cfg = ModelConfig(seed=seed)
    m = build_model(cfg)
    rng = np.random.default_rng(seed)
    x = rng.uniform(size=(1, 3, 64, 64))
    t = batch_targets(cfg, [[ObjectAnnotation(20, 30, 24, 9.84), ObjectAnnotation(45, 34, 30, 12.3)]])
    opt = nx.OptimState(lr=1e-3)
    ema = nx.EmaState.from_params(m.params)
    return [train_step(m, x, t, LossConfig(), opt, ema, 0.9).total for _ in range(steps)]


def test_overfit_single_image_and_determinism():
    a = _overfit(0)
    assert a[-1] < a[0]
    assert a == _overfit(0)


def test_compute_loss_matches_report_identity():
    m = build_model(tiny_model_config())
    pred, _ = forward(m, np.random.default_rng(1).uniform(size=(2, 3, 32, 32)))
    t = batch_targets(m.cfg, [[ObjectAnnotation(10, 12, 14, 5.74)], []], 32)
    rep, _ = compute_loss(pred, t, LossConfig(), True)
    assert rep.positives == 1
    assert abs(rep.total - (0.01 * rep.center + rep.scale + 0.1 * rep.offset)) <= 1e-12


def test_float32_forward_close_to_float64():
    x = np.random.default_rng(2).uniform(size=(1, 3, 32, 32))
    p64, _ = forward(build_model(ModelConfig(dtype="float64")), x)
    p32, _ = forward(build_model(ModelConfig(dtype="float32")), x)
    np.testing.assert_allclose(p32.center, p64.center, atol=1e-4)
    np.testing.assert_allclose(p32.scale, p64.scale, atol=1e-3)


def test_model_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(stages_fused=())
    with pytest.raises(ValueError):
        ModelConfig(stages_fused=(1, 3))
    with pytest.raises(ValueError):
        ModelConfig(r=3)
