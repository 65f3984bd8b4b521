import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from convcut import ops
from convcut.data import SyntheticSpec, generate_synthetic
from convcut.errors import ConfigError, DimensionError, LayerLookupError
from convcut.model import ConvCutConfig, build_model, grad_cam, profile_config
from convcut.rng import make_rng
from convcut.tensor import Tensor, no_grad
from convcut.train import AdamState, TrainConfig, fit, train_step


def tiny(**kw):
    kw.setdefault("num_classes", 3)
    return profile_config("tiny", **kw)


def images(n=2, size=64, seed=0):
    return Tensor(np.random.default_rng(seed).random((n, size, size, 3)))


def test_base_profile_shape_pipeline():
    model = build_model(ConvCutConfig(), make_rng(0))
    trace = []
    out = model.forward(images(1, 224), trace=trace)
    shapes = dict(trace)
    assert shapes["input"] == (1, 224, 224, 3)
    assert shapes["stem"] == (1, 56, 56, 128)
    assert shapes["stages.0"] == (1, 56, 56, 128)
    assert shapes["stages.1"] == (1, 28, 28, 256)
    assert shapes["det.convs.0"] == (1, 7, 7, 256)
    assert shapes["det.convs.1"] == (1, 3, 3, 256)
    assert shapes["det.pool"] == (1, 256)
    assert shapes["det.tokens"] == (1, 16, 16)
    assert shapes["det.attention"] == (1, 16, 16)
    assert out.shape == (1, 7)


@pytest.mark.slow
def test_three_retained_stages_shapes():
    cfg = ConvCutConfig(retained_stages=3, stage_depths=(1, 1, 1, 1))
    trace = []
    build_model(cfg, make_rng(0)).forward(images(1, 224), trace=trace)
    shapes = dict(trace)
    assert shapes["stages.2"] == (1, 14, 14, 512)
    assert shapes["det.convs.0"] == (1, 3, 3, 512)
    assert shapes["det.convs.1"] == (1, 1, 1, 512)


def test_tiny_profile_shapes():
    trace = []
    out = build_model(tiny(), make_rng(0)).forward(images(), trace=trace)
    shapes = dict(trace)
    assert shapes["stages.1"] == (2, 8, 8, 32)
    assert shapes["det.convs.1"] == (2, 1, 1, 32)
    assert out.shape == (2, 3)


def test_same_seed_same_parameters():
    a = build_model(tiny(), make_rng(42)).state()
    b = build_model(tiny(), make_rng(42)).state()
    assert list(a) == list(b)
    assert all(a[n].data.tobytes() == b[n].data.tobytes() for n in a)
    c = build_model(tiny(), make_rng(43)).state()
    assert any(a[n].data.tobytes() != c[n].data.tobytes() for n in a)


def test_initialization_rules():
    model = build_model(tiny(), make_rng(0))
    for name, p in model.named_parameters():
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "bias" or leaf == "beta":
            assert np.all(p.data == 0), name
        elif leaf == "gamma":
            assert np.all(p.data == 1), name
        elif leaf == "layer_scale":
            np.testing.assert_array_equal(p.data, np.float32(1e-6))
        else:
            assert np.abs(p.data).max() <= 0.04 + 1e-7, name


def test_eval_forward_is_pure():
    model = build_model(tiny(), make_rng(0))
    x = images()
    assert model(x).data.tobytes() == model(x).data.tobytes()


def test_baseline_is_head_on_spatial_mean():
    model = build_model(tiny(enable_detail_extraction=False, enable_attention=False), make_rng(0))
    x = images()
    backbone = model.activation(x, model.default_cam_layer())
    expected = model.head(ops.spatial_mean(backbone))
    np.testing.assert_array_equal(model(x).data, expected.data)
    assert model.det is None and model.attention is None


def test_attention_without_det_uses_pooled_tokens():
    model = build_model(tiny(enable_detail_extraction=False), make_rng(0))
    trace = []
    model(images(), trace=trace)
    assert dict(trace)["attention.tokens"] == (2, 4, 8)


def test_config_errors_list_every_violation():
    cfg = ConvCutConfig(retained_stages=5, num_classes=1, dropout_p=1.5, det_conv_layers=0)
    with pytest.raises(ConfigError) as info:
        build_model(cfg, make_rng(0))
    msg = str(info.value)
    for key in ("retained_stages", "num_classes", "dropout_p", "det_conv_layers"):
        assert key in msg
    with pytest.raises(ConfigError):
        build_model(tiny(token_dim=5), make_rng(0))
    with pytest.raises(ConfigError):
        profile_config("huge")


def test_dimension_error_names_layer():
    model = build_model(tiny(), make_rng(0))
    with pytest.raises(DimensionError, match="stem"):
        model(images(1, 62))
    with pytest.raises(DimensionError, match="det.convs"):
        model(images(1, 16))


def test_parameter_counts_distinct_across_ablation_grid():
    counts = {}
    for att in (False, True):
        for det in (False, True):
            m = build_model(tiny(enable_attention=att, enable_detail_extraction=det), make_rng(0))
            counts[(att, det)] = m.num_parameters()
            assert m.num_parameters() == sum(p.size for p in m.parameters())
    assert len(set(counts.values())) == 4


def test_tiny_parameter_count_exact():
    # stem 4*4*3*16+16 + LN 32; stage0 block: 49*16 + 32 + 16*64+64 + 64*16+16 + 16
    # downsample 32 + 2*2*16*32+32; stage1 block with C=32; det and head.
    def block(c):
        return 49 * c + 2 * c + (c * 4 * c + 4 * c) + (4 * c * c + c) + c

    stem = 4 * 4 * 3 * 16 + 16 + 32
    down = 32 + 2 * 2 * 16 * 32 + 32
    det = 64 + (16 * 32 + 32 * 32 + 32) + (4 * 32 + 32 * 32 + 32) + 3 * 8 * 8
    head = 32 * 2 + 2
    model = build_model(profile_config("tiny", num_classes=2), make_rng(0))
    assert model.num_parameters() == stem + block(16) + down + block(32) + det + head == 18978


def test_freeze_excludes_exactly_backbone():
    model = build_model(tiny(), make_rng(0))
    model.set_backbone_frozen(True)
    names = set(model.state())
    assert model.frozen == set(model.backbone_names())
    assert set(model.trainable_parameters()) == names - model.frozen
    assert all(n.startswith(("det.", "head.")) for n in model.trainable_parameters())


def test_freeze_toggle_is_idempotent():
    model = build_model(tiny(freeze_backbone=True), make_rng(0))
    first = set(model.frozen)
    model.set_backbone_frozen(False)
    assert model.frozen == set()
    model.set_backbone_frozen(True)
    assert model.frozen == first


def _data():
    ds = generate_synthetic(SyntheticSpec(num_classes=2, samples_per_class=8, seed=3))
    return ds.images, ds.labels


def test_frozen_step_leaves_backbone_unchanged():
    model = build_model(tiny(num_classes=2, freeze_backbone=True), make_rng(0))
    before = {n: p.data.copy() for n, p in model.named_parameters()}
    x, y = _data()
    state = AdamState()
    for _ in range(3):
        train_step(model, x, y, TrainConfig(), state, make_rng(1))
    after = model.state()
    for n in model.backbone_names():
        assert after[n].data.tobytes() == before[n].tobytes(), n
    assert any(not np.array_equal(after[n].data, before[n]) for n in model.trainable_parameters())


def test_unfrozen_step_changes_backbone():
    model = build_model(tiny(num_classes=2), make_rng(0))
    before = {n: p.data.copy() for n, p in model.named_parameters()}
    x, y = _data()
    train_step(model, x, y, TrainConfig(), AdamState(), make_rng(1))
    after = model.state()
    assert any(not np.array_equal(after[n].data, before[n]) for n in model.backbone_names())


@pytest.mark.slow
def test_frozen_training_reduces_loss_over_100_steps():
    ds = generate_synthetic(SyntheticSpec(num_classes=2, samples_per_class=16, seed=5))
    model = build_model(tiny(num_classes=2, freeze_backbone=True), make_rng(0))
    before = {n: model.state()[n].data.copy() for n in model.backbone_names()}
    hist = fit(model, ds, TrainConfig(epochs=50), make_rng(1), max_steps=100)
    assert sum(h.steps for h in hist) == 100
    assert hist[-1].loss < hist[0].loss
    after = model.state()
    assert all(after[n].data.tobytes() == before[n].tobytes() for n in before)


# -- Grad-CAM ----------------------------------------------------------------


def test_grad_cam_zero_head_gives_zero_map():
    model = build_model(tiny(), make_rng(0))
    model.head.weight.data[...] = 0
    cam = grad_cam(model, images(1), 1)
    assert cam.shape == (8, 8)
    assert np.all(cam == 0)


def test_grad_cam_default_layer_shape_on_base_profile():
    model = build_model(ConvCutConfig(stage_depths=(1, 1, 1, 1)), make_rng(0))
    assert grad_cam(model, images(1, 224), 0).shape == (28, 28)


def test_grad_cam_other_layer_and_errors():
    model = build_model(tiny(), make_rng(0))
    assert grad_cam(model, images(1), 0, "stem").shape == (16, 16)
    with pytest.raises(LayerLookupError):
        grad_cam(model, images(1), 0, "det.pool")
    with pytest.raises(ConfigError):
        grad_cam(model, images(1), 3)
    with pytest.raises(DimensionError):
        grad_cam(model, images(2), 0)


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 1000), st.integers(0, 2), st.sampled_from(["stem", "stages.0", "stages.1"]))
def test_grad_cam_range(seed, cls, layer):
    model = build_model(tiny(), make_rng(seed))
    for _, p in model.named_parameters():
        p.data += np.random.default_rng(seed).standard_normal(p.shape).astype(np.float32) * 0.1
    cam = grad_cam(model, images(1, seed=seed), cls, layer)
    assert cam.dtype == np.float32
    assert np.all(cam >= 0) and np.all(cam <= 1)
    assert cam.max() == 1.0 or cam.max() == 0.0


def test_grad_cam_channel_weights_match_finite_differences():
    model = build_model(tiny(), make_rng(0))
    r = np.random.default_rng(0)
    for _, p in model.named_parameters():
        p.data += r.standard_normal(p.shape).astype(np.float32) * 0.2
    x = images(1)
    layer = "stages.1"
    act = model.activation(x, layer).data.astype(np.float64)
    cls = 2
    h = 1e-3
    c = act.shape[-1]
    alpha_fd = np.zeros(c)
    # alpha_c is the spatial mean of d logit / dA_c; perturbing a whole channel
    # plane by h moves the logit by h * sum(grad) = h * hw * alpha_c.
    with no_grad():
        for ch in range(c):
            hi, lo = act.copy(), act.copy()
            hi[..., ch] += h
            lo[..., ch] -= h
            f_hi = model.forward(Tensor(hi), start=layer).data[0, cls]
            f_lo = model.forward(Tensor(lo), start=layer).data[0, cls]
            alpha_fd[ch] = (float(f_hi) - float(f_lo)) / (2 * h) / (act.shape[1] * act.shape[2])
    expected = np.maximum((act[0] * alpha_fd).sum(-1), 0)
    expected = expected / expected.max()
    np.testing.assert_allclose(grad_cam(model, x, cls, layer), expected, atol=2e-2)
