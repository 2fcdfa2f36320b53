import numpy as np
import pytest

from ssgp.config import ConfigError, parse_text
from ssgp.gradcheck import grad_check
from ssgp.network import ModelConfig, build_model, count_flops, count_params, guidenet_like, toy_config
from ssgp.sparse import MaskedFeature
from ssgp.tensor import FlopCounter, ShapeError, Tensor


def inputs(h, w, c=2, density=0.05, seed=0, dtype=np.float32):
    r = np.random.default_rng(seed)
    image = Tensor(r.random((3, h, w)).astype(dtype))
    mask = (r.random((1, h, w)) < density).astype(dtype)
    sparse = MaskedFeature(Tensor((r.standard_normal((c, h, w)) * mask).astype(dtype)), Tensor(mask))
    return image, sparse


@pytest.mark.parametrize("bad", [
    dict(levels=0, channels=[8]),
    dict(levels=3, channels=[8, 12, 16]),
    dict(levels=3, channels=[8, 12, 0, 24]),
    dict(kernel=4),
    dict(guidance="sideways"),
    dict(out_channels=0),
    dict(refine_iterations=-1),
    dict(affinity_init="random"),
    dict(guidance="none", refine=True),
])
def test_config_validation(bad):
    base = dict(levels=3, channels=[8, 12, 16, 24])
    base.update(bad)
    with pytest.raises(ConfigError):
        ModelConfig(**base)


def test_config_text_round_trip():
    cfg = toy_config(guidance="dec", out_channels=4, sparse_aware=False)
    assert ModelConfig.from_dict(parse_text(cfg.to_text())) == cfg


@pytest.mark.parametrize("h,w,c", [(32, 32, 2), (37, 45, 1), (16, 24, 4)])
def test_forward_shapes(h, w, c):
    model = build_model(toy_config(out_channels=c), seed=1)
    out = model(*inputs(h, w, c))
    assert out.dense.shape == (c, h, w)
    assert out.pre_refine.shape == (c, h, w)
    assert out.final_mask.shape == (1, h, w)
    assert out.dense.data.dtype == np.float32


def test_forward_rejects_misaligned_inputs():
    model = build_model(toy_config())
    image, sparse = inputs(16, 16)
    with pytest.raises(ShapeError):
        model(Tensor(np.zeros((3, 16, 20), np.float32)), sparse)
    with pytest.raises(ShapeError):
        model(image, MaskedFeature(Tensor(np.zeros((1, 16, 16))), Tensor(np.ones((1, 16, 16)))))


def test_same_seed_same_weights_and_outputs():
    a, b = build_model(toy_config(), seed=3), build_model(toy_config(), seed=3)
    for pa, pb in zip(a.params, b.params):
        np.testing.assert_array_equal(pa.data, pb.data)
    x = inputs(32, 32)
    np.testing.assert_array_equal(a(*x).dense.data, b(*x).dense.data)
    c = build_model(toy_config(), seed=4)
    assert any(not np.array_equal(pa.data, pc.data) for pa, pc in zip(a.params, c.params))


def test_parameter_ordering_and_ratios():
    flat = count_params(build_model(ModelConfig()))
    full = count_params(build_model(ModelConfig(flat_affinity=False)))
    unguided = count_params(build_model(ModelConfig(guidance="none", refine=False)))
    no_refine = count_params(build_model(ModelConfig(refine=False)))
    assert unguided < flat < full
    assert (full - flat) / flat > 0.5
    assert (flat - no_refine) / no_refine < 0.02
    assert count_params(build_model(guidenet_like())) < full


def test_flop_ordering_and_ratio():
    flat = count_flops(build_model(ModelConfig()), 352, 1216)
    full = count_flops(build_model(ModelConfig(flat_affinity=False)), 352, 1216)
    assert (full - flat) / flat > 0.5


@pytest.mark.parametrize("cfg", [
    toy_config(),
    toy_config(flat_affinity=False),
    toy_config(guidance="enc", refine=False),
    toy_config(guidance="none", refine=False),
    toy_config(sparse_aware=False),
])
def test_analytic_flops_match_instrumented_forward(cfg):
    model = build_model(cfg)
    with FlopCounter() as fc:
        model(*inputs(32, 32))
    assert fc.total == count_flops(model, 32, 32)


def test_flops_scale_with_area():
    model = build_model(toy_config())
    small, big = count_flops(model, 64, 64), count_flops(model, 128, 128)
    assert big / small == pytest.approx(4.0, rel=0.02)
    # padded to the next multiple of 2**levels
    assert count_flops(model, 57, 60) == small
    with pytest.raises(ValueError):
        count_flops(model, 0, 5)


def test_zero_affinity_model_ignores_image():
    model = build_model(toy_config(affinity_init="center", refine=False), seed=2)
    image, sparse = inputs(32, 32, density=0.3)
    a = model(image, sparse).dense.data
    other = Tensor(np.random.default_rng(9).random((3, 32, 32)).astype(np.float32))
    np.testing.assert_array_equal(model(other, sparse).dense.data, a)


def test_zero_refine_head_is_identity():
    model = build_model(toy_config(), seed=5)
    model.layers["refine.head"].weight.data[:] = 0
    model.layers["refine.head"].bias.data[:] = 0
    out = model(*inputs(32, 32, density=0.2))
    np.testing.assert_array_equal(out.dense.data, out.pre_refine.data)


def test_final_mask_is_dense_at_five_percent():
    model = build_model(toy_config())
    out = model(*inputs(64, 64, density=0.05, seed=7))
    assert out.final_mask.data.mean() == 1.0


def test_mask_free_variant_ignores_mask():
    model = build_model(toy_config(sparse_aware=False), seed=6)
    image, sparse = inputs(32, 32, density=0.3)
    flipped = MaskedFeature(sparse.features, Tensor(1 - sparse.mask.data))
    np.testing.assert_array_equal(model(image, sparse).dense.data, model(image, flipped).dense.data)


@pytest.mark.slow
def test_end_to_end_gradient_16x16():
    model = build_model(toy_config(refine_iterations=2), seed=0)
    image, sparse = inputs(16, 16, density=0.3, dtype=np.float64)
    names = ["rgb.pre.weight", "rgb.down1.conv3.weight", "aff.enc1.head.weight",
             "aff.dec0.head.bias", "sp.pre.weight", "sp.down2.weight", "sp.up1.merge.weight",
             "sp.head3.bias", "refine.head.weight"]
    params = [model.named_params()[n] for n in names]
    # small perturbations of the zero-initialized heads keep the check generic
    r = np.random.default_rng(1)
    for p in params:
        if not p.data.any() or np.all(p.data == p.data.flat[0]):
            p.data = (p.data + 0.05 * r.standard_normal(p.data.shape)).astype(p.data.dtype)
    report = grad_check(lambda *_: model(image, sparse).dense, params, tolerance=1e-3, h=1e-4,
                        max_entries=12, seed=2)
    assert report.passed, report.per_input
