import numpy as np
import pytest

from vectorir.features import FeatureVolume, Sample
from vectorir.nn.gradcheck import check_model
from vectorir.nn.model import (
    ModelConfig, count_params, forward, init_params, param_shapes, predict_normalized, prepare_input,
)

TINY = dict(enc=(2, 3, 3, 2), dec=(3, 2, 2), cycles=2, substeps=2)


def random_volume(rng, cfg, H, W):
    return FeatureVolume(rng.uniform(size=(cfg.steps, H, W)), rng.uniform(size=(7, H, W)))


def random_sample(rng, cfg, H, W, n=20):
    loc = np.c_[rng.integers(0, H, n), rng.integers(0, W, n)]
    return Sample(random_volume(rng, cfg, H, W), loc, rng.uniform(size=(n, 8)))


@pytest.mark.parametrize("variant", ["temporal3d", "vanilla2d"])
def test_output_shape_for_many_sizes(variant):
    cfg = ModelConfig(variant=variant, **TINY)
    params = init_params(cfg)
    rng = np.random.default_rng(0)
    for H in range(8, 65, 7):
        W = 72 - H
        beta = forward(cfg, params, random_volume(rng, cfg, H, W))
        assert beta.shape == (8, H, W)


def test_prepare_input_layout():
    rng = np.random.default_rng(1)
    cfg3 = ModelConfig(**TINY)
    vol = random_volume(rng, cfg3, 5, 9)
    x = prepare_input(cfg3, vol)
    assert x.shape == (8, 8, 8, 16)
    assert np.array_equal(x[0, :4, :5, :9], vol.temporal)
    assert np.array_equal(x[3, 2, :5, :9], vol.spatial[2])
    assert np.all(x[:, 4:] == 0) and np.all(x[:, :, 5:] == 0)
    x2 = prepare_input(ModelConfig(variant="vanilla2d", **TINY), vol)
    assert x2.shape == (11, 8, 16)
    with pytest.raises(ValueError, match="channels"):
        prepare_input(ModelConfig(enc=(2,) * 4, dec=(2,) * 3, cycles=3, substeps=2), vol)


def test_zero_weights_give_zero_coefficients():
    cfg = ModelConfig(**TINY)
    params = {k: np.zeros_like(v) for k, v in init_params(cfg).items()}
    beta = forward(cfg, params, random_volume(np.random.default_rng(2), cfg, 9, 10))
    assert np.all(beta == 0)


def test_padding_is_neutral():
    """A map already padded with zeros predicts the same coefficients on its original area."""
    cfg = ModelConfig(**TINY)
    params = init_params(cfg, 3)
    rng = np.random.default_rng(3)
    vol = random_volume(rng, cfg, 11, 13)
    padded = FeatureVolume(np.pad(vol.temporal, ((0, 0), (0, 5), (0, 3))),
                           np.pad(vol.spatial, ((0, 0), (0, 5), (0, 3))))
    np.testing.assert_allclose(forward(cfg, params, padded)[:, :11, :13], forward(cfg, params, vol),
                               atol=1e-13)


@pytest.mark.parametrize("variant", ["temporal3d", "vanilla2d"])
def test_translation_by_eight_tiles(variant):
    """With zero biases an empty canvas stays zero, so shifting the input by a
    multiple of the total pooling factor shifts the output exactly. The canvas
    is wide enough that the receptive field never reaches its border."""
    cfg = ModelConfig(variant=variant, **TINY)
    params = init_params(cfg, 4)
    params = {k: (np.zeros_like(v) if k.endswith(".b") else v) for k, v in params.items()}
    rng = np.random.default_rng(4)
    patch = random_volume(rng, cfg, 6, 5)

    def placed(x0, y0):
        t = np.zeros((cfg.steps, 80, 80))
        s = np.zeros((7, 80, 80))
        t[:, x0:x0 + 6, y0:y0 + 5] = patch.temporal
        s[:, x0:x0 + 6, y0:y0 + 5] = patch.spatial
        return FeatureVolume(t, s)

    a = forward(cfg, params, placed(32, 32))
    b = forward(cfg, params, placed(40, 32))
    assert np.abs(a).max() > 0
    np.testing.assert_allclose(b[:, 8:], a[:, :72], atol=1e-12)


def test_parameter_counts():
    assert count_params(init_params(ModelConfig())) == 292904
    assert count_params(init_params(ModelConfig(variant="vanilla2d"))) == 185048
    cfg = ModelConfig(bias=True, **TINY)
    shapes = param_shapes(cfg)
    assert shapes["head.w"] == (9, 2, 3, 3) and shapes["enc0.w"] == (2, 8, 3, 3, 3)
    assert shapes["dec0.w"] == (3, 2 + 3, 3, 3)


def test_config_header_round_trip_and_errors():
    for cfg in (ModelConfig(), ModelConfig(variant="vanilla2d", bias=True, **TINY)):
        assert ModelConfig.from_header(cfg.to_header()) == cfg
    with pytest.raises(ValueError, match="variant"):
        ModelConfig(variant="lstm")
    with pytest.raises(ValueError, match="widths"):
        ModelConfig(enc=(1, 2, 3))


def test_init_is_seeded():
    cfg = ModelConfig(**TINY)
    a, b, c = init_params(cfg, 1), init_params(cfg, 1), init_params(cfg, 2)
    assert all(np.array_equal(a[k], b[k]) for k in a)
    assert not np.array_equal(a["enc0.w"], c["enc0.w"])


@pytest.mark.parametrize("variant, bias", [("temporal3d", False), ("vanilla2d", True)])
def test_full_model_gradient(variant, bias):
    cfg = ModelConfig(variant=variant, bias=bias, **TINY)
    params = init_params(cfg, 5)
    rng = np.random.default_rng(5)
    for k in params:
        if k.endswith(".b"):
            params[k] = rng.normal(scale=0.1, size=params[k].shape)
    sample = random_sample(rng, cfg, 8, 8)
    batch = [(sample, rng.uniform(size=20))]
    rep = check_model(cfg, params, batch, lam=1e-3, h=1e-3)
    assert rep.checked > 0.8 * count_params(params)
    assert rep.max_rel_error < 1e-4, rep.worst


def test_predictions_are_finite_and_linear_in_features():
    cfg = ModelConfig(**TINY)
    params = init_params(cfg, 6)
    rng = np.random.default_rng(6)
    s = random_sample(rng, cfg, 9, 9)
    p = predict_normalized(cfg, params, s)
    doubled = Sample(s.volume, s.loc, 2 * s.fvec)
    np.testing.assert_allclose(predict_normalized(cfg, params, doubled), 2 * p, rtol=1e-12)
    bad = {k: v.copy() for k, v in params.items()}
    bad["head.b"][0] = np.inf
    with pytest.raises(FloatingPointError):
        predict_normalized(cfg, bad, s)
