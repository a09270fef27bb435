import numpy as np
import pytest
from PIL import Image

from orewatch_errors import DimensionError, TrainingError
from orewatch_illumination import (AtmosphereSamplerParams, relight_values,
                                   sample_shadow_factors)
from orewatch_nn import Dense, ReLU, cosine_sa_loss
from orewatch_sae import (AutoencoderSpec, SaeTrainConfig, active_fractions,
                          check_active, code_distance_ratio, encode,
                          encode_pixels, finetune_relit, load_encoder,
                          pretrain_layerwise, render_feature, save_encoder)
from orewatch_spectral import HyperspectralCube, WavelengthGrid
from orewatch_synth import generate_scene

QUICK = SaeTrainConfig(
    pretrain_epochs=5,
    finetune_samples=30,
    finetune_epochs=4,
    batch_size=16,
    early_stop_patience=100,
    report_every=0,
)


@pytest.fixture
def small_spec(small_grid):
    return AutoencoderSpec(encoder_sizes=(8, 4), input_bands=len(small_grid))


@pytest.fixture
def pretrained(small_cube, small_spec):
    return pretrain_layerwise(small_cube, small_spec, QUICK)


def test_spec_shapes():
    spec = AutoencoderSpec()
    assert spec.code_dim == 30
    assert spec.decoder_sizes == (50, 100, 220)
    assert spec.layer_inputs() == (220, 100, 50)


def test_constant_cube_reconstructs(small_grid):
    values = np.linspace(0.2, 0.6, len(small_grid))
    cube = HyperspectralCube(np.tile(values, (4, 6, 1)), small_grid)
    spec = AutoencoderSpec(encoder_sizes=(5,), input_bands=len(small_grid))
    config = SaeTrainConfig(pretrain_epochs=100, batch_size=64, report_every=0)
    state = pretrain_layerwise(cube, spec, config)
    losses = state.pretrain_history[0]
    assert len(losses) == 100
    assert losses[-1] < 1e-2
    assert losses[-1] < losses[0]


def test_pretrain_layout(pretrained, small_spec):
    kinds = [layer.kind for layer in pretrained.encoder.layers]
    assert kinds == ["dense", "relu", "dense"]
    assert pretrained.decoder.layers[0].dims() == (4, 8)
    assert pretrained.decoder.layers[-1].dims() == (8, 40)
    assert len(pretrained.pretrain_history) == 2


def test_pretrain_is_deterministic(small_cube, small_spec):
    first = pretrain_layerwise(small_cube, small_spec, QUICK)
    second = pretrain_layerwise(small_cube, small_spec, QUICK)
    for a, b in zip(first.autoencoder().parameters(), second.autoencoder().parameters()):
        np.testing.assert_array_equal(a, b)


def test_pretrain_band_mismatch(small_cube):
    with pytest.raises(DimensionError):
        pretrain_layerwise(small_cube, AutoencoderSpec(encoder_sizes=(4,), input_bands=220), QUICK)


def test_finetune_zero_epochs_keeps_parameters(pretrained, small_cube):
    config = SaeTrainConfig(finetune_epochs=0, report_every=0)
    tuned = finetune_relit(pretrained, small_cube, AtmosphereSamplerParams(), config)
    for a, b in zip(pretrained.autoencoder().parameters(), tuned.autoencoder().parameters()):
        np.testing.assert_array_equal(a, b)
    assert tuned.finetune_history == []


def test_finetune_leaves_input_state_alone(pretrained, small_cube):
    before = [p.copy() for p in pretrained.autoencoder().parameters()]
    tuned = finetune_relit(pretrained, small_cube, AtmosphereSamplerParams(), QUICK)
    for a, b in zip(before, pretrained.autoencoder().parameters()):
        np.testing.assert_array_equal(a, b)
    assert len(tuned.finetune_history) == 4
    assert tuned.metadata["finetune_epochs"] == 4


def test_finetune_is_deterministic(pretrained, small_cube):
    first = finetune_relit(pretrained, small_cube, AtmosphereSamplerParams(), QUICK)
    second = finetune_relit(pretrained, small_cube, AtmosphereSamplerParams(), QUICK)
    assert first.finetune_history == second.finetune_history


def test_finetune_stops_early(pretrained, small_cube):
    config = SaeTrainConfig(
        finetune_samples=20, finetune_epochs=50, batch_size=8,
        early_stop_patience=1, early_stop_delta=10.0, report_every=0,
    )
    tuned = finetune_relit(pretrained, small_cube, AtmosphereSamplerParams(), config)
    assert len(tuned.finetune_history) == 2


def test_identical_pixels_identical_codes(pretrained, small_grid):
    values = np.linspace(0.1, 0.5, len(small_grid))
    cube = HyperspectralCube(np.tile(values, (3, 5, 1)), small_grid)
    features = encode(pretrained, cube, workers=2)
    assert features.data.shape == (3, 5, 4)
    assert np.all(features.data == features.data[0, 0])


def test_chunked_encoding_matches_single_pass(pretrained, small_cube):
    pixels = small_cube.pixels()
    whole = encode_pixels(pretrained, pixels, chunk=len(pixels))
    chunked = encode_pixels(pretrained, pixels, chunk=5, workers=3)
    np.testing.assert_array_equal(whole, chunked)


def test_render_constant_feature(tmp_path):
    features = HyperspectralCube(np.full((4, 5, 2), 0.7), WavelengthGrid([1.0, 2.0]))
    path = render_feature(features, 1, str(tmp_path / "f.png"))
    image = np.asarray(Image.open(path))
    assert np.all(image == 128)


def test_render_row_gradient(tmp_path):
    data = np.zeros((6, 4, 1))
    data[:, :, 0] = np.arange(6)[:, None]
    features = HyperspectralCube(data, WavelengthGrid([1.0]))
    image = np.asarray(Image.open(render_feature(features, 0, str(tmp_path / "g.png"))))
    assert image[0, 0] == 0 and image[-1, 0] == 255
    assert np.all(np.diff(image[:, 0].astype(int)) > 0)
    assert np.all(image == image[:, :1])


def test_render_bad_index(tmp_path):
    features = HyperspectralCube(np.zeros((2, 2, 2)), WavelengthGrid([1.0, 2.0]))
    with pytest.raises(DimensionError):
        render_feature(features, 2, str(tmp_path / "x.png"))


def test_save_and_load(tmp_path, pretrained, small_cube):
    stem = str(tmp_path / "encoder")
    bin_path, meta_path = save_encoder(pretrained, stem)
    loaded = load_encoder(stem)
    assert loaded.spec == pretrained.spec
    pixels = small_cube.pixels()
    np.testing.assert_array_equal(
        encode_pixels(loaded, pixels), encode_pixels(pretrained, pixels)
    )
    assert loaded.metadata["seed"] == "0"


def test_code_distance_ratio_shapes(pretrained, small_cube, rng):
    sunlit = small_cube.pixels()[:12].astype(np.float64)
    relit = relight_values(sunlit, 0.0, np.full(sunlit.shape, 0.3))
    labels = np.repeat([0, 1, 2], 4)
    ratio, pair, between = code_distance_ratio(pretrained, sunlit, relit, labels)
    assert pair.shape == (12,)
    assert between.shape == (3 * 16,)
    assert ratio >= 0.0


class TestConstantShadowFactor:
    """A flat sky/sun ratio makes relighting a pure scale of the input."""

    params = AtmosphereSamplerParams(blue_bias_range=(0.0, 0.0), sky_ratio_range=(0.25, 0.25), sun_jitter=0.0)

    def test_relit_input_is_scaled_input(self, small_cube, small_grid):
        k = sample_shadow_factors(self.params, small_grid, 4, np.random.default_rng(0))
        np.testing.assert_allclose(k, 0.2)
        pixels = small_cube.pixels()[:4].astype(np.float64)
        np.testing.assert_allclose(relight_values(pixels, 0.0, k), 0.2 * pixels)

    def test_loss_ignores_output_scale(self, pretrained, small_cube):
        pixels = small_cube.pixels().astype(np.float64)
        out = pretrained.autoencoder().predict(pixels)
        assert cosine_sa_loss(3.0 * out, pixels)[0] == pytest.approx(cosine_sa_loss(out, pixels)[0], abs=1e-12)

    def test_bias_free_first_layer_is_linear(self, pretrained, small_cube):
        layer = pretrained.encoder.layers[0]
        layer.bias[...] = 0.0
        pixels = small_cube.pixels().astype(np.float64)
        plain, _ = layer.forward(pixels)
        scaled, _ = layer.forward(0.2 * pixels)
        np.testing.assert_allclose(scaled, 0.2 * plain, rtol=1e-9, atol=1e-12)


def test_pretrained_codes_tell_scene_pixels_apart(tiny_scene_spec):
    cube, _, _ = generate_scene(tiny_scene_spec)
    spec = AutoencoderSpec(encoder_sizes=(8, 4), input_bands=cube.bands)
    config = SaeTrainConfig(pretrain_epochs=2, batch_size=64, report_every=0)
    state = pretrain_layerwise(cube, spec, config)
    pixels = cube.pixels()
    codes = encode_pixels(state, pixels)
    assert codes.std(axis=0).max() > 1e-6
    assert len(np.unique(codes.round(6), axis=0)) >= 3
    assert min(active_fractions(state.encoder.layers, pixels)) > 0.0


def test_pretraining_loss_never_climbs(tiny_scene_spec):
    cube, _, _ = generate_scene(tiny_scene_spec)
    spec = AutoencoderSpec(encoder_sizes=(8, 4), input_bands=cube.bands)
    config = SaeTrainConfig(pretrain_epochs=15, batch_size=64, report_every=0)
    state = pretrain_layerwise(cube, spec, config)
    for losses in state.pretrain_history:
        losses = np.asarray(losses)
        assert np.all(np.diff(losses) <= 0.05 * losses[0])


class TestDeadCodes:
    @staticmethod
    def _silent_layers():
        dense = Dense(3, 2)
        dense.weight[...] = -1.0
        dense.bias[...] = -1.0
        return [dense, ReLU()]

    def test_silent_relu_is_rejected(self):
        inputs = np.random.default_rng(0).uniform(0.1, 0.9, size=(10, 3))
        assert active_fractions(self._silent_layers(), inputs) == [0.0]
        with pytest.raises(TrainingError):
            check_active(self._silent_layers(), inputs, "pretraining layer 1")

    def test_identical_inputs_are_accepted(self):
        check_active(self._silent_layers(), np.full((5, 3), 0.4), "pretraining layer 1")
