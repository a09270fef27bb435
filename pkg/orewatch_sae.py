"""Relit spectral-angle stacked autoencoder.

Training runs in two phases:

1. Greedy layer-wise pretraining. Each encoder layer is trained as a shallow
   autoencoder that reconstructs the previous layer's codes under the
   cosine spectral-angle loss; its mirror layer becomes the matching decoder
   layer.
2. Relit fine-tuning. The whole network learns to map a spectrum relit in
   full shadow under a sampled atmosphere back to its sunlit original.

The deepest encoder layer is the illumination-invariant code.
"""

from __future__ import annotations

import copy
import os.path
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Tuple

import numpy as np

import orewatch_artifacts
from orewatch_errors import (DimensionError, DivergenceError, OrewatchError,
                             TrainingError)
from orewatch_illumination import (AtmosphereSamplerParams,
                                   relight_values, sample_shadow_factors)
from orewatch_nn import (INFER, Dense, OptimizerState, ReLU, Sequential,
                         cosine_sa_loss, read_network, sgd_step,
                         write_network)
from orewatch_spectral import (HyperspectralCube, index_grid, parse_float_list,
                               read_header, write_header)

# Added to vector norms during training so an all-zero ReLU output cannot stop a run
TRAIN_NORM_EPS = 1e-12

# Encoder ReLU biases start so each unit fires on the brightest three quarters
# of the training pixels, plus this margin
ACTIVE_QUANTILE = 0.25
ACTIVE_MARGIN = 0.01
# Rows used to place those biases
BIAS_SAMPLE_ROWS = 4096


@dataclass(frozen=True)
class AutoencoderSpec:
    encoder_sizes: tuple = (100, 50, 30)
    input_bands: int = 220

    def __post_init__(self):
        if not self.encoder_sizes or min(self.encoder_sizes) < 1 or self.input_bands < 1:
            raise DimensionError(f"invalid autoencoder sizes {self.encoder_sizes}/{self.input_bands}")

    @property
    def decoder_sizes(self):
        return tuple(reversed(self.encoder_sizes[:-1])) + (self.input_bands,)

    @property
    def code_dim(self):
        return self.encoder_sizes[-1]

    def layer_inputs(self):
        return (self.input_bands,) + tuple(self.encoder_sizes[:-1])


@dataclass(frozen=True)
class SaeTrainConfig:
    """Autoencoder training settings.

    Attributes:
        pretrain_epochs: Epochs per greedy layer
        finetune_samples: Spectra drawn from the cube for relit fine-tuning
        finetune_epochs: Upper bound on fine-tuning epochs
        atmospheres_per_sample: Relit copies of each sample per epoch
        learning_rate, momentum, batch_size: SGD settings
        early_stop_patience: Epochs without an improvement of early_stop_delta before stopping
        norm_threshold: Pixels with a smaller norm are never used for training
        seed: Seed for sampling, shuffling and initialisation
        report_every: Print a progress line every N epochs (0 for silence)
    """

    pretrain_epochs: int = 1000
    finetune_samples: int = 5000
    finetune_epochs: int = 500
    atmospheres_per_sample: int = 1
    learning_rate: float = 0.01
    momentum: float = 0.9
    batch_size: int = 256
    early_stop_patience: int = 20
    early_stop_delta: float = 1e-5
    norm_threshold: float = 1e-6
    seed: int = 0
    report_every: int = 50

    def __post_init__(self):
        counts = (self.finetune_samples, self.atmospheres_per_sample, self.batch_size)
        if min(counts) < 1 or self.pretrain_epochs < 0 or self.finetune_epochs < 0:
            raise DimensionError("autoencoder training counts must be >= 1 (epochs >= 0)")


@dataclass
class EncoderState:
    """Trained encoder/decoder plus how they were trained."""

    spec: AutoencoderSpec
    encoder: Sequential
    decoder: Sequential
    metadata: dict = field(default_factory=dict)
    pretrain_history: list = field(default_factory=list)
    finetune_history: list = field(default_factory=list)

    def autoencoder(self):
        return Sequential(self.encoder.layers + self.decoder.layers)

    def layer_shapes(self):
        return [
            tuple(array.shape)
            for layer in self.encoder.layers + self.decoder.layers
            for array in layer.params().values()
        ]


def _training_pixels(cube, threshold):
    pixels = cube.pixels().astype(np.float64)
    keep = np.linalg.norm(pixels, axis=1) > threshold
    return pixels[keep]


def active_fractions(layers, inputs):
    """Fraction of positive outputs of each ReLU in `layers` over `inputs`."""
    fractions = []
    x = np.asarray(inputs)
    for layer in layers:
        x, _ = layer.forward(x, INFER)
        if layer.kind == "relu":
            fractions.append(float(np.mean(x > 0)))
    return fractions


def check_active(layers, inputs, where):
    """Raise TrainingError when some ReLU in `layers` is silent on every input.

    Identical inputs have nothing to tell apart and are never rejected.
    """
    inputs = np.asarray(inputs)
    if inputs.shape[0] == 0 or np.ptp(inputs, axis=0).max() == 0:
        return
    for position, fraction in enumerate(active_fractions(layers, inputs), start=1):
        if fraction == 0.0:
            raise TrainingError(f"{where}: ReLU {position} is inactive on every pixel, so every code is the same")


def _place_biases(dense, inputs):
    step = max(1, inputs.shape[0] // BIAS_SAMPLE_ROWS)
    pre = inputs[::step] @ dense.weight.astype(np.float64).T
    dense.bias[...] = ACTIVE_MARGIN - np.quantile(pre, ACTIVE_QUANTILE, axis=0)


def _run_epoch(network, inputs, targets, optimizer, batch_size, rng):
    """One shuffled pass of minibatch SGD; returns the sample-weighted mean loss."""
    order = rng.permutation(inputs.shape[0])
    params = network.parameters()
    total = 0.0
    for start in range(0, order.size, batch_size):
        batch = order[start:start + batch_size]
        out, caches = network.forward(inputs[batch])
        loss, grad = cosine_sa_loss(out, targets[batch], eps=TRAIN_NORM_EPS)
        _, grads = network.backward(grad, caches)
        sgd_step(params, Sequential.flatten_grads(grads), optimizer)
        total += loss * batch.size
    return total / order.size


def pretrain_layerwise(
    cube: HyperspectralCube, spec: AutoencoderSpec, config: SaeTrainConfig
) -> EncoderState:
    """Greedy layer-wise cosine spectral-angle pretraining.

    Args:
        cube: HyperspectralCube with spec.input_bands bands
        spec: AutoencoderSpec
        config: SaeTrainConfig

    Returns:
        EncoderState holding the stacked encoder and mirrored decoder
    """
    if cube.bands != spec.input_bands:
        raise DimensionError(f"cube has {cube.bands} bands, autoencoder expects {spec.input_bands}")

    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 1]))
    inputs = _training_pixels(cube, config.norm_threshold)
    if inputs.shape[0] == 0:
        raise OrewatchError("no pixel above the norm threshold to pretrain on")

    depth = len(spec.encoder_sizes)
    encoder_layers, decoder_layers, history = [], [], []
    for index, (n_in, n_code) in enumerate(zip(spec.layer_inputs(), spec.encoder_sizes)):
        last = index == depth - 1
        encode = [Dense(n_in, n_code, rng=rng, name=f"enc{index + 1}")]
        if not last:
            encode.append(ReLU(name=f"enc{index + 1}_relu"))
            _place_biases(encode[0], inputs)
        decode = [Dense(n_code, n_in, rng=rng, name=f"dec{index + 1}")]
        if index > 0:
            decode.append(ReLU(name=f"dec{index + 1}_relu"))

        shallow = Sequential(encode + decode)
        optimizer = OptimizerState(config.learning_rate, config.momentum)
        losses = []
        for epoch in range(config.pretrain_epochs):
            loss = _run_epoch(shallow, inputs, inputs, optimizer, config.batch_size, rng)
            if not np.isfinite(loss):
                raise DivergenceError(f"pretraining layer {index + 1}", epoch, loss)
            losses.append(loss)
            if config.report_every and (epoch + 1) % config.report_every == 0:
                print(f"  layer {index + 1}: epoch {epoch + 1}/{config.pretrain_epochs} loss {loss:.6f}")
        history.append(losses)
        check_active(encode, inputs, f"pretraining layer {index + 1}")

        encoder_layers += encode
        decoder_layers = decode + decoder_layers
        inputs = Sequential(encode).predict(inputs)

    return EncoderState(
        spec=spec,
        encoder=Sequential(encoder_layers),
        decoder=Sequential(decoder_layers),
        metadata={"seed": config.seed, "pretrain_epochs": config.pretrain_epochs},
        pretrain_history=history,
    )


def finetune_relit(
    state: EncoderState,
    cube: HyperspectralCube,
    sampler: AtmosphereSamplerParams,
    config: SaeTrainConfig,
) -> EncoderState:
    """Fine-tune the whole autoencoder to undo shadow relighting.

    Each epoch every sample is relit in full shadow (gamma = 0) under a
    freshly sampled atmosphere; the network reconstructs the original.

    Args:
        state: EncoderState from pretrain_layerwise
        cube: HyperspectralCube the samples are drawn from
        sampler: AtmosphereSamplerParams for the candidate atmospheres
        config: SaeTrainConfig

    Returns:
        A new EncoderState; the input state is not modified
    """
    if cube.bands != state.spec.input_bands:
        raise DimensionError(f"cube has {cube.bands} bands, autoencoder expects {state.spec.input_bands}")

    state = copy.deepcopy(state)
    state.metadata.update(
        finetune_samples=config.finetune_samples,
        finetune_epochs_max=config.finetune_epochs,
        finetune_epochs=0,
        sampler=asdict(sampler),
    )
    if config.finetune_epochs == 0:
        return state

    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 2]))
    pixels = _training_pixels(cube, config.norm_threshold)
    if pixels.shape[0] == 0:
        raise OrewatchError("no pixel above the norm threshold to fine-tune on")
    picked = np.sort(rng.choice(pixels.shape[0], min(config.finetune_samples, pixels.shape[0]), replace=False))
    targets = np.tile(pixels[picked], (config.atmospheres_per_sample, 1))

    network = state.autoencoder()
    optimizer = OptimizerState(config.learning_rate, config.momentum)
    best, stale = np.inf, 0
    for epoch in range(config.finetune_epochs):
        k = sample_shadow_factors(sampler, cube.grid, targets.shape[0], rng)
        inputs = relight_values(targets, 0.0, k)
        loss = _run_epoch(network, inputs, targets, optimizer, config.batch_size, rng)
        if not np.isfinite(loss):
            raise DivergenceError("relit fine-tuning", epoch, loss)
        state.finetune_history.append(loss)
        state.metadata["finetune_epochs"] = epoch + 1
        if config.report_every and (epoch + 1) % config.report_every == 0:
            print(f"  fine-tune: epoch {epoch + 1}/{config.finetune_epochs} loss {loss:.6f}")

        if loss < best - config.early_stop_delta:
            best, stale = loss, 0
        else:
            stale += 1
            if stale >= config.early_stop_patience:
                print(f"  fine-tune: stopped early at epoch {epoch + 1}")
                break
    check_active(state.encoder.layers, targets, "relit fine-tuning")
    return state


def encode_pixels(
    state: EncoderState, pixels: np.ndarray, chunk: int = 65536, workers: int = 2
) -> np.ndarray:
    """Encode (n, bands) spectra; chunks run on a thread pool, results stay in order."""
    pixels = np.asarray(pixels)
    if pixels.shape[-1] != state.spec.input_bands:
        raise DimensionError(f"spectra have {pixels.shape[-1]} bands, autoencoder expects {state.spec.input_bands}")
    starts = range(0, pixels.shape[0], chunk)
    with ThreadPoolExecutor(max_workers=workers) as executor:
        futures = [executor.submit(state.encoder.predict, pixels[s:s + chunk]) for s in starts]
        parts = [future.result() for future in futures]
    if not parts:
        return np.zeros((0, state.spec.code_dim), dtype=np.float32)
    return np.concatenate(parts, axis=0).astype(np.float32)


def encode(
    state: EncoderState, cube: HyperspectralCube, workers: int = 2
) -> HyperspectralCube:
    """Encode every pixel of a cube into a (height, width, code_dim) feature raster."""
    if cube.bands != state.spec.input_bands:
        raise DimensionError(f"cube has {cube.bands} bands, autoencoder expects {state.spec.input_bands}")
    start_time = time.time()
    codes = encode_pixels(state, cube.pixels(), workers=workers)
    features = HyperspectralCube(
        codes.reshape(cube.height, cube.width, state.spec.code_dim),
        index_grid(state.spec.code_dim),
    )
    print(f"✓ Encoded {cube.height}x{cube.width} pixels in {time.time() - start_time:.2f}s")
    return features


def render_feature(features, index, path):
    """Write one learned feature as a min-max scaled 8-bit grayscale image.

    Args:
        features: HyperspectralCube of codes from encode()
        index: Feature (band) index to render
        path: Image path; the extension picks the format (.png, .pgm)
    """
    if not 0 <= index < features.bands:
        raise DimensionError(f"feature index {index} outside 0..{features.bands - 1}")
    return orewatch_artifacts.save_gray(
        orewatch_artifacts.feature_to_gray(features.data[:, :, index]), path
    )


def save_encoder(state: EncoderState, path_stem: str) -> Tuple[str, str]:
    """Write `<stem>.bin` (parameter container) and `<stem>.meta` (text sidecar).

    Returns:
        (container path, sidecar path)
    """
    bin_path = path_stem + ".bin"
    meta_path = path_stem + ".meta"
    write_network(state.autoencoder(), bin_path)

    fields = {
        "encoder_sizes": list(state.spec.encoder_sizes),
        "input_bands": state.spec.input_bands,
    }
    for key, value in sorted(state.metadata.items()):
        if isinstance(value, dict):
            for sub_key, sub_value in sorted(value.items()):
                fields[f"{key}.{sub_key}"] = sub_value
        else:
            fields[key] = value
    write_header(meta_path, fields, file_type="orewatch autoencoder")
    return bin_path, meta_path


def load_encoder(path_stem: str) -> EncoderState:
    meta_path = path_stem + ".meta"
    fields, offsets = read_header(meta_path)
    sizes = tuple(int(v) for v in parse_float_list(fields, offsets, "encoder_sizes", meta_path))
    spec = AutoencoderSpec(encoder_sizes=sizes, input_bands=int(fields["input_bands"]))
    network = read_network(path_stem + ".bin")

    n_encoder = 2 * len(sizes) - 1
    encoder = Sequential(network.layers[:n_encoder])
    decoder = Sequential(network.layers[n_encoder:])
    metadata = {
        key: value for key, value in fields.items()
        if key not in ("encoder_sizes", "input_bands", "file type")
    }
    state = EncoderState(spec=spec, encoder=encoder, decoder=decoder, metadata=metadata)
    expected = _fresh_shapes(spec)
    if state.layer_shapes() != expected:
        raise DimensionError(f"{path_stem}.bin does not match autoencoder spec {sizes}")
    return state


def _fresh_shapes(spec):
    shapes = []
    for n_in, n_code in zip(spec.layer_inputs(), spec.encoder_sizes):
        shapes += [(n_code, n_in), (n_code,)]
    for n_in, n_out in zip((spec.code_dim,) + spec.decoder_sizes[:-1], spec.decoder_sizes):
        shapes += [(n_out, n_in), (n_out,)]
    return shapes


def code_distance_ratio(
    state: EncoderState, sunlit: np.ndarray, relit: np.ndarray, labels: np.ndarray
) -> Tuple[float, np.ndarray, np.ndarray]:
    """Within-pair code distance against between-class code distance.

    Args:
        state: Trained EncoderState
        sunlit: (n, bands) sunlit spectra
        relit: (n, bands) the same spectra relit
        labels: (n,) class of each spectrum

    Returns:
        (mean pair distance / mean between-class distance, pair distances,
        between-class distances)
    """
    codes_sun = encode_pixels(state, sunlit).astype(np.float64)
    codes_relit = encode_pixels(state, relit).astype(np.float64)
    labels = np.asarray(labels)
    pair = np.linalg.norm(codes_sun - codes_relit, axis=1)

    between = []
    classes = np.unique(labels)
    for i, a in enumerate(classes):
        for b in classes[i + 1:]:
            ca, cb = codes_sun[labels == a], codes_sun[labels == b]
            between.append(np.linalg.norm(ca[:, None, :] - cb[None, :, :], axis=2).reshape(-1))
    between = np.concatenate(between) if between else np.zeros(0)
    ratio = pair.mean() / between.mean() if between.size and between.mean() > 0 else np.inf
    return float(ratio), pair, between

