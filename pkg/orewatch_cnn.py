"""Self-supervised 1-D CNN: corpus pretraining, transfer, augmented training, cube classification.

Network layout for the default spec (216-band input):

    conv 30 x16 -> bn -> relu     (1, 216) -> (16, 187)
    conv 10 x16 -> bn -> relu     -> (16, 178)
    conv 10 x16 -> bn -> relu     -> (16, 169)
    dense 20 -> bn -> relu        2704 -> 20
    dense 20 -> bn -> relu
    dense n_classes

Spectra always enter the network in the same order of preparation: relit
on their native grid (training only), resampled onto the network grid,
then shifted to zero mean.
"""

from __future__ import annotations

import copy
import dataclasses
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np

from orewatch_errors import (DimensionError, DivergenceError, FormatError,
                             LabelError, TransferError)
from orewatch_illumination import (AtmosphereSamplerParams, augment_batch,
                                   augmented_labels)
from orewatch_nn import (CONTAINER_VERSION, BatchNorm, Conv1d, Dense,
                         OptimizerState, ReLU, Sequential, read_network,
                         sgd_step, softmax_cross_entropy, write_network)
from orewatch_spectral import (UNLABELLED, HyperspectralCube, LabelledSpectra,
                               LabelRaster, WavelengthGrid, index_grid,
                               mean_offset,
                               parse_float_list, read_cube, read_header,
                               read_labels, resample, write_cube,
                               write_header, write_labels)
from orewatch_synth import confusion_from_labels, precision_recall_f1

DEFAULT_GRID = WavelengthGrid.arange(430.0, 860.0, 2.0)

TRAINLOG_COLUMNS = ("epoch", "loss", "val_f1", "test_f1", "seconds", "val_loss")


@dataclass(frozen=True)
class CnnSpec:
    """Architecture of the spectral CNN.

    Attributes:
        kernel_lengths: Kernel length of each conv layer
        channels: Output channels of each conv layer
        fc_sizes: Fully-connected widths; the last one is the class count
        grid: Wavelength grid the network reads
    """

    kernel_lengths: tuple = (30, 10, 10)
    channels: tuple = (16, 16, 16)
    fc_sizes: tuple = (20, 20, 3)
    grid: WavelengthGrid = DEFAULT_GRID

    def __post_init__(self):
        if len(self.kernel_lengths) != len(self.channels) or not self.kernel_lengths:
            raise DimensionError("need one channel count per conv kernel")
        if not self.fc_sizes or min(self.fc_sizes) < 1:
            raise DimensionError(f"invalid fully-connected sizes {self.fc_sizes}")
        lengths = self.conv_lengths()
        if lengths[-1] < 1:
            raise DimensionError(
                f"{len(self.grid)} input bands cannot pass conv kernels {self.kernel_lengths}"
            )

    @property
    def n_classes(self):
        return self.fc_sizes[-1]

    def conv_lengths(self):
        """Sequence length after each conv layer (valid padding, stride 1)."""
        lengths = []
        length = len(self.grid)
        for kernel in self.kernel_lengths:
            length = length - kernel + 1
            lengths.append(length)
            if length < 1:
                break
        return lengths

    @property
    def flat_size(self):
        return self.conv_lengths()[-1] * self.channels[-1]

    def with_classes(self, n_classes):
        return dataclasses.replace(self, fc_sizes=tuple(self.fc_sizes[:-1]) + (n_classes,))

    def build(self, rng):
        """Fresh network with He-uniform weights drawn from `rng`."""
        layers = []
        in_channels = 1
        for i, (kernel, out_channels) in enumerate(zip(self.kernel_lengths, self.channels)):
            layers += [
                Conv1d(kernel, in_channels, out_channels, rng=rng, name=f"conv{i + 1}"),
                BatchNorm(out_channels, name=f"conv{i + 1}_bn"),
                ReLU(name=f"conv{i + 1}_relu"),
            ]
            in_channels = out_channels
        n_in = self.flat_size
        for i, width in enumerate(self.fc_sizes[:-1]):
            layers += [
                Dense(n_in, width, rng=rng, name=f"fc{i + 1}"),
                BatchNorm(width, name=f"fc{i + 1}_bn"),
                ReLU(name=f"fc{i + 1}_relu"),
            ]
            n_in = width
        layers.append(Dense(n_in, self.n_classes, rng=rng, name="head"))
        return Sequential(layers)


@dataclass
class PretrainedWeights:
    network: Sequential
    spec: CnnSpec
    n_classes: int
    version: int = CONTAINER_VERSION

    @property
    def grid(self):
        return self.spec.grid


@dataclass
class CnnState:
    spec: CnnSpec
    network: Sequential
    metadata: dict = field(default_factory=dict)


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    loss: float
    val_f1: float
    test_f1: float = float("nan")
    seconds: float = 0.0
    val_loss: float = float("nan")


@dataclass
class TrainLog:
    records: list = field(default_factory=list)

    def append(self, record):
        if self.records and record.epoch <= self.records[-1].epoch:
            raise DimensionError(f"epoch {record.epoch} logged after epoch {self.records[-1].epoch}")
        self.records.append(record)

    def column(self, name):
        return np.array([getattr(r, name) for r in self.records], dtype=np.float64)

    def seconds_per_epoch(self):
        seconds = self.column("seconds")
        return float(seconds.mean()) if seconds.size else 0.0

    def convergence_epoch(self, metric="test_f1", within=0.01):
        """First logged epoch whose F1 lies within `within` (relative) of the final F1."""
        values = self.column(metric)
        epochs = self.column("epoch")
        finite = np.isfinite(values)
        if not finite.any():
            return None
        values, epochs = values[finite], epochs[finite]
        final = values[-1]
        close = np.abs(values - final) <= within * abs(final)
        return int(epochs[np.argmax(close)])


@dataclass(frozen=True)
class TrainOptions:
    """Settings for one CNN training run.

    Attributes:
        epochs: Passes over the training set
        batch_size: Original spectra per minibatch (before augmentation)
        learning_rate, momentum: SGD settings
        augment: Expand each minibatch with relit variants
        n_variants: Relit copies per spectrum when augmenting
        sampler: Atmosphere ranges for augmentation
        selection: "best" keeps the epoch with the highest validation F1 (ties go
            to the lower validation loss), "last" the final one
        freeze_batchnorm: Keep batchnorm running statistics fixed
        eval_every: Evaluate validation/test F1 every N epochs
        report_every: Print a progress line every N epochs (0 for silence)
    """

    epochs: int = 200
    batch_size: int = 60
    learning_rate: float = 0.01
    momentum: float = 0.9
    augment: bool = False
    n_variants: int = 9
    sampler: AtmosphereSamplerParams = AtmosphereSamplerParams()
    selection: str = "best"
    freeze_batchnorm: bool = False
    eval_every: int = 1
    report_every: int = 20

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.eval_every < 1 or self.n_variants < 0:
            raise DimensionError("invalid CNN training counts")
        if self.selection not in ("best", "last"):
            raise DimensionError(f"selection must be 'best' or 'last', got {self.selection!r}")


@dataclass(frozen=True)
class ThematicMap:
    labels: LabelRaster
    scores: HyperspectralCube


def prepare(spectra, source_grid, spec):
    """Resample spectra onto the network grid and shift each to zero mean."""
    return mean_offset(resample(spectra, source_grid, spec.grid))


def prepare_batch(spectra, labels, source_grid, spec, options, rng):
    """Relight (if augmenting) on the native grid, then resample and mean-offset.

    Returns:
        (network-ready (n, bands) array, labels)
    """
    if options.augment and options.n_variants:
        spectra = augment_batch(spectra, source_grid, options.sampler, options.n_variants, rng)
        labels = augmented_labels(labels, options.n_variants)
    return prepare(spectra, source_grid, spec), np.asarray(labels)


def iter_epoch_batches(dataset, options, rng):
    """Yield (raw spectra, labels) minibatches of one shuffled epoch."""
    order = rng.permutation(len(dataset.labels))
    for start in range(0, order.size, options.batch_size):
        batch = order[start:start + options.batch_size]
        yield dataset.spectra[batch], dataset.labels[batch]


def predict_scores(network, prepared):
    """Class probabilities for network-ready spectra, shape (n, classes)."""
    logits = network.predict(np.asarray(prepared)[:, None, :])
    shifted = logits - logits.max(axis=1, keepdims=True)
    probs = np.exp(shifted)
    return probs / probs.sum(axis=1, keepdims=True)


def evaluate(
    network: Sequential, dataset: LabelledSpectra, spec: CnnSpec
) -> Tuple[float, float]:
    """Macro F1 and mean cross-entropy of a labelled set (both NaN when it is empty)."""
    if dataset is None or len(dataset.labels) == 0:
        return float("nan"), float("nan")
    scores = predict_scores(network, prepare(dataset.spectra, dataset.grid, spec))
    labels = np.asarray(dataset.labels)
    predicted = np.argmax(scores, axis=1)
    cm = confusion_from_labels(predicted, labels, spec.n_classes)
    picked = scores[np.arange(labels.size), labels]
    loss = float(-np.log(np.maximum(picked, np.finfo(np.float64).tiny)).mean())
    return precision_recall_f1(cm).macro_f1, loss


def macro_f1(network: Sequential, dataset: LabelledSpectra, spec: CnnSpec) -> float:
    return evaluate(network, dataset, spec)[0]


def better_epoch(
    val_f1: float, val_loss: float, best_f1: float, best_loss: float
) -> bool:
    """True when an evaluation beats the best so far: higher F1, or equal F1 and lower loss."""
    if val_f1 != best_f1:
        return val_f1 > best_f1
    return val_loss < best_loss


def _set_batchnorm_frozen(network, frozen):
    for layer in network.layers:
        if isinstance(layer, BatchNorm):
            layer.frozen = frozen


def _check_labels(dataset, n_classes, what):
    labels = np.asarray(dataset.labels)
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise LabelError(f"{what} labels must lie in [0, {n_classes})")


def train(
    init: CnnState,
    train_set: LabelledSpectra,
    val_set: LabelledSpectra,
    options: TrainOptions,
    seed: int = 0,
    test_set: Optional[LabelledSpectra] = None,
) -> Tuple[CnnState, TrainLog]:
    """Train the CNN with softmax cross-entropy and momentum SGD.

    Args:
        init: CnnState to start from (copied, never modified), or a CnnSpec
            for a freshly initialised network
        train_set: Spectra with .spectra/.labels/.grid (a ConfidentSet or LabelledSpectra)
        val_set: Validation spectra, never augmented
        options: TrainOptions
        seed: Seed for initialisation, shuffling and augmentation
        test_set: Optional labelled spectra scored each evaluation for the log

    Returns:
        (CnnState, TrainLog)
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed, 3]))
    if isinstance(init, CnnSpec):
        state = CnnState(init, init.build(rng), {"init": "fresh"})
    else:
        state = copy.deepcopy(init)
    spec = state.spec
    log = TrainLog()
    if len(train_set.labels) == 0 or len(val_set.labels) == 0:
        raise DimensionError("training and validation sets must not be empty")
    _check_labels(train_set, spec.n_classes, "training")
    _check_labels(val_set, spec.n_classes, "validation")
    if options.epochs == 0:
        return state, log

    network = state.network
    _set_batchnorm_frozen(network, options.freeze_batchnorm)
    params = network.parameters()
    optimizer = OptimizerState(options.learning_rate, options.momentum)
    best_f1, best_loss, best_network, best_epoch = -np.inf, np.inf, None, options.epochs

    for epoch in range(1, options.epochs + 1):
        start_time = time.time()
        total, count = 0.0, 0
        for spectra, labels in iter_epoch_batches(train_set, options, rng):
            inputs, targets = prepare_batch(spectra, labels, train_set.grid, spec, options, rng)
            logits, caches = network.forward(inputs[:, None, :])
            loss, grad = softmax_cross_entropy(logits, targets)
            if not np.isfinite(loss):
                raise DivergenceError("CNN training", epoch, loss)
            _, grads = network.backward(grad, caches)
            sgd_step(params, Sequential.flatten_grads(grads), optimizer)
            total += loss * targets.size
            count += targets.size
        seconds = time.time() - start_time

        if epoch % options.eval_every == 0 or epoch == options.epochs:
            val_f1, val_loss = evaluate(network, val_set, spec)
            test_f1 = macro_f1(network, test_set, spec)
            log.append(EpochRecord(epoch, total / count, val_f1, test_f1, seconds, val_loss))
            if options.selection == "best" and better_epoch(val_f1, val_loss, best_f1, best_loss):
                best_f1, best_loss = val_f1, val_loss
                best_network, best_epoch = copy.deepcopy(network), epoch
            if options.report_every and epoch % options.report_every == 0:
                print(f"  epoch {epoch}/{options.epochs} loss {total / count:.4f} "
                      f"val F1 {val_f1:.4f} test F1 {test_f1:.4f} ({seconds:.2f}s)")

    _set_batchnorm_frozen(network, False)
    if options.selection == "best" and best_network is not None:
        _set_batchnorm_frozen(best_network, False)
        state.network = best_network
    else:
        best_epoch = options.epochs
    state.metadata.update(epochs=options.epochs, selected_epoch=best_epoch,
                          augment=options.augment, seed=seed)
    return state, log


def pretrain_on_corpus(
    corpus: LabelledSpectra, spec: CnnSpec, options: TrainOptions, seed: int = 0
) -> Tuple[PretrainedWeights, TrainLog]:
    """Train the full architecture on a labelled corpus with a corpus-sized head.

    Args:
        corpus: LabelledSpectra whose labels cover every class 0..n_classes-1
        spec: CnnSpec (its head width is replaced by the corpus class count)
        options: TrainOptions (selection is forced to "last")
        seed: Training seed

    Returns:
        (PretrainedWeights, TrainLog)
    """
    present = np.unique(corpus.labels)
    if not np.array_equal(present, np.arange(corpus.n_classes)):
        missing = sorted(set(range(corpus.n_classes)) - set(present.tolist()))
        raise LabelError(f"corpus labels are not dense in [0, {corpus.n_classes}); missing {missing}")

    spec = spec.with_classes(corpus.n_classes)
    options = dataclasses.replace(options, selection="last")
    state, log = train(spec, corpus, corpus, options, seed)
    return PretrainedWeights(state.network, spec, corpus.n_classes), log


def transfer_init(
    pretrained: PretrainedWeights, n_classes: int, seed: int = 0
) -> CnnState:
    """New CnnState with every layer copied except a freshly seeded head.

    Raises:
        TransferError: unsupported container version or mismatched layer shapes
    """
    if pretrained.version != CONTAINER_VERSION:
        raise TransferError(f"pretrained container version {pretrained.version} is not supported")
    spec = pretrained.spec.with_classes(n_classes)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 4]))
    network = spec.build(rng)

    source = pretrained.network.layers
    target = network.layers
    if len(source) != len(target):
        raise TransferError(f"pretrained network has {len(source)} layers, expected {len(target)}")
    for src, dst in zip(source[:-1], target[:-1]):
        if src.kind != dst.kind or src.dims() != dst.dims():
            raise TransferError(f"cannot copy {src.kind}{src.dims()} into {dst.kind}{dst.dims()}")
        for name, array in list(dst.params().items()) + list(dst.buffers().items()):
            source_array = {**src.params(), **src.buffers()}[name]
            array[...] = source_array
        if isinstance(dst, BatchNorm):
            dst.epsilon, dst.momentum = src.epsilon, src.momentum
    if source[-1].kind != "dense" or source[-1].dims()[0] != target[-1].dims()[0]:
        raise TransferError(f"pretrained head {source[-1].dims()} does not feed {target[-1].dims()}")
    return CnnState(spec, network, {"init": "transfer", "source_classes": pretrained.n_classes})


def classify_cube(
    state: CnnState, cube: HyperspectralCube, workers: int = 2, chunk: int = 1024
) -> ThematicMap:
    """Per-pixel argmax class and class probabilities for a whole cube.

    Raises:
        DimensionError: the cube's grid does not cover the network grid
    """
    if not cube.grid.covers(state.spec.grid):
        raise DimensionError(f"cube grid {cube.grid} does not cover network grid {state.spec.grid}")
    start_time = time.time()
    pixels = cube.pixels()

    def run(start):
        return predict_scores(state.network, prepare(pixels[start:start + chunk], cube.grid, state.spec))

    with ThreadPoolExecutor(max_workers=workers) as executor:
        futures = [executor.submit(run, start) for start in range(0, pixels.shape[0], chunk)]
        scores = np.concatenate([future.result() for future in futures], axis=0)

    labels = np.argmax(scores, axis=1).reshape(cube.height, cube.width)
    thematic = ThematicMap(
        LabelRaster(labels.astype(np.uint8), state.spec.n_classes),
        HyperspectralCube(scores.reshape(cube.height, cube.width, -1).astype(np.float32),
                          index_grid(state.spec.n_classes)),
    )
    print(f"✓ Classified {cube.height}x{cube.width} pixels in {time.time() - start_time:.2f}s")
    return thematic


def write_thematic_map(thematic, path_stem):
    """Write `<stem>_labels.hdr/.lbl` and `<stem>_scores.hdr/.img`."""
    return (
        write_labels(thematic.labels, path_stem + "_labels.hdr"),
        write_cube(thematic.scores, path_stem + "_scores.hdr"),
    )


def read_thematic_map(path_stem):
    return ThematicMap(read_labels(path_stem + "_labels.hdr"), read_cube(path_stem + "_scores.hdr"))


def write_trainlog(log, path):
    table = np.array([[getattr(r, c) for c in TRAINLOG_COLUMNS] for r in log.records], dtype=np.float64)
    np.savetxt(path, table.reshape(-1, len(TRAINLOG_COLUMNS)), delimiter=",",
               header=",".join(TRAINLOG_COLUMNS), fmt="%.6f")
    return path


def read_trainlog(path):
    table = np.loadtxt(path, delimiter=",", ndmin=2).reshape(-1, len(TRAINLOG_COLUMNS))
    log = TrainLog()
    for row in table:
        log.append(EpochRecord(int(row[0]), *map(float, row[1:])))
    return log


def _write_network_with_spec(network, spec, path_stem, extra):
    bin_path = path_stem + ".bin"
    meta_path = path_stem + ".meta"
    write_network(network, bin_path)
    fields = {
        "kernel_lengths": list(spec.kernel_lengths),
        "channels": list(spec.channels),
        "fc_sizes": list(spec.fc_sizes),
        "wavelengths": spec.grid.wavelengths_nm,
    }
    fields.update(extra)
    write_header(meta_path, fields, file_type="orewatch classifier")
    return bin_path, meta_path


def _read_network_with_spec(path_stem):
    meta_path = path_stem + ".meta"
    fields, offsets = read_header(meta_path)

    def ints(key):
        return tuple(int(v) for v in parse_float_list(fields, offsets, key, meta_path))

    spec = CnnSpec(
        kernel_lengths=ints("kernel_lengths"),
        channels=ints("channels"),
        fc_sizes=ints("fc_sizes"),
        grid=WavelengthGrid(parse_float_list(fields, offsets, "wavelengths", meta_path)),
    )
    network = read_network(path_stem + ".bin")
    fresh = spec.build(np.random.default_rng(0))
    shapes = [(layer.kind, layer.dims()) for layer in network.layers]
    if shapes != [(layer.kind, layer.dims()) for layer in fresh.layers]:
        raise FormatError(f"{path_stem}.bin does not match the architecture in {meta_path}")
    return spec, network, fields


def save_pretrained(pretrained, path_stem):
    return _write_network_with_spec(
        pretrained.network, pretrained.spec, path_stem, {"classes": pretrained.n_classes}
    )


def load_pretrained(path_stem: str) -> PretrainedWeights:
    spec, network, fields = _read_network_with_spec(path_stem)
    return PretrainedWeights(network, spec, int(fields.get("classes", spec.n_classes)))


def save_state(state: CnnState, path_stem: str) -> Tuple[str, str]:
    extra = {key: value for key, value in sorted(state.metadata.items())}
    return _write_network_with_spec(state.network, state.spec, path_stem, extra)


def load_state(path_stem: str) -> CnnState:
    spec, network, fields = _read_network_with_spec(path_stem)
    metadata = {
        key: value for key, value in fields.items()
        if key not in ("kernel_lengths", "channels", "fc_sizes", "wavelengths", "file type")
    }
    return CnnState(spec, network, metadata)


def corpus_to_rasters(corpus):
    """Store a corpus as an (n, 1) cube and matching label raster."""
    cube = HyperspectralCube(corpus.spectra[:, None, :].astype(np.float32), corpus.grid)
    labels = LabelRaster(corpus.labels.reshape(-1, 1).astype(np.uint8), corpus.n_classes)
    return cube, labels


def labelled_pixels(
    cube: HyperspectralCube,
    truth: LabelRaster,
    mapping: Optional[np.ndarray] = None,
    limit: Optional[int] = None,
    seed: int = 0,
) -> LabelledSpectra:
    """Collect the labelled pixels of a cube as LabelledSpectra.

    Args:
        cube: HyperspectralCube
        truth: LabelRaster; UNLABELLED pixels are skipped
        mapping: Optional array mapping truth class -> training label
        limit: Keep a seeded random subset of at most this many pixels
        seed: Seed for the subset

    Returns:
        LabelledSpectra in row-major pixel order
    """
    flat = np.asarray(truth.labels).reshape(-1)
    index = np.flatnonzero(flat != UNLABELLED)
    if limit is not None and index.size > limit:
        index = np.sort(np.random.default_rng(seed).choice(index, limit, replace=False))
    labels = flat[index].astype(np.int64)
    n_classes = truth.n_classes
    if mapping is not None:
        labels = np.asarray(mapping)[labels]
        n_classes = int(np.max(mapping)) + 1
    return LabelledSpectra(cube.pixels()[index], labels, cube.grid, n_classes)


def corpus_from_rasters(cube, labels):
    return labelled_pixels(cube, labels)

