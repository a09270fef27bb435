"""Synthetic mine-face scenes, a labelled pretraining corpus, and evaluation metrics.

A scene is a rock face under a strip of sky. Face pixels belong to an
iron-oxide ore class or a shale waste class laid out in smooth patches;
shadow blobs cover a chosen fraction of the face and are relit with the
scene's truth atmosphere.
"""

from __future__ import annotations

import dataclasses
import itertools
from dataclasses import dataclass
from typing import Optional, Tuple, Union

import numpy as np
from scipy.interpolate import CubicSpline
from scipy.ndimage import gaussian_filter
from scipy.stats import mannwhitneyu

from orewatch_errors import ClusterError, ConfigError, DimensionError, LabelError
from orewatch_illumination import (Atmosphere, planck_shape, relight_values,
                                   shadow_factor)
from orewatch_spectral import (UNLABELLED, HyperspectralCube, LabelledSpectra,
                               LabelRaster, WavelengthGrid)

SENSOR_GRID = WavelengthGrid.linspace(400.0, 970.0, 220)

# Per-pixel classes as a raster or a plain index array
Labels = Union[LabelRaster, np.ndarray]

CLASS_NAMES = ("martite", "shale", "sky")
SKY_CLASS = 2

MAX_PERMUTATION_CLASSES = 8


def martite_curve(grid):
    """Iron-oxide-like reflectance: red edge near 580 nm, broad absorption near 900 nm."""
    wl = grid.wavelengths_nm
    edge = 1.0 / (1.0 + np.exp(-(wl - 580.0) / 25.0))
    absorption = np.exp(-0.5 * ((wl - 900.0) / 55.0) ** 2)
    return 0.06 + 0.30 * edge - 0.14 * absorption


def shale_curve(grid):
    """Flat, slowly rising reflectance."""
    wl = grid.wavelengths_nm
    return 0.16 + 0.07 * (wl - wl[0]) / (wl[-1] - wl[0] + 1e-12)


def sky_curve(grid):
    """Near-zero, strongly blue-tilted apparent reflectance."""
    wl = grid.wavelengths_nm
    return 0.02 * (wl / 450.0) ** -3.0


def default_endmembers(grid):
    return np.stack([martite_curve(grid), shale_curve(grid), sky_curve(grid)])


@dataclass(frozen=True)
class TruthAtmosphereParams:
    """Parametric truth illumination (deliberately not the augmentation sampler's form).

    Sunlight is a blackbody with a water-vapour dip; skylight mixes a
    Rayleigh lambda^-4 component with a flat aerosol component.
    """

    sun_temperature_k: float = 5500.0
    sky_ratio: float = 0.15
    rayleigh_fraction: float = 0.6
    water_depth: float = 0.3

    def __post_init__(self):
        if not 0 < self.sky_ratio <= 1 or not 0 <= self.rayleigh_fraction <= 1:
            raise ConfigError("sky_ratio must lie in (0, 1] and rayleigh_fraction in [0, 1]")
        if not 0 <= self.water_depth < 1 or self.sun_temperature_k <= 0:
            raise ConfigError("water_depth must lie in [0, 1) and temperature be positive")


SECOND_CAPTURE_ATMOSPHERE = TruthAtmosphereParams(
    sun_temperature_k=6200.0, sky_ratio=0.25, rayleigh_fraction=0.35, water_depth=0.2,
)


def truth_atmosphere(params, grid):
    wl = grid.wavelengths_nm
    e_sun = planck_shape(grid, params.sun_temperature_k)
    e_sun = e_sun * (1.0 - params.water_depth * np.exp(-0.5 * ((wl - 940.0) / 20.0) ** 2))
    shape = params.rayleigh_fraction * (wl / 550.0) ** -4.0 + (1.0 - params.rayleigh_fraction)
    e_sky = e_sun * shape
    e_sky *= params.sky_ratio * e_sun.sum() / e_sky.sum()
    return Atmosphere(e_sun, e_sky, grid)


@dataclass(frozen=True)
class SceneSpec:
    """Synthetic scene settings.

    Attributes:
        height, width: Raster size in pixels
        grid: Sensor wavelength grid
        endmembers: (classes, bands) reflectance curves; None for the defaults
        class_names: One name per endmember
        sky_class: Index of the sky class (never shadowed, no variability)
        sky_fraction: Mean share of rows above the horizon
        patch_sigma: Spatial smoothing (px) of the ore/waste layout
        variability: Amplitude of the smooth multiplicative perturbation
        variability_knots: Spline control points of the perturbation
        shadow_coverage: Fraction of face pixels in shadow
        shadow_sigma: Spatial smoothing (px) of the shadow field; sets blob size
        gamma_min: Sun visibility deep inside a shadow
        feather: Width of the shadow edge ramp, in standard deviations of the field
        noise_sigma: Gaussian noise standard deviation (sky gets a fifth of it)
        atmosphere: TruthAtmosphereParams for relighting
        seed: Seed for the layout and the class variability
        shadow_seed: Seed for the shadow layout and noise; None reuses seed
    """

    height: int = 128
    width: int = 256
    grid: WavelengthGrid = SENSOR_GRID
    endmembers: tuple = None
    class_names: tuple = CLASS_NAMES
    sky_class: int = SKY_CLASS
    sky_fraction: float = 0.2
    patch_sigma: float = 10.0
    variability: float = 0.05
    variability_knots: int = 6
    shadow_coverage: float = 0.3
    shadow_sigma: float = 8.0
    gamma_min: float = 0.0
    feather: float = 0.25
    noise_sigma: float = 0.002
    atmosphere: TruthAtmosphereParams = TruthAtmosphereParams()
    seed: int = 0
    shadow_seed: Optional[int] = None

    def __post_init__(self):
        if not 0.0 <= self.shadow_coverage <= 1.0:
            raise ConfigError(f"shadow coverage {self.shadow_coverage} outside [0, 1]")
        if len(self.class_names) < 2 or len(self.class_names) != len(self.endmember_curves()):
            raise ConfigError("need one endmember per class and at least 2 classes")
        if not 0 <= self.sky_class < len(self.class_names):
            raise ConfigError(f"sky class {self.sky_class} is not a class index")
        if self.height < 1 or self.width < 1 or not 0 <= self.sky_fraction < 1:
            raise ConfigError("invalid scene size or sky fraction")
        if not 0 <= self.gamma_min <= 1 or self.noise_sigma < 0 or self.variability < 0:
            raise ConfigError("gamma_min must lie in [0, 1]; noise and variability >= 0")
        if self.variability_knots < 2:
            raise ConfigError("variability needs at least 2 spline knots")

    def endmember_curves(self):
        if self.endmembers is None:
            return default_endmembers(self.grid)
        curves = np.asarray(self.endmembers, dtype=np.float64)
        if curves.ndim != 2 or curves.shape[1] != len(self.grid):
            raise DimensionError(f"endmembers of shape {curves.shape} on a {len(self.grid)}-band grid")
        return curves

    @property
    def n_classes(self):
        return len(self.class_names)

    def second_capture(self):
        """Same scene under another truth atmosphere and shadow layout."""
        shadow_seed = (self.seed if self.shadow_seed is None else self.shadow_seed) + 1
        return dataclasses.replace(self, atmosphere=SECOND_CAPTURE_ATMOSPHERE, shadow_seed=shadow_seed)


def _rng(*words):
    return np.random.default_rng(np.random.SeedSequence(list(words)))


def _layout(spec):
    """Class raster: sky above a wavy horizon, ore/waste patches below."""
    rng = _rng(spec.seed, 11)
    face_classes = [c for c in range(spec.n_classes) if c != spec.sky_class]

    wiggle = gaussian_filter(rng.standard_normal(spec.width), sigma=spec.width / 16.0, mode="wrap")
    if wiggle.std() > 0:
        wiggle = wiggle / wiggle.std()
    horizon = np.round(spec.sky_fraction * spec.height + 0.05 * spec.height * wiggle)
    horizon = np.clip(horizon, 0, spec.height).astype(int)
    rows = np.arange(spec.height)[:, None]
    sky = rows < horizon[None, :] if spec.sky_fraction > 0 else np.zeros((spec.height, spec.width), bool)

    field = gaussian_filter(rng.standard_normal((spec.height, spec.width)), sigma=spec.patch_sigma)
    face = ~sky
    labels = np.full((spec.height, spec.width), face_classes[0], dtype=np.uint8)
    if face.any() and len(face_classes) > 1:
        cuts = np.quantile(field[face], np.linspace(0, 1, len(face_classes) + 1)[1:-1])
        labels = np.asarray(face_classes, dtype=np.uint8)[np.searchsorted(cuts, field)]
    labels[sky] = spec.sky_class
    return labels, sky


def _shadow(spec, face):
    """Sun-visibility raster and shadow mask over face pixels."""
    shadow_seed = spec.seed if spec.shadow_seed is None else spec.shadow_seed
    rng = _rng(shadow_seed, 12)
    field = gaussian_filter(rng.standard_normal(face.shape), sigma=spec.shadow_sigma)
    gamma = np.ones(face.shape, dtype=np.float64)
    mask = np.zeros(face.shape, dtype=bool)
    if spec.shadow_coverage == 0 or not face.any():
        return gamma, mask

    threshold = np.quantile(field[face], 1.0 - spec.shadow_coverage)
    mask = (field >= threshold) & face
    ramp = (field - threshold) / (spec.feather * field[face].std() + 1e-12)
    depth = np.clip(ramp, 0.0, 1.0)
    depth = depth * depth * (3.0 - 2.0 * depth)
    # edge pixels inside the mask still get a little shadow
    depth = np.where(mask, np.maximum(depth, 0.1), 0.0)
    gamma = 1.0 - (1.0 - spec.gamma_min) * depth
    return gamma, mask


def _variability(spec, n, rng):
    if spec.variability == 0 or n == 0:
        return np.ones((n, len(spec.grid)))
    wl = spec.grid.wavelengths_nm
    knots = np.linspace(wl[0], wl[-1], spec.variability_knots)
    coefficients = rng.normal(0.0, spec.variability, size=(spec.variability_knots, n))
    if len(wl) == 1:
        return 1.0 + coefficients[:1].T
    return 1.0 + CubicSpline(knots, coefficients, axis=0)(wl).T


def generate_scene(
    spec: SceneSpec, seed: Optional[int] = None
) -> Tuple[HyperspectralCube, LabelRaster, np.ndarray]:
    """Render a synthetic scene.

    Args:
        spec: SceneSpec
        seed: Overrides spec.seed when given

    Returns:
        (HyperspectralCube, LabelRaster truth, (height, width) bool shadow mask)
    """
    if seed is not None:
        spec = dataclasses.replace(spec, seed=seed)
    curves = spec.endmember_curves()
    labels, sky = _layout(spec)
    face = ~sky
    gamma, mask = _shadow(spec, face)
    k = shadow_factor(truth_atmosphere(spec.atmosphere, spec.grid))

    flat_labels = labels.reshape(-1)
    flat_face = face.reshape(-1)
    values = curves[flat_labels].copy()

    variability_rng = _rng(spec.seed, 13)
    values[flat_face] *= _variability(spec, int(flat_face.sum()), variability_rng)
    values = relight_values(values, gamma.reshape(-1), k[None, :])

    shadow_seed = spec.seed if spec.shadow_seed is None else spec.shadow_seed
    noise_rng = _rng(shadow_seed, 14)
    noise = noise_rng.normal(0.0, spec.noise_sigma, size=values.shape)
    noise[~flat_face] *= 0.2
    values = np.maximum(values + noise, 0.0)

    cube = HyperspectralCube(values.reshape(spec.height, spec.width, -1).astype(np.float32), spec.grid)
    truth = LabelRaster(labels, spec.n_classes)
    return cube, truth, mask


@dataclass(frozen=True)
class CorpusSpec:
    """Labelled spectral corpus for CNN pretraining (stands in for an external library).

    Attributes:
        n_classes: Material classes in the corpus
        per_class: Spectra per class
        grid: Corpus wavelength grid
        knots: Spline control points of each class curve
        variability: Within-class multiplicative perturbation amplitude
        brightness_range: Per-spectrum scale factor range
        noise_sigma: Additive Gaussian noise
        seed: Seed of the corpus
    """

    n_classes: int = 9
    per_class: int = 500
    grid: WavelengthGrid = WavelengthGrid.arange(430.0, 860.0, 2.0)
    knots: int = 7
    variability: float = 0.08
    brightness_range: tuple = (0.3, 1.2)
    noise_sigma: float = 0.003
    seed: int = 0

    def __post_init__(self):
        if self.n_classes < 2 or self.per_class < 1 or self.knots < 2:
            raise ConfigError("corpus needs >= 2 classes, >= 1 spectrum per class, >= 2 knots")


def generate_corpus(spec: CorpusSpec) -> LabelledSpectra:
    """Smooth random class curves with per-spectrum variability, brightness and noise.

    Returns:
        LabelledSpectra ordered by class
    """
    rng = _rng(spec.seed, 21)
    wl = spec.grid.wavelengths_nm
    knots = np.linspace(wl[0], wl[-1], spec.knots)
    levels = rng.uniform(0.05, 0.6, size=(spec.knots, spec.n_classes))
    curves = CubicSpline(knots, levels, axis=0)(wl).T if len(wl) > 1 else levels[:1].T
    curves = np.clip(curves, 0.01, None)

    n = spec.n_classes * spec.per_class
    labels = np.repeat(np.arange(spec.n_classes), spec.per_class)
    jitter = rng.normal(0.0, spec.variability, size=(spec.knots, n))
    gain = 1.0 + (CubicSpline(knots, jitter, axis=0)(wl).T if len(wl) > 1 else jitter[:1].T)
    brightness = rng.uniform(*spec.brightness_range, size=(n, 1))
    spectra = curves[labels] * gain * brightness + rng.normal(0.0, spec.noise_sigma, size=(n, len(wl)))
    return LabelledSpectra(np.maximum(spectra, 0.0), labels, spec.grid, spec.n_classes)


@dataclass(frozen=True, eq=False)
class ConfusionMatrix:
    """counts[truth][predicted] over labelled pixels."""

    counts: np.ndarray

    def __post_init__(self):
        counts = np.asarray(self.counts, dtype=np.int64)
        if counts.ndim != 2 or counts.shape[0] != counts.shape[1] or np.any(counts < 0):
            raise DimensionError(f"confusion counts must be square and non-negative, got {counts.shape}")
        object.__setattr__(self, "counts", counts)

    @property
    def n_classes(self):
        return self.counts.shape[0]

    @property
    def total(self):
        return int(self.counts.sum())

    @property
    def trace(self):
        return int(np.trace(self.counts))


@dataclass(frozen=True, eq=False)
class MetricsReport:
    """Per-class precision, recall and F1; `undefined` flags zero-denominator classes."""

    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    undefined: np.ndarray
    macro_f1: float
    labelled: int

    def lines(self, class_names=None):
        names = class_names or [str(c) for c in range(len(self.f1))]
        out = [f"labelled pixels: {self.labelled}", f"macro F1: {self.macro_f1:.4f}"]
        for c, name in enumerate(names[:len(self.f1)]):
            flag = " (undefined)" if self.undefined[c] else ""
            out.append(
                f"  {name}: precision {self.precision[c]:.4f} recall {self.recall[c]:.4f} "
                f"F1 {self.f1[c]:.4f}{flag}"
            )
        return out


def confusion_from_labels(predicted, truth, n_classes):
    """Confusion counts from label arrays; UNLABELLED truth entries are skipped."""
    predicted = np.asarray(predicted).reshape(-1).astype(np.int64)
    truth = np.asarray(truth).reshape(-1).astype(np.int64)
    if predicted.shape != truth.shape:
        raise DimensionError(f"{predicted.size} predictions for {truth.size} truth labels")
    keep = truth != UNLABELLED
    predicted, truth = predicted[keep], truth[keep]
    if truth.size and (truth.max() >= n_classes or predicted.min() < 0 or predicted.max() >= n_classes):
        raise LabelError(f"labels must lie in [0, {n_classes})")
    counts = np.bincount(truth * n_classes + predicted, minlength=n_classes * n_classes)
    return ConfusionMatrix(counts.reshape(n_classes, n_classes))


def confusion(pred: LabelRaster, truth: LabelRaster) -> ConfusionMatrix:
    """Confusion matrix of two label rasters over truth-labelled pixels."""
    if pred.labels.shape != truth.labels.shape:
        raise DimensionError(f"prediction {pred.labels.shape} and truth {truth.labels.shape} differ in size")
    n_classes = max(pred.n_classes, truth.n_classes)
    return confusion_from_labels(pred.labels, truth.labels, n_classes)


def precision_recall_f1(
    cm: ConfusionMatrix, n_scored: Optional[int] = None
) -> MetricsReport:
    """Per-class scores from a confusion matrix.

    `n_scored` keeps only the first classes in the report and the macro
    average; predictions of later classes still count as misses.
    """
    counts = cm.counts.astype(np.float64)
    tp = np.diag(counts)
    predicted = counts.sum(axis=0)
    actual = counts.sum(axis=1)

    precision = np.divide(tp, predicted, out=np.zeros_like(tp), where=predicted > 0)
    recall = np.divide(tp, actual, out=np.zeros_like(tp), where=actual > 0)
    denom = precision + recall
    f1 = np.divide(2.0 * precision * recall, denom, out=np.zeros_like(tp), where=denom > 0)
    undefined = (predicted == 0) | (actual == 0) | (denom == 0)
    n = len(tp) if n_scored is None else n_scored
    return MetricsReport(precision[:n], recall[:n], f1[:n], undefined[:n], float(f1[:n].mean()), cm.total)


def best_alignment(assignments: Labels, truth: Labels) -> Tuple[np.ndarray, float]:
    """Cluster-to-class permutation with the highest pixel agreement.

    Args:
        assignments: Cluster index per pixel (array or LabelRaster)
        truth: True class per pixel (array or LabelRaster); UNLABELLED skipped

    Returns:
        (mapping array cluster -> class, agreement fraction)
    """
    assignments = np.asarray(getattr(assignments, "labels", assignments)).reshape(-1).astype(np.int64)
    truth = np.asarray(getattr(truth, "labels", truth)).reshape(-1).astype(np.int64)
    if assignments.shape != truth.shape:
        raise DimensionError(f"{assignments.size} assignments for {truth.size} truth labels")
    keep = truth != UNLABELLED
    assignments, truth = assignments[keep], truth[keep]
    if truth.size == 0:
        return np.arange(1), 0.0

    n = int(max(assignments.max(), truth.max())) + 1
    if n > MAX_PERMUTATION_CLASSES:
        raise ClusterError(f"{n} clusters exceed the permutation search limit of {MAX_PERMUTATION_CLASSES}")
    # table[a, c]: pixels in cluster a with true class c
    table = np.bincount(assignments * n + truth, minlength=n * n).reshape(n, n)
    perms = np.array(list(itertools.permutations(range(n))), dtype=np.int64)
    scores = table[np.arange(n)[None, :], perms].sum(axis=1)
    best = int(np.argmax(scores))
    return perms[best], float(scores[best] / truth.size)


def cluster_agreement(assignments: Labels, truth: Labels) -> float:
    return best_alignment(assignments, truth)[1]


def map_agreement(
    first: Labels, second: Labels, mask: Optional[np.ndarray] = None
) -> float:
    """Fraction of pixels (optionally within mask) where two label rasters agree."""
    a = np.asarray(getattr(first, "labels", first))
    b = np.asarray(getattr(second, "labels", second))
    if a.shape != b.shape:
        raise DimensionError(f"maps of shape {a.shape} and {b.shape}")
    same = a == b
    if mask is not None:
        same = same[np.asarray(mask, dtype=bool)]
    return float(same.mean()) if same.size else 0.0


def rank_sum_pvalue(smaller, larger):
    """One-sided Mann-Whitney p-value that `smaller` is stochastically smaller than `larger`."""
    return float(mannwhitneyu(smaller, larger, alternative="less").pvalue)

