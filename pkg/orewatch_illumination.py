"""Sun/sky illumination model, shadow relighting and relighting augmentation.

A pixel's apparent reflectance is measured against a fully sunlit panel.
With a fraction `gamma` of the direct sun visible, the pixel receives
gamma*E_sun + E_sky, so relative to full illumination:

    out = s * (gamma + (1 - gamma) * k),   k = E_sky / (E_sun + E_sky)

gamma = 0 is a pixel in full shadow (skylight only).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.interpolate import CubicSpline

from orewatch_errors import ConfigError, DimensionError
from orewatch_spectral import (Spectrum, WavelengthGrid, parse_float_list,
                               read_header, write_header)

SUN_TEMPERATURE_K = 5778.0

# Planck constants folded into nm units
_C2_NM_K = 1.4387769e7


@dataclass(frozen=True, eq=False)
class Atmosphere:
    """Paired direct-sun and diffuse-sky irradiance curves on one grid."""

    e_sun: np.ndarray
    e_sky: np.ndarray
    grid: WavelengthGrid

    def __post_init__(self):
        e_sun = np.array(self.e_sun, dtype=np.float64).reshape(-1)
        e_sky = np.array(self.e_sky, dtype=np.float64).reshape(-1)
        if e_sun.size != len(self.grid) or e_sky.size != len(self.grid):
            raise DimensionError(
                f"atmosphere curves of length {e_sun.size}/{e_sky.size} "
                f"for a {len(self.grid)}-band grid"
            )
        if not (np.all(np.isfinite(e_sun)) and np.all(np.isfinite(e_sky))):
            raise DimensionError("atmosphere curves must be finite")
        if np.any(e_sun < 0) or np.any(e_sky < 0) or np.any(e_sun + e_sky <= 0):
            raise DimensionError("atmosphere irradiance must be non-negative and non-zero")
        e_sun.setflags(write=False)
        e_sky.setflags(write=False)
        object.__setattr__(self, "e_sun", e_sun)
        object.__setattr__(self, "e_sky", e_sky)


@dataclass(frozen=True)
class AtmosphereSamplerParams:
    """Ranges for drawing candidate atmospheres.

    Attributes:
        blue_bias_range: Exponent range of the (lambda/lambda_ref)^-b skylight tilt
        sky_ratio_range: Broadband E_sky/E_sun interval, inside (0, 1]
        smoothness: Spline control-point count shaping the sunlight curve
        sun_jitter: Half-width of the log-amplitude perturbation at each control point
        reference_nm: Wavelength at which the tilt is 1
        seed: Seed for stand-alone sampling
    """

    blue_bias_range: tuple = (0.5, 2.0)
    sky_ratio_range: tuple = (0.05, 0.35)
    smoothness: int = 8
    sun_jitter: float = 0.15
    reference_nm: float = 650.0
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.blue_bias_range
        if not lo <= hi:
            raise ConfigError(f"empty blue bias range {self.blue_bias_range}")
        lo, hi = self.sky_ratio_range
        if not (0 < lo <= hi <= 1):
            raise ConfigError(f"sky ratio range {self.sky_ratio_range} must lie in (0, 1]")
        if self.smoothness < 2:
            raise ConfigError("sunlight curve needs at least 2 control points")
        if self.sun_jitter < 0 or self.reference_nm <= 0:
            raise ConfigError("sun jitter must be >= 0 and reference wavelength > 0")

    def rng(self):
        return np.random.default_rng(self.seed)


@dataclass(frozen=True)
class RelightParams:
    gamma: float
    atmosphere: Atmosphere

    def __post_init__(self):
        if not 0.0 <= self.gamma <= 1.0:
            raise DimensionError(f"gamma {self.gamma} outside [0, 1]")


def planck_shape(grid, temperature_k=SUN_TEMPERATURE_K):
    """Blackbody spectral shape on `grid`, scaled to a peak of 1."""
    wl = grid.wavelengths_nm
    radiance = wl ** -5 / np.expm1(_C2_NM_K / (wl * temperature_k))
    return radiance / radiance.max()


def sky_tilt(grid, blue_bias, reference_nm):
    return (grid.wavelengths_nm / reference_nm) ** (-np.asarray(blue_bias, dtype=np.float64)[..., None])


def _sample_curves(params, grid, n, rng):
    """Draw `n` sun/sky curve pairs as (n, bands) arrays."""
    b_lo, b_hi = params.blue_bias_range
    r_lo, r_hi = params.sky_ratio_range
    blue_bias = rng.uniform(b_lo, b_hi, size=n)
    ratio = rng.uniform(r_lo, r_hi, size=n)
    jitter = rng.uniform(-params.sun_jitter, params.sun_jitter, size=(params.smoothness, n))

    wl = grid.wavelengths_nm
    knots = np.linspace(wl[0], wl[-1], params.smoothness)
    if len(wl) > 1:
        log_gain = CubicSpline(knots, jitter, axis=0, bc_type="natural")(wl).T
    else:
        log_gain = jitter[:1].T
    e_sun = planck_shape(grid)[None, :] * np.exp(log_gain)

    e_sky = e_sun * sky_tilt(grid, blue_bias, params.reference_nm)
    e_sky *= (ratio * e_sun.sum(axis=1) / e_sky.sum(axis=1))[:, None]
    return e_sun, e_sky


def sample_atmosphere(
    params: AtmosphereSamplerParams,
    grid: WavelengthGrid,
    rng: Optional[np.random.Generator] = None,
) -> Atmosphere:
    """Draw one candidate atmosphere.

    Args:
        params: AtmosphereSamplerParams
        grid: WavelengthGrid for the curves
        rng: numpy Generator; a fresh one seeded from params.seed if None

    Returns:
        Atmosphere whose skylight is the sunlight tilted toward short
        wavelengths and scaled to the sampled broadband ratio
    """
    rng = params.rng() if rng is None else rng
    e_sun, e_sky = _sample_curves(params, grid, 1, rng)
    return Atmosphere(e_sun[0], e_sky[0], grid)


def shadow_factor(atm: Atmosphere) -> np.ndarray:
    """Per-band fraction of full illumination that remains in full shadow."""
    return atm.e_sky / (atm.e_sun + atm.e_sky)


def sample_shadow_factors(
    params: AtmosphereSamplerParams,
    grid: WavelengthGrid,
    n: int,
    rng: np.random.Generator,
) -> np.ndarray:
    """Shadow factors of `n` freshly sampled atmospheres, shape (n, bands)."""
    e_sun, e_sky = _sample_curves(params, grid, n, rng)
    return e_sky / (e_sun + e_sky)


def relight_values(values, gamma, k):
    """Vectorised relighting: values (..., bands), gamma (...), k (..., bands)."""
    gamma = np.asarray(gamma, dtype=np.float64)[..., None]
    return np.asarray(values, dtype=np.float64) * (gamma + (1.0 - gamma) * k)


def relight(s: Spectrum, p: RelightParams) -> Spectrum:
    """Relight a sunlit spectrum with sun visibility p.gamma under p.atmosphere."""
    if s.grid != p.atmosphere.grid:
        raise DimensionError(f"spectrum grid {s.grid} does not match atmosphere grid {p.atmosphere.grid}")
    return Spectrum(relight_values(s.values, p.gamma, shadow_factor(p.atmosphere)), s.grid)


def augment_batch(
    batch: np.ndarray,
    grid: WavelengthGrid,
    sampler: AtmosphereSamplerParams,
    n_variants: int,
    rng: np.random.Generator,
) -> np.ndarray:
    """Expand a batch with relit copies of every spectrum.

    Args:
        batch: (n, bands) array of spectra on `grid`
        grid: WavelengthGrid of the batch
        sampler: AtmosphereSamplerParams for the variants' atmospheres
        n_variants: Relit copies per spectrum (0 returns the batch unchanged)
        rng: numpy Generator

    Returns:
        (n * (1 + n_variants), bands) array: the originals first, then
        `n_variants` blocks each holding one relit copy of every original
        in batch order. Each copy has its own atmosphere and a gamma drawn
        uniformly from [0, 1].
    """
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim != 2 or batch.shape[1] != len(grid):
        raise DimensionError(f"batch of shape {batch.shape} on a {len(grid)}-band grid")
    if n_variants < 0:
        raise ConfigError(f"n_variants must be >= 0, got {n_variants}")
    if n_variants == 0:
        return batch.copy()

    n = batch.shape[0]
    k = sample_shadow_factors(sampler, grid, n * n_variants, rng)
    gamma = rng.uniform(0.0, 1.0, size=n * n_variants)
    variants = relight_values(np.tile(batch, (n_variants, 1)), gamma, k)
    return np.concatenate([batch, variants], axis=0)


def augmented_labels(labels, n_variants):
    """Labels matching the row order produced by augment_batch."""
    return np.tile(np.asarray(labels), n_variants + 1)


def write_atmosphere(atm: Atmosphere, path: str) -> str:
    write_header(
        path,
        {
            "bands": len(atm.grid),
            "wavelengths": atm.grid.wavelengths_nm,
            "e_sun": atm.e_sun,
            "e_sky": atm.e_sky,
        },
    )
    return path


def read_atmosphere(path: str) -> Atmosphere:
    fields, offsets = read_header(path)
    grid = WavelengthGrid(parse_float_list(fields, offsets, "wavelengths", path))
    e_sun = parse_float_list(fields, offsets, "e_sun", path)
    e_sky = parse_float_list(fields, offsets, "e_sky", path)
    return Atmosphere(e_sun, e_sky, grid)

