"""Spectral data types, cube I/O, panel calibration and spectral-angle geometry.

Cubes live on disk as an ENVI header plus a raw band-sequential
little-endian float32 data file. Headers are read and written with
`spectral.io.envi`:

    ENVI
    samples = 1443
    lines = 289
    bands = 220
    file type = ENVI Standard
    data type = 4
    interleave = bsq
    byte order = 0
    wavelength units = Nanometers
    wavelength = { 400.0 , 402.6 , ... }

Older headers spelling the layout out (`data type = float32`,
`byte order = little`, `wavelengths = {...}`) still load, and a
`header offset` is honoured. Label rasters use the same keys (without
wavelengths, with ``classes``) and one unsigned byte per pixel; 255 marks
an unlabelled pixel.
"""

from __future__ import annotations

import os.path
from dataclasses import dataclass
from typing import Any, Dict, Tuple, Union

import numpy as np
from spectral.io import envi

from orewatch_errors import (CalibrationError, DegenerateVectorError,
                             DimensionError, FormatError, RangeError)

UNLABELLED = 255

CUBE_DATA_EXT = ".img"
LABEL_DATA_EXT = ".lbl"
HEADER_EXT = ".hdr"

ENVI_STANDARD = "ENVI Standard"
ENVI_CLASSIFICATION = "ENVI Classification"
# ENVI data type codes; the names are accepted on read as well
ENVI_DATA_TYPES = {"float32": "4", "uint8": "1"}


class WavelengthGrid:
    """Strictly increasing band-centre wavelengths in nanometres."""

    def __init__(self, wavelengths_nm):
        values = np.array(wavelengths_nm, dtype=np.float64).reshape(-1)
        if values.size == 0:
            raise DimensionError("wavelength grid is empty")
        if not np.all(np.isfinite(values)) or np.any(values <= 0):
            raise DimensionError("wavelengths must be finite and positive")
        if np.any(np.diff(values) <= 0):
            raise DimensionError("wavelengths must be strictly increasing")
        values.setflags(write=False)
        self._values = values

    @classmethod
    def linspace(cls, start_nm, stop_nm, count):
        return cls(np.linspace(start_nm, stop_nm, count))

    @classmethod
    def arange(cls, start_nm, stop_nm, step_nm):
        """Grid from start to stop inclusive at a fixed spacing."""
        count = int(round((stop_nm - start_nm) / step_nm)) + 1
        return cls(start_nm + step_nm * np.arange(count))

    @property
    def wavelengths_nm(self):
        return self._values

    def __len__(self):
        return self._values.size

    def __eq__(self, other):
        if not isinstance(other, WavelengthGrid):
            return NotImplemented
        return np.array_equal(self._values, other._values)

    def __hash__(self):
        return hash(self._values.tobytes())

    def __repr__(self):
        return (
            f"WavelengthGrid({len(self)} bands, "
            f"{self._values[0]:.1f}-{self._values[-1]:.1f} nm)"
        )

    def covers(self, other):
        """True if every wavelength of `other` lies inside this grid's range."""
        return (
            other.wavelengths_nm[0] >= self._values[0]
            and other.wavelengths_nm[-1] <= self._values[-1]
        )

    def nearest_band(self, wavelength_nm):
        return int(np.argmin(np.abs(self._values - wavelength_nm)))


@dataclass(frozen=True, eq=False)
class Spectrum:
    """Per-band apparent reflectance bound to a wavelength grid."""

    values: np.ndarray
    grid: WavelengthGrid

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64).reshape(-1)
        if values.size != len(self.grid):
            raise DimensionError(
                f"spectrum has {values.size} values for a {len(self.grid)}-band grid"
            )
        if not np.all(np.isfinite(values)):
            raise DimensionError("spectrum values must be finite")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)


@dataclass(frozen=True, eq=False)
class HyperspectralCube:
    """Reflectance raster of shape (height, width, bands).

    The array is held pixel-interleaved in memory; `bsq()` gives the
    band-sequential order used on disk.
    """

    data: np.ndarray
    grid: WavelengthGrid

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float32)
        if data.ndim != 3:
            raise DimensionError(f"cube data must be 3-D, got shape {data.shape}")
        if data.shape[2] != len(self.grid):
            raise DimensionError(
                f"cube has {data.shape[2]} bands but grid has {len(self.grid)}"
            )
        if data.flags.writeable:
            data = data.copy()
            data.setflags(write=False)
        object.__setattr__(self, "data", data)

    @property
    def height(self):
        return self.data.shape[0]

    @property
    def width(self):
        return self.data.shape[1]

    @property
    def bands(self):
        return self.data.shape[2]

    def pixels(self):
        """All pixel spectra as a (height*width, bands) view, row-major."""
        return self.data.reshape(-1, self.bands)

    def spectrum(self, row, col):
        return Spectrum(self.data[row, col], self.grid)

    def bsq(self):
        return np.ascontiguousarray(self.data.transpose(2, 0, 1))


@dataclass(frozen=True, eq=False)
class LabelRaster:
    """Per-pixel class indices; UNLABELLED marks pixels without a class."""

    labels: np.ndarray
    n_classes: int

    def __post_init__(self):
        labels = np.asarray(self.labels, dtype=np.uint8)
        if labels.ndim != 2:
            raise DimensionError(f"label raster must be 2-D, got {labels.shape}")
        if not 1 <= self.n_classes < UNLABELLED:
            raise DimensionError(f"class count {self.n_classes} out of range")
        labelled = labels[labels != UNLABELLED]
        if labelled.size and int(labelled.max()) >= self.n_classes:
            raise DimensionError(
                f"label {int(labelled.max())} not below class count {self.n_classes}"
            )
        if labels.flags.writeable:
            labels = labels.copy()
            labels.setflags(write=False)
        object.__setattr__(self, "labels", labels)

    @property
    def height(self):
        return self.labels.shape[0]

    @property
    def width(self):
        return self.labels.shape[1]

    def labelled_mask(self):
        return self.labels != UNLABELLED


@dataclass(frozen=True, eq=False)
class LabelledSpectra:
    """Spectra with dense class labels on one grid (pretraining corpus, test sets)."""

    spectra: np.ndarray
    labels: np.ndarray
    grid: WavelengthGrid
    n_classes: int

    def __post_init__(self):
        spectra = np.asarray(self.spectra, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if spectra.ndim != 2 or spectra.shape[1] != len(self.grid) or spectra.shape[0] != labels.size:
            raise DimensionError(
                f"{labels.size} labels for spectra of shape {spectra.shape} on {self.grid}"
            )
        object.__setattr__(self, "spectra", spectra)
        object.__setattr__(self, "labels", labels)

    def __len__(self):
        return self.labels.size


def calibrate(
    raw: HyperspectralCube,
    panel_region: Tuple[int, int, int, int],
    panel_reflectance: float,
) -> HyperspectralCube:
    """Convert raw radiance to apparent reflectance against a reference panel.

    Args:
        raw: HyperspectralCube of raw sensor values
        panel_region: (row0, col0, row1, col1) half-open pixel rectangle
        panel_reflectance: Known panel reflectance as a fraction (0.99 for Spectralon)

    Returns:
        HyperspectralCube on the same grid; negative values clamped to 0
    """
    row0, col0, row1, col1 = panel_region
    if not (0 <= row0 < row1 <= raw.height and 0 <= col0 < col1 <= raw.width):
        raise CalibrationError(
            f"panel region {panel_region} is not inside a {raw.height}x{raw.width} raster"
        )
    if not 0 < panel_reflectance:
        raise CalibrationError(f"panel reflectance {panel_reflectance} must be positive")

    panel = raw.data[row0:row1, col0:col1].astype(np.float64)
    panel_mean = panel.reshape(-1, raw.bands).mean(axis=0)
    bad = np.flatnonzero(~(panel_mean > 0))
    if bad.size:
        band = int(bad[0])
        raise CalibrationError(
            f"panel mean is {panel_mean[band]} in band {band} "
            f"({raw.grid.wavelengths_nm[band]:.1f} nm)"
        )

    reflectance = raw.data.astype(np.float64) / (panel_mean / panel_reflectance)
    np.maximum(reflectance, 0.0, out=reflectance)
    return HyperspectralCube(reflectance.astype(np.float32), raw.grid)


def resample(
    values: np.ndarray, source: WavelengthGrid, target: WavelengthGrid
) -> np.ndarray:
    """Piecewise-linear resampling of spectra along their last axis.

    Args:
        values: Array whose last axis matches `source`
        source: WavelengthGrid the values are sampled on
        target: WavelengthGrid to sample onto (must lie inside `source`)

    Returns:
        float64 array with the last axis matching `target`
    """
    values = np.asarray(values, dtype=np.float64)
    if values.shape[-1] != len(source):
        raise DimensionError(
            f"values have {values.shape[-1]} bands, source grid has {len(source)}"
        )
    if not source.covers(target):
        raise RangeError(
            f"target {target.wavelengths_nm[0]:.2f}-{target.wavelengths_nm[-1]:.2f} nm "
            f"outside source {source.wavelengths_nm[0]:.2f}-"
            f"{source.wavelengths_nm[-1]:.2f} nm"
        )
    if source == target:
        return values.copy()

    src = source.wavelengths_nm
    dst = target.wavelengths_nm
    upper = np.clip(np.searchsorted(src, dst, side="right"), 1, len(src) - 1)
    lower = upper - 1
    weight = (dst - src[lower]) / (src[upper] - src[lower])
    return values[..., lower] * (1.0 - weight) + values[..., upper] * weight


def resample_spectrum(s: Spectrum, target: WavelengthGrid) -> Spectrum:
    return Spectrum(resample(s.values, s.grid, target), target)


def mean_offset(values: np.ndarray) -> np.ndarray:
    """Shift spectra along the last axis so each has zero mean."""
    values = np.asarray(values, dtype=np.float64)
    return values - values.mean(axis=-1, keepdims=True)


def mean_offset_spectrum(s):
    return Spectrum(mean_offset(s.values), s.grid)


def spectral_angle(a: np.ndarray, b: np.ndarray) -> Union[float, np.ndarray]:
    """Angle in radians between two spectra, in [0, pi].

    Accepts single vectors or stacks of vectors along the last axis.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape[-1] != b.shape[-1]:
        raise DimensionError(f"spectral angle of lengths {a.shape[-1]} and {b.shape[-1]}")
    norm_a = np.linalg.norm(a, axis=-1)
    norm_b = np.linalg.norm(b, axis=-1)
    if np.any(norm_a == 0) or np.any(norm_b == 0):
        raise DegenerateVectorError("spectral angle of a zero-norm vector")
    # half-angle form; arccos of the cosine loses ~1e-8 rad near zero
    unit_a = a / norm_a[..., None]
    unit_b = b / norm_b[..., None]
    angle = 2.0 * np.arctan2(
        np.linalg.norm(unit_a - unit_b, axis=-1), np.linalg.norm(unit_a + unit_b, axis=-1)
    )
    return float(angle) if angle.ndim == 0 else angle


# Header plumbing


def _header_path(path):
    root, ext = os.path.splitext(str(path))
    if ext in (HEADER_EXT, CUBE_DATA_EXT, LABEL_DATA_EXT):
        return root + HEADER_EXT
    return str(path) + HEADER_EXT


def write_header(
    path: str, fields: Dict[str, Any], file_type: str = ENVI_STANDARD
) -> None:
    """Write an ordered mapping as an ENVI-style header.

    Sequence values are written as `{a , b , ...}` lists. `file_type` tells
    cube headers apart from the pipeline's own records (manifests, metrics,
    model sidecars).
    """
    header = {"file type": file_type}
    for key, value in fields.items():
        header[key] = value.tolist() if isinstance(value, np.ndarray) else value
    envi.write_envi_header(str(path), header)


def _key_offsets(path):
    offsets = {}
    position = 0
    with open(path, "rb") as f:
        for line in f:
            key, sep, _ = line.partition(b"=")
            if sep:
                offsets[key.decode("utf-8", "replace").strip().lower()] = position
            position += len(line)
    return offsets


def read_header(path: str) -> Tuple[Dict[str, Any], Dict[str, int]]:
    """Parse a header file with the ENVI header reader.

    Returns:
        (fields, offsets): values keyed by lower-case key (strings, or lists
        of strings for `{...}` values), and the byte offset of each key's
        line for error reporting
    """
    path = str(path)
    try:
        fields = envi.read_envi_header(path)
    except envi.FileNotAnEnviHeader:
        raise FormatError(f"{path}: not a header (the first line must be 'ENVI')", 0)
    except envi.EnviHeaderParsingError:
        raise FormatError(f"{path}: header cannot be parsed (unterminated {{...}} list?)")
    except UnicodeDecodeError:
        raise FormatError(f"{path}: header is not text")
    return fields, _key_offsets(path)


def _require(fields, offsets, key, path):
    if key not in fields:
        raise FormatError(f"{path}: header is missing '{key}'", 0)
    return fields[key]


def _parse_int(fields, offsets, key, path):
    value = _require(fields, offsets, key, path)
    try:
        parsed = int(value)
    except (TypeError, ValueError):
        raise FormatError(f"{path}: '{key}' is not an integer: {value!r}", offsets.get(key))
    if parsed < 1:
        raise FormatError(f"{path}: '{key}' must be positive, got {parsed}", offsets.get(key))
    return parsed


def parse_float_list(
    fields: Dict[str, Any], offsets: Dict[str, int], key: str, path: str
) -> np.ndarray:
    value = _require(fields, offsets, key, path)
    if isinstance(value, str):
        raise FormatError(f"{path}: '{key}' must be a {{...}} list", offsets.get(key))
    try:
        return np.array([float(v) for v in value if v.strip()])
    except ValueError as e:
        raise FormatError(f"{path}: bad number in '{key}': {e}", offsets.get(key))


def _wavelengths(fields, offsets, path):
    key = "wavelengths" if "wavelengths" in fields and "wavelength" not in fields else "wavelength"
    return key, parse_float_list(fields, offsets, key, path)


def _check_layout(fields, offsets, path, data_type):
    checks = (
        ("interleave", ("bsq",)),
        ("data type", (ENVI_DATA_TYPES[data_type], data_type)),
        ("byte order", ("0", "little")),
    )
    for key, accepted in checks:
        value = str(_require(fields, offsets, key, path)).lower()
        if value not in accepted:
            raise FormatError(
                f"{path}: unsupported {key} {value!r} (only {accepted[0]!r})", offsets.get(key)
            )


def _header_offset(fields, offsets, path):
    if "header offset" not in fields:
        return 0
    try:
        skip = int(fields["header offset"])
    except (TypeError, ValueError):
        skip = -1
    if skip < 0:
        raise FormatError(f"{path}: bad header offset {fields['header offset']!r}", offsets.get("header offset"))
    return skip


def _read_raw(data_path, dtype, expected_count, skip=0):
    if not os.path.exists(data_path):
        raise FormatError(f"data file {data_path} not found")
    size = os.path.getsize(data_path)
    expected_bytes = skip + expected_count * np.dtype(dtype).itemsize
    if size < expected_bytes:
        raise FormatError(
            f"{data_path}: truncated, {size} bytes present but header needs "
            f"{expected_bytes}",
            size,
        )
    if size > expected_bytes:
        raise FormatError(
            f"{data_path}: {size - expected_bytes} unexpected trailing bytes",
            expected_bytes,
        )
    return np.fromfile(data_path, dtype=dtype, count=expected_count, offset=skip)


def write_cube(cube: HyperspectralCube, path: str) -> str:
    """Write a cube as `<stem>.hdr` plus band-sequential `<stem>.img`.

    Returns:
        Path of the header file
    """
    header_path = _header_path(path)
    data_path = os.path.splitext(header_path)[0] + CUBE_DATA_EXT
    write_header(
        header_path,
        {
            "samples": cube.width,
            "lines": cube.height,
            "bands": cube.bands,
            "interleave": "bsq",
            "data type": ENVI_DATA_TYPES["float32"],
            "byte order": 0,
            "wavelength units": "Nanometers",
            "wavelength": cube.grid.wavelengths_nm,
        },
    )
    cube.bsq().astype("<f4").tofile(data_path)
    return header_path


def read_cube(path: str) -> HyperspectralCube:
    """Read a cube written by write_cube, or a float32 little-endian BSQ ENVI cube."""
    header_path = _header_path(path)
    data_path = os.path.splitext(header_path)[0] + CUBE_DATA_EXT
    fields, offsets = read_header(header_path)
    samples = _parse_int(fields, offsets, "samples", header_path)
    lines = _parse_int(fields, offsets, "lines", header_path)
    bands = _parse_int(fields, offsets, "bands", header_path)
    _check_layout(fields, offsets, header_path, "float32")
    key, wavelengths = _wavelengths(fields, offsets, header_path)
    if wavelengths.size != bands:
        raise FormatError(
            f"{header_path}: {wavelengths.size} wavelengths for {bands} bands",
            offsets.get(key),
        )

    skip = _header_offset(fields, offsets, header_path)
    flat = _read_raw(data_path, "<f4", samples * lines * bands, skip)
    data = flat.reshape(bands, lines, samples).transpose(1, 2, 0)
    return HyperspectralCube(data.astype(np.float32), WavelengthGrid(wavelengths))


def write_labels(raster: LabelRaster, path: str) -> str:
    header_path = _header_path(path)
    data_path = os.path.splitext(header_path)[0] + LABEL_DATA_EXT
    write_header(
        header_path,
        {
            "samples": raster.width,
            "lines": raster.height,
            "bands": 1,
            "classes": raster.n_classes,
            "interleave": "bsq",
            "data type": ENVI_DATA_TYPES["uint8"],
            "byte order": 0,
        },
        file_type=ENVI_CLASSIFICATION,
    )
    np.ascontiguousarray(raster.labels, dtype=np.uint8).tofile(data_path)
    return header_path


def read_labels(path: str) -> LabelRaster:
    header_path = _header_path(path)
    data_path = os.path.splitext(header_path)[0] + LABEL_DATA_EXT
    fields, offsets = read_header(header_path)
    samples = _parse_int(fields, offsets, "samples", header_path)
    lines = _parse_int(fields, offsets, "lines", header_path)
    n_classes = _parse_int(fields, offsets, "classes", header_path)
    _check_layout(fields, offsets, header_path, "uint8")
    skip = _header_offset(fields, offsets, header_path)
    flat = _read_raw(data_path, np.uint8, samples * lines, skip)
    return LabelRaster(flat.reshape(lines, samples), n_classes)


def index_grid(count: int) -> WavelengthGrid:
    """Grid 1..count used for rasters whose bands are not wavelengths (features, scores)."""
    return WavelengthGrid(np.arange(1, count + 1, dtype=np.float64))

