"""k-means in the invariant code space and extraction of the confident training set."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from orewatch_errors import ClusterError, DimensionError, FormatError, SplitError
from orewatch_spectral import (LabelRaster, WavelengthGrid, parse_float_list,
                               read_header, write_header)

# Relative slack allowed when checking that inertia never increases
INERTIA_TOLERANCE = 1e-9


@dataclass(frozen=True, eq=False)
class ClusterModel:
    """Fitted k-means centroids.

    Attributes:
        k: Cluster count
        centroids: (k, dim) array
        inertia: Total squared distance of the points to their centroid
        iterations: Lloyd iterations of the winning restart
        inertia_history: Inertia after every iteration of the winning restart
    """

    k: int
    centroids: np.ndarray
    inertia: float
    iterations: int = 0
    inertia_history: tuple = ()

    def __post_init__(self):
        centroids = np.array(self.centroids, dtype=np.float64)
        if self.k < 1 or centroids.ndim != 2 or centroids.shape[0] != self.k:
            raise DimensionError(f"{self.k} clusters with centroids of shape {centroids.shape}")
        centroids.setflags(write=False)
        object.__setattr__(self, "centroids", centroids)

    @property
    def dim(self):
        return self.centroids.shape[1]

    def distances(self, points):
        """Squared Euclidean distance of every point to every centroid, shape (n, k)."""
        points = np.asarray(points, dtype=np.float64)
        if points.ndim != 2 or points.shape[1] != self.dim:
            raise DimensionError(f"points of shape {points.shape} for {self.dim}-d centroids")
        return _squared_distances(points, self.centroids)

    def assign(self, points):
        """Nearest centroid of every point (lowest index wins a tie)."""
        return np.argmin(self.distances(points), axis=1)


@dataclass(frozen=True, eq=False)
class ConfidentSet:
    """Pixels nearest to each centroid, labelled with their cluster index.

    Entries are grouped by cluster and sorted by distance, then row, then
    column within each cluster.
    """

    rows: np.ndarray
    cols: np.ndarray
    spectra: np.ndarray
    labels: np.ndarray
    distances: np.ndarray
    grid: WavelengthGrid
    n_classes: int

    def __post_init__(self):
        n = len(self.rows)
        for name in ("cols", "labels", "distances"):
            if len(getattr(self, name)) != n:
                raise DimensionError(f"confident set column '{name}' has the wrong length")
        spectra = np.asarray(self.spectra, dtype=np.float64).reshape(n, -1)
        if spectra.shape[1] != len(self.grid):
            raise DimensionError(f"spectra of {spectra.shape[1]} bands on a {len(self.grid)}-band grid")
        object.__setattr__(self, "spectra", spectra)
        object.__setattr__(self, "rows", np.asarray(self.rows, dtype=np.int64))
        object.__setattr__(self, "cols", np.asarray(self.cols, dtype=np.int64))
        object.__setattr__(self, "labels", np.asarray(self.labels, dtype=np.int64))
        object.__setattr__(self, "distances", np.asarray(self.distances, dtype=np.float64))

    def __len__(self):
        return len(self.rows)

    @property
    def per_class(self):
        return np.bincount(self.labels, minlength=self.n_classes)

    def subset(self, index):
        index = np.asarray(index, dtype=np.int64)
        return ConfidentSet(
            self.rows[index], self.cols[index], self.spectra[index],
            self.labels[index], self.distances[index], self.grid, self.n_classes,
        )


def _squared_distances(points, centroids):
    # one pass per centroid keeps the result exact (no |a|^2 - 2ab + |b|^2 cancellation)
    out = np.empty((points.shape[0], centroids.shape[0]), dtype=np.float64)
    for j, centroid in enumerate(centroids):
        diff = points - centroid
        out[:, j] = np.einsum("ij,ij->i", diff, diff)
    return out


def _kmeans_plus_plus(points, k, rng):
    n = points.shape[0]
    centroids = np.empty((k, points.shape[1]), dtype=np.float64)
    centroids[0] = points[rng.integers(n)]
    closest = _squared_distances(points, centroids[:1])[:, 0]
    for j in range(1, k):
        total = closest.sum()
        if total > 0:
            pick = rng.choice(n, p=closest / total)
        else:
            pick = rng.integers(n)
        centroids[j] = points[pick]
        closest = np.minimum(closest, _squared_distances(points, centroids[j:j + 1])[:, 0])
    return centroids


def _lloyd(points, centroids, max_iters, tolerance):
    history = []
    for iteration in range(1, max_iters + 1):
        distances = _squared_distances(points, centroids)
        assignments = np.argmin(distances, axis=1)
        nearest = distances[np.arange(points.shape[0]), assignments]
        inertia = float(nearest.sum())
        if history and inertia > history[-1] * (1.0 + INERTIA_TOLERANCE) + INERTIA_TOLERANCE:
            raise ClusterError(
                f"k-means inertia rose from {history[-1]} to {inertia} at iteration {iteration}"
            )
        history.append(inertia)

        updated = centroids.copy()
        counts = np.bincount(assignments, minlength=centroids.shape[0])
        for j in range(centroids.shape[0]):
            if counts[j]:
                updated[j] = points[assignments == j].mean(axis=0)
            else:
                # empty cluster: re-seed at the point farthest from its centroid
                farthest = int(np.argmax(nearest))
                updated[j] = points[farthest]
                nearest[farthest] = 0.0
        shift = float(np.abs(updated - centroids).max())
        centroids = updated
        if shift <= tolerance:
            break

    distances = _squared_distances(points, centroids)
    assignments = np.argmin(distances, axis=1)
    inertia = float(distances[np.arange(points.shape[0]), assignments].sum())
    if inertia > history[-1] * (1.0 + INERTIA_TOLERANCE) + INERTIA_TOLERANCE:
        raise ClusterError(f"k-means inertia rose from {history[-1]} to {inertia} after the last update")
    history.append(inertia)
    return centroids, assignments, inertia, iteration, history


def kmeans(
    features: np.ndarray,
    k: int,
    restarts: int = 10,
    max_iters: int = 300,
    seed: int = 0,
    tolerance: float = 0.0,
) -> Tuple[ClusterModel, np.ndarray]:
    """Lloyd's k-means with k-means++ seeding, best of several restarts.

    Args:
        features: (n, dim) array of points
        k: Cluster count
        restarts: Independent seedings; the lowest final inertia wins
        max_iters: Iteration cap per restart
        seed: Seed for the k-means++ draws
        tolerance: Stop when no centroid coordinate moves more than this

    Returns:
        (ClusterModel, assignments) with assignments an (n,) int array
    """
    points = np.asarray(features, dtype=np.float64)
    if points.ndim != 2:
        raise DimensionError(f"k-means expects (n, dim) points, got {points.shape}")
    if k < 1:
        raise ClusterError(f"cluster count must be >= 1, got {k}")
    if points.shape[0] < k:
        raise ClusterError(f"{points.shape[0]} points cannot form {k} clusters")
    if restarts < 1 or max_iters < 1:
        raise ClusterError("k-means needs restarts >= 1 and max_iters >= 1")

    rng = np.random.default_rng(seed)
    best = None
    for _ in range(restarts):
        initial = _kmeans_plus_plus(points, k, rng)
        result = _lloyd(points, initial, max_iters, tolerance)
        if best is None or result[2] < best[2]:
            best = result
    centroids, assignments, inertia, iterations, history = best
    model = ClusterModel(k, centroids, inertia, iterations, tuple(history))
    return model, assignments


def cluster_cube(
    features: HyperspectralCube,
    k: int,
    restarts: int = 10,
    max_iters: int = 300,
    seed: int = 0,
) -> Tuple[ClusterModel, LabelRaster]:
    """Cluster every pixel of a cube; returns (ClusterModel, LabelRaster of assignments)."""
    model, assignments = kmeans(features.pixels(), k, restarts, max_iters, seed)
    labels = LabelRaster(assignments.reshape(features.height, features.width).astype(np.uint8), k)
    return model, labels


def extract_confident(
    features: HyperspectralCube,
    model: ClusterModel,
    labels_per_class: int,
    cube: Optional[HyperspectralCube] = None,
) -> ConfidentSet:
    """Take the pixels nearest to each centroid as a pseudo-labelled dataset.

    Args:
        features: HyperspectralCube of codes the model was fitted on
        model: ClusterModel
        labels_per_class: Pixels kept per cluster
        cube: Reflectance cube whose spectra go into the set; the codes are
            used when None

    Returns:
        ConfidentSet with exactly labels_per_class entries per cluster
    """
    if features.bands != model.dim:
        raise DimensionError(f"{features.bands}-d features for {model.dim}-d centroids")
    source = features if cube is None else cube
    if (source.height, source.width) != (features.height, features.width):
        raise DimensionError("reflectance cube and feature raster differ in size")
    if labels_per_class < 1:
        raise ClusterError(f"labels_per_class must be >= 1, got {labels_per_class}")

    distances = model.distances(features.pixels())
    assignments = np.argmin(distances, axis=1)
    nearest = np.sqrt(distances[np.arange(distances.shape[0]), assignments])
    flat_rows, flat_cols = np.divmod(np.arange(distances.shape[0]), features.width)

    picked = []
    for cluster in range(model.k):
        members = np.flatnonzero(assignments == cluster)
        if members.size < labels_per_class:
            raise ClusterError(
                f"cluster {cluster} has {members.size} members, {labels_per_class} requested"
            )
        order = np.lexsort((flat_cols[members], flat_rows[members], nearest[members]))
        picked.append(members[order[:labels_per_class]])
    picked = np.concatenate(picked)

    return ConfidentSet(
        rows=flat_rows[picked],
        cols=flat_cols[picked],
        spectra=source.pixels()[picked],
        labels=assignments[picked],
        distances=nearest[picked],
        grid=source.grid,
        n_classes=model.k,
    )


def split_train_val(
    confident: ConfidentSet, train_per_class: int, val_per_class: int, seed: int = 0
) -> Tuple[ConfidentSet, ConfidentSet]:
    """Seeded, class-stratified split of a confident set into disjoint train and validation sets."""
    if train_per_class < 0 or val_per_class < 0:
        raise SplitError("split sizes must be >= 0")
    rng = np.random.default_rng(seed)
    train, val = [], []
    for cluster in range(confident.n_classes):
        members = np.flatnonzero(confident.labels == cluster)
        if train_per_class + val_per_class > members.size:
            raise SplitError(
                f"class {cluster} has {members.size} samples, "
                f"{train_per_class}+{val_per_class} requested"
            )
        shuffled = rng.permutation(members)
        train.append(np.sort(shuffled[:train_per_class]))
        val.append(np.sort(shuffled[train_per_class:train_per_class + val_per_class]))
    return confident.subset(np.concatenate(train)), confident.subset(np.concatenate(val))


def write_confident(confident, path):
    """Write a confident set as comma-delimited text.

    Columns: row, col, pseudo_label, distance, then one column per band.
    Two comment lines carry the class count and the wavelength grid.
    """
    table = np.column_stack([
        confident.rows, confident.cols, confident.labels, confident.distances, confident.spectra,
    ])
    wavelengths = ",".join(repr(float(w)) for w in confident.grid.wavelengths_nm)
    header = (
        f"classes = {confident.n_classes}\n"
        f"wavelengths = {wavelengths}\n"
        "row,col,pseudo_label,distance,bands..."
    )
    np.savetxt(path, table, delimiter=",", header=header, fmt="%.10g")
    return path


def read_confident(path):
    n_classes = None
    wavelengths = None
    with open(path, encoding="utf-8") as f:
        for line in f:
            if not line.startswith("#"):
                break
            text = line.lstrip("#").strip()
            if text.startswith("classes ="):
                n_classes = int(text.split("=", 1)[1])
            elif text.startswith("wavelengths ="):
                wavelengths = [float(v) for v in text.split("=", 1)[1].split(",")]
    if n_classes is None or wavelengths is None:
        raise FormatError(f"{path}: missing 'classes' or 'wavelengths' comment line", 0)

    table = np.loadtxt(path, delimiter=",", ndmin=2)
    if table.shape[0] and table.shape[1] != 4 + len(wavelengths):
        raise FormatError(f"{path}: {table.shape[1]} columns for {len(wavelengths)} bands")
    table = table.reshape(-1, 4 + len(wavelengths))
    return ConfidentSet(
        rows=table[:, 0].astype(np.int64),
        cols=table[:, 1].astype(np.int64),
        spectra=table[:, 4:],
        labels=table[:, 2].astype(np.int64),
        distances=table[:, 3],
        grid=WavelengthGrid(wavelengths),
        n_classes=n_classes,
    )


def centroid_spectra(cube, assignments):
    """Mean reflectance spectrum of each cluster, shape (k, bands)."""
    labels = np.asarray(assignments.labels).reshape(-1)
    pixels = cube.pixels().astype(np.float64)
    out = np.zeros((assignments.n_classes, cube.bands), dtype=np.float64)
    for cluster in range(assignments.n_classes):
        members = labels == cluster
        if members.any():
            out[cluster] = pixels[members].mean(axis=0)
    return out


def write_centroids(cube, assignments, path):
    """Write each cluster's mean spectrum as one delimited row: cluster, count, bands."""
    spectra = centroid_spectra(cube, assignments)
    counts = np.bincount(np.asarray(assignments.labels).reshape(-1), minlength=256)[: assignments.n_classes]
    table = np.column_stack([np.arange(assignments.n_classes), counts, spectra])
    wavelengths = ",".join(f"{w:g}" for w in cube.grid.wavelengths_nm)
    np.savetxt(path, table, delimiter=",", header=f"cluster,count,{wavelengths}", fmt="%.8g")
    return path


def write_model(model: ClusterModel, path: str) -> str:
    fields = {"k": model.k, "dim": model.dim, "inertia": repr(model.inertia), "iterations": model.iterations}
    for j, centroid in enumerate(model.centroids):
        fields[f"centroid {j}"] = centroid
    write_header(path, fields, file_type="orewatch cluster model")
    return path


def read_model(path: str) -> ClusterModel:
    fields, offsets = read_header(path)
    try:
        k = int(fields["k"])
        centroids = np.stack([parse_float_list(fields, offsets, f"centroid {j}", path) for j in range(k)])
        return ClusterModel(k, centroids, float(fields["inertia"]), int(fields.get("iterations", 0)))
    except (KeyError, ValueError) as e:
        raise FormatError(f"{path}: bad cluster model: {e}", 0)

