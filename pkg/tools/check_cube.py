#!/usr/bin/env python3
"""
Check a cube or label raster on disk and print what it holds
"""

import os
import sys

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

try:
    import numpy as np
except ImportError as e:
    print(f"ERROR: {e}")
    sys.exit(1)

from orewatch_errors import OrewatchError
from orewatch_spectral import read_cube, read_header, read_labels


def check_cube(path):
    cube = read_cube(path)
    data = cube.data
    wl = cube.grid.wavelengths_nm
    print(f"Cube: {cube.height} lines x {cube.width} samples x {cube.bands} bands")
    print(f"Wavelengths: {wl[0]:.1f}-{wl[-1]:.1f} nm")
    print("=" * 70)

    ok = True
    finite = np.isfinite(data).all()
    print(f"{'✓' if finite else '✗'} all values finite")
    ok &= bool(finite)

    negative = int((data < 0).sum())
    print(f"{'✓' if negative == 0 else '✗'} no negative reflectance ({negative} negative values)")
    ok &= negative == 0

    norms = np.linalg.norm(cube.pixels(), axis=1)
    dead = int((norms <= 1e-6).sum())
    if dead:
        print(f"  WARNING: {dead} pixels have a near-zero spectrum")
    print(f"  value range {data.min():.4f} .. {data.max():.4f}, mean {data.mean():.4f}")
    return ok


def check_labels(path):
    raster = read_labels(path)
    counts = np.bincount(raster.labels.reshape(-1), minlength=256)
    print(f"Labels: {raster.height} lines x {raster.width} samples, {raster.n_classes} classes")
    print("=" * 70)
    for c in range(raster.n_classes):
        print(f"  class {c}: {counts[c]} pixels")
    print(f"  unlabelled: {counts[255]} pixels")
    in_range = counts[raster.n_classes:255].sum() == 0
    print(f"{'✓' if in_range else '✗'} every label below the class count")
    return bool(in_range)


if len(sys.argv) != 2:
    print(f"Usage: {sys.argv[0]} <file.hdr>")
    sys.exit(1)

path = sys.argv[1]
try:
    fields, _ = read_header(path if path.endswith(".hdr") else os.path.splitext(path)[0] + ".hdr")
    ok = check_labels(path) if "classes" in fields else check_cube(path)
except (OrewatchError, OSError) as e:
    print(f"✗ {path}: {e}")
    sys.exit(1)

sys.exit(0 if ok else 1)
