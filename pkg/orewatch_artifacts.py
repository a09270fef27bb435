"""Output folder layout, stage manifests and image rendering."""

import hashlib
import os.path

import numpy as np
from PIL import Image

from orewatch_errors import DimensionError
from orewatch_spectral import UNLABELLED, read_header, write_header

# One folder per stage under the run's output directory
SCENE_DIR = "scene/"
SAE_DIR = "sae/"
FEATURES_DIR = "features/"
CLUSTER_DIR = "cluster/"
EXTRACT_DIR = "extract/"
PRETRAIN_DIR = "cnn_pretrained/"
CNN_DIR = "cnn/"
CLASSIFY_DIR = "classify/"
EVAL_DIR = "eval/"
REPORT_DIR = "report/"

MANIFEST_NAME = "manifest.txt"

# Class colours in index order: green, purple, pink, then extras
CLASS_COLOURS = [
    (40, 180, 60),
    (130, 60, 170),
    (240, 120, 190),
    (230, 160, 30),
    (40, 140, 220),
    (200, 50, 50),
    (120, 120, 120),
    (0, 200, 200),
]
UNLABELLED_COLOUR = (0, 0, 0)


def set_variables():
    """Get the stage folder names.

    Returns:
        Dictionary of stage name -> folder name
    """
    return {
        "synth": SCENE_DIR,
        "train-sae": SAE_DIR,
        "encode": FEATURES_DIR,
        "cluster": CLUSTER_DIR,
        "extract": EXTRACT_DIR,
        "pretrain-cnn": PRETRAIN_DIR,
        "train-cnn": CNN_DIR,
        "classify": CLASSIFY_DIR,
        "eval": EVAL_DIR,
        "report": REPORT_DIR,
    }


def set_dirs(arg_outdir="output"):
    """Get the folder path of every stage.

    Args:
        arg_outdir: Base output directory

    Returns:
        Dictionary of stage name -> folder path
    """
    return {
        stage: os.path.join(arg_outdir, folder)
        for stage, folder in set_variables().items()
    }


def mk_outdirs(arg_outdir="output"):
    """Create the output folder and every stage folder.

    Args:
        arg_outdir: Base output directory

    Returns:
        Dictionary of stage name -> folder path
    """
    outdir_dict = set_dirs(arg_outdir)
    os.makedirs(arg_outdir, exist_ok=True)
    for path in outdir_dict.values():
        os.makedirs(path, exist_ok=True)
    return outdir_dict


def content_hash(path):
    """SHA-256 of a file; for a header, the paired data file is hashed too.

    Args:
        path: Artifact path

    Returns:
        Hex digest string
    """
    digest = hashlib.sha256()
    paths = [path]
    root, ext = os.path.splitext(path)
    if ext == ".hdr":
        paths += [root + data_ext for data_ext in (".img", ".lbl") if os.path.exists(root + data_ext)]
    for p in paths:
        with open(p, "rb") as f:
            for block in iter(lambda: f.read(1 << 20), b""):
                digest.update(block)
    return digest.hexdigest()


def write_manifest(stage_dir, stage, seed, inputs, outputs, elapsed_s):
    """Record what a stage read, what it wrote, its seed and its runtime.

    Args:
        stage_dir: Folder of the stage
        stage: Stage name
        seed: Seed the stage ran with
        inputs: Dictionary of input name -> path
        outputs: Dictionary of output name -> path

    Returns:
        Path of the manifest
    """
    fields = {"stage": stage, "seed": seed, "elapsed_s": f"{elapsed_s:.3f}"}
    for name, path in sorted(inputs.items()):
        fields[f"input.{name}"] = content_hash(path)
    for name, path in sorted(outputs.items()):
        fields[f"output.{name}"] = content_hash(path)
    manifest_path = os.path.join(stage_dir, MANIFEST_NAME)
    write_header(manifest_path, fields, file_type="orewatch manifest")
    return manifest_path


def read_manifest(stage_dir):
    fields, _ = read_header(os.path.join(stage_dir, MANIFEST_NAME))
    return fields


def feature_to_gray(feature):
    """Min-max scale a 2-D array to 8-bit; a constant array maps to 128."""
    feature = np.asarray(feature, dtype=np.float64)
    low, high = feature.min(), feature.max()
    if high == low:
        return np.full(feature.shape, 128, dtype=np.uint8)
    scaled = (feature - low) / (high - low)
    return np.round(scaled * 255.0).astype(np.uint8)


def save_gray(pixels, path):
    Image.fromarray(np.asarray(pixels, dtype=np.uint8)).save(path)
    return path


def save_rgb(pixels, path):
    Image.fromarray(np.asarray(pixels, dtype=np.uint8)).save(path)
    return path


def class_colours(labels):
    """Colour a label raster with the class palette (unlabelled in black)."""
    labels = np.asarray(labels)
    if labels.size and labels[labels != UNLABELLED].max(initial=0) >= len(CLASS_COLOURS):
        raise DimensionError(f"only {len(CLASS_COLOURS)} class colours available")
    palette = np.zeros((256, 3), dtype=np.uint8)
    palette[: len(CLASS_COLOURS)] = CLASS_COLOURS
    palette[UNLABELLED] = UNLABELLED_COLOUR
    return palette[labels.astype(np.uint8)]


def save_class_map(labels, path):
    return save_rgb(class_colours(labels), path)


def pseudo_rgb(cube, wavelengths_nm=(640.0, 550.0, 460.0), percentiles=(2.0, 98.0)):
    """Three-band colour composite with a per-channel percentile stretch.

    Args:
        cube: HyperspectralCube
        wavelengths_nm: Target red, green and blue wavelengths
        percentiles: Low/high stretch percentiles

    Returns:
        (height, width, 3) uint8 array
    """
    bands = [cube.grid.nearest_band(w) for w in wavelengths_nm]
    rgb = cube.data[:, :, bands].astype(np.float64)
    out = np.zeros(rgb.shape, dtype=np.uint8)
    for channel in range(3):
        low, high = np.percentile(rgb[:, :, channel], percentiles)
        if high <= low:
            continue
        stretched = np.clip((rgb[:, :, channel] - low) / (high - low), 0.0, 1.0)
        out[:, :, channel] = np.round(stretched * 255.0).astype(np.uint8)
    return out


def overlay_points(rgb, rows, cols, labels, radius=1):
    """Draw labelled points in their class colours on a copy of an RGB image."""
    out = np.array(rgb, dtype=np.uint8)
    height, width = out.shape[:2]
    colours = class_colours(np.asarray(labels))
    for row, col, colour in zip(rows, cols, colours):
        r0, r1 = max(0, row - radius), min(height, row + radius + 1)
        c0, c1 = max(0, col - radius), min(width, col + radius + 1)
        out[r0:r1, c0:c1] = colour
    return out
