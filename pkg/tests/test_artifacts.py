import os

import numpy as np
import pytest
from PIL import Image

import orewatch_artifacts
from orewatch_errors import DimensionError
from orewatch_spectral import UNLABELLED, HyperspectralCube, WavelengthGrid, write_cube


def test_mk_outdirs(tmp_path):
    dirs = orewatch_artifacts.mk_outdirs(str(tmp_path / "run"))
    assert set(dirs) == set(orewatch_artifacts.set_variables())
    for path in dirs.values():
        assert os.path.isdir(path)
    assert dirs["cluster"].endswith("cluster/")


def test_content_hash_covers_data_file(tmp_path):
    grid = WavelengthGrid([500.0, 600.0])
    header = write_cube(HyperspectralCube(np.ones((1, 2, 2)), grid), str(tmp_path / "c"))
    before = orewatch_artifacts.content_hash(header)
    write_cube(HyperspectralCube(np.zeros((1, 2, 2)), grid), str(tmp_path / "c"))
    assert orewatch_artifacts.content_hash(header) != before


def test_manifest_round_trip(tmp_path):
    source = tmp_path / "in.txt"
    source.write_text("hello", encoding="utf-8")
    target = tmp_path / "out.txt"
    target.write_text("world", encoding="utf-8")
    orewatch_artifacts.write_manifest(str(tmp_path), "cluster", 42, {"features": str(source)},
                                      {"model": str(target)}, 1.5)
    fields = orewatch_artifacts.read_manifest(str(tmp_path))
    assert fields["stage"] == "cluster"
    assert fields["seed"] == "42"
    assert fields["elapsed_s"] == "1.500"
    assert fields["input.features"] == orewatch_artifacts.content_hash(str(source))
    assert len(fields["output.model"]) == 64


def test_feature_to_gray():
    np.testing.assert_array_equal(orewatch_artifacts.feature_to_gray(np.full((2, 2), 3.0)), 128)
    gray = orewatch_artifacts.feature_to_gray(np.array([[0.0, 0.5, 1.0]]))
    assert gray.tolist() == [[0, 128, 255]]


def test_class_map_colours(tmp_path):
    labels = np.array([[0, 1], [2, UNLABELLED]], dtype=np.uint8)
    path = orewatch_artifacts.save_class_map(labels, str(tmp_path / "map.png"))
    image = np.asarray(Image.open(path))
    assert tuple(image[0, 0]) == orewatch_artifacts.CLASS_COLOURS[0]
    assert tuple(image[1, 0]) == orewatch_artifacts.CLASS_COLOURS[2]
    assert tuple(image[1, 1]) == (0, 0, 0)


def test_too_many_classes_for_palette():
    with pytest.raises(DimensionError):
        orewatch_artifacts.class_colours(np.array([[len(orewatch_artifacts.CLASS_COLOURS)]]))


def test_pseudo_rgb(small_cube):
    rgb = orewatch_artifacts.pseudo_rgb(small_cube)
    assert rgb.shape == (6, 8, 3)
    assert rgb.dtype == np.uint8
    assert rgb.max() == 255


def test_overlay_points_stays_inside():
    rgb = np.zeros((5, 5, 3), dtype=np.uint8)
    out = orewatch_artifacts.overlay_points(rgb, [0, 4], [0, 4], [1, 2])
    assert tuple(out[0, 0]) == orewatch_artifacts.CLASS_COLOURS[1]
    assert tuple(out[1, 1]) == orewatch_artifacts.CLASS_COLOURS[1]
    assert tuple(out[4, 4]) == orewatch_artifacts.CLASS_COLOURS[2]
    assert tuple(out[2, 2]) == (0, 0, 0)
    assert rgb.max() == 0
