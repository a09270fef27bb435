import dataclasses

import numpy as np
import pytest

from orewatch_cnn import (DEFAULT_GRID, CnnSpec, CnnState, EpochRecord,
                          PretrainedWeights, TrainLog, TrainOptions,
                          better_epoch, classify_cube, corpus_from_rasters,
                          corpus_to_rasters, iter_epoch_batches,
                          labelled_pixels, load_pretrained, load_state,
                          macro_f1, prepare, prepare_batch,
                          pretrain_on_corpus, read_thematic_map,
                          read_trainlog, save_pretrained, save_state, train,
                          transfer_init, write_thematic_map, write_trainlog)
from orewatch_errors import DimensionError, LabelError, TransferError
from orewatch_illumination import AtmosphereSamplerParams, augment_batch
from orewatch_nn import BatchNorm
from orewatch_spectral import (UNLABELLED, HyperspectralCube, LabelledSpectra,
                               LabelRaster, WavelengthGrid, mean_offset,
                               resample)
from orewatch_synth import CorpusSpec, generate_corpus

SMALL_GRID = WavelengthGrid.arange(430.0, 860.0, 10.0)
QUIET = TrainOptions(epochs=3, batch_size=16, report_every=0)


def _small_spec(n_classes=3):
    return CnnSpec(kernel_lengths=(5, 3), channels=(4, 4), fc_sizes=(8, n_classes), grid=SMALL_GRID)


def _shaped_spectra(rng, grid, n_per_class, n_classes=3, noise=0.01):
    wl = (grid.wavelengths_nm - grid.wavelengths_nm[0]) / np.ptp(grid.wavelengths_nm)
    shapes = [0.2 + 0.3 * wl, 0.5 - 0.3 * wl, 0.3 + 0.2 * np.sin(3 * np.pi * wl)][:n_classes]
    labels = np.repeat(np.arange(n_classes), n_per_class)
    brightness = rng.uniform(0.5, 1.5, size=(labels.size, 1))
    spectra = np.stack(shapes)[labels] * brightness + rng.normal(0.0, noise, size=(labels.size, len(grid)))
    return LabelledSpectra(spectra, labels, grid, n_classes)


class TestSpec:
    def test_default_layer_lengths(self):
        spec = CnnSpec()
        assert len(DEFAULT_GRID) == 216
        assert spec.conv_lengths() == [187, 178, 169]
        assert spec.flat_size == 169 * 16

    def test_default_head_is_twenty_by_three(self, rng):
        network = CnnSpec().build(rng)
        assert network.layers[-1].dims() == (20, 3)

    def test_grid_too_short_for_kernels(self):
        with pytest.raises(DimensionError):
            CnnSpec(grid=WavelengthGrid.arange(430.0, 860.0, 10.0))

    def test_with_classes(self):
        assert CnnSpec().with_classes(9).fc_sizes == (20, 20, 9)


class TestPreparation:
    def test_prepare_resamples_then_offsets(self, sensor_grid, rng):
        spectra = rng.uniform(0.1, 0.5, size=(4, len(sensor_grid)))
        spec = _small_spec()
        out = prepare(spectra, sensor_grid, spec)
        np.testing.assert_allclose(out, mean_offset(resample(spectra, sensor_grid, SMALL_GRID)))
        np.testing.assert_allclose(out.mean(axis=1), 0.0, atol=1e-12)

    def test_relighting_happens_on_native_grid(self, sensor_grid):
        spectra = np.random.default_rng(1).uniform(0.1, 0.5, size=(5, len(sensor_grid)))
        options = TrainOptions(augment=True, n_variants=2)
        prepared, labels = prepare_batch(
            spectra, np.arange(5), sensor_grid, _small_spec(), options, np.random.default_rng(6)
        )
        relit = augment_batch(spectra, sensor_grid, options.sampler, 2, np.random.default_rng(6))
        np.testing.assert_allclose(prepared, mean_offset(resample(relit, sensor_grid, SMALL_GRID)))
        assert labels.tolist() == list(range(5)) * 3

    def test_epoch_sees_each_original_once_plus_variants(self, rng):
        dataset = _shaped_spectra(rng, SMALL_GRID, 10)
        options = TrainOptions(batch_size=7, augment=True, n_variants=4)
        seen, originals = 0, []
        for spectra, labels in iter_epoch_batches(dataset, options, rng):
            prepared, _ = prepare_batch(spectra, labels, dataset.grid, _small_spec(), options, rng)
            seen += prepared.shape[0]
            originals.append(spectra)
        originals = np.concatenate(originals)
        assert seen == 30 * 5
        assert sorted(map(tuple, originals.tolist())) == sorted(map(tuple, dataset.spectra.tolist()))


class TestTrain:
    def test_zero_epochs_returns_init(self, rng):
        state = CnnState(_small_spec(), _small_spec().build(rng))
        data = _shaped_spectra(rng, SMALL_GRID, 5)
        trained, log = train(state, data, data, dataclasses.replace(QUIET, epochs=0))
        for a, b in zip(state.network.parameters(), trained.network.parameters()):
            np.testing.assert_array_equal(a, b)
        assert log.records == []

    def test_init_state_not_modified(self, rng):
        state = CnnState(_small_spec(), _small_spec().build(rng))
        before = [p.copy() for p in state.network.parameters()]
        data = _shaped_spectra(rng, SMALL_GRID, 5)
        train(state, data, data, QUIET)
        for a, b in zip(before, state.network.parameters()):
            np.testing.assert_array_equal(a, b)

    def test_reproducible(self, rng):
        data = _shaped_spectra(rng, SMALL_GRID, 8)
        options = dataclasses.replace(QUIET, augment=True, n_variants=2)
        _, first = train(_small_spec(), data, data, options, seed=3)
        _, second = train(_small_spec(), data, data, options, seed=3)
        np.testing.assert_array_equal(first.column("loss"), second.column("loss"))

    def test_log_records_every_epoch(self, rng):
        data = _shaped_spectra(rng, SMALL_GRID, 8)
        state, log = train(_small_spec(), data, data, QUIET, test_set=data)
        assert log.column("epoch").tolist() == [1, 2, 3]
        assert np.all(np.isfinite(log.column("test_f1")))
        assert 1 <= state.metadata["selected_epoch"] <= 3

    def test_tied_f1_keeps_the_lower_loss_epoch(self, rng):
        data = _shaped_spectra(rng, SMALL_GRID, 10, noise=0.001)
        options = dataclasses.replace(QUIET, epochs=12)
        state, log = train(_small_spec(), data, data, options, seed=2)
        top = log.column("val_f1").max()
        tied = [r for r in log.records if r.val_f1 == top]
        expected = min(tied, key=lambda r: r.val_loss).epoch
        assert state.metadata["selected_epoch"] == expected
        assert np.all(np.isfinite(log.column("val_loss")))

    def test_better_epoch(self):
        assert better_epoch(1.0, 0.1, 1.0, 0.5)
        assert not better_epoch(1.0, 0.5, 1.0, 0.1)
        assert better_epoch(0.9, 2.0, 0.8, 0.1)
        assert not better_epoch(0.7, 0.01, 0.8, 0.1)
        assert better_epoch(0.2, 3.0, -np.inf, np.inf)

    def test_last_selection(self, rng):
        data = _shaped_spectra(rng, SMALL_GRID, 8)
        state, _ = train(_small_spec(), data, data, dataclasses.replace(QUIET, selection="last"))
        assert state.metadata["selected_epoch"] == 3

    def test_memorises_training_spectrum(self, rng):
        data = _shaped_spectra(rng, SMALL_GRID, 30)
        options = TrainOptions(epochs=40, batch_size=15, report_every=0)
        state, _ = train(_small_spec(), data, data, options, seed=1)
        pixel = data.spectra[data.labels == 1][:1]
        cube = HyperspectralCube(np.tile(pixel, (2, 3, 1)), SMALL_GRID)
        thematic = classify_cube(state, cube)
        assert np.all(thematic.labels.labels == 1)

    def test_frozen_batchnorm_keeps_statistics(self, rng):
        state = CnnState(_small_spec(), _small_spec().build(rng))
        data = _shaped_spectra(rng, SMALL_GRID, 5)
        options = dataclasses.replace(QUIET, freeze_batchnorm=True, selection="last")
        trained, _ = train(state, data, data, options)
        for layer in trained.network.layers:
            if isinstance(layer, BatchNorm):
                np.testing.assert_array_equal(layer.running_mean, 0.0)
                assert not layer.frozen

    def test_labels_outside_head(self, rng):
        data = _shaped_spectra(rng, SMALL_GRID, 5)
        with pytest.raises(LabelError):
            train(_small_spec(2), data, data, QUIET)


class TestPretrainAndTransfer:
    def test_separable_corpus(self, rng):
        corpus = _shaped_spectra(rng, SMALL_GRID, 50, n_classes=2, noise=0.005)
        options = TrainOptions(epochs=50, batch_size=20, report_every=0)
        pretrained, log = pretrain_on_corpus(corpus, _small_spec(), options, seed=2)
        assert pretrained.n_classes == 2
        assert macro_f1(pretrained.network, corpus, pretrained.spec) >= 0.99

    def test_pretraining_deterministic(self, rng):
        corpus = _shaped_spectra(rng, SMALL_GRID, 10)
        first, _ = pretrain_on_corpus(corpus, _small_spec(), QUIET, seed=5)
        second, _ = pretrain_on_corpus(corpus, _small_spec(), QUIET, seed=5)
        for a, b in zip(first.network.parameters(), second.network.parameters()):
            np.testing.assert_array_equal(a, b)

    def test_class_gap(self, rng):
        corpus = _shaped_spectra(rng, SMALL_GRID, 5)
        gapped = LabelledSpectra(corpus.spectra, np.where(corpus.labels == 1, 2, corpus.labels), SMALL_GRID, 3)
        with pytest.raises(LabelError, match=r"missing \[1\]"):
            pretrain_on_corpus(gapped, _small_spec(), QUIET)

    def test_transfer_copies_all_but_head(self, rng):
        pretrained = PretrainedWeights(_small_spec(5).build(rng), _small_spec(5), 5)
        state = transfer_init(pretrained, 5, seed=1)
        for src, dst in zip(pretrained.network.layers[:-1], state.network.layers[:-1]):
            for name, array in {**src.params(), **src.buffers()}.items():
                assert {**dst.params(), **dst.buffers()}[name].tobytes() == array.tobytes()
        assert state.network.layers[-1].weight.tobytes() != pretrained.network.layers[-1].weight.tobytes()

    def test_transfer_head_width(self, rng):
        pretrained = PretrainedWeights(CnnSpec().with_classes(9).build(rng), CnnSpec().with_classes(9), 9)
        state = transfer_init(pretrained, 3)
        assert state.network.layers[-1].dims() == (20, 3)
        out = state.network.predict(rng.standard_normal((2, 1, 216)))
        assert np.all(np.isfinite(out))

    def test_transfer_shape_mismatch(self, rng):
        pretrained = PretrainedWeights(_small_spec(5).build(rng), _small_spec(5), 5)
        pretrained.network.layers[0] = _small_spec().build(rng).layers[3]
        with pytest.raises(TransferError):
            transfer_init(pretrained, 3)

    def test_transfer_version(self, rng):
        pretrained = PretrainedWeights(_small_spec(5).build(rng), _small_spec(5), 5, version=2)
        with pytest.raises(TransferError):
            transfer_init(pretrained, 3)

    def test_pretrained_file_round_trip(self, tmp_path, rng):
        pretrained = PretrainedWeights(_small_spec(4).build(rng), _small_spec(4), 4)
        save_pretrained(pretrained, str(tmp_path / "pretrained"))
        back = load_pretrained(str(tmp_path / "pretrained"))
        assert back.n_classes == 4
        assert back.grid == SMALL_GRID
        for a, b in zip(pretrained.network.parameters(), back.network.parameters()):
            assert a.tobytes() == b.tobytes()


class TestClassify:
    def test_identical_pixels_identical_predictions(self, rng, sensor_grid):
        state = CnnState(_small_spec(), _small_spec().build(rng))
        cube = HyperspectralCube(np.tile(rng.uniform(0.1, 0.4, len(sensor_grid)), (5, 7, 1)), sensor_grid)
        thematic = classify_cube(state, cube, workers=3, chunk=4)
        assert np.all(thematic.labels.labels == thematic.labels.labels[0, 0])
        np.testing.assert_allclose(thematic.scores.data.sum(axis=2), 1.0, rtol=1e-5)

    def test_deterministic_across_chunking(self, rng, small_cube):
        state = CnnState(_small_spec(), _small_spec().build(rng))
        a = classify_cube(state, small_cube, workers=1, chunk=1000)
        b = classify_cube(state, small_cube, workers=4, chunk=5)
        np.testing.assert_array_equal(a.labels.labels, b.labels.labels)

    def test_grid_incompatible(self, rng):
        state = CnnState(_small_spec(), _small_spec().build(rng))
        cube = HyperspectralCube(np.ones((2, 2, 3)), WavelengthGrid([500.0, 600.0, 700.0]))
        with pytest.raises(DimensionError):
            classify_cube(state, cube)

    def test_thematic_map_round_trip(self, tmp_path, rng, small_cube):
        state = CnnState(_small_spec(), _small_spec().build(rng))
        thematic = classify_cube(state, small_cube)
        write_thematic_map(thematic, str(tmp_path / "map"))
        back = read_thematic_map(str(tmp_path / "map"))
        np.testing.assert_array_equal(back.labels.labels, thematic.labels.labels)
        np.testing.assert_array_equal(back.scores.data, thematic.scores.data)


class TestTrainLog:
    def test_epochs_must_increase(self):
        log = TrainLog()
        log.append(EpochRecord(2, 0.5, 0.8))
        with pytest.raises(DimensionError):
            log.append(EpochRecord(2, 0.4, 0.9))

    def test_convergence_epoch(self):
        log = TrainLog()
        for epoch, f1 in enumerate([0.2, 0.5, 0.795, 0.81, 0.8], start=1):
            log.append(EpochRecord(epoch, 1.0, f1, f1))
        assert log.convergence_epoch() == 3

    def test_file_round_trip(self, tmp_path):
        log = TrainLog()
        log.append(EpochRecord(1, 0.9, 0.5, float("nan"), 0.25))
        log.append(EpochRecord(2, 0.7, 0.6, float("nan"), 0.5))
        back = read_trainlog(write_trainlog(log, tmp_path / "log.csv"))
        assert back.column("epoch").tolist() == [1, 2]
        np.testing.assert_allclose(back.column("loss"), [0.9, 0.7])
        assert np.all(np.isnan(back.column("test_f1")))


def test_state_file_round_trip(tmp_path, rng, small_cube):
    state = CnnState(_small_spec(), _small_spec().build(rng), {"augment": True, "seed": 4})
    save_state(state, str(tmp_path / "cnn"))
    back = load_state(str(tmp_path / "cnn"))
    assert back.metadata["augment"] == "True"
    np.testing.assert_array_equal(
        classify_cube(back, small_cube).scores.data, classify_cube(state, small_cube).scores.data
    )


def test_labelled_pixels_skip_unlabelled(small_cube):
    labels = np.zeros((6, 8), dtype=np.uint8)
    labels[0, :] = UNLABELLED
    labels[1, :] = 1
    data = labelled_pixels(small_cube, LabelRaster(labels, 2), mapping=np.array([1, 0]))
    assert len(data) == 40
    assert data.labels[:8].tolist() == [0] * 8
    np.testing.assert_allclose(data.spectra[0], small_cube.data[1, 0])


def test_corpus_raster_round_trip():
    corpus = generate_corpus(CorpusSpec(n_classes=3, per_class=4, grid=SMALL_GRID))
    cube, labels = corpus_to_rasters(corpus)
    back = corpus_from_rasters(cube, labels)
    np.testing.assert_array_equal(back.labels, corpus.labels)
    np.testing.assert_allclose(back.spectra, corpus.spectra, rtol=1e-6)
