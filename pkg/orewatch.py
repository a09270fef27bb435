#!/usr/bin/env python3
"""
Orewatch - label-free ore/waste mapping of hyperspectral mine-face scans

Runs the pipeline one stage at a time or end to end:

    synth -> train-sae -> encode -> cluster -> extract
          -> pretrain-cnn -> train-cnn -> classify -> eval -> report

Usage:
    python orewatch.py all --config orewatch.cfg --out output
    python orewatch.py train-cnn --set train.arms=baseline,combined

Requirements:
    Python 3.9+ with: numpy, scipy, Pillow

"""

import argparse
import dataclasses
import glob
import os
import sys
import time

try:
    import numpy as np
except ImportError as e:
    print(f"ERROR: Missing required module: {e}")
    print("Install with: pip install -r requirements.txt")
    sys.exit(1)

import orewatch_artifacts
import orewatch_cluster
import orewatch_cnn
import orewatch_sae
import orewatch_synth
from orewatch_config import ARMS, dump_config, load_config
from orewatch_errors import ConfigError, DependencyError, OrewatchError
from orewatch_spectral import (UNLABELLED, LabelledSpectra, LabelRaster, calibrate,
                               read_cube, read_header, read_labels, resample,
                               write_cube, write_header, write_labels)

STAGES = [
    "synth",
    "train-sae",
    "encode",
    "cluster",
    "extract",
    "pretrain-cnn",
    "train-cnn",
    "classify",
    "eval",
    "report",
]


class PipelineRunner:
    """Run pipeline stages against one output folder and one configuration."""

    def __init__(self, config):
        self.config = config
        self.outdir = config.paths.out
        self.dirs = orewatch_artifacts.mk_outdirs(self.outdir)
        self.workers = config.workers
        self.current_stage = None

    # Artifact locations

    def path(self, stage, name):
        return os.path.join(self.dirs[stage], name)

    def require(self, stage, path, run_first):
        if not os.path.exists(path):
            raise DependencyError(stage, path, run_first)
        return path

    def cube_path(self, stage):
        if self.config.paths.cube and not self.config.paths.raw:
            return self.require(stage, self.config.paths.cube, "synth")
        return self.require(stage, self.path("synth", "scene.hdr"), "synth")

    def second_cube_path(self):
        paths = self.config.paths
        if paths.second_cube and not paths.raw:
            return paths.second_cube
        if paths.cube and not paths.raw:
            return None
        path = self.path("synth", "scene_b.hdr")
        return path if os.path.exists(path) else None

    def truth_path(self):
        if self.config.paths.labels:
            return self.config.paths.labels
        if self.config.paths.cube:
            return None
        path = self.path("synth", "truth.hdr")
        return path if os.path.exists(path) else None

    def selected_arms(self):
        return self.config.train.selected_arms()

    # Stages

    def run_synth(self, seed):
        spec = dataclasses.replace(self.config.scene, seed=seed)
        inputs, outputs = {}, {}
        paths = self.config.paths
        if paths.raw:
            raw = [("", paths.cube)] + ([("_b", paths.second_cube)] if paths.second_cube else [])
            for suffix, raw_path in raw:
                if not os.path.exists(raw_path):
                    raise ConfigError(f"raw cube {raw_path} does not exist")
                inputs[f"raw{suffix}"] = raw_path
                cube = calibrate(read_cube(raw_path), paths.panel_region, paths.panel_reflectance)
                outputs[f"scene{suffix}"] = write_cube(cube, self.path("synth", f"scene{suffix}.hdr"))
                orewatch_artifacts.save_rgb(
                    orewatch_artifacts.pseudo_rgb(cube), self.path("synth", f"pseudo_rgb{suffix}.png")
                )
                print(f"  ✓ calibrated {raw_path} against panel {paths.panel_region}")
            return inputs, outputs
        if paths.cube:
            print("  paths.cube is set; the synthetic scene is not generated")
            return inputs, outputs

        for suffix, scene_spec in (("", spec), ("_b", spec.second_capture())):
            cube, truth, mask = orewatch_synth.generate_scene(scene_spec)
            outputs[f"scene{suffix}"] = write_cube(cube, self.path("synth", f"scene{suffix}.hdr"))
            outputs[f"truth{suffix}"] = write_labels(truth, self.path("synth", f"truth{suffix}.hdr"))
            shadow = LabelRaster(mask.astype(np.uint8), 2)
            outputs[f"shadow{suffix}"] = write_labels(shadow, self.path("synth", f"shadow{suffix}.hdr"))
            orewatch_artifacts.save_rgb(
                orewatch_artifacts.pseudo_rgb(cube), self.path("synth", f"pseudo_rgb{suffix}.png")
            )
            face = truth.labels != scene_spec.sky_class
            coverage = mask[face].mean() if face.any() else 0.0
            print(f"  scene{suffix}: {cube.height}x{cube.width}x{cube.bands}, "
                  f"shadow covers {coverage:.1%} of the face")
        return inputs, outputs

    def run_train_sae(self, seed):
        cube_path = self.cube_path("train-sae")
        cube = read_cube(cube_path)
        spec = self.config.autoencoder
        sae_config = dataclasses.replace(self.config.sae, seed=seed)

        print(f"  pretraining {spec.input_bands} -> {' -> '.join(map(str, spec.encoder_sizes))}")
        state = orewatch_sae.pretrain_layerwise(cube, spec, sae_config)
        print("  relit fine-tuning")
        state = orewatch_sae.finetune_relit(state, cube, self.config.sampler, sae_config)
        bin_path, meta_path = orewatch_sae.save_encoder(state, self.path("train-sae", "encoder"))
        return {"cube": cube_path}, {"encoder": bin_path, "encoder_meta": meta_path}

    def run_encode(self, seed):
        cube_path = self.cube_path("encode")
        encoder_stem = self.path("train-sae", "encoder")
        self.require("encode", encoder_stem + ".bin", "train-sae")
        cube = read_cube(cube_path)
        state = orewatch_sae.load_encoder(encoder_stem)

        features = orewatch_sae.encode(state, cube, workers=self.workers)
        outputs = {"features": write_cube(features, self.path("encode", "features.hdr"))}
        indices = range(features.bands) if self.config.encode.render_all else [self.config.encode.render_index]
        for index in indices:
            orewatch_sae.render_feature(features, index, self.path("encode", f"feature_{index:02d}.png"))
        orewatch_artifacts.save_rgb(orewatch_artifacts.pseudo_rgb(cube), self.path("encode", "pseudo_rgb.png"))
        return {"cube": cube_path, "encoder": encoder_stem + ".bin"}, outputs

    def run_cluster(self, seed):
        cube_path = self.cube_path("cluster")
        features_path = self.require("cluster", self.path("encode", "features.hdr"), "encode")
        settings = self.config.cluster
        cube = read_cube(cube_path)
        features = read_cube(features_path)

        spaces = [("", features)]
        if settings.raw_baseline:
            spaces.append(("raw_", cube))
        outputs = {}
        for prefix, data in spaces:
            model, assignments = orewatch_cluster.cluster_cube(
                data, settings.k, settings.restarts, settings.max_iters, seed
            )
            outputs[f"{prefix}model"] = orewatch_cluster.write_model(model, self.path("cluster", f"{prefix}model.txt"))
            outputs[f"{prefix}assignments"] = write_labels(assignments, self.path("cluster", f"{prefix}assignments.hdr"))
            orewatch_artifacts.save_class_map(assignments.labels, self.path("cluster", f"{prefix}clusters.png"))
            counts = np.bincount(assignments.labels.reshape(-1), minlength=settings.k)
            print(f"  {'raw' if prefix else 'code'} space: inertia {model.inertia:.4f}, cluster sizes {counts.tolist()}")
            if not prefix:
                outputs["centroids"] = orewatch_cluster.write_centroids(
                    cube, assignments, self.path("cluster", "centroids.csv")
                )
        return {"cube": cube_path, "features": features_path}, outputs

    def run_extract(self, seed):
        cube_path = self.cube_path("extract")
        features_path = self.require("extract", self.path("encode", "features.hdr"), "encode")
        model_path = self.require("extract", self.path("cluster", "model.txt"), "cluster")
        settings = self.config.cluster
        cube = read_cube(cube_path)
        features = read_cube(features_path)
        model = orewatch_cluster.read_model(model_path)

        confident = orewatch_cluster.extract_confident(features, model, settings.per_class, cube=cube)
        train_set, val_set = orewatch_cluster.split_train_val(
            confident, settings.train_per_class, settings.val_per_class, seed
        )
        outputs = {
            "confident": orewatch_cluster.write_confident(confident, self.path("extract", "confident.csv")),
            "train": orewatch_cluster.write_confident(train_set, self.path("extract", "train.csv")),
            "val": orewatch_cluster.write_confident(val_set, self.path("extract", "val.csv")),
        }
        overlay = orewatch_artifacts.overlay_points(
            orewatch_artifacts.pseudo_rgb(cube), confident.rows, confident.cols, confident.labels
        )
        orewatch_artifacts.save_rgb(overlay, self.path("extract", "overlay.png"))
        print(f"  {len(confident)} confident pixels, {len(train_set)} train / {len(val_set)} validation")
        return {"cube": cube_path, "features": features_path, "model": model_path}, outputs

    def run_pretrain_cnn(self, seed):
        corpus = orewatch_synth.generate_corpus(dataclasses.replace(self.config.corpus, seed=seed))
        spec = self.config.cnn.spec(corpus.n_classes)
        if corpus.grid != spec.grid:
            corpus = LabelledSpectra(resample(corpus.spectra, corpus.grid, spec.grid),
                                     corpus.labels, spec.grid, corpus.n_classes)
        options = self.config.train.pretrain_options(self.config.sampler)

        print(f"  corpus: {len(corpus)} spectra, {corpus.n_classes} classes, {len(corpus.grid)} bands")
        pretrained, log = orewatch_cnn.pretrain_on_corpus(corpus, spec, options, seed)
        corpus_cube, corpus_labels = orewatch_cnn.corpus_to_rasters(corpus)
        outputs = {
            "corpus": write_cube(corpus_cube, self.path("pretrain-cnn", "corpus.hdr")),
            "corpus_labels": write_labels(corpus_labels, self.path("pretrain-cnn", "corpus_labels.hdr")),
            "log": orewatch_cnn.write_trainlog(log, self.path("pretrain-cnn", "pretrain_log.csv")),
        }
        bin_path, meta_path = orewatch_cnn.save_pretrained(pretrained, self.path("pretrain-cnn", "pretrained"))
        outputs.update(pretrained=bin_path, pretrained_meta=meta_path)
        if log.records:
            print(f"  corpus F1 after {log.records[-1].epoch} epochs: {log.records[-1].val_f1:.4f}")
        return {}, outputs

    def confident_alignment(self, confident):
        """Cluster -> truth class mapping estimated on the confident pixels, or None."""
        truth_path = self.truth_path()
        if truth_path is None:
            return None
        truth = read_labels(truth_path)
        at_points = truth.labels[confident.rows, confident.cols]
        mapping, agreement = orewatch_synth.best_alignment(confident.labels, at_points)
        return mapping, truth, agreement

    def test_set(self, cube, confident, seed):
        aligned = self.confident_alignment(confident)
        if aligned is None:
            return None
        mapping, truth, _ = aligned
        # truth class -> pseudo-label
        inverse = np.argsort(mapping)
        pixels = orewatch_cnn.labelled_pixels(
            cube, truth, mapping=inverse[: truth.n_classes], limit=self.config.train.test_limit, seed=seed
        )
        # truth classes without a cluster cannot be scored in pseudo-label space
        keep = pixels.labels < confident.n_classes
        return LabelledSpectra(pixels.spectra[keep], pixels.labels[keep], pixels.grid, confident.n_classes)

    def run_train_cnn(self, seed):
        cube_path = self.cube_path("train-cnn")
        train_path = self.require("train-cnn", self.path("extract", "train.csv"), "extract")
        val_path = self.require("train-cnn", self.path("extract", "val.csv"), "extract")
        confident_path = self.path("extract", "confident.csv")
        train_set = orewatch_cluster.read_confident(train_path)
        val_set = orewatch_cluster.read_confident(val_path)
        n_classes = train_set.n_classes
        spec = self.config.cnn.spec(n_classes)
        cube = read_cube(cube_path)
        test_set = self.test_set(cube, orewatch_cluster.read_confident(confident_path), seed)
        if test_set is None:
            print("  WARNING: no truth labels, the train log has no test F1")

        inputs = {"cube": cube_path, "train": train_path, "val": val_path}
        outputs = {}
        pretrained = None
        for arm in self.selected_arms():
            transfer, augment = ARMS[arm]
            if transfer and pretrained is None:
                stem = self.path("pretrain-cnn", "pretrained")
                self.require("train-cnn", stem + ".bin", "pretrain-cnn")
                pretrained = orewatch_cnn.load_pretrained(stem)
                inputs["pretrained"] = stem + ".bin"
            init = orewatch_cnn.transfer_init(pretrained, n_classes, seed) if transfer else spec
            options = self.config.train.options(self.config.sampler, augment)

            print(f"  arm '{arm}' (transfer={transfer}, augment={augment})")
            arm_start = time.time()
            state, log = orewatch_cnn.train(init, train_set, val_set, options, seed, test_set=test_set)
            bin_path, meta_path = orewatch_cnn.save_state(state, self.path("train-cnn", arm))
            outputs[f"{arm}"] = bin_path
            outputs[f"{arm}_meta"] = meta_path
            outputs[f"{arm}_log"] = orewatch_cnn.write_trainlog(log, self.path("train-cnn", f"{arm}_trainlog.csv"))
            print(f"  ✓ {arm}: selected epoch {state.metadata['selected_epoch']} "
                  f"in {time.time() - arm_start:.2f}s")
        return inputs, outputs

    def run_classify(self, seed):
        cubes = [("", self.cube_path("classify"))]
        second = self.second_cube_path()
        if second:
            cubes.append(("_b", second))
        inputs = {f"cube{suffix}": path for suffix, path in cubes}
        outputs = {}
        for arm in self.selected_arms():
            stem = self.path("train-cnn", arm)
            self.require("classify", stem + ".bin", "train-cnn")
            state = orewatch_cnn.load_state(stem)
            inputs[arm] = stem + ".bin"
            for suffix, cube_path in cubes:
                thematic = orewatch_cnn.classify_cube(
                    state, read_cube(cube_path), workers=self.workers, chunk=self.config.classify.chunk
                )
                labels_path, scores_path = orewatch_cnn.write_thematic_map(
                    thematic, self.path("classify", f"{arm}{suffix}")
                )
                outputs[f"{arm}{suffix}_labels"] = labels_path
                outputs[f"{arm}{suffix}_scores"] = scores_path
                orewatch_artifacts.save_class_map(
                    thematic.labels.labels, self.path("classify", f"{arm}{suffix}.png")
                )
        return inputs, outputs

    def evaluation_mask(self, truth, seed):
        """Labelled pixels used for scoring (a seeded subset above train.test_limit)."""
        flat = truth.labels.reshape(-1)
        index = np.flatnonzero(flat != UNLABELLED)
        limit = self.config.train.test_limit
        if index.size > limit:
            index = np.random.default_rng(seed).choice(index, limit, replace=False)
        mask = np.zeros(flat.size, dtype=bool)
        mask[index] = True
        return mask.reshape(truth.labels.shape)

    def run_eval(self, seed):
        confident_path = self.require("eval", self.path("extract", "confident.csv"), "extract")
        aligned = self.confident_alignment(orewatch_cluster.read_confident(confident_path))
        if aligned is None:
            print("  WARNING: no truth labels; only cross-capture agreement is reported")
        fields = {}
        inputs = {"confident": confident_path}

        if aligned is not None:
            mapping, truth, confident_agreement = aligned
            fields["confident.truth_agreement"] = f"{confident_agreement:.6f}"
            inputs["truth"] = self.truth_path()
            for prefix in ("", "raw_"):
                path = self.path("cluster", f"{prefix}assignments.hdr")
                if os.path.exists(path):
                    agreement = orewatch_synth.cluster_agreement(read_labels(path), truth)
                    fields[f"cluster.{prefix or 'code_'}agreement"] = f"{agreement:.6f}"
                    inputs[f"{prefix}assignments"] = path
            scored = self.evaluation_mask(truth, seed)
            scored_truth = LabelRaster(np.where(scored, truth.labels, UNLABELLED), truth.n_classes)

        for arm in self.selected_arms():
            labels_path = self.require("eval", self.path("classify", f"{arm}_labels.hdr"), "classify")
            predicted = read_labels(labels_path)
            inputs[arm] = labels_path
            if aligned is not None:
                # clusters beyond the truth classes keep their own index and score as misses
                named = LabelRaster(mapping[predicted.labels].astype(np.uint8), max(len(mapping), truth.n_classes))
                cm = orewatch_synth.confusion(named, scored_truth)
                report = orewatch_synth.precision_recall_f1(cm, n_scored=truth.n_classes)
                fields[f"{arm}.macro_f1"] = f"{report.macro_f1:.6f}"
                fields[f"{arm}.labelled"] = report.labelled
                fields[f"{arm}.f1"] = [round(float(v), 6) for v in report.f1]
                for line in report.lines(list(self.config.scene.class_names)):
                    print(f"  {arm}: {line.strip()}")

            second_path = self.path("classify", f"{arm}_b_labels.hdr")
            if os.path.exists(second_path):
                second = read_labels(second_path)
                inputs[f"{arm}_b"] = second_path
                non_sky = None
                if aligned is not None:
                    non_sky = truth.labels != self.config.scene.sky_class
                agreement = orewatch_synth.map_agreement(predicted, second, non_sky)
                fields[f"{arm}.capture_agreement"] = f"{agreement:.6f}"
                print(f"  {arm}: cross-capture agreement {agreement:.4f}")

        metrics_path = self.path("eval", "metrics.txt")
        write_header(metrics_path, fields, file_type="orewatch metrics")
        return inputs, {"metrics": metrics_path}

    def run_report(self, seed):
        metrics_path = self.require("report", self.path("eval", "metrics.txt"), "eval")
        metrics, _ = read_header(metrics_path)
        lines = ["Orewatch report", "=" * 70, "", "Training arms"]
        outputs = {}
        log_paths = sorted(glob.glob(self.path("train-cnn", "*_trainlog.csv")))
        for log_path in log_paths:
            arm = os.path.basename(log_path)[: -len("_trainlog.csv")]
            log = orewatch_cnn.read_trainlog(log_path)
            curve_path = self.path("report", f"curve_{arm}.csv")
            table = np.column_stack([log.column("epoch"), log.column("val_f1"), log.column("test_f1")])
            np.savetxt(curve_path, table, delimiter=",", header="epoch,val_f1,test_f1", fmt="%.6f")
            outputs[f"curve_{arm}"] = curve_path

            metric = "test_f1" if np.isfinite(log.column("test_f1")).any() else "val_f1"
            converged = log.convergence_epoch(metric)
            per_epoch = log.seconds_per_epoch()
            good_time = converged * per_epoch if converged is not None else float("nan")
            lines.append(
                f"  {arm:<10} map F1 {metrics.get(f'{arm}.macro_f1', 'n/a'):<10} "
                f"converged at epoch {converged} ({metric}), {per_epoch:.3f}s/epoch, "
                f"good classifier in {good_time:.1f}s"
            )

        lines += ["", "Clustering"]
        for key in ("cluster.code_agreement", "cluster.raw_agreement", "confident.truth_agreement"):
            if key in metrics:
                lines.append(f"  {key} = {metrics[key]}")
        captures = [(k, v) for k, v in metrics.items() if k.endswith(".capture_agreement")]
        if captures:
            lines += ["", "Cross-capture agreement (non-sky pixels)"]
            lines += [f"  {k} = {v}" for k, v in captures]

        lines += ["", "Runtime", f"  {'stage':<14}seconds"]
        for stage in STAGES[:-1]:
            manifest_path = os.path.join(self.dirs[stage], orewatch_artifacts.MANIFEST_NAME)
            if os.path.exists(manifest_path):
                elapsed = orewatch_artifacts.read_manifest(self.dirs[stage]).get("elapsed_s", "?")
                lines.append(f"  {stage:<14}{elapsed}")

        summary_path = self.path("report", "summary.txt")
        with open(summary_path, "w", encoding="utf-8") as f:
            f.write("\n".join(lines) + "\n")
        print("\n".join(lines))
        outputs["summary"] = summary_path
        return {"metrics": metrics_path}, outputs

    # Orchestration

    def run_stage(self, stage):
        handler = getattr(self, "run_" + stage.replace("-", "_"))
        self.current_stage = stage
        seed = self.config.stage_seed(stage)
        print(f"\n[{stage}] seed {seed}")
        start_time = time.time()
        inputs, outputs = handler(seed)
        elapsed = time.time() - start_time
        orewatch_artifacts.write_manifest(self.dirs[stage], stage, seed, inputs, outputs, elapsed)
        print(f"✓ {stage} finished in {elapsed:.2f}s")
        return outputs

    def run_all(self):
        for stage in STAGES:
            self.run_stage(stage)


def main(argv=None):
    """Main entry point for the orewatch pipeline."""
    parser = argparse.ArgumentParser(
        description="Label-free ore/waste mapping of hyperspectral mine-face scans",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  # Whole pipeline on the synthetic scene
  %(prog)s all --out output

  # Four-arm ablation with a config file
  %(prog)s train-cnn --config orewatch.cfg --set train.arms=baseline,transfer,augment,combined
        """,
    )
    parser.add_argument("stage", choices=STAGES + ["all"], help="Stage to run")
    parser.add_argument("--config", "-c", type=str, help="Configuration file (key = value lines)")
    parser.add_argument("--seed", type=int, help="Global seed (overrides the config)")
    parser.add_argument("--out", "-o", type=str, help="Output directory (default: output)")
    parser.add_argument(
        "--workers",
        type=int,
        help="Number of concurrent workers for encode/classify (default: 2)",
    )
    parser.add_argument(
        "--set",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="Override one configuration key (repeatable)",
    )

    args = parser.parse_args(argv)

    overrides = list(args.set)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    if args.out:
        overrides.append(f"paths.out={args.out}")
    if args.workers is not None:
        overrides.append(f"workers={args.workers}")

    print("Orewatch")
    print("=" * 70)

    stage = args.stage
    runner = None
    try:
        config = load_config(args.config, overrides)
        runner = PipelineRunner(config)
        print(f"Output: {runner.outdir}")
        with open(os.path.join(runner.outdir, "config.txt"), "w", encoding="utf-8") as f:
            f.write(dump_config(config))
        if stage == "all":
            runner.run_all()
        else:
            runner.run_stage(stage)
    except OrewatchError as e:
        if runner is not None and runner.current_stage:
            stage = runner.current_stage
        print(f"✗ {stage} failed")
        print(f"ERROR: [{stage}] {e}")
        sys.exit(1)

    print("\n✓ Done!")


if __name__ == "__main__":
    main()
