"""
Experiment orchestration: ingest -> GAN training -> augmentation ->
classifier per regime -> evaluation -> report

Every stage is keyed by a hash of its inputs and leaves a completion marker,
so `resume` skips work that is already done.
"""
import hashlib
import json
import math
import os
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

import plots
from augmentor import augment, save_augmented, write_difference_images
from classifier import load_classifier, save_classifier, train_classifier, write_train_record
from data_ingest import (
    DatasetManifest,
    balance_report,
    imbalance_ratio,
    load_manifest,
    load_samples,
    save_manifest,
    synth_benchmark,
)
from evaluation import (
    compare_regimes,
    compute_cam,
    curve_report,
    metrics_table,
    score_samples,
    write_curves,
    write_metrics,
)
from gan_core import load_checkpoint, train_gan
from utils.decorators import write_json_atomic, experiment_lock, experiment_stage
from utils.errors import ConfigError, InputError
from utils.logger import logger
from utils.rng import configure_torch
from utils.validators import ExperimentConfig, GanConfig, stable_hash

SUMMARY_SCHEMA_VERSION = 1
SUMMARY_FILE = "summary.json"
EVENTS_FILE = "events.log"

PHASES = ("ingest", "gan", "augment", "classifier", "evaluate", "report")
GAN_STAGE = {"aug_same_data": "gan_same", "aug_pretrained": "gan_pretrained"}
AUGMENT_STAGE = {"aug_same_data": "augment_same", "aug_pretrained": "augment_pretrained"}


def file_sha256(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _json_ratio(value: float) -> Any:
    return "inf" if math.isinf(value) else value


def _counts_json(counts: Dict[int, int]) -> Dict[str, int]:
    return {str(label): int(count) for label, count in sorted(counts.items())}


class ExperimentRunner:
    """Runs the stages of one experiment inside its output directory"""

    def __init__(self, config: ExperimentConfig, resume: bool = False):
        if config.output_dir is None:
            raise ConfigError("experiment config has no output_dir (set it or GANAUG_OUTPUT_DIR)")
        self.config = config
        self.resume = resume
        self.root = Path(config.output_dir)
        self.stages: Dict[str, str] = {}
        self.failures: List[Dict[str, str]] = []
        self.outputs: Dict[str, Any] = {}

    # -- paths ---------------------------------------------------------------

    def path(self, *parts: str) -> Path:
        return self.root.joinpath(*parts)

    def rel(self, path: Path) -> str:
        return Path(os.path.relpath(Path(path).resolve(), self.root.resolve())).as_posix()

    def stage_marker(self, stage_name: str, key: str) -> Path:
        return self.path("stages", f"{stage_name}-{key}.json")

    def key(self, **inputs) -> str:
        return stable_hash(inputs)

    # -- stages --------------------------------------------------------------

    def _source_manifest(self, manifest_path: Optional[Path], synth, seed: int, name: str) -> DatasetManifest:
        if manifest_path is not None:
            return load_manifest(manifest_path)
        return synth_benchmark(synth, seed, self.path("benchmark", name))

    def ingest_key(self) -> str:
        data = self.config.data
        sources = {}
        for name, path in (("primary", data.primary_manifest), ("pretrain", data.pretrain_manifest)):
            if path is not None:
                sources[name] = file_sha256(path)
        return self.key(stage="ingest", data=data.model_dump(mode="json", exclude={"primary_manifest", "pretrain_manifest", "load_workers"}),
                        sources=sources, seed=self.config.seed)

    @experiment_stage("ingest")
    def ingest(self, key: str) -> Dict[str, Any]:
        data, seed = self.config.data, self.config.seed
        primary = self._source_manifest(data.primary_manifest, data.synth, seed, "primary")
        train, validation = primary.filter("train"), primary.filter("validation")
        if train.n == 0:
            raise InputError("primary dataset has no training samples")
        val_counts = validation.class_counts
        if min(val_counts.values()) == 0:
            raise InputError(f"validation split needs both classes, has {val_counts}")

        outputs: Dict[str, Any] = {
            "train_manifest": self.rel(save_manifest(train, self.path("manifests", "train.csv"))),
            "validation_manifest": self.rel(save_manifest(validation, self.path("manifests", "validation.csv"))),
            "balance": {"primary": {s: _json_ratio(r) for s, r in balance_report(primary).items()}},
            "train_counts": _counts_json(train.class_counts),
        }
        outputs["validation_sha256"] = file_sha256(self.path(outputs["validation_manifest"]))

        if data.has_pretrain:
            pretrain = self._source_manifest(data.pretrain_manifest, data.pretrain_synth,
                                             seed + data.pretrain_seed_offset, "pretrain")
            outputs["pretrain_manifest"] = self.rel(save_manifest(pretrain, self.path("manifests", "pretrain.csv")))
            outputs["balance"]["pretrain"] = {s: _json_ratio(r) for s, r in balance_report(pretrain).items()}
        return outputs

    def _train_samples(self, manifest_rel: str):
        manifest = load_manifest(self.path(manifest_rel))
        return load_samples(manifest, self.config.resolution, self.config.channels,
                            split="train", workers=self.config.data.load_workers)

    @experiment_stage("gan_same")
    def gan_same(self, key: str, ingest: Dict[str, Any]) -> Dict[str, Any]:
        samples = self._train_samples(ingest["train_manifest"])
        state = train_gan(samples, self.config.gan, self.config.seed,
                          checkpoint_dir=self.path("checkpoints", "gan_same"))
        return {
            "checkpoint": self.rel(self.path("checkpoints", "gan_same", "gan_last.ckpt")),
            "epochs": state.epoch,
            "probe_initial": state.probe_initial,
            "probe_final": state.probe_final,
        }

    @experiment_stage("gan_pretrained")
    def gan_pretrained(self, key: str, ingest: Dict[str, Any]) -> Dict[str, Any]:
        gan = self.config.gan
        pretrain_samples = self._train_samples(ingest["pretrain_manifest"])
        state = train_gan(pretrain_samples, gan, self.config.seed,
                          checkpoint_dir=self.path("checkpoints", "gan_pretrained", "pretrain"))
        pretrain_epochs = state.epoch
        if gan.finetune_epochs > 0:
            finetune: GanConfig = gan.model_copy(update={"epochs": gan.epochs + gan.finetune_epochs})
            state = train_gan(self._train_samples(ingest["train_manifest"]), finetune, self.config.seed,
                              state=state, checkpoint_dir=self.path("checkpoints", "gan_pretrained"))
            checkpoint = self.path("checkpoints", "gan_pretrained", "gan_last.ckpt")
        else:
            checkpoint = self.path("checkpoints", "gan_pretrained", "pretrain", "gan_last.ckpt")
        return {
            "checkpoint": self.rel(checkpoint),
            "pretrain_epochs": pretrain_epochs,
            "epochs": state.epoch,
            "probe_initial": state.probe_initial,
            "probe_final": state.probe_final,
        }

    @experiment_stage("augment_{}")
    def augment_stage(self, key: str, suffix: str, ingest: Dict[str, Any], gan: Dict[str, Any]) -> Dict[str, Any]:
        regime = f"aug_{suffix}_data" if suffix == "same" else f"aug_{suffix}"
        samples = self._train_samples(ingest["train_manifest"])
        pair = load_checkpoint(self.path(gan["checkpoint"])).pair
        dataset = augment(samples, pair, self.config.gan.batch_size, out_dir=self.path("generated", regime))
        manifest_path = save_augmented(dataset, self.path("manifests", f"train_{regime}.csv"))

        chosen = self._difference_pairs(dataset.pairs(), self.config.difference_samples)
        if chosen:
            write_difference_images(chosen, self.path("plots", "differences", regime))
        counts = dataset.class_counts
        return {
            "manifest": self.rel(manifest_path),
            "train_counts": _counts_json(counts),
            "balance_ratio": _json_ratio(imbalance_ratio(counts)),
        }

    @staticmethod
    def _difference_pairs(pairs, limit: int):
        """Up to `limit` pairs, alternating between the two source classes"""
        by_label = {0: [p for p in pairs if p[0].label == 0], 1: [p for p in pairs if p[0].label == 1]}
        chosen = []
        index = 0
        while len(chosen) < limit and (index < len(by_label[0]) or index < len(by_label[1])):
            for label in (1, 0):
                if index < len(by_label[label]) and len(chosen) < limit:
                    chosen.append(by_label[label][index])
            index += 1
        return chosen

    @experiment_stage("classifier_{}")
    def classifier_stage(self, key: str, regime: str, train_manifest: str, validation_manifest: str) -> Dict[str, Any]:
        logger.bind(regime=regime)
        try:
            train = load_manifest(self.path(train_manifest))
            validation = load_manifest(self.path(validation_manifest))
            model, record = train_classifier(train, validation, self.config.classifier, self.config.seed)
            checkpoint = save_classifier(model, self.path("checkpoints", f"classifier_{regime}.ckpt"), record)
            write_train_record(record, self.path("metrics", f"train_{regime}.csv"))
        finally:
            logger.unbind("regime")
        counts = train.filter("train").class_counts
        return {
            "checkpoint": self.rel(checkpoint),
            "best_epoch": record.best_epoch,
            "initial_train_loss": record.initial_train_loss,
            "train_counts": _counts_json(counts),
            "balance_ratio": _json_ratio(imbalance_ratio(counts)),
        }

    @experiment_stage("evaluate")
    def evaluate(self, key: str, validation_manifest: str, classifiers: Dict[str, Dict[str, Any]]) -> Dict[str, Any]:
        validation = load_samples(load_manifest(self.path(validation_manifest)), self.config.resolution,
                                  self.config.channels, workers=self.config.data.load_workers)
        reports, models = {}, {}
        for regime, outputs in classifiers.items():
            model, _ = load_classifier(self.path(outputs["checkpoint"]))
            models[regime] = model
            reports[regime] = curve_report(score_samples(model, validation, regime), self.config.threshold)

        if len(reports) >= 2:
            compare_regimes(reports, self.root)
        else:
            write_curves(next(iter(reports.values())), self.path("metrics"))
            write_metrics(metrics_table(reports), self.path("metrics"))
            plots.save_roc_pr(reports, self.path("plots", "roc_pr"))

        self._write_cams(models, [s for s in validation if s.label == 1][:self.config.cam_samples])
        return {"regimes": {regime: {
            "roc_auc": report.roc_auc,
            "pr_auc": report.pr_auc,
            "recall": report.recall,
            "precision": report.precision,
            "specificity": report.specificity,
        } for regime, report in reports.items()}}

    def _write_cams(self, models, positives):
        if not positives:
            return
        heatmaps: Dict[str, List[np.ndarray]] = {}
        for regime, model in models.items():
            heatmaps[regime] = []
            for sample in positives:
                cam = compute_cam(model, sample)
                heatmaps[regime].append(cam.heatmap)
                plots.save_cam_overlay(sample.image, cam.heatmap,
                                       self.path("plots", "cam", regime, f"{sample.id}.png"),
                                       title=f"{sample.id} p={cam.probability:.3f}")
        plots.save_cam_comparison([s.image for s in positives], heatmaps, [s.id for s in positives],
                                  self.path("plots", "cam_comparison"))

    @experiment_stage("report")
    def report(self, key: str, evaluation: Dict[str, Any]) -> Dict[str, Any]:
        rows = [{"regime": regime, **values} for regime, values in evaluation["regimes"].items()]
        lines = [f"{'regime':<16} {'roc_auc':>8} {'pr_auc':>8} {'recall':>8} {'precision':>9}"]
        for row in rows:
            lines.append(f"{row['regime']:<16} {row['roc_auc']:>8.4f} {row['pr_auc']:>8.4f} "
                         f"{row['recall']:>8.4f} {row['precision']:>9.4f}")
        path = self.path("metrics", "report.txt")
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        return {"report": self.rel(path)}

    # -- driver --------------------------------------------------------------

    def _run_stages(self, until: str) -> None:
        config = self.config
        stop = PHASES.index(until)
        ingest = self.ingest(self.ingest_key())
        self.outputs["ingest"] = ingest
        if stop == 0:
            return
        train_sha = file_sha256(self.path(ingest["train_manifest"]))
        gan_dump = config.gan.model_dump(mode="json")

        train_manifests = {"baseline": ingest["train_manifest"]}
        for regime in config.regimes:
            if regime == "baseline":
                continue
            sources = {"train": train_sha}
            if regime == "aug_pretrained":
                sources["pretrain"] = file_sha256(self.path(ingest["pretrain_manifest"]))
            gan_key = self.key(stage=GAN_STAGE[regime], gan=gan_dump, seed=config.seed, sources=sources)
            stage = self.gan_same if regime == "aug_same_data" else self.gan_pretrained
            gan = stage(gan_key, ingest)
            self.outputs[GAN_STAGE[regime]] = gan
            if stop == 1:
                continue
            suffix = "same" if regime == "aug_same_data" else "pretrained"
            aug_key = self.key(stage=AUGMENT_STAGE[regime], gan_key=gan_key, train=train_sha,
                               batch_size=config.gan.batch_size, difference_samples=config.difference_samples)
            augmented = self.augment_stage(aug_key, suffix, ingest, gan)
            self.outputs[AUGMENT_STAGE[regime]] = augmented
            train_manifests[regime] = augmented["manifest"]
        if stop <= 2:
            return

        classifiers = {}
        clf_dump = config.classifier.model_dump(mode="json")
        for regime in config.regimes:
            manifest = train_manifests[regime]
            clf_key = self.key(stage=f"classifier_{regime}", classifier=clf_dump, seed=config.seed,
                               train=file_sha256(self.path(manifest)), validation=ingest["validation_sha256"])
            classifiers[regime] = self.classifier_stage(clf_key, regime, manifest, ingest["validation_manifest"])
            classifiers[regime]["key"] = clf_key
        self.outputs["classifiers"] = classifiers
        if stop == 3:
            return

        eval_key = self.key(stage="evaluate", classifiers={r: c["key"] for r, c in classifiers.items()},
                            threshold=config.threshold, cam_samples=config.cam_samples)
        evaluation = self.evaluate(eval_key, ingest["validation_manifest"], classifiers)
        self.outputs["evaluate"] = evaluation
        if stop == 4:
            return
        self.outputs["report"] = self.report(self.key(stage="report", evaluation=eval_key), evaluation)

    def summary(self) -> Dict[str, Any]:
        ingest = self.outputs.get("ingest", {})
        evaluation = self.outputs.get("evaluate", {}).get("regimes", {})
        classifiers = self.outputs.get("classifiers", {})
        regimes = {}
        for regime in self.config.regimes:
            if regime not in classifiers:
                continue
            metrics = evaluation.get(regime, {})
            regimes[regime] = {
                "roc_auc": metrics.get("roc_auc"),
                "pr_auc": metrics.get("pr_auc"),
                "recall_at_threshold": metrics.get("recall"),
                "precision_at_threshold": metrics.get("precision"),
                "threshold": self.config.threshold,
                "best_epoch": classifiers[regime]["best_epoch"],
                "train_counts": classifiers[regime]["train_counts"],
                "balance_ratio": classifiers[regime]["balance_ratio"],
            }
        return {
            "schema_version": SUMMARY_SCHEMA_VERSION,
            "experiment": self.config.name,
            "seed": self.config.seed,
            "config_hash": self.config.config_hash(),
            "validation_manifest_sha256": ingest.get("validation_sha256"),
            "balance": ingest.get("balance", {}),
            "regimes": regimes,
            "stages": dict(sorted(self.stages.items())),
            "failures": self.failures,
        }

    def run(self, until: str = "report") -> Dict[str, Any]:
        """Run the stages up to `until`; summary.json is written even when a stage fails"""
        if until not in PHASES:
            raise InputError(f"unknown phase '{until}', expected one of {PHASES}")
        configure_torch(int(os.getenv("GANAUG_NUM_THREADS", self.config.num_threads)))
        with experiment_lock(self.root):
            logger.attach_event_log(self.path(EVENTS_FILE))
            logger.bind(experiment=self.config.name)
            logger.info("EXPERIMENT_STARTED", regimes=self.config.regimes, seed=self.config.seed,
                        until=until, resume=self.resume, config_hash=self.config.config_hash())
            try:
                self._run_stages(until)
            finally:
                summary = self.summary()
                write_json_atomic(self.path(SUMMARY_FILE), summary)
                logger.info("EXPERIMENT_FINISHED", stages=summary["stages"], failures=len(self.failures))
                logger.unbind()
                logger.detach_event_log()
        return summary


def run_experiment(config: ExperimentConfig, resume: bool = False, until: str = "report") -> Dict[str, Any]:
    """Run an experiment; raises StageError (after writing summary.json) when a stage fails"""
    return ExperimentRunner(config, resume=resume).run(until)


def read_summary(directory: Path) -> Dict[str, Any]:
    path = Path(directory) / SUMMARY_FILE
    if not path.is_file():
        raise InputError(f"no {SUMMARY_FILE} in {directory}")
    return json.loads(path.read_text(encoding="utf-8"))


def evaluate_checkpoints(checkpoints: Dict[str, Path], validation_manifest: Path, out_dir: Path,
                         resolution: Optional[int] = None, channels: Optional[int] = None,
                         threshold: float = 0.5) -> Tuple[Dict[str, Any], Path]:
    """Score saved classifiers on one validation manifest and write the comparison"""
    models = {regime: load_classifier(path)[0] for regime, path in checkpoints.items()}
    first = next(iter(models.values()))
    manifest = load_manifest(validation_manifest)
    if "validation" in manifest.split_counts:
        manifest = manifest.filter("validation")
    samples = load_samples(manifest, resolution or first.config.resolution, channels or first.config.channels)
    reports = {regime: curve_report(score_samples(model, samples, regime), threshold)
               for regime, model in models.items()}
    out_dir = Path(out_dir)
    if len(reports) >= 2:
        compare_regimes(reports, out_dir)
    else:
        write_curves(next(iter(reports.values())), out_dir / "metrics")
        write_metrics(metrics_table(reports), out_dir / "metrics")
        plots.save_roc_pr(reports, out_dir / "plots" / "roc_pr")
    return {r: {"roc_auc": rep.roc_auc, "pr_auc": rep.pr_auc} for r, rep in reports.items()}, out_dir
