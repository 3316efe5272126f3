"""
Dense-connectivity binary classifier: training, inference and persistence
"""
import copy
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import torch
from sklearn.metrics import roc_auc_score

from data_ingest import DatasetManifest, Sample, load_samples
from networks.densenet import DenseNetClassifier
from utils.checkpoint import (
    load_module_tensors,
    module_tensors,
    read_container,
    require_kind,
    write_container,
)
from utils.errors import CheckpointError, InputError, NonFiniteError, ShapeMismatchError
from utils.logger import logger, timed
from utils.rng import SeedStreams
from utils.validators import ClassifierConfig

EPS = 1e-7
CHECKPOINT_KIND = "classifier"

SampleSource = Union[DatasetManifest, Sequence[Sample]]


@dataclass
class ClassifierModel:
    network: DenseNetClassifier
    config: ClassifierConfig

    @property
    def resolution(self) -> int:
        return self.network.resolution

    def head_weights(self) -> np.ndarray:
        return self.network.head.weight.detach().cpu().numpy()[0].astype(np.float64)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    val_roc_auc: float
    lr: float


@dataclass
class TrainRecord:
    initial_train_loss: float
    epochs: List[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([asdict(e) for e in self.epochs], columns=list(EpochRecord.__dataclass_fields__))


def build_classifier(config: ClassifierConfig, seed: int) -> ClassifierModel:
    mean, std = config.channel_stats()
    with SeedStreams(seed).torch_global("classifier.init"):
        network = DenseNetClassifier(
            channels=config.channels,
            resolution=config.resolution,
            growth_rate=config.growth_rate,
            block_config=config.block_config,
            num_init_features=config.num_init_features,
            bn_size=config.bn_size,
            stem=config.stem,
            mean=mean,
            std=std,
        )
    model = ClassifierModel(network, config)
    if config.pretrained_path is not None:
        load_pretrained_backbone(model, config.pretrained_path)
    return model


# ---------------------------------------------------------------------------
# Inference
# ---------------------------------------------------------------------------

def _batch_tensor(model: ClassifierModel, batch: np.ndarray) -> torch.Tensor:
    array = np.asarray(batch)
    expected = (model.network.resolution, model.network.resolution, model.network.channels)
    if array.ndim != 4 or tuple(array.shape[1:]) != expected:
        raise ShapeMismatchError(f"batch shape {array.shape} does not match model input B x {expected}")
    if not np.isfinite(array).all():
        raise NonFiniteError("non-finite values in classifier input")
    return torch.from_numpy(np.ascontiguousarray(array.transpose(0, 3, 1, 2), dtype=np.float32))


def forward(model: ClassifierModel, batch: np.ndarray,
            with_features: bool = False) -> Union[np.ndarray, Tuple[np.ndarray, np.ndarray]]:
    """Probabilities (B,) and, optionally, pre-pooling feature maps B x h x w x K"""
    inputs = _batch_tensor(model, batch)
    network = model.network
    was_training = network.training
    network.eval()
    try:
        with torch.no_grad():
            logits, features = network.forward_with_features(inputs)
    finally:
        network.train(was_training)
    if not torch.isfinite(logits).all() or not torch.isfinite(features).all():
        raise NonFiniteError("non-finite classifier activations")
    probabilities = torch.sigmoid(logits.double()).numpy()
    if with_features:
        return probabilities, features.numpy().transpose(0, 2, 3, 1).copy()
    return probabilities


def predict(model: ClassifierModel, samples: Sequence[Sample], batch_size: Optional[int] = None) -> np.ndarray:
    """Probability of class 1 for each sample, in order"""
    batch_size = batch_size or model.config.eval_batch_size
    scores = [forward(model, np.stack([s.image for s in samples[i:i + batch_size]]))
              for i in range(0, len(samples), batch_size)]
    return np.concatenate(scores) if scores else np.zeros(0, dtype=np.float64)


def bce_loss(probabilities, labels) -> Union[float, torch.Tensor]:
    """Mean binary cross-entropy with probabilities clamped to [1e-7, 1 - 1e-7]

    Tensors in give a differentiable tensor out; anything else is computed in
    float64 and returned as a float.
    """
    as_tensor = isinstance(probabilities, torch.Tensor)
    p = probabilities if as_tensor else torch.as_tensor(np.asarray(probabilities, dtype=np.float64))
    y = torch.as_tensor(labels).to(p.dtype) if not isinstance(labels, torch.Tensor) else labels.to(p.dtype)
    if p.ndim != 1 or y.ndim != 1 or p.shape[0] != y.shape[0]:
        raise InputError(f"probabilities {tuple(p.shape)} and labels {tuple(y.shape)} differ in length")
    if p.shape[0] == 0:
        raise InputError("bce_loss needs at least one prediction")
    if not ((y == 0) | (y == 1)).all():
        raise InputError("labels must be 0 or 1")
    loss = torch.nn.functional.binary_cross_entropy(p.clamp(EPS, 1.0 - EPS), y)
    return loss if as_tensor else float(loss)


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

def _resolve_samples(source: SampleSource, split: str, config: ClassifierConfig) -> List[Sample]:
    """The `split` part of a manifest or sample list; a source without it is an error"""
    if isinstance(source, DatasetManifest):
        manifest = source.filter(split)
        if manifest.n == 0:
            raise InputError(f"manifest has no {split} samples (splits: {sorted(source.split_counts)})")
        return load_samples(manifest, config.resolution, config.channels)
    samples = [s for s in source if s.split == split]
    if not samples:
        raise InputError(f"no {split} samples among {len(source)} given")
    return samples


def _dataset_loss(model: ClassifierModel, images: np.ndarray, labels: np.ndarray) -> Tuple[float, np.ndarray]:
    scores = np.concatenate([forward(model, images[i:i + model.config.eval_batch_size])
                             for i in range(0, len(images), model.config.eval_batch_size)])
    return bce_loss(scores, labels), scores


@timed("train_classifier")
def train_classifier(train: SampleSource, val: SampleSource, config: ClassifierConfig,
                     seed: int) -> Tuple[ClassifierModel, TrainRecord]:
    """Mini-batch Adam on BCE; returns the epoch with the best validation ROC AUC"""
    train_samples = _resolve_samples(train, "train", config)
    val_samples = _resolve_samples(val, "validation", config)
    val_labels = np.array([s.label for s in val_samples], dtype=np.float64)
    if len(set(val_labels.tolist())) < 2:
        raise InputError("validation split needs both classes to compute ROC AUC")

    streams = SeedStreams(seed)
    model = build_classifier(config, seed)
    network = model.network
    x_train = np.stack([s.image for s in train_samples])
    y_train = np.array([s.label for s in train_samples], dtype=np.float64)
    x_val = np.stack([s.image for s in val_samples])
    inputs = _batch_tensor(model, x_train)
    targets = torch.from_numpy(y_train.astype(np.float32))

    optimizer = torch.optim.Adam(network.parameters(), lr=config.lr)
    scheduler = torch.optim.lr_scheduler.ReduceLROnPlateau(
        optimizer, mode="min", factor=config.plateau_factor, patience=config.plateau_patience)
    shuffle = streams.numpy("classifier.shuffle")

    initial_loss, _ = _dataset_loss(model, x_train, y_train)
    record = TrainRecord(initial_train_loss=initial_loss)
    logger.info("CLASSIFIER_TRAINING_STARTED", n_train=len(train_samples), n_val=len(val_samples),
                epochs=config.epochs, initial_train_loss=initial_loss, seed=seed)

    best_auc, best_state = -1.0, copy.deepcopy(network.state_dict())
    best_val_loss, stalled, step = float("inf"), 0, 0
    for epoch in range(1, config.epochs + 1):
        lr = optimizer.param_groups[0]["lr"]
        # lr 0 must leave the BatchNorm running statistics untouched too
        network.train(lr > 0.0)
        order = torch.from_numpy(shuffle.permutation(len(train_samples)))
        for start in range(0, len(order), config.batch_size):
            index = order[start:start + config.batch_size]
            step += 1
            optimizer.zero_grad(set_to_none=True)
            loss = bce_loss(torch.sigmoid(network(inputs[index])), targets[index])
            if not torch.isfinite(loss):
                raise NonFiniteError("classifier loss is not finite", step=step,
                                     components={"epoch": epoch, "loss": float(loss), "lr": lr})
            loss.backward()
            optimizer.step()
        train_loss, _ = _dataset_loss(model, x_train, y_train)

        val_loss, val_scores = _dataset_loss(model, x_val, val_labels)
        val_auc = float(roc_auc_score(val_labels, val_scores))
        record.epochs.append(EpochRecord(epoch, train_loss, val_loss, val_auc, lr))
        logger.training_progress("classifier", epoch, config.epochs, train_loss=train_loss,
                                 val_loss=val_loss, val_roc_auc=val_auc, lr=lr)

        if val_auc > best_auc:
            best_auc, record.best_epoch = val_auc, epoch
            best_state = copy.deepcopy(network.state_dict())
        scheduler.step(val_loss)
        if val_loss < best_val_loss:
            best_val_loss, stalled = val_loss, 0
        else:
            stalled += 1
            if stalled >= config.early_stop_patience:
                logger.info("CLASSIFIER_EARLY_STOP", epoch=epoch, stalled_epochs=stalled)
                break

    network.load_state_dict(best_state)
    network.eval()
    logger.info("CLASSIFIER_TRAINING_FINISHED", best_epoch=record.best_epoch,
                best_val_roc_auc=best_auc if record.epochs else None)
    return model, record


def write_train_record(record: TrainRecord, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    record.to_frame().to_csv(path, index=False, lineterminator="\n", float_format="%.9g")
    return path


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------

def save_classifier(model: ClassifierModel, path: Union[str, Path],
                    record: Optional[TrainRecord] = None) -> Path:
    meta = {
        "kind": CHECKPOINT_KIND,
        "config": model.config.model_dump(mode="json"),
        "record": asdict(record) if record is not None else None,
    }
    return write_container(path, module_tensors("model", model.network), meta)


def load_classifier(path: Union[str, Path]) -> Tuple[ClassifierModel, Optional[TrainRecord]]:
    tensors, meta = read_container(path)
    require_kind(meta, CHECKPOINT_KIND, path)
    config = ClassifierConfig.model_validate(meta["config"]).model_copy(update={"pretrained_path": None})
    model = build_classifier(config, seed=0)
    load_module_tensors("model", model.network, tensors)
    model.network.eval()
    record = None
    if meta.get("record"):
        raw = meta["record"]
        record = TrainRecord(raw["initial_train_loss"], [EpochRecord(**e) for e in raw["epochs"]], raw["best_epoch"])
    return model, record


def load_pretrained_backbone(model: ClassifierModel, path: Union[str, Path]):
    """Copy backbone (feature extractor) parameters from a classifier container"""
    tensors, meta = read_container(path)
    if meta.get("kind") not in (CHECKPOINT_KIND, "backbone"):
        raise CheckpointError(f"{path} holds a '{meta.get('kind')}' checkpoint, expected a classifier backbone")
    load_module_tensors("model.features", model.network.features, tensors)
    logger.info("PRETRAINED_BACKBONE_LOADED", path=str(path))
