"""
Balanced training sets from label-flipped generated complements

Every original training sample gets exactly one complement produced by the
generator for its class, labelled with the other class.
"""
import os
from dataclasses import dataclass
from pathlib import Path, PurePosixPath
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from PIL import Image

import plots
from data_ingest import (
    GENERATED_SUFFIX,
    DatasetManifest,
    ManifestRecord,
    Sample,
    load_manifest,
    load_samples,
    save_manifest,
    to_uint8,
    write_image,
)
from gan_core import GeneratorPair, translate
from utils.errors import InputError, ShapeMismatchError
from utils.logger import logger, timed

GENERATED_DIR = "generated"
ORIGINALS_DIR = "originals"

PathLike = Union[str, Path]


@dataclass
class AugmentedDataset:
    originals: List[Sample]
    generated: List[Sample]
    manifest: DatasetManifest

    def __post_init__(self):
        if len(self.generated) != len(self.originals):
            raise InputError(f"{len(self.generated)} generated samples for {len(self.originals)} originals")
        labels = {s.id: s.label for s in self.originals}
        for sample in self.generated:
            if sample.source_id not in labels:
                raise InputError(f"generated sample {sample.id} has unknown source '{sample.source_id}'")
            if sample.label != 1 - labels[sample.source_id]:
                raise InputError(f"generated sample {sample.id} does not flip its source label")

    @property
    def samples(self) -> List[Sample]:
        return self.originals + self.generated

    @property
    def class_counts(self) -> Dict[int, int]:
        counts = {0: 0, 1: 0}
        for sample in self.samples:
            counts[sample.label] += 1
        return counts

    def pairs(self) -> List[Tuple[Sample, Sample]]:
        """(original, generated) in original order"""
        by_source = {s.source_id: s for s in self.generated}
        return [(s, by_source[s.id]) for s in self.originals]


def quantize(image: np.ndarray) -> np.ndarray:
    """Snap a [-1, 1] image to the 8-bit levels it will have once stored as PNG"""
    levels = to_uint8(image).astype(np.float64)
    return (2.0 * levels / 255.0 - 1.0).astype(np.float32)


def _relative(path: PathLike, base: Path) -> str:
    return PurePosixPath(Path(os.path.relpath(Path(path).resolve(), base.resolve())).as_posix()).as_posix()


@timed("augment")
def augment(train_samples: Sequence[Sample], pair: GeneratorPair, batch_size: int,
            out_dir: Optional[PathLike] = None) -> AugmentedDataset:
    """Add one generated, label-flipped complement per original training sample

    Generated images are snapped to 8-bit levels so the in-memory dataset and
    the one re-read from disk agree exactly. With `out_dir` they are written to
    `out_dir/generated/<id>.png` and manifest paths are relative to `out_dir`.
    """
    if batch_size < 1:
        raise InputError(f"batch_size must be positive, got {batch_size}")
    for sample in train_samples:
        if sample.provenance != "original" or sample.split != "train":
            raise InputError(f"sample {sample.id} is not an original training sample "
                             f"(provenance={sample.provenance}, split={sample.split})")

    originals = list(train_samples)
    complements: Dict[str, np.ndarray] = {}
    for label in (0, 1):
        group = [s for s in originals if s.label == label]
        generator = pair.generator_for(label)
        for start in range(0, len(group), batch_size):
            chunk = group[start:start + batch_size]
            # ShapeMismatchError / NonFiniteError propagate: a skipped sample would break balance
            output = translate(generator, np.stack([s.image for s in chunk]))
            for sample, image in zip(chunk, output):
                complements[sample.id] = quantize(image)

    base = Path(out_dir) if out_dir is not None else None
    generated: List[Sample] = []
    records: List[ManifestRecord] = []
    for sample in originals:
        gen_id = f"{sample.id}{GENERATED_SUFFIX}"
        rel_path = f"{GENERATED_DIR}/{gen_id}.png"
        gen_path = None
        if base is not None:
            gen_path = str(write_image(base / rel_path, complements[sample.id]).resolve())
            if sample.path is None:
                original_path = write_image(base / ORIGINALS_DIR / f"{sample.id}.png", sample.image)
            else:
                original_path = Path(sample.path)
            original_rel = _relative(original_path, base)
        else:
            original_rel = sample.path or f"{ORIGINALS_DIR}/{sample.id}.png"
        records.append(ManifestRecord(original_rel, sample.label, "train"))
        generated.append(Sample(
            id=gen_id,
            image=complements[sample.id],
            label=1 - sample.label,
            split="train",
            provenance="generated",
            source_id=sample.id,
            path=gen_path,
        ))
    records += [ManifestRecord(f"{GENERATED_DIR}/{g.id}.png", g.label, "train", g.source_id) for g in generated]

    dataset = AugmentedDataset(originals, generated,
                               DatasetManifest(tuple(records), base.resolve() if base is not None else None))
    logger.info("AUGMENTED_DATASET_BUILT", originals=len(originals), generated=len(generated),
                class_counts=dataset.class_counts)
    return dataset


def save_augmented(dataset: AugmentedDataset, path: PathLike) -> Path:
    return save_manifest(dataset.manifest, path)


def load_augmented(path: PathLike, resolution: int, channels: int = 3, workers: int = 4) -> AugmentedDataset:
    manifest = load_manifest(path)
    samples = load_samples(manifest, resolution, channels, workers=workers)
    originals = [s for s in samples if s.provenance == "original"]
    generated = [s for s in samples if s.provenance == "generated"]
    return AugmentedDataset(originals, generated, manifest)


# ---------------------------------------------------------------------------
# Difference images
# ---------------------------------------------------------------------------

def difference_image(original: Sample, generated: Sample) -> np.ndarray:
    """Channel-averaged |generated - original|, min-max scaled to [0, 1]"""
    if generated.source_id != original.id:
        raise InputError(f"generated sample {generated.id} derives from '{generated.source_id}', "
                         f"not from '{original.id}'")
    if original.shape != generated.shape:
        raise ShapeMismatchError(f"shapes differ: {original.shape} vs {generated.shape}")

    diff = np.abs(generated.image.astype(np.float64) - original.image.astype(np.float64))
    if diff.ndim == 3:
        diff = diff.mean(axis=2)
    low, high = diff.min(), diff.max()
    if high == low:
        return np.zeros_like(diff)
    return (diff - low) / (high - low)


def write_difference_images(pairs: Sequence[Tuple[Sample, Sample]], out_dir: PathLike) -> List[Path]:
    """One grayscale PNG per pair plus an original / generated / difference grid"""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    differences = []
    for original, generated in pairs:
        diff = difference_image(original, generated)
        differences.append(diff)
        path = out_dir / f"{original.id}__diff.png"
        Image.fromarray(to_uint8(diff * 2.0 - 1.0)).save(path, format="PNG")
        written.append(path)
    if pairs:
        written += plots.save_difference_grid(pairs, differences, out_dir / "difference_grid")
    return written
