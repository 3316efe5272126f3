"""
Binary-labeled image datasets: manifests, preprocessing, balance reporting
and the synthetic blob benchmark
"""
import math
import os
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path, PurePosixPath
from typing import Dict, Iterable, List, Optional, Tuple, Union

import numpy as np
import pandas as pd
import torch
import torch.nn.functional as F
from PIL import Image
from scipy import ndimage

from utils.errors import ImageError, ManifestError
from utils.logger import logger, timed
from utils.validators import SPLITS, SynthConfig, normalize_split

MANIFEST_COLUMNS = ("path", "label", "split")
SOURCE_COLUMN = "source_id"
PROVENANCES = ("original", "generated")
GENERATED_SUFFIX = "__gen"
BLOB_FILE = "blobs.csv"

PathLike = Union[str, Path]


@dataclass(frozen=True, eq=False)
class Sample:
    """One image with its binary label and split assignment"""
    id: str
    image: np.ndarray
    label: int
    split: str = "train"
    provenance: str = "original"
    source_id: Optional[str] = None
    path: Optional[str] = None

    def __post_init__(self):
        if self.label not in (0, 1):
            raise ValueError(f"Sample {self.id}: label must be 0 or 1, got {self.label}")
        if self.split not in SPLITS:
            raise ValueError(f"Sample {self.id}: invalid split '{self.split}'")
        if self.provenance not in PROVENANCES:
            raise ValueError(f"Sample {self.id}: invalid provenance '{self.provenance}'")
        if self.provenance == "generated" and not self.source_id:
            raise ValueError(f"Generated sample {self.id} has no source_id")

    @property
    def shape(self) -> Tuple[int, ...]:
        return tuple(self.image.shape)


@dataclass(frozen=True)
class ManifestRecord:
    path: str
    label: int
    split: str
    source_id: Optional[str] = None


@dataclass(frozen=True)
class DatasetManifest:
    """Immutable list of (path, label, split) records; paths relative to base_dir"""
    records: Tuple[ManifestRecord, ...] = ()
    base_dir: Optional[Path] = field(default=None, compare=False)

    def __post_init__(self):
        seen = set()
        for row, record in enumerate(self.records, start=2):
            if record.path in seen:
                raise ManifestError(f"duplicate path '{record.path}'", row=row, path=record.path)
            seen.add(record.path)
            if record.label not in (0, 1):
                raise ManifestError(f"label must be 0 or 1, got {record.label}", row=row)
            if record.split not in SPLITS:
                raise ManifestError(f"invalid split '{record.split}'", row=row)

    @property
    def n(self) -> int:
        return len(self.records)

    @property
    def class_counts(self) -> Dict[int, int]:
        """Label -> count over the whole manifest"""
        counts = {0: 0, 1: 0}
        for record in self.records:
            counts[record.label] += 1
        return counts

    @property
    def split_counts(self) -> Dict[str, Dict[int, int]]:
        """Split -> label -> count, for splits that occur"""
        counts: Dict[str, Dict[int, int]] = {}
        for record in self.records:
            per_split = counts.setdefault(record.split, {0: 0, 1: 0})
            per_split[record.label] += 1
        return counts

    def filter(self, split: str) -> 'DatasetManifest':
        split = normalize_split(split)
        return DatasetManifest(tuple(r for r in self.records if r.split == split), self.base_dir)

    def resolve(self, record: ManifestRecord) -> Path:
        path = Path(record.path)
        if path.is_absolute() or self.base_dir is None:
            return path
        return self.base_dir / path

    def relocate(self, new_base: Path) -> 'DatasetManifest':
        """Same records with paths rewritten relative to `new_base`"""
        new_base = Path(new_base).resolve()
        records = []
        for record in self.records:
            absolute = self.resolve(record).resolve()
            relative = PurePosixPath(Path(os.path.relpath(absolute, new_base)).as_posix())
            records.append(ManifestRecord(str(relative), record.label, record.split, record.source_id))
        return DatasetManifest(tuple(records), new_base)


def sample_id(path: str) -> str:
    """Sample id = file name without suffix, independent of where the manifest lives"""
    return PurePosixPath(Path(path).as_posix()).stem


# ---------------------------------------------------------------------------
# Manifests
# ---------------------------------------------------------------------------

def load_manifest(path: PathLike) -> DatasetManifest:
    """Parse a CSV manifest with header `path,label,split` (optional `source_id`)"""
    path = Path(path)
    if not path.is_file():
        raise ManifestError(f"manifest not found: {path}")

    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False, skipinitialspace=True)
    except pd.errors.EmptyDataError as e:
        raise ManifestError(f"manifest {path} is empty (no header)") from e
    except pd.errors.ParserError as e:
        # "Expected 3 fields in line 4, saw 4"; the header is line 1
        line = re.search(r"line (\d+)", str(e))
        raise ManifestError(f"malformed manifest {path}: {e}", row=int(line.group(1)) if line else None) from e

    missing = [c for c in MANIFEST_COLUMNS if c not in frame.columns]
    if missing:
        raise ManifestError(f"manifest {path} lacks columns {missing}", row=1)
    unknown = [c for c in frame.columns if c not in MANIFEST_COLUMNS + (SOURCE_COLUMN,)]
    if unknown:
        raise ManifestError(f"manifest {path} has unknown columns {unknown}", row=1)

    records: List[ManifestRecord] = []
    seen: Dict[str, int] = {}
    for index, row in enumerate(frame.itertuples(index=False), start=2):
        values = row._asdict()
        if any(pd.isna(values[c]) for c in MANIFEST_COLUMNS):
            raise ManifestError("malformed row (missing fields)", row=index)
        file_path = str(values["path"]).strip()
        label_text = str(values["label"]).strip()
        split_text = str(values["split"]).strip()
        if not file_path:
            raise ManifestError("empty path", row=index)
        if label_text not in ("0", "1"):
            raise ManifestError(f"label must be 0 or 1, got '{label_text}'", row=index)
        try:
            split = normalize_split(split_text)
        except ValueError as e:
            raise ManifestError(str(e), row=index) from e
        if file_path in seen:
            raise ManifestError(f"duplicate path '{file_path}' (first seen in row {seen[file_path]})",
                                row=index, path=file_path)
        seen[file_path] = index
        source = values.get(SOURCE_COLUMN)
        source = str(source).strip() if source is not None and not pd.isna(source) else ""
        records.append(ManifestRecord(file_path, int(label_text), split, source or None))

    manifest = DatasetManifest(tuple(records), path.resolve().parent)
    logger.debug("MANIFEST_LOADED", manifest=str(path), n=manifest.n, class_counts=manifest.class_counts)
    return manifest


def save_manifest(manifest: DatasetManifest, path: PathLike) -> Path:
    """Write a manifest; paths are rewritten when saved into another directory"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    target_dir = path.resolve().parent
    if manifest.base_dir is not None and Path(manifest.base_dir).resolve() != target_dir:
        manifest = manifest.relocate(target_dir)

    with_source = any(r.source_id for r in manifest.records)
    columns = list(MANIFEST_COLUMNS) + ([SOURCE_COLUMN] if with_source else [])
    rows = []
    for record in manifest.records:
        row = {"path": record.path, "label": record.label, "split": record.split}
        if with_source:
            row[SOURCE_COLUMN] = record.source_id or ""
        rows.append(row)
    pd.DataFrame(rows, columns=columns).to_csv(path, index=False, lineterminator="\n")
    return path


# ---------------------------------------------------------------------------
# Images
# ---------------------------------------------------------------------------

def _default_range(dtype: np.dtype) -> Optional[Tuple[float, float]]:
    """Integer and bool scales; floats have no implied scale"""
    if dtype == np.bool_:
        return 0.0, 1.0
    if dtype == np.uint8:
        return 0.0, 255.0
    if np.issubdtype(dtype, np.integer):
        # 16-bit PNGs come back from Pillow as uint16 or int32
        return 0.0, 65535.0
    return None


def preprocess(raw_image: np.ndarray, resolution: int, channels: int = 3,
               value_range: Optional[Tuple[float, float]] = None) -> np.ndarray:
    """Resize to resolution x resolution x channels and rescale to [-1, 1]

    Integer input uses the range of its dtype. Float input without a
    `value_range` must already lie in [-1, 1] and passes through unscaled, so
    preprocessing a preprocessed image is a no-op. Values outside the range
    raise ImageError rather than being clipped.
    """
    if resolution < 1:
        raise ImageError(f"resolution must be positive, got {resolution}")
    image = np.asarray(raw_image)
    if image.size == 0 or image.ndim not in (2, 3) or min(image.shape[:2]) < 1:
        raise ImageError(f"zero-sized or malformed image of shape {image.shape}")
    if image.ndim == 2:
        image = image[:, :, None]

    scale = value_range if value_range is not None else _default_range(image.dtype)
    image = image.astype(np.float64)
    if not np.isfinite(image).all():
        raise ImageError("image contains non-finite pixel values")
    lo, hi = scale if scale is not None else (-1.0, 1.0)
    if hi <= lo:
        raise ImageError(f"invalid value range ({lo}, {hi})")
    if image.min() < lo or image.max() > hi:
        hint = "" if scale is not None else "; pass value_range for float images on another scale"
        raise ImageError(f"pixel values [{image.min():g}, {image.max():g}] outside the range ({lo:g}, {hi:g}){hint}")
    if (lo, hi) != (-1.0, 1.0):
        image = 2.0 * (image - lo) / (hi - lo) - 1.0

    in_channels = image.shape[2]
    if in_channels == 4:
        image, in_channels = image[:, :, :3], 3
    if in_channels != channels:
        if in_channels == 1:
            image = np.repeat(image, channels, axis=2)
        elif in_channels == 3 and channels == 1:
            image = image.mean(axis=2, keepdims=True)
        else:
            raise ImageError(f"cannot map {in_channels} channels onto {channels}")

    if image.shape[0] != resolution or image.shape[1] != resolution:
        tensor = torch.from_numpy(np.ascontiguousarray(image.transpose(2, 0, 1)))[None]
        tensor = F.interpolate(tensor, size=(resolution, resolution), mode="bilinear", align_corners=False)
        image = tensor[0].numpy().transpose(1, 2, 0)
        image = np.clip(image, -1.0, 1.0)

    return np.ascontiguousarray(image, dtype=np.float32)


def read_image(path: PathLike) -> np.ndarray:
    """PNG (8/16-bit gray, RGB, RGBA) as a numpy array in its native dtype"""
    try:
        with Image.open(path) as img:
            if img.mode == "P":
                img = img.convert("RGB")
            elif img.mode == "LA":
                img = img.convert("L")
            array = np.array(img)
    except (OSError, ValueError) as e:
        raise ImageError(f"cannot read image {path}: {e}") from e
    return array


def to_uint8(image: np.ndarray) -> np.ndarray:
    """[-1, 1] float image -> uint8 on 0..255"""
    scaled = np.rint((np.clip(image, -1.0, 1.0) + 1.0) * 127.5)
    return scaled.astype(np.uint8)


def write_image(path: PathLike, image: np.ndarray) -> Path:
    """Write a [-1, 1] H x W x C image as an 8-bit PNG (gray when C == 1)"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    pixels = to_uint8(image)
    if pixels.ndim == 3 and pixels.shape[2] == 1:
        pixels = pixels[:, :, 0]
    Image.fromarray(pixels).save(path, format="PNG")
    return path


def _load_one(args) -> Sample:
    manifest, record, resolution, channels = args
    file_path = manifest.resolve(record)
    image = preprocess(read_image(file_path), resolution, channels)
    return Sample(
        id=sample_id(record.path),
        image=image,
        label=record.label,
        split=record.split,
        provenance="generated" if record.source_id else "original",
        source_id=record.source_id,
        path=str(file_path.resolve()),
    )


@timed("load_samples")
def load_samples(manifest: DatasetManifest, resolution: int, channels: int = 3,
                 split: Optional[str] = None, workers: int = 4) -> List[Sample]:
    """Read and preprocess every record (optionally one split) in manifest order"""
    if split is not None:
        manifest = manifest.filter(split)
    jobs = [(manifest, record, resolution, channels) for record in manifest.records]
    if workers <= 1 or len(jobs) < 2:
        samples = [_load_one(job) for job in jobs]
    else:
        with ThreadPoolExecutor(max_workers=workers) as executor:
            samples = list(executor.map(_load_one, jobs))

    seen = {}
    for sample in samples:
        if sample.id in seen:
            raise ManifestError(f"sample id '{sample.id}' used by both {seen[sample.id]} and {sample.path}")
        seen[sample.id] = sample.path
    return samples


# ---------------------------------------------------------------------------
# Balance
# ---------------------------------------------------------------------------

def imbalance_ratio(counts: Dict[int, int]) -> float:
    majority, minority = max(counts.get(0, 0), counts.get(1, 0)), min(counts.get(0, 0), counts.get(1, 0))
    if minority == 0:
        return math.inf
    return majority / minority


def balance_report(manifest: DatasetManifest) -> Dict[str, float]:
    """Split -> majority/minority count ratio (inf, with a warning, when a class is absent)"""
    report: Dict[str, float] = {}
    for split, counts in manifest.split_counts.items():
        ratio = imbalance_ratio(counts)
        if math.isinf(ratio):
            logger.warning("BALANCE_CLASS_MISSING", split=split, counts=counts)
        report[split] = ratio
    return report


# ---------------------------------------------------------------------------
# Synthetic blob benchmark
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BlobInfo:
    path: str
    cx: float
    cy: float
    sigma: float
    x0: int
    y0: int
    x1: int
    y1: int

    def contains(self, x: int, y: int) -> bool:
        return self.x0 <= x <= self.x1 and self.y0 <= y <= self.y1


def _render(config: SynthConfig, rng: np.random.Generator, with_blob: bool) -> Tuple[np.ndarray, Tuple[float, float]]:
    size = config.image_size
    image = config.background + config.noise_std * rng.standard_normal((size, size))
    # Both classes draw a centre so the random stream does not depend on the label
    cx, cy = rng.uniform(config.blob_margin, size - 1 - config.blob_margin, size=2)
    if with_blob:
        ys, xs = np.mgrid[0:size, 0:size]
        blob = np.exp(-((xs - cx) ** 2 + (ys - cy) ** 2) / (2.0 * config.blob_sigma ** 2))
        image = image + config.blob_amplitude * blob
    pixels = np.rint(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)
    return pixels, (float(cx), float(cy))


@timed("synth_benchmark")
def synth_benchmark(config: SynthConfig, seed: int, out_dir: PathLike) -> DatasetManifest:
    """Write a deterministic blob/no-blob PNG dataset plus `manifest.csv` and `blobs.csv`"""
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        probe = out_dir / ".write_probe"
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as e:
        raise ManifestError(f"output directory {out_dir} is not writable: {e}") from e

    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))
    records: List[ManifestRecord] = []
    blobs: List[BlobInfo] = []
    size = config.image_size
    reach = 2.0 * config.blob_sigma
    for split in SPLITS:
        counts = config.counts.get(split, {0: 0, 1: 0})
        for label in (0, 1):
            for index in range(counts.get(label, 0)):
                pixels, (cx, cy) = _render(config, rng, with_blob=label == 1)
                rel_path = f"{split}/class{label}/{split}_{label}_{index:05d}.png"
                target = out_dir / rel_path
                target.parent.mkdir(parents=True, exist_ok=True)
                Image.fromarray(pixels).save(target, format="PNG")
                records.append(ManifestRecord(rel_path, label, split))
                if label == 1:
                    blobs.append(BlobInfo(
                        rel_path, cx, cy, config.blob_sigma,
                        max(0, int(math.floor(cx - reach))), max(0, int(math.floor(cy - reach))),
                        min(size - 1, int(math.ceil(cx + reach))), min(size - 1, int(math.ceil(cy + reach))),
                    ))

    manifest = DatasetManifest(tuple(records), out_dir.resolve())
    save_manifest(manifest, out_dir / "manifest.csv")
    pd.DataFrame([vars(b) for b in blobs], columns=list(BlobInfo.__dataclass_fields__)).to_csv(
        out_dir / BLOB_FILE, index=False, lineterminator="\n")
    logger.info("SYNTH_BENCHMARK_WRITTEN", out_dir=str(out_dir), seed=seed,
                split_counts=manifest.split_counts)
    return manifest


def load_blob_metadata(benchmark_dir: PathLike) -> Dict[str, BlobInfo]:
    """Sample id -> blob location for the class-1 images of a synthetic benchmark"""
    frame = pd.read_csv(Path(benchmark_dir) / BLOB_FILE)
    blobs = {}
    for row in frame.itertuples(index=False):
        info = BlobInfo(str(row.path), float(row.cx), float(row.cy), float(row.sigma),
                        int(row.x0), int(row.y0), int(row.x1), int(row.y1))
        blobs[sample_id(info.path)] = info
    return blobs


def blob_statistic(image: np.ndarray, sigma: float = 3.0) -> float:
    """Blob detector: max of the Gaussian-filtered, channel-averaged image"""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 3:
        image = image.mean(axis=2)
    return float(ndimage.gaussian_filter(image, sigma=sigma).max())


def mean_blob_statistic(images: Iterable[np.ndarray], sigma: float = 3.0) -> float:
    values = [blob_statistic(image, sigma) for image in images]
    return float(np.mean(values)) if values else float("nan")
