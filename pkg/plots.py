"""
Report figures: overlaid ROC / PR panels, CAM overlays and difference grids

Output is byte-stable for identical inputs (fixed SVG hash salt, no dates).
"""
from pathlib import Path
from typing import Dict, List, Mapping, Sequence, Tuple, Union

import matplotlib
matplotlib.use('Agg')
import matplotlib.pyplot as plt
import numpy as np

plt.rcParams['font.family'] = 'DejaVu Sans'
plt.rcParams['font.size'] = 10
plt.rcParams['svg.hashsalt'] = 'ganaug'

REGIME_COLORS = {
    "baseline": "#1f77b4",
    "aug_same_data": "#d62728",
    "aug_pretrained": "#2ca02c",
}
FALLBACK_COLORS = ("#9467bd", "#8c564b", "#e377c2", "#7f7f7f")
REGIME_LABELS = {
    "baseline": "Original data",
    "aug_same_data": "GAN-augmented (same data)",
    "aug_pretrained": "GAN-augmented (pretrained GAN)",
}

PathLike = Union[str, Path]


def regime_color(regime: str, index: int = 0) -> str:
    return REGIME_COLORS.get(regime, FALLBACK_COLORS[index % len(FALLBACK_COLORS)])


def _save(fig, stem: Path, formats: Sequence[str] = ("png", "svg")) -> List[Path]:
    stem.parent.mkdir(parents=True, exist_ok=True)
    paths = []
    for fmt in formats:
        path = stem.parent / f"{stem.name}.{fmt}"
        metadata = {"Date": None} if fmt == "svg" else {"Software": None}
        fig.savefig(path, format=fmt, dpi=100, bbox_inches='tight', facecolor='white', metadata=metadata)
        paths.append(path)
    plt.close(fig)
    return paths


def save_roc_pr(reports: Mapping[str, "object"], stem: PathLike) -> List[Path]:
    """Two panels, ROC left and precision-recall right, one curve per regime"""
    fig, (ax_roc, ax_pr) = plt.subplots(1, 2, figsize=(11, 5))
    for index, (regime, report) in enumerate(reports.items()):
        color = regime_color(regime, index)
        label = REGIME_LABELS.get(regime, regime)
        ax_roc.plot(report.roc_points[:, 0], report.roc_points[:, 1], color=color, lw=1.8,
                    label=f"{label} (AUC {report.roc_auc:.4f})")
        ax_pr.step(report.pr_points[:, 0], report.pr_points[:, 1], where="post", color=color, lw=1.8,
                   label=f"{label} (AP {report.pr_auc:.4f})")
    ax_roc.plot([0, 1], [0, 1], color="#bbbbbb", lw=1, ls="--")

    for ax, title, xlabel, ylabel in ((ax_roc, "ROC curve", "False positive rate", "True positive rate"),
                                      (ax_pr, "Precision-Recall curve", "Recall", "Precision")):
        ax.set_xlim(0.0, 1.0)
        ax.set_ylim(0.0, 1.0)
        ax.set_aspect("equal")
        ax.set_title(title)
        ax.set_xlabel(xlabel)
        ax.set_ylabel(ylabel)
        ax.grid(alpha=0.3)
        ax.legend(loc="lower right" if ax is ax_roc else "lower left", fontsize=8)
    return _save(fig, Path(stem))


def _display(image: np.ndarray) -> Tuple[np.ndarray, Dict]:
    """[-1, 1] H x W x C image -> array + imshow kwargs"""
    shown = (np.clip(image, -1.0, 1.0) + 1.0) / 2.0
    if shown.ndim == 3 and shown.shape[2] == 1:
        return shown[:, :, 0], {"cmap": "gray", "vmin": 0.0, "vmax": 1.0}
    if shown.ndim == 3 and shown.shape[2] != 3:
        return shown.mean(axis=2), {"cmap": "gray", "vmin": 0.0, "vmax": 1.0}
    return shown, {}


def save_cam_overlay(image: np.ndarray, heatmap: np.ndarray, path: PathLike,
                     title: str = "", alpha: float = 0.45) -> Path:
    """Heatmap alpha-blended over the input image"""
    shown, kwargs = _display(image)
    fig, ax = plt.subplots(figsize=(3, 3))
    ax.imshow(shown, **kwargs)
    ax.imshow(heatmap, cmap="jet", alpha=alpha, vmin=0.0, vmax=1.0)
    ax.set_title(title, fontsize=8)
    ax.axis("off")
    path = Path(path)
    stem = path.parent / (path.name[:-4] if path.name.endswith(".png") else path.name)
    return _save(fig, stem, formats=("png",))[0]


def save_cam_comparison(images: Sequence[np.ndarray], heatmaps: Mapping[str, Sequence[np.ndarray]],
                        titles: Sequence[str], stem: PathLike) -> List[Path]:
    """One row per image, one column per regime"""
    regimes = list(heatmaps)
    rows, cols = len(images), len(regimes) + 1
    fig, axes = plt.subplots(rows, cols, figsize=(2.2 * cols, 2.2 * rows), squeeze=False)
    for row, image in enumerate(images):
        shown, kwargs = _display(image)
        axes[row, 0].imshow(shown, **kwargs)
        axes[row, 0].set_title(titles[row] if row < len(titles) else "", fontsize=7)
        for col, regime in enumerate(regimes, start=1):
            axes[row, col].imshow(shown, **kwargs)
            axes[row, col].imshow(heatmaps[regime][row], cmap="jet", alpha=0.45, vmin=0.0, vmax=1.0)
            if row == 0:
                axes[row, col].set_title(REGIME_LABELS.get(regime, regime), fontsize=7)
    for ax in axes.flat:
        ax.axis("off")
    return _save(fig, Path(stem), formats=("png",))


def save_difference_grid(pairs: Sequence[Tuple["object", "object"]], differences: Sequence[np.ndarray],
                         stem: PathLike) -> List[Path]:
    """Rows: original, generated, difference; one column per pair"""
    cols = len(pairs)
    fig, axes = plt.subplots(3, cols, figsize=(2.0 * cols, 6.2), squeeze=False)
    for col, ((original, generated), diff) in enumerate(zip(pairs, differences)):
        for row, image in enumerate((original.image, generated.image)):
            shown, kwargs = _display(image)
            axes[row, col].imshow(shown, **kwargs)
        axes[2, col].imshow(diff, cmap="magma", vmin=0.0, vmax=1.0)
        axes[0, col].set_title(f"{original.id}\nlabel {original.label}", fontsize=7)
    for row, name in enumerate(("Original", "Generated", "Difference")):
        axes[row, 0].text(-0.08, 0.5, name, transform=axes[row, 0].transAxes,
                          rotation=90, ha="right", va="center", fontsize=8)
    for ax in axes.flat:
        ax.set_xticks([])
        ax.set_yticks([])
    return _save(fig, Path(stem), formats=("png",))
