"""Binary segmentation metrics: threshold-swept Dice/IoU, S-measure, weighted F, E-measure, MAE.

All functions take a probability map ``pred`` in ``[0, 1]`` and a binary
ground truth ``gt`` of the same ``(H, W)`` shape and work in float64.
"""
from __future__ import annotations

import math
import os
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

__all__ = [
    "THRESHOLDS",
    "METRIC_NAMES",
    "METRIC_LABELS",
    "EmptyDatasetError",
    "threshold_counts",
    "dice_iou_curves",
    "mdice_miou",
    "mae",
    "s_measure",
    "weighted_fmeasure",
    "e_measure_curve",
    "e_measure_max",
    "image_metrics",
    "ImageMetrics",
    "MetricsReport",
    "evaluate_dataset",
]

EPS = np.spacing(1.0)
THRESHOLDS = np.arange(256, dtype=np.float64) / 255.0
METRIC_NAMES = ("mdice", "miou", "f_beta_w", "s_alpha", "e_phi_max", "mae")
METRIC_LABELS = ("mDice", "mIoU", "Fbw", "Salpha", "Ephimax", "MAE")


class EmptyDatasetError(ValueError):
    pass


def _prepare(pred, gt) -> tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs gt {gt.shape}")
    if pred.size == 0:
        raise ValueError("empty map")
    if not np.all(np.isfinite(pred)) or pred.min() < 0.0 or pred.max() > 1.0:
        raise ValueError("pred must lie in [0, 1]")
    if not np.all((gt == 0) | (gt == 1)):
        raise ValueError("gt must be binary")
    return pred, gt.astype(bool)


def threshold_counts(pred, gt, thresholds=THRESHOLDS) -> tuple[np.ndarray, np.ndarray]:
    """``|P_t|`` and ``|P_t & G|`` for ``P_t = pred >= t`` at every threshold."""
    pred, gt = _prepare(pred, gt)
    thresholds = np.asarray(thresholds, dtype=np.float64)
    all_sorted = np.sort(pred.ravel())
    fg_sorted = np.sort(pred[gt])
    n_pred = all_sorted.size - np.searchsorted(all_sorted, thresholds, side="left")
    n_tp = fg_sorted.size - np.searchsorted(fg_sorted, thresholds, side="left")
    return n_pred, n_tp


def _ratio(num: np.ndarray, den: np.ndarray) -> np.ndarray:
    num = num.astype(np.float64)
    den = den.astype(np.float64)
    out = np.ones_like(num)  # 0/0 counts as perfect agreement
    nz = den > 0
    out[nz] = num[nz] / den[nz]
    return out


def dice_iou_curves(pred, gt, thresholds=THRESHOLDS) -> tuple[np.ndarray, np.ndarray]:
    """Per-threshold Dice and IoU."""
    n_pred, n_tp = threshold_counts(pred, gt, thresholds)
    n_gt = int(np.count_nonzero(gt))
    dice = _ratio(2 * n_tp, n_pred + n_gt)
    iou = _ratio(n_tp, n_pred + n_gt - n_tp)
    return dice, iou


def _parse_threshold(threshold) -> np.ndarray:
    if threshold is None or threshold == "sweep":
        return THRESHOLDS
    if isinstance(threshold, str):
        if not threshold.startswith("fixed:"):
            raise ValueError(f"threshold must be 'sweep' or 'fixed:<t>', got {threshold!r}")
        threshold = float(threshold.split(":", 1)[1])
    t = float(threshold)
    if not 0.0 <= t <= 1.0:
        raise ValueError("fixed threshold must lie in [0, 1]")
    return np.array([t])


def mdice_miou(pred, gt, threshold="sweep") -> tuple[float, float]:
    """Dice and IoU averaged over the 256 thresholds ``t/255`` (or one fixed threshold)."""
    dice, iou = dice_iou_curves(pred, gt, _parse_threshold(threshold))
    return float(dice.mean()), float(iou.mean())


def mae(pred, gt) -> float:
    pred, gt = _prepare(pred, gt)
    return float(np.abs(pred - gt).mean())


# --- S-measure ---------------------------------------------------------------


def _s_object_part(x: np.ndarray) -> float:
    mean = x.mean()
    sigma = x.std(ddof=1) if x.size > 1 else 0.0
    return 2.0 * mean / (mean * mean + 1.0 + sigma + EPS)


def _s_object(pred: np.ndarray, gt: np.ndarray) -> float:
    u = gt.mean()
    fg = _s_object_part(pred[gt])
    bg = _s_object_part(1.0 - pred[~gt])
    return u * fg + (1.0 - u) * bg


def _centroid(gt: np.ndarray) -> tuple[int, int]:
    """Column and row split points: the 1-based foreground centroid rounded half up."""
    rows, cols = np.nonzero(gt)
    return int(np.floor(cols.mean() + 1.5)), int(np.floor(rows.mean() + 1.5))


def _ssim(pred: np.ndarray, gt: np.ndarray) -> float:
    n = pred.size
    x = pred.mean()
    y = gt.mean()
    denom = max(n - 1, 1)
    sx = ((pred - x) ** 2).sum() / denom
    sy = ((gt - y) ** 2).sum() / denom
    sxy = ((pred - x) * (gt - y)).sum() / denom
    alpha = 4.0 * x * y * sxy
    beta = (x * x + y * y) * (sx + sy)
    if alpha != 0:
        return alpha / (beta + EPS)
    return 1.0 if beta == 0 else 0.0


def _s_region(pred: np.ndarray, gt: np.ndarray) -> float:
    h, w = gt.shape
    cx, cy = _centroid(gt)
    g = gt.astype(np.float64)
    total = 0.0
    for rows, cols in (
        (slice(0, cy), slice(0, cx)),
        (slice(0, cy), slice(cx, w)),
        (slice(cy, h), slice(0, cx)),
        (slice(cy, h), slice(cx, w)),
    ):
        p, q = pred[rows, cols], g[rows, cols]
        if p.size:
            total += p.size / (h * w) * _ssim(p, q)
    return total


def s_measure(pred, gt, alpha: float = 0.5) -> float:
    """Structure measure: ``alpha * S_object + (1 - alpha) * S_region``, clipped at 0."""
    pred, gt = _prepare(pred, gt)
    y = gt.mean()
    if y == 0:
        return float(1.0 - pred.mean())
    if y == 1:
        return float(pred.mean())
    score = alpha * _s_object(pred, gt) + (1.0 - alpha) * _s_region(pred, gt)
    return float(max(0.0, score))


# --- weighted F-measure ---------------------------------------------------------


def matlab_gaussian(size: int = 7, sigma: float = 5.0) -> np.ndarray:
    """Normalized 2-D Gaussian kernel with tiny tails cut the way MATLAB's ``fspecial`` does."""
    m = (size - 1) / 2
    y, x = np.ogrid[-m : m + 1, -m : m + 1]
    h = np.exp(-(x * x + y * y) / (2.0 * sigma * sigma))
    h[h < np.finfo(h.dtype).eps * h.max()] = 0
    return h / h.sum()


def weighted_fmeasure(pred, gt, beta2: float = 1.0, return_flag: bool = False):
    """Weighted F-measure with dependency-corrected errors and distance-based importance.

    Errors at background pixels are replaced by the error of the nearest
    foreground pixel, smoothed with a 7x7 Gaussian (sigma 5); foreground
    pixels take the smaller of raw and smoothed error. Background errors are
    weighted by ``2 - exp(ln(0.5)/5 * d)`` with ``d`` the distance to the
    foreground. The smoothing replicates edge values. An empty ground truth
    scores 0 and raises a warning; with ``return_flag`` the result is
    ``(score, empty_gt)``.
    """
    pred, gt = _prepare(pred, gt)
    if not gt.any():
        warnings.warn("weighted F-measure undefined for empty ground truth; reporting 0", RuntimeWarning, stacklevel=2)
        return (0.0, True) if return_flag else 0.0
    g = gt.astype(np.float64)
    dist, (iy, ix) = ndimage.distance_transform_edt(~gt, return_indices=True)
    err = np.abs(pred - g)
    et = err[iy, ix]  # identity on foreground, nearest-foreground error elsewhere
    # edge replication: zero padding would read as zero error beyond the border
    ea = ndimage.convolve(et, matlab_gaussian(7, 5.0), mode="nearest")
    min_e = np.where(gt & (ea < err), ea, err)
    importance = np.where(gt, 1.0, 2.0 - np.exp(np.log(0.5) / 5.0 * dist))
    ew = min_e * importance
    tp = g.sum() - ew[gt].sum()
    fp = ew[~gt].sum()
    recall = 1.0 - ew[gt].mean()
    precision = tp / (tp + fp + EPS)
    score = float((1.0 + beta2) * recall * precision / (recall + beta2 * precision + EPS))
    return (score, False) if return_flag else score


# --- E-measure ------------------------------------------------------------------


def e_measure_curve(pred, gt, thresholds=THRESHOLDS) -> np.ndarray:
    """Mean enhanced alignment at each threshold, evaluated from class counts.

    A binarized prediction and binary ground truth take only four value
    pairs, so the alignment map is constant on each of the four classes.
    """
    n_pred, n_tp = threshold_counts(pred, gt, thresholds)
    gt = np.asarray(gt).astype(bool)
    n = gt.size
    n_gt = int(np.count_nonzero(gt))
    if n_gt == 0:
        return 1.0 - n_pred / n
    if n_gt == n:
        return n_pred / n
    mu_g = n_gt / n
    mu_p = n_pred / n
    counts = {
        (1, 1): n_tp,
        (1, 0): n_pred - n_tp,
        (0, 1): n_gt - n_tp,
        (0, 0): n - n_pred - n_gt + n_tp,
    }
    total = np.zeros(len(n_pred))
    for (p, g), c in counts.items():
        dp = p - mu_p
        dg = g - mu_g
        phi = 2.0 * dp * dg / (dp * dp + dg * dg)  # dg != 0 since 0 < mu_g < 1
        total += c * (phi + 1.0) ** 2 / 4.0
    return total / n


def e_measure_max(pred, gt) -> float:
    return float(e_measure_curve(pred, gt).max())


# --- aggregation ----------------------------------------------------------------


@dataclass
class ImageMetrics:
    id: str
    mdice: float
    miou: float
    f_beta_w: float
    s_alpha: float
    e_phi_max: float
    mae: float
    empty_gt: bool = False

    def values(self) -> tuple[float, ...]:
        return tuple(getattr(self, k) for k in METRIC_NAMES)


def image_metrics(pred, gt, id: str = "", threshold="sweep") -> ImageMetrics:
    md, mi = mdice_miou(pred, gt, threshold)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        fw, empty = weighted_fmeasure(pred, gt, return_flag=True)
    return ImageMetrics(id, md, mi, fw, s_measure(pred, gt), e_measure_max(pred, gt), mae(pred, gt), empty)


@dataclass
class MetricsReport:
    dataset_id: str
    mdice: float
    miou: float
    f_beta_w: float
    s_alpha: float
    e_phi_max: float
    mae: float
    per_image: list[ImageMetrics] = field(default_factory=list)

    @classmethod
    def from_images(cls, dataset_id: str, images: list[ImageMetrics]) -> "MetricsReport":
        if not images:
            raise EmptyDatasetError("cannot aggregate an empty dataset")
        images = sorted(images, key=lambda m: m.id)
        # math.fsum makes the mean independent of summation order
        means = [math.fsum(getattr(m, k) for m in images) / len(images) for k in METRIC_NAMES]
        return cls(dataset_id, *means, per_image=images)

    def values(self) -> tuple[float, ...]:
        return tuple(getattr(self, k) for k in METRIC_NAMES)

    def display_row(self) -> list[str]:
        """The six aggregates scaled by 100, one decimal, in table order."""
        return [f"{100.0 * v:.1f}" for v in self.values()]

    def to_tsv(self) -> str:
        lines = ["dataset\t" + "\t".join(METRIC_LABELS), self.dataset_id + "\t" + "\t".join(self.display_row()), ""]
        lines.append("# per-image (raw, unscaled)")
        lines.append("id\t" + "\t".join(METRIC_LABELS) + "\tempty_gt")
        for m in self.per_image:
            lines.append(m.id + "\t" + "\t".join(f"{v:.6f}" for v in m.values()) + f"\t{int(m.empty_gt)}")
        return "\n".join(lines) + "\n"

    def to_text(self) -> str:
        width = max(len(label) for label in METRIC_LABELS)
        lines = [f"dataset: {self.dataset_id}", f"images: {len(self.per_image)}"]
        for label, v in zip(METRIC_LABELS, self.display_row()):
            lines.append(f"  {label:<{width}}  {v:>6}")
        return "\n".join(lines) + "\n"


def _threads() -> int:
    raw = os.environ.get("SMAMBA_THREADS", "")
    try:
        return max(1, int(raw)) if raw else 1
    except ValueError:
        return 1


def evaluate_dataset(pairs, dataset_id: str = "dataset", threshold="sweep", threads: int | None = None) -> MetricsReport:
    """Score ``(id, pred, gt)`` triples; per-image work may run on ``SMAMBA_THREADS`` threads."""
    pairs = sorted(pairs, key=lambda item: item[0])
    if not pairs:
        raise EmptyDatasetError("cannot evaluate an empty dataset")
    threads = threads or _threads()

    def score(item):
        ident, pred, gt = item
        return image_metrics(pred, gt, ident, threshold)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            images = list(pool.map(score, pairs))
    else:
        images = [score(item) for item in pairs]
    return MetricsReport.from_images(dataset_id, images)
