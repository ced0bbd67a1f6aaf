"""Segmentation quality metrics over nested tumor regions.

Masks are boolean numpy volumes. The Hausdorff distance is the exact
symmetric max-min Euclidean distance between region borders (a border
voxel is a foreground voxel with at least one six-connected background
neighbor; volume boundaries count as background). A one-sided empty
mask makes it undefined, reported as NaN and written out as ``NA``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .errors import DataValidationError, PreconditionError

REGION_LABELS: dict[str, tuple[int, ...]] = {
    "WT": (1, 2, 3),   # whole tumor: every tumor tissue
    "TC": (1, 3),      # tumor core: necrotic/non-enhancing + enhancing
    "ET": (3,),        # enhancing tumor
}
REGIONS = tuple(REGION_LABELS)
METRIC_NAMES = ("dice", "sensitivity", "hausdorff")


def region_extract(labels: np.ndarray, region: str) -> np.ndarray:
    """Binary mask of one evaluation region from a label volume."""
    if region not in REGION_LABELS:
        raise PreconditionError(f"unknown region {region!r}")
    labels = np.asarray(labels)
    if labels.min() < 0 or labels.max() > 3:
        raise DataValidationError(
            f"labels outside {{0,1,2,3}}: range [{labels.min()}, "
            f"{labels.max()}]")
    return np.isin(labels, REGION_LABELS[region])


def _counts(pred: np.ndarray, gt: np.ndarray) -> tuple[int, int, int]:
    if pred.shape != gt.shape:
        raise PreconditionError(
            f"mask shapes differ: {pred.shape} vs {gt.shape}")
    pred = pred.astype(bool)
    gt = gt.astype(bool)
    tp = int(np.count_nonzero(pred & gt))
    fp = int(np.count_nonzero(pred & ~gt))
    fn = int(np.count_nonzero(~pred & gt))
    return tp, fp, fn


def dice_score(pred: np.ndarray, gt: np.ndarray) -> float:
    """2TP/(2TP+FP+FN); two empty masks count as a perfect match."""
    tp, fp, fn = _counts(pred, gt)
    if tp + fp + fn == 0:
        return 1.0
    return 2.0 * tp / (2.0 * tp + fp + fn)


def sensitivity(pred: np.ndarray, gt: np.ndarray) -> float:
    """TP/(TP+FN); an empty ground truth counts as fully recovered."""
    tp, _, fn = _counts(pred, gt)
    if tp + fn == 0:
        return 1.0
    return tp / (tp + fn)


def border_voxels(mask: np.ndarray) -> np.ndarray:
    """Coordinates of foreground voxels touching background (6-conn)."""
    mask = np.asarray(mask, dtype=bool)
    interior = np.ones_like(mask)
    for axis in range(mask.ndim):
        lo = np.take(mask, range(0, mask.shape[axis] - 1), axis=axis)
        hi = np.take(mask, range(1, mask.shape[axis]), axis=axis)
        pad = [(0, 0)] * mask.ndim
        pad[axis] = (1, 0)
        interior &= np.pad(lo, pad, constant_values=False)
        pad[axis] = (0, 1)
        interior &= np.pad(hi, pad, constant_values=False)
    return np.argwhere(mask & ~interior)


def hausdorff(pred: np.ndarray, gt: np.ndarray) -> float:
    """Exact symmetric Hausdorff distance between mask borders (voxels).

    Returns NaN when either mask is empty.
    """
    if pred.shape != gt.shape:
        raise PreconditionError(
            f"mask shapes differ: {pred.shape} vs {gt.shape}")
    bp = border_voxels(pred)
    bg = border_voxels(gt)
    if bp.size == 0 or bg.size == 0:
        return float("nan")
    tree_p = cKDTree(bp)
    tree_g = cKDTree(bg)
    d_pg = tree_g.query(bp, k=1)[0].max()
    d_gp = tree_p.query(bg, k=1)[0].max()
    return float(max(d_pg, d_gp))


# ---------------------------------------------------------------------------
# reporting


@dataclass
class RegionMetrics:
    dice: float
    sensitivity: float
    hausdorff: float  # NaN when undefined

    def get(self, metric: str) -> float:
        return getattr(self, metric)


@dataclass
class SubsetRow:
    """Aggregated metrics for one combination of available modalities."""

    subset: str                       # e.g. "1011", order FLAIR,T1,T1c,T2
    regions: dict[str, RegionMetrics]
    cases: int = 0

    def average(self, metric: str) -> float:
        vals = [self.regions[r].get(metric) for r in REGIONS]
        vals = [v for v in vals if not np.isnan(v)]
        return float(np.mean(vals)) if vals else float("nan")


def _fmt(v: float) -> str:
    return "NA" if np.isnan(v) else f"{v:.4f}"


@dataclass
class MetricsReport:
    rows: list[SubsetRow]
    meta: dict[str, str] = field(default_factory=dict)

    def to_csv(self) -> str:
        lines = [f"# {k}={v}" for k, v in self.meta.items()]
        lines.append("subset,region,dice,sensitivity,hausdorff")
        for row in self.rows:
            for region in REGIONS:
                m = row.regions[region]
                lines.append(f"{row.subset},{region},{_fmt(m.dice)},"
                             f"{_fmt(m.sensitivity)},{_fmt(m.hausdorff)}")
            lines.append(f"{row.subset},average,"
                         + ",".join(_fmt(row.average(m))
                                    for m in METRIC_NAMES))
        if len(self.rows) > 1:
            wins = self.wins()
            lines.append("wins,," + ",".join(
                wins[m] for m in METRIC_NAMES))
        return "\n".join(lines) + "\n"

    def wins(self) -> dict[str, str]:
        """Best subset per metric column (row-average values); lower is
        better for hausdorff, higher for the others. Ties go to the
        earlier row."""
        out = {}
        for metric in METRIC_NAMES:
            best_row = None
            best_val = None
            for row in self.rows:
                v = row.average(metric)
                if np.isnan(v):
                    continue
                better = (best_val is None
                          or (v < best_val if metric == "hausdorff"
                              else v > best_val))
                if better:
                    best_val, best_row = v, row.subset
            out[metric] = best_row if best_row is not None else "NA"
        return out

    def to_table(self) -> str:
        cols = [f"{r}_{m}" for m in METRIC_NAMES for r in REGIONS]
        cols += [f"avg_{m}" for m in METRIC_NAMES]
        header = ["subset"] + cols
        body = []
        for row in self.rows:
            vals = [_fmt(row.regions[r].get(m))
                    for m in METRIC_NAMES for r in REGIONS]
            vals += [_fmt(row.average(m)) for m in METRIC_NAMES]
            body.append([row.subset] + vals)
        if len(self.rows) > 1:
            wins = self.wins()
            body.append(["wins"] + [""] * len(REGIONS) * len(METRIC_NAMES)
                        + [wins[m] for m in METRIC_NAMES])
        widths = [max(len(r[i]) for r in [header] + body)
                  for i in range(len(header))]
        lines = [f"# {k}={v}" for k, v in self.meta.items()]
        for r in [header] + body:
            lines.append("  ".join(v.rjust(w) for v, w in zip(r, widths)))
        return "\n".join(lines) + "\n"
