"""Evaluation: region Dice, 95th-percentile surface distance, containment.

HD95 pools the directed boundary-to-boundary Euclidean distances in both
directions and takes the 95th percentile with linear interpolation, so it
is symmetric by construction. A voxel is boundary if it is foreground with
at least one six-connected background neighbor; the volume border counts
as background. Distances are in voxel units (phantom spacing is isotropic).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .phantom import LabelVolume, derive_regions

REGIONS = ("wt", "tc", "et")


def _as_bool(mask):
    arr = np.asarray(mask)
    if arr.dtype != bool:
        arr = arr != 0
    return arr


def _check_same_shape(a, b):
    if a.shape != b.shape:
        raise ValueError(f"mask shape mismatch: {a.shape} vs {b.shape}")


def dice_score(a, b) -> float:
    """2|A∩B| / (|A|+|B|); defined as 1.0 when both masks are empty."""
    a = _as_bool(a)
    b = _as_bool(b)
    _check_same_shape(a, b)
    na, nb = int(a.sum()), int(b.sum())
    if na + nb == 0:
        return 1.0
    return 2.0 * int(np.sum(a & b)) / (na + nb)


def boundary_voxels(mask) -> np.ndarray:
    """Foreground voxels with a six-connected background neighbor."""
    m = _as_bool(mask)
    p = np.pad(m, 1, constant_values=False)
    interior = (
        p[:-2, 1:-1, 1:-1]
        & p[2:, 1:-1, 1:-1]
        & p[1:-1, :-2, 1:-1]
        & p[1:-1, 2:, 1:-1]
        & p[1:-1, 1:-1, :-2]
        & p[1:-1, 1:-1, 2:]
    )
    return m & ~interior


def _directed_min_distances(src, dst):
    """Min Euclidean distance from each src point to the dst point set."""
    out = np.empty(len(src), dtype=np.float64)
    dst64 = dst.astype(np.float64)
    for start in range(0, len(src), 256):
        block = src[start : start + 256].astype(np.float64)
        d2 = ((block[:, None, :] - dst64[None, :, :]) ** 2).sum(axis=2)
        out[start : start + 256] = np.sqrt(d2.min(axis=1))
    return out


def hd95(a, b):
    """95th percentile of pooled bidirectional surface distances.

    Returns None when either mask is empty; never NaN.
    """
    a = _as_bool(a)
    b = _as_bool(b)
    _check_same_shape(a, b)
    if not a.any() or not b.any():
        return None
    pa = np.argwhere(boundary_voxels(a))
    pb = np.argwhere(boundary_voxels(b))
    pooled = np.concatenate(
        [_directed_min_distances(pa, pb), _directed_min_distances(pb, pa)]
    )
    return float(np.percentile(pooled, 95))


def containment_violation(outer, inner) -> float:
    """Fraction of inner-mask voxels lying outside the outer mask."""
    outer = _as_bool(outer)
    inner = _as_bool(inner)
    _check_same_shape(outer, inner)
    n_inner = int(inner.sum())
    if n_inner == 0:
        return 0.0
    return int(np.sum(inner & ~outer)) / n_inner


@dataclass
class RegionReport:
    """Per-volume metrics: one Dice/HD95 pair per region plus nesting audit."""

    dice: dict = field(default_factory=dict)
    hd95: dict = field(default_factory=dict)
    containment_violation_wt_tc: float = 0.0
    containment_violation_tc_et: float = 0.0

    def to_dict(self):
        return {
            "dice": dict(self.dice),
            "hd95": dict(self.hd95),
            "containment_violation_wt_tc": self.containment_violation_wt_tc,
            "containment_violation_tc_et": self.containment_violation_tc_et,
        }


def evaluate_volume(pred_labels: LabelVolume, gt_labels: LabelVolume) -> RegionReport:
    """Score a predicted label volume against ground truth, per region."""
    if pred_labels.data.shape != gt_labels.data.shape:
        raise ValueError(
            f"extent mismatch: {pred_labels.data.shape} vs {gt_labels.data.shape}"
        )
    pred = derive_regions(pred_labels)
    gt = derive_regions(gt_labels)
    report = RegionReport()
    for region in REGIONS:
        p = pred.as_dict()[region]
        g = gt.as_dict()[region]
        report.dice[region] = dice_score(p, g)
        report.hd95[region] = hd95(p, g)
    report.containment_violation_wt_tc = containment_violation(pred.wt, pred.tc)
    report.containment_violation_tc_et = containment_violation(pred.tc, pred.et)
    return report


def aggregate_reports(reports):
    """Mean / median / 25 and 75 quantile rows over per-case metrics.

    Undefined HD95 entries are excluded from aggregation; the count of
    excluded cases is reported alongside.
    """
    rows = {}
    for metric in ("dice", "hd95"):
        for region in REGIONS:
            values = [getattr(r, metric)[region] for r in reports]
            defined = [v for v in values if v is not None]
            key = f"{metric}_{region}"
            if not defined:
                rows[key] = {
                    "mean": None,
                    "median": None,
                    "q25": None,
                    "q75": None,
                    "undefined": len(values),
                }
                continue
            arr = np.asarray(defined, dtype=np.float64)
            rows[key] = {
                "mean": float(arr.mean()),
                "median": float(np.percentile(arr, 50)),
                "q25": float(np.percentile(arr, 25)),
                "q75": float(np.percentile(arr, 75)),
                "undefined": len(values) - len(defined),
            }
    for key in ("containment_violation_wt_tc", "containment_violation_tc_et"):
        arr = np.asarray([getattr(r, key) for r in reports], dtype=np.float64)
        rows[key] = {
            "mean": float(arr.mean()),
            "median": float(np.percentile(arr, 50)),
            "q25": float(np.percentile(arr, 25)),
            "q75": float(np.percentile(arr, 75)),
            "undefined": 0,
        }
    return rows
