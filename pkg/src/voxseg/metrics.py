"""Segmentation evaluation: overlap metrics, surface distances, and the
per-case / pooled report.

Conventions: RVD is signed, (|S| - |G|) / |G|. A surface voxel is a
foreground voxel with at least one background 6-neighbour, volume faces
counting as background. Surface distances use the exact Euclidean distance
transform scaled by voxel spacing; HD95 is the linear-interpolation 95th
percentile of the pooled directed distances. With an empty ground truth,
DC is 1 when the segmentation is empty too and 0 otherwise, and RVD,
sensitivity (and specificity for an all-foreground truth) are undefined and
reported as NaN.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, fields

import numpy as np
from scipy import ndimage

from voxseg.errors import DataError, ShapeError


@dataclass(frozen=True)
class CaseMetrics:
    case: str
    DC: float
    Jaccard: float
    VOE: float
    RVD: float
    ASSD: float
    MSD: float
    HD95: float
    sensitivity: float
    specificity: float


@dataclass(frozen=True)
class EvalReport:
    rows: tuple  # CaseMetrics per case, ordered by id
    mean: CaseMetrics  # arithmetic mean per metric (Dice per case, etc.)
    pooled: CaseMetrics  # overlap metrics over pooled voxel counts; DC is DG


_COLUMNS = [f.name for f in fields(CaseMetrics)][1:]


def _to_bool(mask) -> np.ndarray:
    return np.asarray(mask) != 0


def overlap_metrics(seg, gt) -> dict:
    """Voxel-count metrics: DC, Jaccard, VOE, RVD, sensitivity, specificity."""
    seg = _to_bool(seg)
    gt = _to_bool(gt)
    if seg.shape != gt.shape:
        raise ShapeError(f"extents differ: {seg.shape} vs {gt.shape}")
    inter = float(np.count_nonzero(seg & gt))
    s = float(np.count_nonzero(seg))
    g = float(np.count_nonzero(gt))
    total = float(seg.size)
    if g == 0:
        dc = 1.0 if s == 0 else 0.0
        jaccard = dc  # both empty -> 1; otherwise 0
        rvd = math.nan
        sensitivity = math.nan
    else:
        dc = 2.0 * inter / (s + g)
        jaccard = inter / (s + g - inter)
        rvd = (s - g) / g
        sensitivity = inter / g
    neg = total - g
    if neg == 0:
        specificity = math.nan
    else:
        true_neg = float(np.count_nonzero(~seg & ~gt))
        specificity = true_neg / neg
    return {
        "DC": dc,
        "Jaccard": jaccard,
        "VOE": 1.0 - jaccard,
        "RVD": rvd,
        "sensitivity": sensitivity,
        "specificity": specificity,
    }


def surface_voxels(mask) -> np.ndarray:
    """Foreground voxels with a background 6-neighbour (faces are background)."""
    mask = _to_bool(mask)
    eroded = ndimage.binary_erosion(
        mask, structure=ndimage.generate_binary_structure(mask.ndim, 1), border_value=0
    )
    return mask & ~eroded


def surface_metrics(seg, gt, spacing=(1.0, 1.0, 1.0)) -> dict:
    """ASSD, MSD, HD95 between the two mask surfaces, in spacing units."""
    seg = _to_bool(seg)
    gt = _to_bool(gt)
    if seg.shape != gt.shape:
        raise ShapeError(f"extents differ: {seg.shape} vs {gt.shape}")
    if not seg.any():
        raise DataError("surface_metrics: segmentation mask is empty")
    if not gt.any():
        raise DataError("surface_metrics: ground-truth mask is empty")
    spacing = tuple(float(s) for s in spacing)
    seg_surface = surface_voxels(seg)
    gt_surface = surface_voxels(gt)
    # exact EDT of the complement gives each voxel's distance to the surface
    d_to_gt = ndimage.distance_transform_edt(~gt_surface, sampling=spacing)
    d_to_seg = ndimage.distance_transform_edt(~seg_surface, sampling=spacing)
    pooled = np.concatenate([d_to_gt[seg_surface], d_to_seg[gt_surface]])
    return {
        "ASSD": float(pooled.mean()),
        "MSD": float(pooled.max()),
        "HD95": float(np.percentile(pooled, 95)),
    }


def dice_global(cases) -> float:
    """Single Dice over the pooled voxel counts of all (seg, gt) pairs."""
    if not cases:
        raise DataError("dice_global needs at least one case")
    inter = sizes = 0.0
    for seg, gt in cases:
        seg = _to_bool(seg)
        gt = _to_bool(gt)
        if seg.shape != gt.shape:
            raise ShapeError(f"extents differ: {seg.shape} vs {gt.shape}")
        inter += float(np.count_nonzero(seg & gt))
        sizes += float(np.count_nonzero(seg)) + float(np.count_nonzero(gt))
    if sizes == 0:
        return 1.0
    return 2.0 * inter / sizes


def evaluate_case(case_id: str, seg, gt, spacing=(1.0, 1.0, 1.0)) -> CaseMetrics:
    values = overlap_metrics(seg, gt)
    if _to_bool(seg).any() and _to_bool(gt).any():
        values.update(surface_metrics(seg, gt, spacing))
    else:
        values.update({"ASSD": math.nan, "MSD": math.nan, "HD95": math.nan})
    return CaseMetrics(case=case_id, **values)


def evaluate_cases(cases) -> EvalReport:
    """Evaluate (case id, seg, gt[, spacing]) tuples into a full report."""
    rows = []
    pooled_inputs = []
    for entry in sorted(cases, key=lambda c: str(c[0])):
        case_id, seg, gt = entry[0], entry[1], entry[2]
        spacing = entry[3] if len(entry) > 3 else (1.0, 1.0, 1.0)
        rows.append(evaluate_case(str(case_id), seg, gt, spacing))
        pooled_inputs.append((seg, gt))
    if not rows:
        raise DataError("evaluate_cases needs at least one case")
    mean = CaseMetrics(
        case="MEAN",
        **{
            col: float(np.nanmean([getattr(r, col) for r in rows]))
            for col in _COLUMNS
        },
    )
    pooled_counts = overlap_metrics(
        np.concatenate([_to_bool(s).reshape(-1) for s, _ in pooled_inputs]),
        np.concatenate([_to_bool(g).reshape(-1) for _, g in pooled_inputs]),
    )
    pooled = CaseMetrics(
        case="GLOBAL",
        ASSD=math.nan,
        MSD=math.nan,
        HD95=math.nan,
        **pooled_counts,
    )
    return EvalReport(rows=tuple(rows), mean=mean, pooled=pooled)


def write_report_csv(path, report: EvalReport) -> None:
    """CSV with one row per case plus MEAN and GLOBAL aggregate rows.

    Undefined cells (NaN) are written as ``NA``; the GLOBAL row leaves the
    surface-distance columns empty because pooling surfaces across cases is
    not meaningful.
    """

    def fmt(value, blank_nan=False):
        if isinstance(value, float) and math.isnan(value):
            return "" if blank_nan else "NA"
        return f"{value:.9g}"

    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["case"] + _COLUMNS)
        for row in report.rows + (report.mean,):
            writer.writerow([row.case] + [fmt(getattr(row, col)) for col in _COLUMNS])
        pooled = report.pooled
        writer.writerow(
            [pooled.case]
            + [
                fmt(getattr(pooled, col), blank_nan=col in ("ASSD", "MSD", "HD95"))
                for col in _COLUMNS
            ]
        )
