"""Segmentation metrics and forgetting-curve assembly.

DSC is the usual volumetric overlap; ASD is the symmetric average surface
distance in mm, averaging the two directional surface-to-surface means.
A voxel is a surface voxel when it is foreground with at least one
face-adjacent (6-connectivity) background neighbor; the array border
counts as background.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage


@dataclass(frozen=True)
class SegScore:
    dsc: float
    asd: float          # mm; nan marks an empty-mask case (excluded from means)
    class_id: int
    case_id: str


@dataclass
class StepSnapshot:
    """Frozen evaluation after one continual step.

    ``class_dsc``/``class_asd`` cover exactly the classes learned so far;
    ``posterior_digests`` are sha256 hex digests of each head's posterior
    bytes on a fixed probe volume, used to certify that untouched decoders
    produce bit-identical predictions at later steps.
    """

    step: int
    dataset_id: str
    class_dsc: dict[int, float]
    class_asd: dict[int, float]
    dense_params: int
    sparse_params: int
    prune_records: dict[str, dict] = field(default_factory=dict)
    posterior_digests: dict[str, str] = field(default_factory=dict)
    scores: list[SegScore] = field(default_factory=list)


def dsc(pred_mask: np.ndarray, gt_mask: np.ndarray) -> float:
    """2|A∩B| / (|A|+|B|); two empty masks score 1, one empty scores 0."""
    pred_mask = np.asarray(pred_mask)
    gt_mask = np.asarray(gt_mask)
    if pred_mask.shape != gt_mask.shape:
        raise ValueError(f"shape mismatch {pred_mask.shape} vs {gt_mask.shape}")
    a = pred_mask.astype(bool)
    b = gt_mask.astype(bool)
    na, nb = int(a.sum()), int(b.sum())
    if na + nb == 0:
        return 1.0
    return 2.0 * int((a & b).sum()) / (na + nb)


def surface_mask(mask: np.ndarray) -> np.ndarray:
    """Foreground voxels with a face-adjacent background neighbor."""
    mask = np.asarray(mask, dtype=bool)
    structure = ndimage.generate_binary_structure(3, 1)
    interior = ndimage.binary_erosion(mask, structure=structure, border_value=0)
    return mask & ~interior


def asd(pred_mask: np.ndarray, gt_mask: np.ndarray,
        spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)) -> float:
    """Symmetric average surface distance in mm.

    Mean of the two directional means (pred-surface to gt-surface and
    back), with voxel-center distances weighted by ``spacing``.  Returns
    nan when either mask is empty; callers skip nan in aggregates.
    """
    pred_mask = np.asarray(pred_mask).astype(bool)
    gt_mask = np.asarray(gt_mask).astype(bool)
    if pred_mask.shape != gt_mask.shape:
        raise ValueError(f"shape mismatch {pred_mask.shape} vs {gt_mask.shape}")
    if not pred_mask.any() or not gt_mask.any():
        return math.nan
    sp = surface_mask(pred_mask)
    sg = surface_mask(gt_mask)
    # exact EDT to the other mask's surface, evaluated on this surface
    d_to_g = ndimage.distance_transform_edt(~sg, sampling=spacing)
    d_to_p = ndimage.distance_transform_edt(~sp, sampling=spacing)
    return 0.5 * (float(d_to_g[sp].mean()) + float(d_to_p[sg].mean()))


def mean_dsc(scores: list[SegScore]) -> float:
    if not scores:
        raise ValueError("no scores to average")
    return float(np.mean([s.dsc for s in scores]))


def mean_asd(scores: list[SegScore]) -> float:
    """Average per class over cases, then over classes; nan cases skipped."""
    per_class: dict[int, list[float]] = {}
    for s in scores:
        if not math.isnan(s.asd):
            per_class.setdefault(s.class_id, []).append(s.asd)
    if not per_class:
        return math.nan
    return float(np.mean([np.mean(v) for v in per_class.values()]))


def forgetting_curve(snapshots: list[StepSnapshot], dataset_id: str,
                     dataset_classes: set[int]) -> list[tuple[int, float]]:
    """Mean DSC of one dataset's classes at every step since introduction."""
    intro = None
    for snap in snapshots:
        if dataset_classes <= set(snap.class_dsc):
            intro = snap.step
            break
    if intro is None:
        raise ValueError(f"dataset {dataset_id} never introduced in these snapshots")
    series = []
    for snap in snapshots:
        if snap.step < intro:
            continue
        vals = [snap.class_dsc[c] for c in sorted(dataset_classes)]
        series.append((snap.step, float(np.mean(vals))))
    return series


METRICS_COLUMNS = ("run", "step", "dataset", "class", "case", "dsc", "asd")


def write_metrics_csv(path, rows: list[dict]) -> None:
    """Deterministic metrics table; floats written with repr round-tripping."""
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(METRICS_COLUMNS)
        for row in rows:
            writer.writerow([
                row["run"], row["step"], row["dataset"], row["class"], row["case"],
                repr(float(row["dsc"])), repr(float(row["asd"])),
            ])
