"""Body-part bounding and lesion-aware merging of per-head predictions.

Each decoder gets an axial validity interval derived from the slice
scores its training anatomies occupied: upper bound = min(extent,
P95 + 2*sigma), lower = max(0, P5 - 2*sigma), with sigma the sample
standard deviation of the scores.  Foreground posteriors are zeroed on
slices outside the interval before merging.

Merging picks, per voxel, the head with the smallest bounded-prediction
entropy H = -(M*Y) log(M*Y), where M is 1 for an in-bound head with no
lesion claim at that voxel and 0.5 otherwise.  Predictions are binarized
at posterior 0.5 before the entropy: -x log x is non-monotone on (0, 1)
and would otherwise favor near-zero confidences, so the argmin is taken
over {0, 0.5, 1} values where in-bound unsuppressed heads (H = 0) always
beat suppressed ones (H = 0.347).  A raw-posterior mode is kept behind a
flag for comparison.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

H_HALF = 0.5 * math.log(2.0)  # -0.5 * ln 0.5, entropy of a suppressed claim


@dataclass(frozen=True)
class BprBounds:
    lower: float
    upper: float
    sigma: float
    p5: float
    p95: float

    def __post_init__(self):
        if not (0.0 <= self.lower <= self.upper):
            raise ValueError("bounds must satisfy 0 <= lower <= upper")


def decoder_bounds(scores, z_extent: float = 1.0) -> BprBounds:
    """Axial validity interval from observed slice scores.

    ``scores`` are the slice scores at which the decoder's anatomies
    appeared during training (>= 2 samples, else sigma is undefined).
    ``z_extent`` is the upper clamp; the normalized score domain uses 1.
    """
    vals = np.asarray(list(scores), dtype=np.float64)
    if vals.size < 2:
        raise ValueError("need at least 2 score samples")
    sigma = float(vals.std(ddof=1))
    p5, p95 = (float(v) for v in np.percentile(vals, [5.0, 95.0]))
    upper = min(float(z_extent), p95 + 2.0 * sigma)
    lower = max(0.0, p5 - 2.0 * sigma)
    return BprBounds(lower=lower, upper=upper, sigma=sigma, p5=p5, p95=p95)


def bound_mask(bounds: BprBounds, slice_scores) -> np.ndarray:
    """Per-slice {0,1} indicator of scores inside [lower, upper]."""
    s = np.asarray(slice_scores, dtype=np.float64)
    return ((s >= bounds.lower) & (s <= bounds.upper)).astype(np.float32)


def full_bounds() -> BprBounds:
    """Whole-image validity, used for lesions with no specific host."""
    return BprBounds(lower=0.0, upper=1.0, sigma=0.0, p5=0.0, p95=1.0)


def apply_bound(posterior: np.ndarray, bounds: BprBounds, slice_scores) -> np.ndarray:
    """Zero all foreground channels on out-of-bound axial slices."""
    posterior = np.asarray(posterior)
    if posterior.ndim != 4:
        raise ValueError("expected (channels, D, H, W) posterior")
    if posterior.shape[1] != len(slice_scores):
        raise ValueError("slice_scores length must match the axial extent")
    out = posterior.copy()
    keep = bound_mask(bounds, slice_scores)
    out[1:] *= keep[None, :, None, None]
    return out


def gtv_weight_map(B: np.ndarray, gtv_binarized: np.ndarray) -> np.ndarray:
    """M = 1 - (1 - B + gtv*B)/2; 1 only in-bound with no lesion claim."""
    B = np.asarray(B, dtype=np.float64)
    g = np.asarray(gtv_binarized, dtype=np.float64)
    if B.shape != g.shape:
        raise ValueError(f"shape mismatch {B.shape} vs {g.shape}")
    ones = np.ones_like(B)
    return ones - 0.5 * (ones - B + g * B)


@dataclass
class HeadPrediction:
    """One decoder's contribution to the merge."""

    head_id: str
    class_map: np.ndarray      # int32 (D, H, W), winning class id per voxel (0 = none)
    fg_posterior: np.ndarray   # float (D, H, W), that class's posterior
    bound: np.ndarray          # {0,1} (D, H, W) axial validity
    weight_map: np.ndarray     # M in {0.5, 1}


@dataclass
class MergeContext:
    heads: list[HeadPrediction]
    binarize_threshold: float = 0.5
    use_raw_posteriors: bool = False


def head_prediction(head_id: str, posterior: np.ndarray, bounds: BprBounds,
                    slice_scores, class_ids, gtv_binarized: np.ndarray | None = None
                    ) -> HeadPrediction:
    """Assemble one head's merge inputs from its bounded posterior.

    ``class_ids`` orders the foreground channels (channel k+1 -> class_ids[k]).
    ``gtv_binarized`` is the binarized lesion field claiming voxels inside
    this head's bound, when a lesion head targets this anatomy.
    """
    posterior = apply_bound(posterior, bounds, slice_scores)
    fg = posterior[1:]
    best = fg.argmax(axis=0)
    fg_post = np.take_along_axis(fg, best[None], axis=0)[0]
    ids = np.asarray(list(class_ids), dtype=np.int32)
    class_map = ids[best]
    vol_shape = posterior.shape[1:]
    B3 = np.broadcast_to(bound_mask(bounds, slice_scores)[:, None, None], vol_shape)
    gtv = np.zeros(vol_shape) if gtv_binarized is None else gtv_binarized
    return HeadPrediction(
        head_id=head_id,
        class_map=class_map.astype(np.int32),
        fg_posterior=fg_post,
        bound=np.ascontiguousarray(B3, dtype=np.float32),
        weight_map=gtv_weight_map(B3, gtv),
    )


def merge_predictions(ctx: MergeContext) -> np.ndarray:
    """Per-voxel argmin-entropy label map over all claiming heads.

    Voxels nobody claims stay background; 0*log(0) counts as 0.  Entropy
    ties go to the higher raw posterior, then to head registration order.
    """
    if not ctx.heads:
        raise ValueError("nothing to merge")
    shape = ctx.heads[0].class_map.shape
    out = np.zeros(shape, dtype=np.int32)
    best_h = np.full(shape, np.inf)
    best_post = np.full(shape, -np.inf)

    for hp in ctx.heads:
        if ctx.use_raw_posteriors:
            claim = hp.fg_posterior * (hp.fg_posterior > 0)
        else:
            claim = (hp.fg_posterior > ctx.binarize_threshold).astype(np.float64)
        x = hp.weight_map * claim
        with np.errstate(divide="ignore", invalid="ignore"):
            h = np.where(x > 0, -x * np.log(np.where(x > 0, x, 1.0)), 0.0)
        valid = claim > 0
        better = valid & (
            (h < best_h)
            | ((h == best_h) & (hp.fg_posterior > best_post))
        )
        out[better] = hp.class_map[better]
        best_h[better] = h[better]
        best_post[better] = hp.fg_posterior[better]
    return out
