"""Training objectives.

``ce_dice`` is the default supervised loss for decoder training.  ``unce``
and ``unkd`` are the overlap-aware marginal cross-entropy / distillation
pair used by the MiB-style baseline: old classes are merged into the
background probability, except classes the current dataset labels again
(the overlap set), which are trained directly.  ``pod3d_*`` implement the
single-axis mean-projection feature distillation used by the PLOP-style
baseline, and ``neg_cos`` is the stop-gradient negative cosine loss used
for encoder self-supervision.

All probability inputs are clamped to [1e-12, 1] before logs.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

PROB_EPS = 1e-12
DICE_EPS = 1e-5


@dataclass(frozen=True)
class ClassContext:
    """Label bookkeeping for one continual step.

    ``old_classes`` is everything the previous model predicts (background
    included); ``current_classes`` is the label space of the current
    dataset (background included).  The overlap set defaults to the
    foreground intersection; ``overlap_union`` switches to the literal
    union reading for comparison.
    """

    old_classes: frozenset[int]
    current_classes: frozenset[int]
    background: int = 0
    overlap_union: bool = False

    def __post_init__(self):
        if self.background not in self.old_classes:
            raise ValueError("background must be part of old_classes")
        if self.background not in self.current_classes:
            raise ValueError("background must be part of current_classes")

    @property
    def overlap(self) -> frozenset[int]:
        if self.overlap_union:
            base = self.old_classes | self.current_classes
        else:
            base = self.old_classes & self.current_classes
        return frozenset(base - {self.background})

    @property
    def channel_classes(self) -> tuple[int, ...]:
        """Model output channels, sorted; covers old and current classes."""
        return tuple(sorted(self.old_classes | self.current_classes))


@dataclass
class VoxelSet:
    """Flattened voxel probabilities for the marginal losses.

    ``probs`` (and ``old_probs`` when present) are (N, C) over
    ``ctx.channel_classes``; ``labels`` holds class ids (not channel
    indices).
    """

    probs: torch.Tensor
    labels: torch.Tensor | None = None
    old_probs: torch.Tensor | None = None


def _channel_index(ctx: ClassContext) -> dict[int, int]:
    return {c: i for i, c in enumerate(ctx.channel_classes)}


def cross_entropy(posteriors: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean -log p(label); posteriors (C, ...) probabilities, labels (...)."""
    n_classes = posteriors.shape[0]
    if labels.min() < 0 or labels.max() >= n_classes:
        raise ValueError("label id outside posterior channels")
    flat_p = posteriors.reshape(n_classes, -1).transpose(0, 1)
    flat_y = labels.reshape(-1).long()
    picked = flat_p.gather(1, flat_y[:, None]).squeeze(1)
    return -torch.log(picked.clamp(PROB_EPS, 1.0)).mean()


def soft_dice_loss(posteriors: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean over foreground channels of (1 - dice) with squared denominators."""
    n_classes = posteriors.shape[0]
    flat_p = posteriors.reshape(n_classes, -1)
    flat_y = labels.reshape(-1).long()
    terms = []
    for c in range(1, n_classes):
        p = flat_p[c]
        y = (flat_y == c).to(p.dtype)
        inter = (p * y).sum()
        denom = (p * p).sum() + (y * y).sum()
        terms.append(1.0 - (2.0 * inter + DICE_EPS) / (denom + DICE_EPS))
    if not terms:
        return posteriors.sum() * 0.0
    return torch.stack(terms).mean()


def ce_dice(posteriors: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    return cross_entropy(posteriors, labels) + soft_dice_loss(posteriors, labels)


def unce(voxels: VoxelSet, ctx: ClassContext) -> torch.Tensor:
    """Marginal cross-entropy with old classes merged into the background.

    For a voxel labeled background the log argument is the summed
    probability over old classes minus the overlap set (the background
    channel itself included); any other label uses its own probability.
    """
    if voxels.labels is None:
        raise ValueError("unce needs labels")
    idx = _channel_index(ctx)
    probs = voxels.probs
    labels = voxels.labels.long()
    valid = ctx.current_classes
    label_ids = set(torch.unique(labels).tolist())
    if not label_ids <= valid:
        raise ValueError(f"labels {sorted(label_ids - valid)} outside current label space")

    merge_set = sorted(ctx.old_classes - ctx.overlap)
    merge_cols = [idx[c] for c in merge_set]
    merged_bg = probs[:, merge_cols].sum(dim=1)

    lut = torch.zeros(max(idx) + 1, dtype=torch.long, device=probs.device)
    for c, i in idx.items():
        lut[c] = i
    own = probs.gather(1, lut[labels][:, None]).squeeze(1)
    picked = torch.where(labels == ctx.background, merged_bg, own)
    return -torch.log(picked.clamp(PROB_EPS, 1.0)).mean()


def unkd(voxels: VoxelSet, ctx: ClassContext) -> torch.Tensor:
    """Distillation over old classes outside the overlap set.

    The current model's background probability is replaced by the summed
    probability over the whole current label space, so old knowledge that
    the current dataset re-labels is excluded and the first step (old set
    = background only) contributes exactly zero.
    """
    if voxels.old_probs is None:
        raise ValueError("unkd needs the previous model's probabilities")
    idx = _channel_index(ctx)
    probs = voxels.probs
    old_probs = voxels.old_probs

    cur_cols = [idx[c] for c in sorted(ctx.current_classes)]
    merged_bg = probs[:, cur_cols].sum(dim=1)

    total = None
    for c in sorted(ctx.old_classes - ctx.overlap):
        target = merged_bg if c == ctx.background else probs[:, idx[c]]
        term = -old_probs[:, idx[c]] * torch.log(target.clamp(PROB_EPS, 1.0))
        total = term if total is None else total + term
    if total is None:
        return probs.sum() * 0.0
    return total.mean()


def pod3d_pool(feature: torch.Tensor) -> torch.Tensor:
    """Concatenated single-axis mean projections of a (C, D, H, W) map.

    Rows: mean over H (W*D rows), mean over W (H*D rows), mean over D
    (H*W rows); columns are channels, so the output is
    ((WD + HD + HW), C).
    """
    if feature.dim() != 4:
        raise ValueError("expected a (C, D, H, W) feature map")
    c, d, h, w = feature.shape
    if min(d, h, w) < 1 or c < 1:
        raise ValueError("zero-sized axis")
    over_h = feature.mean(dim=2).reshape(c, -1)   # (C, D*W)
    over_w = feature.mean(dim=3).reshape(c, -1)   # (C, D*H)
    over_d = feature.mean(dim=1).reshape(c, -1)   # (C, H*W)
    return torch.cat([over_h, over_w, over_d], dim=1).transpose(0, 1)


def pod3d_pool_1d(feature: torch.Tensor) -> torch.Tensor:
    """Two-axis pooling alternative: 1D projections, ((D + H + W), C).

    Kept for comparison only; it discards most spatial structure and is
    not used as a training default.
    """
    if feature.dim() != 4:
        raise ValueError("expected a (C, D, H, W) feature map")
    c, d, h, w = feature.shape
    if min(d, h, w) < 1 or c < 1:
        raise ValueError("zero-sized axis")
    over_hw = feature.mean(dim=(2, 3))   # (C, D)
    over_wd = feature.mean(dim=(1, 3))   # (C, H)
    over_hd = feature.mean(dim=(1, 2))   # (C, W)
    return torch.cat([over_hw, over_wd, over_hd], dim=1).transpose(0, 1)


def pod3d_loss(new_stages, old_stages, factor: float, pool=pod3d_pool) -> torch.Tensor:
    """factor * mean over stages of squared L2 distance of pooled maps."""
    new_stages = list(new_stages)
    old_stages = list(old_stages)
    if len(new_stages) != len(old_stages):
        raise ValueError("stage count mismatch")
    if not new_stages:
        raise ValueError("empty pyramids")
    total = None
    for new, old in zip(new_stages, old_stages):
        if new.shape != old.shape:
            raise ValueError(f"stage shape mismatch {tuple(new.shape)} vs {tuple(old.shape)}")
        diff = pool(new) - pool(old)
        term = (diff * diff).sum()
        total = term if total is None else total + term
    return factor * total / len(new_stages)


def neg_cos(p: torch.Tensor, z: torch.Tensor) -> torch.Tensor:
    """-cos(p, z) with z treated as a constant (no gradient through z).

    Accepts single vectors or (N, dim) batches; batches are averaged.
    """
    if p.dim() == 1:
        p = p[None]
    if z.dim() == 1:
        z = z[None]
    z = z.detach()
    pn = p.norm(dim=1)
    zn = z.norm(dim=1)
    if bool((pn == 0).any()) or bool((zn == 0).any()):
        raise ValueError("zero vector has no direction")
    return (-(p * z).sum(dim=1) / (pn * zn)).mean()
