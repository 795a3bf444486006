"""General-encoder training.

Three routes, matching how much supervision is available:

* ``train_ge_supervised`` — joint training of the encoder alongside a few
  grouped throwaway decoders on a comprehensive dataset, then freezing.
* ``simsiam_pretrain`` — two augmented views per volume, a predictor MLP
  on the bottleneck embedding, and the symmetric stop-gradient negative
  cosine loss.
* ``momentum_finetune`` — sequential per-dataset fine-tuning with a fresh
  paired decoder per dataset and an InfoNCE-style regularizer whose
  negatives come from a FIFO feature queue.

View augmentation never flips head-to-foot; label maps ride along with
nearest-neighbor interpolation.
"""

from __future__ import annotations

import math
import time
import warnings
from collections import deque
from dataclasses import dataclass, field

import numpy as np
import torch
from scipy import ndimage
from torch import nn

from . import _train, arch, losses
from .synthdata import Sample

HU_RANGE = 1024.0


@dataclass(frozen=True)
class AugmentationScheme:
    """Transform ranges and per-transform trigger probabilities.

    Noise sigma is a fraction of the HU half-range (the stated range
    applies to unit-normalized intensities).  Mirror axes index (D, H, W);
    axis 0 (head-foot) is never allowed.
    """

    rotation_range: float = 45.0                       # degrees, each axis
    scale_range: tuple[float, float] = (0.7, 1.4)
    noise_sigma_range: tuple[float, float] = (0.0, 0.1)
    blur_sigma_range: tuple[float, float] = (0.5, 1.5)
    intensity_scale_range: tuple[float, float] = (0.65, 1.5)
    lowres_axial_factor: tuple[float, float] = (2.0, 4.0)
    lowres_inplane_factor: tuple[float, float] = (1.0, 2.0)
    gamma_range: tuple[float, float] = (0.7, 1.5)
    gamma_invert_prob: float = 0.1
    gamma_enabled: bool = True
    mirror_axes: frozenset[int] = frozenset({1, 2})
    trigger_probs: dict = field(default_factory=lambda: {
        "rotation": 0.5, "scaling": 0.5, "noise": 1.0, "blur": 0.5,
        "intensity": 1.0, "lowres": 0.5, "gamma": 0.3, "mirror": 0.5,
    })

    def __post_init__(self):
        if 0 in self.mirror_axes:
            raise ValueError("head-to-foot mirroring is not allowed")
        if any(not (0.0 <= p <= 1.0) for p in self.trigger_probs.values()):
            raise ValueError("trigger probabilities must lie in [0, 1]")


def identity_scheme() -> AugmentationScheme:
    return AugmentationScheme(trigger_probs={k: 0.0 for k in (
        "rotation", "scaling", "noise", "blur", "intensity", "lowres",
        "gamma", "mirror")})


def _rotation_matrix(angles_deg: np.ndarray) -> np.ndarray:
    out = np.eye(3)
    for axis, deg in enumerate(angles_deg):
        t = math.radians(float(deg))
        c, s = math.cos(t), math.sin(t)
        rot = np.eye(3)
        other = [i for i in range(3) if i != axis]
        rot[other[0], other[0]] = c
        rot[other[0], other[1]] = -s
        rot[other[1], other[0]] = s
        rot[other[1], other[1]] = c
        out = rot @ out
    return out


def _resample(arr: np.ndarray, out_shape, order: int) -> np.ndarray:
    grids = np.meshgrid(*[np.linspace(0.0, n - 1.0, m) for n, m in zip(arr.shape, out_shape)],
                        indexing="ij")
    return ndimage.map_coordinates(arr, grids, order=order, mode="nearest")


def augment_view(sample: Sample, scheme: AugmentationScheme,
                 rng: np.random.Generator) -> Sample:
    """One augmented view; identical rng state reproduces identical output."""
    img = sample.image.astype(np.float64)
    lbl = sample.labels
    p = scheme.trigger_probs

    do_rot = rng.random() < p["rotation"]
    do_scale = rng.random() < p["scaling"]
    if do_rot or do_scale:
        angles = rng.uniform(-scheme.rotation_range, scheme.rotation_range, 3) if do_rot \
            else np.zeros(3)
        scale = rng.uniform(*scheme.scale_range) if do_scale else 1.0
        rot = _rotation_matrix(angles)
        matrix = rot.T / scale  # output -> input coordinates
        center = (np.asarray(img.shape) - 1) / 2.0
        offset = center - matrix @ center
        img = ndimage.affine_transform(img, matrix, offset=offset, order=1,
                                       mode="constant", cval=-500.0)
        lbl = ndimage.affine_transform(lbl, matrix, offset=offset, order=0,
                                       mode="constant", cval=0, output=lbl.dtype)

    if rng.random() < p["noise"]:
        sigma = rng.uniform(*scheme.noise_sigma_range) * HU_RANGE
        img = img + rng.normal(0.0, 1.0, img.shape) * sigma

    if rng.random() < p["blur"]:
        img = ndimage.gaussian_filter(img, rng.uniform(*scheme.blur_sigma_range))

    if rng.random() < p["intensity"]:
        img = img * rng.uniform(*scheme.intensity_scale_range)

    if rng.random() < p["lowres"]:
        fz = rng.uniform(*scheme.lowres_axial_factor)
        fxy = rng.uniform(*scheme.lowres_inplane_factor)
        small = (max(1, round(img.shape[0] / fz)),
                 max(1, round(img.shape[1] / fxy)),
                 max(1, round(img.shape[2] / fxy)))
        img = _resample(_resample(img, small, order=0), img.shape, order=1)

    if scheme.gamma_enabled and rng.random() < p["gamma"]:
        gamma = rng.uniform(*scheme.gamma_range)
        invert = rng.random() < scheme.gamma_invert_prob
        lo, hi = img.min(), img.max()
        span = hi - lo
        if span > 0:
            norm = (img - lo) / span
            if invert:
                norm = 1.0 - norm
            norm = norm ** gamma
            if invert:
                norm = 1.0 - norm
            img = norm * span + lo

    for axis in sorted(scheme.mirror_axes):
        if rng.random() < p["mirror"]:
            img = np.flip(img, axis=axis)
            lbl = np.flip(lbl, axis=axis)

    img = np.clip(img, -HU_RANGE, HU_RANGE)
    return Sample(image=np.ascontiguousarray(img, dtype=np.float32),
                  labels=np.ascontiguousarray(lbl),
                  bpr_scores=sample.bpr_scores,
                  dataset_id=sample.dataset_id, split=sample.split, index=sample.index)


@dataclass
class MomentumQueue:
    """FIFO feature bank kept on the CPU."""

    capacity: int = 1024
    entries: deque = None

    def __post_init__(self):
        if self.capacity < 1:
            raise ValueError("capacity must be positive")
        if self.entries is None:
            self.entries = deque(maxlen=self.capacity)

    def push(self, vectors: torch.Tensor) -> None:
        for v in vectors.detach().cpu():
            self.entries.append(v.clone())

    def __len__(self) -> int:
        return len(self.entries)

    def as_tensor(self) -> torch.Tensor:
        return torch.stack(list(self.entries))


class PredictorMLP(nn.Module):
    """Two-layer predictor on top of the bottleneck embedding."""

    def __init__(self, dim: int, hidden: int | None = None):
        super().__init__()
        hidden = hidden or dim
        self.net = nn.Sequential(nn.Linear(dim, hidden), nn.ReLU(inplace=True),
                                 nn.Linear(hidden, dim))

    def forward(self, x):
        return self.net(x)


def embed(encoder: arch.Encoder, batch: torch.Tensor) -> torch.Tensor:
    """Global average pooling of the bottleneck stage, (N, C)."""
    stages = encoder(batch)
    return stages[-1].mean(dim=(2, 3, 4))


def _views_tensor(samples: list[Sample], scheme: AugmentationScheme,
                  rng: np.random.Generator, divisor: int) -> torch.Tensor:
    views = []
    for s in samples:
        v = augment_view(s, scheme, rng)
        x = arch._as_input_tensor(v.image) / HU_RANGE
        x, _ = arch.pad_to_divisor(x, divisor)
        views.append(x)
    return torch.cat(views)


def simsiam_pretrain(data: list[Sample], encoder: arch.Encoder,
                     predictor: PredictorMLP, epochs: int,
                     rng: np.random.Generator,
                     scheme: AugmentationScheme | None = None,
                     lr: float = 1e-3, batch_size: int = 2,
                     iters_per_epoch: int = 8, momentum: float = 0.9,
                     log: list | None = None) -> arch.Encoder:
    """Two-view pretraining with the symmetric stop-gradient cosine loss."""
    if not data:
        raise ValueError("empty pretraining set")
    scheme = scheme or AugmentationScheme()
    params = list(encoder.trainable_parameters()) + list(predictor.parameters())
    opt = torch.optim.SGD(params, lr=lr, momentum=momentum)
    divisor = encoder.config.divisor
    total_iters = max(epochs * iters_per_epoch, 1)
    it = 0
    encoder.train()
    for e in range(epochs):
        t0 = time.perf_counter()
        running = 0.0
        for _ in range(iters_per_epoch):
            cur_lr = 0.5 * lr * (1.0 + math.cos(math.pi * it / total_iters))
            for g in opt.param_groups:
                g["lr"] = cur_lr
            idx = rng.integers(0, len(data), size=batch_size)
            batch = [data[i] for i in idx]
            x1 = _views_tensor(batch, scheme, rng, divisor)
            x2 = _views_tensor(batch, scheme, rng, divisor)
            z1, z2 = embed(encoder, x1), embed(encoder, x2)
            p1, p2 = predictor(z1), predictor(z2)
            loss = 0.5 * losses.neg_cos(p1, z2) + 0.5 * losses.neg_cos(p2, z1)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            running += float(loss.detach())
            it += 1
        if log is not None:
            log.append({"epoch": e, "phase": "ssl", "loss": running / iters_per_epoch,
                        "lr": cur_lr, "wall_seconds": time.perf_counter() - t0})
    encoder.eval()
    return encoder


def group_classes(registry, n_groups: int = 3) -> list[tuple[int, ...]]:
    """Contiguous body-position groups of the non-lesion classes."""
    organs = sorted((a for a in registry.anatomies if not a.is_gtv),
                    key=lambda a: a.bpr_center)
    n_groups = min(n_groups, len(organs))
    chunks = np.array_split(np.arange(len(organs)), n_groups)
    return [tuple(organs[i].class_id for i in chunk) for chunk in chunks if len(chunk)]


def train_ge_supervised(comprehensive, registry, cfg: _train.TrainCfg, *,
                        samples: list[Sample], val_samples: list[Sample],
                        encoder_cfg: arch.EncoderConfig | None = None,
                        epochs: int = 25, lr: float = 0.01,
                        n_groups: int = 3, seed: int = 0
                        ) -> tuple[arch.Encoder, dict]:
    """Joint encoder + grouped-decoder training, then freezing.

    Classes absent from the comprehensive dataset are dropped from the
    groups with a warning.
    """
    missing = registry.class_union - comprehensive.class_set
    if missing:
        warnings.warn(
            f"{comprehensive.dataset_id} lacks classes {sorted(missing)}; "
            "training on the available groups")
    torch.manual_seed(seed)
    encoder = arch.Encoder(encoder_cfg or arch.EncoderConfig())
    groups = [tuple(c for c in g if c in comprehensive.class_set)
              for g in group_classes(registry, n_groups)]
    groups = [g for g in groups if g]
    heads = [arch.DecoderHead(f"ge_group{k}", g, encoder.config)
             for k, g in enumerate(groups)]
    rng = np.random.default_rng(seed)
    log = _train.train_joint(encoder, heads, samples, cfg, epochs, lr, rng)
    encoder.freeze()
    report = {"groups": {}, "log": log}
    for head in heads:
        vals = _train.evaluate_head_on_samples(encoder, head, val_samples)
        report["groups"][head.head_id] = {
            "class_ids": list(head.class_ids),
            "val_dsc": float(np.mean(vals)),
        }
    return encoder, report


def infonce_queue_loss(anchor: torch.Tensor, positive: torch.Tensor,
                       queue: MomentumQueue, temperature: float = 0.07
                       ) -> torch.Tensor:
    """InfoNCE with the queue as negatives; positive is stop-gradient."""
    a = torch.nn.functional.normalize(anchor, dim=1)
    pos = torch.nn.functional.normalize(positive.detach(), dim=1)
    logits = [(a * pos).sum(dim=1, keepdim=True)]
    if len(queue):
        neg = torch.nn.functional.normalize(queue.as_tensor(), dim=1)
        logits.append(a @ neg.t())
    logits = torch.cat(logits, dim=1) / temperature
    targets = torch.zeros(a.shape[0], dtype=torch.long)
    return torch.nn.functional.cross_entropy(logits, targets)


def momentum_finetune(encoder: arch.Encoder, datasets, queue: MomentumQueue,
                      cfg: _train.TrainCfg, *, epochs_per_dataset: int = 6,
                      encoder_lr: float = 1e-4, decoder_lr: float = 1e-3,
                      queue_weight: float = 0.1, temperature: float = 0.07,
                      scheme: AugmentationScheme | None = None,
                      ema_encoder: bool = False, ema_decay: float = 0.999,
                      seed: int = 0, log: list | None = None) -> arch.Encoder:
    """Sequential per-dataset fine-tuning with a feature queue regularizer.

    ``datasets`` is a list of (descriptor, samples) pairs.  Each dataset
    gets a freshly initialized throwaway decoder; batch embeddings enter
    the queue FIFO after each step.  ``queue_weight`` 0 reduces to plain
    sequential fine-tuning (term still evaluated, contribution zeroed).
    """
    if not datasets:
        raise ValueError("empty dataset list")
    scheme = scheme or AugmentationScheme()
    rng = np.random.default_rng(seed)
    divisor = encoder.config.divisor
    shadow = None
    if ema_encoder:
        shadow = {n: p.detach().clone() for n, p in encoder.named_parameters()}
    weights = _train.ds_weights(encoder.config.n_blocks - 1, cfg.deep_supervision)

    for d_idx, (descriptor, samples) in enumerate(datasets):
        torch.manual_seed(seed * 1000 + d_idx)
        head = arch.DecoderHead(f"pair_{descriptor.dataset_id}",
                                sorted(descriptor.class_set), encoder.config)
        opt = torch.optim.SGD([
            {"params": encoder.trainable_parameters(), "lr": encoder_lr},
            {"params": head.parameters(), "lr": decoder_lr},
        ], momentum=cfg.momentum)
        encoder.train()
        head.train()
        for e in range(epochs_per_dataset):
            t0 = time.perf_counter()
            running = 0.0
            for _ in range(cfg.iters_per_epoch):
                idx = rng.integers(0, len(samples), size=cfg.batch_size)
                batch = [samples[i] for i in idx]
                xs, lbls = [], []
                for s in batch:
                    x = arch._as_input_tensor(s.image) / HU_RANGE
                    x, orig = arch.pad_to_divisor(x, divisor)
                    mapped = _train.map_labels_to_channels(s.labels, head)
                    lbl = np.zeros(x.shape[-3:], dtype=np.int64)
                    sl = tuple(slice((c - o) // 2, (c - o) // 2 + o)
                               for c, o in zip(x.shape[-3:], orig))
                    lbl[sl] = mapped
                    xs.append(x)
                    lbls.append(torch.from_numpy(lbl))
                x = torch.cat(xs)
                lbl = torch.stack(lbls)
                pyramid = encoder(x)
                logits, _ = head(pyramid, {})
                seg = None
                for s_i, w in enumerate(weights):
                    if w == 0.0:
                        continue
                    post = torch.softmax(logits[s_i], dim=1).transpose(0, 1)
                    term = w * losses.ce_dice(post, lbl[:, ::2 ** s_i, ::2 ** s_i, ::2 ** s_i])
                    seg = term if seg is None else seg + term
                seg = seg / sum(weights)

                anchor = pyramid[-1].mean(dim=(2, 3, 4))
                with torch.no_grad():
                    x_pos = _views_tensor(batch, scheme, rng, divisor)
                    positive = embed(encoder, x_pos)
                reg = infonce_queue_loss(anchor, positive, queue, temperature)
                loss = seg + queue_weight * reg

                opt.zero_grad(set_to_none=True)
                loss.backward()
                opt.step()
                queue.push(anchor)
                if shadow is not None:
                    with torch.no_grad():
                        for n, p in encoder.named_parameters():
                            shadow[n].mul_(ema_decay).add_(p.detach(), alpha=1 - ema_decay)
                running += float(seg.detach())
            if log is not None:
                log.append({"epoch": e, "phase": f"finetune_{descriptor.dataset_id}",
                            "loss": running / cfg.iters_per_epoch, "lr": encoder_lr,
                            "wall_seconds": time.perf_counter() - t0})
    if shadow is not None:
        with torch.no_grad():
            for n, p in encoder.named_parameters():
                p.copy_(shadow[n])
    encoder.eval()
    return encoder
