"""Internal training machinery shared by the engine, pruning, and EMA code.

Decoder heads always train against a frozen encoder, so each sample's
feature pyramid (and any fixed source head's stage features) is computed
once and cached; iterations then touch only the decoder.  Optimization is
SGD with momentum and a polynomial learning-rate schedule; deep
supervision applies the segmentation loss at every decoding stage with
weights halving as resolution drops.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
import torch

from . import arch, ema as ema_mod, losses
from .synthdata import Sample


@dataclass
class TrainCfg:
    """Desk-scale training knobs; ``paper_scale()`` restores paper values."""

    batch_size: int = 2
    iters_per_epoch: int = 6
    warmup_epochs: int = 5
    warmup_lr: float = 1e-3
    main_epochs: int = 24
    main_lr: float = 1e-2
    momentum: float = 0.9
    poly_power: float = 0.9
    deep_supervision: bool = True
    aux_bpr_weight: float = 0.1
    # pruning loop
    prune_retrain_epochs: int = 3
    prune_recovery_epochs: int = 20
    prune_delta: float = 0.01
    prune_baseline: str = "original"      # or "previous"
    ramp_cap: int = 10                    # paper: 512 minibatches
    # continual updating
    update_epochs: int = 6
    update_lr: float = 1e-4
    ema_decay: float = 0.999

    def paper_scale(self) -> "TrainCfg":
        return TrainCfg(
            batch_size=2, iters_per_epoch=250,
            warmup_epochs=5, warmup_lr=1e-3,
            main_epochs=300, main_lr=1e-2,
            momentum=self.momentum, poly_power=self.poly_power,
            deep_supervision=True, aux_bpr_weight=self.aux_bpr_weight,
            prune_retrain_epochs=10, prune_recovery_epochs=20,
            prune_delta=0.01, prune_baseline=self.prune_baseline,
            ramp_cap=512,
            update_epochs=50, update_lr=1e-4, ema_decay=0.999,
        )


def poly_lr(initial: float, step: int, total: int, power: float = 0.9) -> float:
    """initial * (1 - step/total)**power; exactly 0 at step == total."""
    frac = max(0.0, 1.0 - step / max(total, 1))
    return initial * frac ** power


def ds_weights(n_stages: int, deep_supervision: bool) -> list[float]:
    if not deep_supervision:
        return [1.0] + [0.0] * (n_stages - 1)
    return [0.5 ** s for s in range(n_stages)]


def class_channel_map(head) -> dict[int, int]:
    return {c: i + 1 for i, c in enumerate(head.class_ids)}


def map_labels_to_channels(labels: np.ndarray, head) -> np.ndarray:
    out = np.zeros_like(labels)
    for cid, ch in class_channel_map(head).items():
        out[labels == cid] = ch
    return out


def source_features(pyramid: list[torch.Tensor], sources, use_ema: bool = True
                    ) -> dict[str, list[torch.Tensor]]:
    """Stage features of fixed source heads, sources-first, no gradients."""
    feats: dict[str, list[torch.Tensor]] = {}
    with torch.no_grad():
        for src in arch.resolve_head_order(list(sources)):
            src.eval()
            ctx = src.ema_weights() if use_ema else arch._null_context(src)
            with ctx:
                _, f = src(pyramid, feats)
            feats[src.head_id] = f
    return feats


class TrainSession:
    """Cached-feature training of one decoder head on a fixed sample set."""

    def __init__(self, encoder: arch.Encoder, head, samples: list[Sample],
                 cfg: TrainCfg, *, sources=(), val_samples: list[Sample] | None = None,
                 rng: np.random.Generator | None = None):
        if not encoder.frozen:
            raise arch.FrozenEncoderError("decoder training requires a frozen encoder")
        if not samples:
            raise ValueError("no training samples")
        self.encoder = encoder
        self.head = head
        self.cfg = cfg
        self.sources = list(sources)
        self.rng = rng if rng is not None else np.random.default_rng(0)
        self.log_rows: list[dict] = []
        self._epoch_counter = 0
        self.train_data = [self._prepare(s) for s in samples]
        self.val_data = [self._prepare(s) for s in (val_samples or [])]

    def _prepare(self, sample: Sample) -> dict:
        x = arch._as_input_tensor(sample.image) / 1024.0
        x, orig = arch.pad_to_divisor(x, self.encoder.config.divisor)
        with torch.no_grad():
            pyramid = self.encoder(x)
        feats = source_features(pyramid, self.sources) if self.sources else {}
        mapped = map_labels_to_channels(sample.labels, self.head)
        pad_d = x.shape[-3] - orig[0]
        lo = pad_d // 2
        lbl = np.zeros(x.shape[-3:], dtype=np.int64)
        lbl[lo:lo + orig[0],
            (x.shape[-2] - orig[1]) // 2:(x.shape[-2] - orig[1]) // 2 + orig[1],
            (x.shape[-1] - orig[2]) // 2:(x.shape[-1] - orig[2]) // 2 + orig[2]] = mapped
        entry = {
            "pyramid": pyramid,
            "feats": feats,
            "labels": torch.from_numpy(lbl),
            "orig": orig,
            "gt": {cid: (sample.labels == cid) for cid in self.head.class_ids},
        }
        if self.head.aux_bpr is not None:
            scores = np.empty(x.shape[-3], dtype=np.float32)
            scores[lo:lo + orig[0]] = sample.bpr_scores
            scores[:lo] = sample.bpr_scores[0]
            scores[lo + orig[0]:] = sample.bpr_scores[-1]
            entry["bpr_target"] = torch.from_numpy(scores)[:, None, None]
        return entry

    def _batch(self, entries: list[dict]):
        stages = [torch.cat([e["pyramid"][s] for e in entries])
                  for s in range(len(entries[0]["pyramid"]))]
        feats = {
            src: [torch.cat([e["feats"][src][s] for e in entries])
                  for s in range(self.head.n_stages)]
            for src in (entries[0]["feats"] or {})
        }
        labels = torch.stack([e["labels"] for e in entries])
        bpr = None
        if self.head.aux_bpr is not None:
            bpr = torch.stack([e["bpr_target"].expand(*entries[0]["pyramid"][0].shape[-3:])
                               for e in entries])
        return stages, feats, labels, bpr

    def _loss(self, entries: list[dict]) -> torch.Tensor:
        stages, feats, labels, bpr = self._batch(entries)
        logits, dec_feats = self.head(stages, feats)
        weights = ds_weights(self.head.n_stages, self.cfg.deep_supervision)
        total = None
        for s, w in enumerate(weights):
            if w == 0.0:
                continue
            post = torch.softmax(logits[s], dim=1).transpose(0, 1)
            lbl_s = labels[:, ::2 ** s, ::2 ** s, ::2 ** s]
            term = w * losses.ce_dice(post, lbl_s)
            total = term if total is None else total + term
        total = total / sum(weights)
        if self.head.aux_bpr is not None:
            pred = self.head.bpr_logits(dec_feats[0]).squeeze(1)
            total = total + self.cfg.aux_bpr_weight * torch.mean((pred - bpr) ** 2)
        return total

    def run_epochs(self, epochs: int, lr: float, *, poly: bool = True,
                   iters: int | None = None, phase: str = "") -> None:
        if epochs <= 0:
            return
        self.head.train()
        opt = torch.optim.SGD((p for p in self.head.parameters() if p.requires_grad),
                              lr=lr, momentum=self.cfg.momentum)
        n_iters = iters if iters is not None else self.cfg.iters_per_epoch
        for e in range(epochs):
            cur_lr = poly_lr(lr, e, epochs, self.cfg.poly_power) if poly else lr
            for g in opt.param_groups:
                g["lr"] = cur_lr
            t0 = time.perf_counter()
            running = 0.0
            for _ in range(n_iters):
                idx = self.rng.integers(0, len(self.train_data), size=self.cfg.batch_size)
                entries = [self.train_data[i] for i in idx]
                opt.zero_grad(set_to_none=True)
                loss = self._loss(entries)
                loss.backward()
                opt.step()
                self.head.apply_prune_masks()
                if self.head.ema is not None:
                    ema_mod.ema_update(self.head.ema, self.head, self.head.prune_masks)
                running += float(loss.detach())
            self.log_rows.append({
                "epoch": self._epoch_counter, "phase": phase,
                "loss": running / max(n_iters, 1), "lr": cur_lr,
                "wall_seconds": time.perf_counter() - t0,
            })
            self._epoch_counter += 1
        self.head.eval()

    def warmup_then_main(self) -> None:
        """Short warm-up at a small constant rate, then the poly phase with
        fresh momentum."""
        self.run_epochs(self.cfg.warmup_epochs, self.cfg.warmup_lr, poly=False,
                        phase="warmup")
        self.run_epochs(self.cfg.main_epochs, self.cfg.main_lr, poly=True,
                        phase="main")

    def _posterior(self, entry: dict, use_ema: bool) -> torch.Tensor:
        self.head.eval()
        with torch.no_grad():
            ctx = self.head.ema_weights() if use_ema else arch._null_context(self.head)
            with ctx:
                logits, _ = self.head(entry["pyramid"], entry["feats"])
            post = torch.softmax(logits[0], dim=1)[0]
        return arch.crop_to(post, entry["orig"])

    def case_dsc(self, entry: dict, use_ema: bool = True) -> float:
        from . import metrics

        post = self._posterior(entry, use_ema)
        pred = post.argmax(dim=0).numpy()
        vals = []
        for cid, ch in class_channel_map(self.head).items():
            vals.append(metrics.dsc(pred == ch, entry["gt"][cid]))
        return float(np.mean(vals))

    def evaluate_val(self, use_ema: bool = True) -> list[float]:
        if not self.val_data:
            raise ValueError("no validation samples attached")
        return [self.case_dsc(e, use_ema) for e in self.val_data]


def train_joint(encoder: arch.Encoder, heads, samples: list[Sample], cfg: TrainCfg,
                epochs: int, lr: float, rng: np.random.Generator,
                batch_size: int | None = None) -> list[dict]:
    """Joint supervised training of the encoder alongside several heads.

    Used for general-encoder training only; every head contributes its own
    deep-supervised loss and the encoder receives all gradients.
    """
    if encoder.frozen:
        raise arch.FrozenEncoderError("encoder is frozen; parameter updates rejected")
    bs = batch_size or cfg.batch_size
    prepped = []
    for s in samples:
        x = arch._as_input_tensor(s.image) / 1024.0
        x, orig = arch.pad_to_divisor(x, encoder.config.divisor)
        labels = {}
        for head in heads:
            mapped = map_labels_to_channels(s.labels, head)
            lbl = np.zeros(x.shape[-3:], dtype=np.int64)
            sl = tuple(slice((c - o) // 2, (c - o) // 2 + o)
                       for c, o in zip(x.shape[-3:], orig))
            lbl[sl] = mapped
            labels[head.head_id] = torch.from_numpy(lbl)
        prepped.append({"x": x, "labels": labels})

    params = list(encoder.trainable_parameters())
    for head in heads:
        params += list(head.parameters())
    opt = torch.optim.SGD(params, lr=lr, momentum=cfg.momentum)
    weights = ds_weights(heads[0].n_stages, cfg.deep_supervision)
    log_rows = []
    encoder.train()
    for head in heads:
        head.train()
    for e in range(epochs):
        cur_lr = poly_lr(lr, e, epochs, cfg.poly_power)
        for g in opt.param_groups:
            g["lr"] = cur_lr
        t0 = time.perf_counter()
        running = 0.0
        for _ in range(cfg.iters_per_epoch):
            idx = rng.integers(0, len(prepped), size=bs)
            x = torch.cat([prepped[i]["x"] for i in idx])
            pyramid = encoder(x)
            opt.zero_grad(set_to_none=True)
            total = None
            for head in heads:
                logits, _ = head(pyramid, {})
                lbl = torch.stack([prepped[i]["labels"][head.head_id] for i in idx])
                head_loss = None
                for s, w in enumerate(weights):
                    if w == 0.0:
                        continue
                    post = torch.softmax(logits[s], dim=1).transpose(0, 1)
                    term = w * losses.ce_dice(post, lbl[:, ::2 ** s, ::2 ** s, ::2 ** s])
                    head_loss = term if head_loss is None else head_loss + term
                head_loss = head_loss / sum(weights)
                total = head_loss if total is None else total + head_loss
            total.backward()
            opt.step()
            running += float(total.detach())
        log_rows.append({"epoch": e, "phase": "ge", "loss": running / cfg.iters_per_epoch,
                         "lr": cur_lr, "wall_seconds": time.perf_counter() - t0})
    encoder.eval()
    for head in heads:
        head.eval()
    return log_rows


def evaluate_head_on_samples(encoder, head, samples, *, sources=(), use_ema=True
                             ) -> list[float]:
    """Per-case mean DSC of a head's classes, without a training session."""
    session = TrainSession.__new__(TrainSession)
    session.encoder = encoder
    session.head = head
    session.cfg = TrainCfg()
    session.sources = list(sources)
    session.rng = np.random.default_rng(0)
    entries = [session._prepare(s) for s in samples]
    return [session.case_dsc(e, use_ema) for e in entries]
