"""Progressive global-magnitude pruning with train/prune/rewind cycles.

The schedule walks a fixed ladder of overall sparsity targets; at each
stage the smallest-|value| fraction of ALL targeted arrays (conv weights
and biases jointly, one global threshold) is zeroed, the head retrains,
and validation DSC (restricted to the 5th-95th percentile of per-case
values) is compared against the pre-prune baseline.  A drop beyond the
threshold rewinds parameters and mask byte-exactly to the previous
accepted stage and stops the ladder; a short recovery phase follows
either way.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch


@dataclass(frozen=True)
class PruneSchedule:
    rates: tuple[float, ...]

    def __post_init__(self):
        if not self.rates:
            raise ValueError("empty schedule")
        if any(not (0.0 < r < 1.0) for r in self.rates):
            raise ValueError("rates must lie strictly inside (0, 1)")
        if any(b <= a for a, b in zip(self.rates, self.rates[1:])):
            raise ValueError("rates must be strictly increasing")


def default_schedule() -> PruneSchedule:
    """0.80..0.92 by 0.04, 0.93..0.99 by 0.02, then 0.991..0.997 by 0.002."""
    rates = [0.80, 0.84, 0.88, 0.92,
             0.93, 0.95, 0.97, 0.99,
             0.991, 0.993, 0.995, 0.997]
    return PruneSchedule(tuple(rates))


@dataclass
class PruneAttempt:
    rate: float
    val_dsc: float
    accepted: bool


@dataclass
class PruneRecord:
    head_id: str
    attempted_rate: float
    val_dsc_before: float
    val_dsc_after: float
    accepted: bool
    rewound_to: float | None
    final_rate: float
    attempts: list[PruneAttempt] = field(default_factory=list)

    @property
    def accepted_rates(self) -> list[float]:
        return [a.rate for a in self.attempts if a.accepted]

    @property
    def complement(self) -> float:
        return 1.0 - self.final_rate

    def to_dict(self) -> dict:
        return {
            "head_id": self.head_id,
            "attempted_rate": self.attempted_rate,
            "val_dsc_before": self.val_dsc_before,
            "val_dsc_after": self.val_dsc_after,
            "accepted": self.accepted,
            "rewound_to": self.rewound_to,
            "final_rate": self.final_rate,
            "complement": self.complement,
            "attempts": [{"rate": a.rate, "val_dsc": a.val_dsc, "accepted": a.accepted}
                         for a in self.attempts],
        }


def minibatch_ramp(rate: float, base: int, cap: int = 512) -> int:
    """Minibatches per epoch, growing linearly with the target rate."""
    if not (0.0 <= rate <= 1.0):
        raise ValueError("rate must lie in [0, 1]")
    return int(round(base + rate * (cap - base)))


def percentile_dsc(values) -> float:
    """Mean of per-case DSC restricted to the 5th-95th percentile band.

    Percentiles use linear interpolation; if the band is empty (tiny sets
    with extreme spread) the plain mean is used.
    """
    vals = np.asarray(list(values), dtype=np.float64)
    if vals.size == 0:
        raise ValueError("empty validation set")
    p5, p95 = np.percentile(vals, [5.0, 95.0])
    kept = vals[(vals >= p5) & (vals <= p95)]
    if kept.size == 0:
        kept = vals
    return float(kept.mean())


def _mask_from_values(named_values: list[tuple[str, torch.Tensor]], rate: float
                      ) -> dict[str, torch.Tensor]:
    """One global threshold across all arrays; ties broken by stable order
    over (array name, flat index)."""
    if not (0.0 < rate < 1.0):
        raise ValueError("rate must lie strictly inside (0, 1)")
    ordered = sorted(named_values, key=lambda kv: kv[0])
    flat = np.concatenate([
        np.abs(t.detach().cpu().numpy().reshape(-1).astype(np.float64))
        for _, t in ordered
    ])
    total = flat.size
    k = int(round(rate * total))
    zero_idx = np.argsort(flat, kind="stable")[:k]
    keep = np.ones(total, dtype=np.float32)
    keep[zero_idx] = 0.0
    masks = {}
    offset = 0
    for name, t in ordered:
        n = t.numel()
        masks[name] = torch.from_numpy(keep[offset:offset + n].reshape(tuple(t.shape)).copy())
        offset += n
    return masks


def global_l1_mask(head, rate: float) -> dict[str, torch.Tensor]:
    """Mask zeroing the rate-fraction of smallest-magnitude conv params."""
    return _mask_from_values(head.prunable_parameters(), rate)


def achieved_rate(head) -> float:
    total = sum(p.numel() for _, p in head.prunable_parameters())
    if not head.prune_masks:
        return 0.0
    kept = sum(int(m.sum().item()) for m in head.prune_masks.values())
    return 1.0 - kept / total


def _snapshot(head) -> dict:
    return {
        "params": {n: p.detach().clone() for n, p in head.named_parameters()},
        "masks": {n: m.clone() for n, m in head.prune_masks.items()},
    }


def _restore(head, snap: dict) -> None:
    with torch.no_grad():
        for n, p in head.named_parameters():
            p.copy_(snap["params"][n])
    head.prune_masks = {n: m.clone() for n, m in snap["masks"].items()}


def lth_prune(head, trainer, evaluate, delta: float = 0.01,
              schedule: PruneSchedule | None = None, *,
              baseline_mode: str = "original",
              retrain_epochs: int = 8, recovery_epochs: int = 20,
              base_iters: int = 8, ramp_cap: int = 512) -> PruneRecord:
    """Run the full pruning ladder on a converged head.

    ``trainer(head, epochs, iters_per_epoch)`` retrains in place;
    ``evaluate(head)`` returns per-case validation DSC values.  The drop
    reference is the unpruned baseline by default (``baseline_mode =
    "previous"`` compares against the last accepted stage instead).
    """
    if baseline_mode not in ("original", "previous"):
        raise ValueError(f"unknown baseline_mode {baseline_mode!r}")
    schedule = schedule or default_schedule()
    baseline_vals = evaluate(head)
    baseline = percentile_dsc(baseline_vals)

    snap = _snapshot(head)
    attempts: list[PruneAttempt] = []
    accepted_rates: list[float] = []
    rewound_to = None
    reference = baseline
    head.pruning_in_progress = True
    try:
        for rate in schedule.rates:
            head.set_prune_masks(global_l1_mask(head, rate))
            trainer(head, retrain_epochs, minibatch_ramp(rate, base_iters, ramp_cap))
            stage_dsc = percentile_dsc(evaluate(head))
            ok = (reference - stage_dsc) <= delta
            attempts.append(PruneAttempt(rate, stage_dsc, ok))
            if not ok:
                _restore(head, snap)
                rewound_to = accepted_rates[-1] if accepted_rates else 0.0
                break
            accepted_rates.append(rate)
            snap = _snapshot(head)
            if baseline_mode == "previous":
                reference = stage_dsc
    finally:
        head.pruning_in_progress = False

    trainer(head, recovery_epochs, base_iters)
    final = percentile_dsc(evaluate(head))
    return PruneRecord(
        head_id=head.head_id,
        attempted_rate=attempts[-1].rate if attempts else 0.0,
        val_dsc_before=baseline,
        val_dsc_after=final,
        accepted=bool(accepted_rates),
        rewound_to=rewound_to,
        final_rate=accepted_rates[-1] if accepted_rates else 0.0,
        attempts=attempts,
    )


def refresh_ema_mask(head, encoder, val_data, cfg, *, sources=(), max_steps: int = 50
                     ) -> None:
    """Re-prune the EMA shadow only, in 0.1% steps from the current rate.

    The head's own mask is untouched; only the shadow's mask is stored and
    applied when inference loads the shadow.  The same percentile-DSC stop
    rule (drop <= cfg.prune_delta against the starting point) applies.
    """
    from . import _train

    if not head.prune_masks:
        raise ValueError("mask refresh requires a pruned head")
    session = _train.TrainSession(encoder, head, val_data, cfg,
                                  sources=sources, val_samples=val_data)
    baseline = percentile_dsc(session.evaluate_val(use_ema=True))
    base_rate = achieved_rate(head)
    named_shadow = [(n, head.ema.shadow[n]) for n, _ in head.prunable_parameters()]
    best_mask = None
    for step in range(1, max_steps + 1):
        rate = base_rate + 0.001 * step
        if rate >= 0.9995:
            break
        candidate = _mask_from_values(named_shadow, rate)
        head.ema.mask = candidate
        score = percentile_dsc(session.evaluate_val(use_ema=True))
        if (baseline - score) > cfg.prune_delta:
            break
        best_mask = candidate
    head.ema.mask = best_mask
