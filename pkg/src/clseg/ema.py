"""Exponential-moving-average shadows for decoder heads.

The shadow follows ``shadow = decay * shadow + (1 - decay) * param`` and
only starts moving once pruning of the head is complete: before that,
updates are no-ops.  After pruning, the shadow is synchronized to the
pruned parameters byte-for-byte and masked entries stay pinned at zero.
Inference loads the shadow by default (see ``DecoderHead.ema_weights``).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch


class EmaError(RuntimeError):
    pass


@dataclass
class EmaState:
    decay: float = 0.999
    shadow: dict[str, torch.Tensor] = field(default_factory=dict)
    active: bool = False
    # optional refined prune mask computed on the shadow itself
    mask: dict[str, torch.Tensor] | None = None

    def __post_init__(self):
        if not (0.0 < self.decay < 1.0):
            raise ValueError(f"decay must lie in (0, 1), got {self.decay}")


def attach(head, decay: float = 0.999) -> EmaState:
    """Give a head an (inactive) shadow copy of its parameters."""
    shadow = {n: p.detach().clone() for n, p in head.named_parameters()}
    head.ema = EmaState(decay=decay, shadow=shadow, active=False)
    return head.ema


def _named_params(params) -> dict[str, torch.Tensor]:
    if isinstance(params, dict):
        return params
    return dict(params.named_parameters())


def ema_update(state: EmaState, params, masks: dict[str, torch.Tensor] | None = None) -> EmaState:
    """One smoothing step; a no-op while the state is inactive.

    ``masks`` (prune masks of the owning head) keep masked entries exactly
    zero on both sides.
    """
    if not state.active:
        return state
    named = _named_params(params)
    a = state.decay
    with torch.no_grad():
        for name, shadow in state.shadow.items():
            if name not in named:
                raise EmaError(f"shadow holds unknown parameter {name}")
            p = named[name]
            if tuple(p.shape) != tuple(shadow.shape):
                raise EmaError(f"shape mismatch for {name}")
            shadow.mul_(a).add_(p.detach(), alpha=1.0 - a)
            if masks and name in masks:
                shadow.mul_(masks[name])
    return state


def sync_after_prune(state: EmaState, pruned_head) -> EmaState:
    """Copy the pruned parameters into the shadow and activate smoothing."""
    if getattr(pruned_head, "pruning_in_progress", False):
        raise EmaError("cannot synchronize mid-prune")
    with torch.no_grad():
        for name, p in pruned_head.named_parameters():
            if name not in state.shadow:
                raise EmaError(f"shadow missing parameter {name}")
            state.shadow[name].copy_(p.detach())
    state.active = True
    return state


def continual_update(head, encoder, new_data, cfg, *, sources=(), rng=None,
                     refresh_mask: bool = False, val_data=None):
    """Fine-tune a trained+pruned head on new data at a small learning rate.

    Both the raw parameters and the shadow move (the shadow through its
    decay).  The prune mask stays fixed by default; with ``refresh_mask``
    the shadow itself is re-pruned in 0.1% steps from the current rate
    under the same percentile-DSC stop rule, and only the shadow's mask is
    stored.  Inference keeps loading the shadow.
    """
    from . import _train, lth

    if head.ema is None or not head.ema.active:
        raise EmaError("continual update expects a pruned, EMA-synced head")
    if not encoder.frozen:
        raise EmaError("encoder must be frozen for continual updates")
    if refresh_mask and not head.prune_masks:
        raise EmaError("mask refresh requires a pruned head")

    session = _train.TrainSession(encoder, head, new_data, cfg, sources=sources, rng=rng)
    session.run_epochs(cfg.update_epochs, lr=cfg.update_lr)

    if refresh_mask:
        if val_data is None:
            raise EmaError("mask refresh needs validation data")
        lth.refresh_ema_mask(head, encoder, val_data, cfg, sources=sources)
    return head
