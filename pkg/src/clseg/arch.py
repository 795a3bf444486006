"""Shared encoder, per-anatomy decoder heads, and the forward contract.

The encoder is a strided-convolution pyramid: stage ``s`` halves the
spatial dims of stage ``s-1`` and carries ``min(base * 2**s, cap)``
channels.  Inputs whose spatial dims are not divisible by ``2**(n-1)``
are zero-padded symmetrically up to the next multiple; pyramid stages
then have the padded dims divided by ``2**s`` and posteriors are cropped
back to the input size.

Each decoder head owns transposed-conv upsampling, two convs per stage
(instance norm + leaky ReLU), a per-stage segmentation conv for deep
supervision, optional 1x1x1 projections adapting a fixed source head's
stage features (feature-level support), an optional slice-position
regression conv, a prune mask per convolution parameter, and an EMA
shadow of its parameters.
"""

from __future__ import annotations

import copy
import hashlib
import json
from contextlib import contextmanager
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np
import torch
from torch import nn


class FrozenEncoderError(RuntimeError):
    """Raised on any attempt to update a frozen encoder."""


class FlsGraphError(ValueError):
    """Raised for unknown or cyclic feature-support dependencies."""


@dataclass(frozen=True)
class EncoderConfig:
    n_blocks: int = 4
    base_features: int = 8
    feature_cap: int = 64
    convs_per_block: int = 2
    in_channels: int = 1
    negative_slope: float = 0.01

    def __post_init__(self):
        if self.n_blocks < 2:
            raise ValueError("need at least 2 encoder blocks")
        if self.convs_per_block < 1:
            raise ValueError("need at least 1 conv per block")

    def stage_channels(self, stage: int) -> int:
        return min(self.base_features * 2 ** stage, self.feature_cap)

    @property
    def divisor(self) -> int:
        return 2 ** (self.n_blocks - 1)


PAPER_ENCODER = EncoderConfig(n_blocks=6, base_features=32, feature_cap=320)


def _conv_block(in_ch: int, out_ch: int, stride: int, n_convs: int, slope: float) -> nn.Sequential:
    layers: list[nn.Module] = []
    for i in range(n_convs):
        layers.append(nn.Conv3d(in_ch if i == 0 else out_ch, out_ch, kernel_size=3,
                                stride=stride if i == 0 else 1, padding=1))
        layers.append(nn.InstanceNorm3d(out_ch, affine=True))
        layers.append(nn.LeakyReLU(slope, inplace=True))
    return nn.Sequential(*layers)


class Encoder(nn.Module):
    def __init__(self, config: EncoderConfig | None = None):
        super().__init__()
        self.config = config or EncoderConfig()
        cfg = self.config
        self.blocks = nn.ModuleList()
        for s in range(cfg.n_blocks):
            in_ch = cfg.in_channels if s == 0 else cfg.stage_channels(s - 1)
            self.blocks.append(_conv_block(in_ch, cfg.stage_channels(s),
                                           stride=1 if s == 0 else 2,
                                           n_convs=cfg.convs_per_block,
                                           slope=cfg.negative_slope))
        self.frozen = False

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        stages = []
        for block in self.blocks:
            x = block(x)
            stages.append(x)
        return stages

    def freeze(self) -> "Encoder":
        for p in self.parameters():
            p.requires_grad_(False)
        self.frozen = True
        return self

    def trainable_parameters(self):
        if self.frozen:
            raise FrozenEncoderError("encoder is frozen; parameter updates rejected")
        return list(self.parameters())


def freeze_encoder(encoder: Encoder) -> Encoder:
    """Freeze in place; idempotent."""
    return encoder.freeze()


class DecoderHead(nn.Module):
    """One anatomy(-group) decoding path over the shared pyramid."""

    def __init__(
        self,
        head_id: str,
        class_ids,
        enc_cfg: EncoderConfig,
        dec_base: int | None = None,
        fls_sources=(),
        aux_bpr: bool = False,
    ):
        super().__init__()
        self.head_id = head_id
        self.class_ids = tuple(sorted(int(c) for c in class_ids))
        if not self.class_ids or min(self.class_ids) <= 0:
            raise ValueError("class_ids must be positive and non-empty")
        self.enc_cfg = enc_cfg
        self.dec_base = dec_base if dec_base is not None else enc_cfg.base_features
        self.n_stages = enc_cfg.n_blocks - 1
        self.n_out = len(self.class_ids) + 1

        sources = list(fls_sources)
        self.fls_sources = tuple(h.head_id for h in sources)
        if len(set(self.fls_sources)) != len(self.fls_sources):
            raise FlsGraphError(f"{head_id}: duplicate feature-support source")
        self._source_channels = {h.head_id: h.stage_channel_table() for h in sources}

        slope = enc_cfg.negative_slope
        self.ups = nn.ModuleList()
        self.convs = nn.ModuleList()
        self.seg = nn.ModuleList()
        for s in range(self.n_stages):
            prev = (enc_cfg.stage_channels(enc_cfg.n_blocks - 1)
                    if s == self.n_stages - 1 else self.stage_channels(s + 1))
            self.ups.append(nn.ConvTranspose3d(prev, self.stage_channels(s),
                                               kernel_size=2, stride=2))
            in_ch = self.stage_channels(s) + enc_cfg.stage_channels(s)
            in_ch += sum(table[s] for table in self._source_channels.values())
            self.convs.append(_conv_block(in_ch, self.stage_channels(s), stride=1,
                                          n_convs=2, slope=slope))
            self.seg.append(nn.Conv3d(self.stage_channels(s), self.n_out, kernel_size=1))
        self.fls_proj = nn.ModuleDict({
            src: nn.ModuleList([
                nn.Conv3d(table[s], table[s], kernel_size=1)
                for s in range(self.n_stages)
            ])
            for src, table in self._source_channels.items()
        })
        self.aux_bpr = nn.Conv3d(self.stage_channels(0), 1, kernel_size=1) if aux_bpr else None

        self.prune_masks: dict[str, torch.Tensor] = {}
        self.ema = None                # attached by the ema module
        self.pruning_in_progress = False

    def stage_channels(self, stage: int) -> int:
        return min(self.dec_base * 2 ** stage, self.enc_cfg.feature_cap)

    def stage_channel_table(self) -> tuple[int, ...]:
        return tuple(self.stage_channels(s) for s in range(self.n_stages))

    def prunable_parameters(self) -> list[tuple[str, nn.Parameter]]:
        """Weights and biases of every (transposed) convolution, in
        registration order."""
        out = []
        for mod_name, mod in self.named_modules():
            if isinstance(mod, (nn.Conv3d, nn.ConvTranspose3d)):
                out.append((f"{mod_name}.weight", mod.weight))
                if mod.bias is not None:
                    out.append((f"{mod_name}.bias", mod.bias))
        return out

    def set_prune_masks(self, masks: dict[str, torch.Tensor]) -> None:
        named = dict(self.prunable_parameters())
        for name in masks:
            if name not in named:
                raise KeyError(f"mask for unknown parameter {name}")
            if tuple(masks[name].shape) != tuple(named[name].shape):
                raise ValueError(f"mask shape mismatch for {name}")
        self.prune_masks = {k: v.to(torch.float32) for k, v in masks.items()}
        self.apply_prune_masks()

    def apply_prune_masks(self) -> None:
        if not self.prune_masks:
            return
        named = dict(self.prunable_parameters())
        with torch.no_grad():
            for name, mask in self.prune_masks.items():
                named[name].mul_(mask)

    def forward(self, pyramid: list[torch.Tensor],
                fls_features: dict[str, list[torch.Tensor]] | None = None):
        """Returns (per-stage logits [stage0..], per-stage decoder features).

        ``fls_features`` maps each source head id to that head's per-stage
        decoder features on the same input.
        """
        fls_features = fls_features or {}
        for src in self.fls_sources:
            if src not in fls_features:
                raise FlsGraphError(f"{self.head_id}: missing features from source {src}")
        x = pyramid[-1]
        feats: list = [None] * self.n_stages
        logits: list = [None] * self.n_stages
        for s in range(self.n_stages - 1, -1, -1):
            x = self.ups[s](x)
            parts = [x, pyramid[s]]
            for src in self.fls_sources:
                parts.append(self.fls_proj[src][s](fls_features[src][s]))
            x = self.convs[s](torch.cat(parts, dim=1))
            feats[s] = x
            logits[s] = self.seg[s](x)
        return logits, feats

    def bpr_logits(self, stage0_feats: torch.Tensor) -> torch.Tensor:
        if self.aux_bpr is None:
            raise RuntimeError(f"{self.head_id} has no slice-position head")
        return self.aux_bpr(stage0_feats)

    @contextmanager
    def ema_weights(self):
        """Temporarily run with the EMA shadow (and its refined mask)."""
        if self.ema is None or not self.ema.active:
            yield self
            return
        saved = {n: p.detach().clone() for n, p in self.named_parameters()}
        prunable = dict(self.prunable_parameters())
        with torch.no_grad():
            for n, p in self.named_parameters():
                if n in self.ema.shadow:
                    p.copy_(self.ema.shadow[n])
            if self.ema.mask is not None:
                for n, m in self.ema.mask.items():
                    prunable[n].mul_(m)
        try:
            yield self
        finally:
            with torch.no_grad():
                for n, p in self.named_parameters():
                    p.copy_(saved[n])


def resolve_head_order(heads: list[DecoderHead]) -> list[DecoderHead]:
    """Topological order over the feature-support graph (sources first)."""
    by_id = {h.head_id: h for h in heads}
    for h in heads:
        for src in h.fls_sources:
            if src not in by_id:
                raise FlsGraphError(f"{h.head_id}: unknown source head {src}")
    order: list[DecoderHead] = []
    state: dict[str, int] = {}  # 1 = visiting, 2 = done

    def visit(h: DecoderHead):
        mark = state.get(h.head_id, 0)
        if mark == 1:
            raise FlsGraphError(f"feature-support cycle through {h.head_id}")
        if mark == 2:
            return
        state[h.head_id] = 1
        for src in h.fls_sources:
            visit(by_id[src])
        state[h.head_id] = 2
        order.append(h)

    for h in heads:
        visit(h)
    return order


def pad_to_divisor(x: torch.Tensor, divisor: int) -> tuple[torch.Tensor, tuple[int, int, int]]:
    """Symmetric zero-padding of the spatial dims up to the next multiple."""
    orig = tuple(x.shape[-3:])
    pads = []
    for dim in reversed(orig):  # F.pad wants (W_l, W_r, H_l, H_r, D_l, D_r)
        target = ((dim + divisor - 1) // divisor) * divisor
        extra = target - dim
        pads.extend([extra // 2, extra - extra // 2])
    if any(pads):
        x = torch.nn.functional.pad(x, pads)
    return x, orig


def crop_to(x: torch.Tensor, orig: tuple[int, int, int]) -> torch.Tensor:
    cur = tuple(x.shape[-3:])
    starts = [(c - o) // 2 for c, o in zip(cur, orig)]
    return x[..., starts[0]:starts[0] + orig[0],
             starts[1]:starts[1] + orig[1],
             starts[2]:starts[2] + orig[2]]


def _as_input_tensor(image) -> torch.Tensor:
    if isinstance(image, np.ndarray):
        image = torch.from_numpy(np.ascontiguousarray(image, dtype=np.float32))
    if image.dim() != 3:
        raise ValueError("expected a rank-3 volume")
    return image[None, None]


def forward(encoder: Encoder, heads: list[DecoderHead], image,
            use_ema: bool = True) -> dict[str, torch.Tensor]:
    """Per-head posteriors (classes+background, D, H, W) on one volume.

    Heads are evaluated sources-first so feature support always comes from
    already-evaluated heads; posteriors are softmax over each head's own
    channels and cropped to the input size.
    """
    x = _as_input_tensor(image) / 1024.0
    x, orig = pad_to_divisor(x, encoder.config.divisor)
    order = resolve_head_order(heads)
    out: dict[str, torch.Tensor] = {}
    feats_by_head: dict[str, list[torch.Tensor]] = {}
    with torch.no_grad():
        pyramid = encoder(x)
        for head in order:
            head.eval()
            ctx = head.ema_weights() if use_ema else _null_context(head)
            with ctx:
                logits, feats = head(pyramid, feats_by_head)
            feats_by_head[head.head_id] = feats
            post = torch.softmax(logits[0], dim=1)[0]
            out[head.head_id] = crop_to(post, orig)
    return out


@contextmanager
def _null_context(head):
    yield head


def count_params(encoder: Encoder | None, heads: list[DecoderHead], sparse: bool) -> int:
    """Parameter count; with ``sparse`` masked decoder entries are skipped."""
    total = 0
    if encoder is not None:
        total += sum(p.numel() for p in encoder.parameters())
    for head in heads:
        masked = head.prune_masks if sparse else {}
        prunable_names = {n for n, _ in head.prunable_parameters()}
        for name, p in head.named_parameters():
            if sparse and name in masked:
                total += int(masked[name].sum().item())
            else:
                total += p.numel()
        # parameters outside named_parameters do not exist; masks only cover
        # prunable names, enforced in set_prune_masks
        assert set(masked) <= prunable_names
    return total


def retained_fraction(heads: list[DecoderHead]) -> float:
    """Aggregate unmasked fraction of all heads' prunable parameters."""
    kept = 0
    total = 0
    for head in heads:
        for name, p in head.prunable_parameters():
            total += p.numel()
            if name in head.prune_masks:
                kept += int(head.prune_masks[name].sum().item())
            else:
                kept += p.numel()
    return kept / total if total else 1.0


# ---------------------------------------------------------------------------
# checkpoint format: manifest.json + one raw little-endian float32 file per
# parameter array + one bit-packed file per prune mask
# ---------------------------------------------------------------------------

def _safe_name(name: str) -> str:
    return name.replace(".", "__")


def _write_f32(path: Path, tensor: torch.Tensor) -> None:
    arr = tensor.detach().cpu().numpy().astype("<f4", copy=False)
    path.write_bytes(np.ascontiguousarray(arr).tobytes())


def _read_f32(path: Path, shape) -> torch.Tensor:
    arr = np.frombuffer(path.read_bytes(), dtype="<f4").reshape(shape)
    return torch.from_numpy(arr.astype(np.float32))


def _write_bits(path: Path, mask: torch.Tensor) -> None:
    bits = mask.detach().cpu().numpy().astype(np.uint8).reshape(-1)
    path.write_bytes(np.packbits(bits).tobytes())


def _read_bits(path: Path, shape) -> torch.Tensor:
    n = int(np.prod(shape))
    bits = np.unpackbits(np.frombuffer(path.read_bytes(), dtype=np.uint8), count=n)
    return torch.from_numpy(bits.reshape(shape).astype(np.float32))


def save_checkpoint(root: str | Path, encoder: Encoder, heads: list[DecoderHead]) -> Path:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    manifest: dict = {
        "encoder": {"config": asdict(encoder.config), "frozen": encoder.frozen,
                    "params": {}},
        "heads": [],
    }
    for name, p in encoder.named_parameters():
        fname = f"enc__{_safe_name(name)}.f32"
        _write_f32(root / fname, p)
        manifest["encoder"]["params"][name] = {"file": fname, "shape": list(p.shape)}

    for head in resolve_head_order(heads):
        entry = {
            "head_id": head.head_id,
            "class_ids": list(head.class_ids),
            "dec_base": head.dec_base,
            "fls_sources": list(head.fls_sources),
            "aux_bpr": head.aux_bpr is not None,
            "params": {}, "masks": {},
            "ema": None,
        }
        prefix = f"head_{_safe_name(head.head_id)}"
        for name, p in head.named_parameters():
            fname = f"{prefix}__{_safe_name(name)}.f32"
            _write_f32(root / fname, p)
            entry["params"][name] = {"file": fname, "shape": list(p.shape)}
        for name, mask in head.prune_masks.items():
            fname = f"{prefix}__{_safe_name(name)}.mask"
            _write_bits(root / fname, mask)
            entry["masks"][name] = {"file": fname, "shape": list(mask.shape)}
        if head.ema is not None:
            ema_entry = {"decay": head.ema.decay, "active": head.ema.active,
                         "shadow": {}, "mask": {}}
            for name, t in head.ema.shadow.items():
                fname = f"{prefix}__ema__{_safe_name(name)}.f32"
                _write_f32(root / fname, t)
                ema_entry["shadow"][name] = {"file": fname, "shape": list(t.shape)}
            if head.ema.mask is not None:
                for name, m in head.ema.mask.items():
                    fname = f"{prefix}__ema__{_safe_name(name)}.mask"
                    _write_bits(root / fname, m)
                    ema_entry["mask"][name] = {"file": fname, "shape": list(m.shape)}
            entry["ema"] = ema_entry
        manifest["heads"].append(entry)
    with open(root / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    return root


def load_checkpoint(root: str | Path) -> tuple[Encoder, list[DecoderHead]]:
    from . import ema as ema_mod

    root = Path(root)
    with open(root / "manifest.json") as f:
        manifest = json.load(f)
    enc_cfg = EncoderConfig(**manifest["encoder"]["config"])
    encoder = Encoder(enc_cfg)
    with torch.no_grad():
        for name, p in encoder.named_parameters():
            meta = manifest["encoder"]["params"][name]
            p.copy_(_read_f32(root / meta["file"], meta["shape"]))
    if manifest["encoder"]["frozen"]:
        encoder.freeze()

    heads: list[DecoderHead] = []
    by_id: dict[str, DecoderHead] = {}
    for entry in manifest["heads"]:
        sources = [by_id[s] for s in entry["fls_sources"]]
        head = DecoderHead(entry["head_id"], entry["class_ids"], enc_cfg,
                           dec_base=entry["dec_base"], fls_sources=sources,
                           aux_bpr=entry["aux_bpr"])
        with torch.no_grad():
            named = dict(head.named_parameters())
            for name, meta in entry["params"].items():
                named[name].copy_(_read_f32(root / meta["file"], meta["shape"]))
        masks = {name: _read_bits(root / meta["file"], meta["shape"])
                 for name, meta in entry["masks"].items()}
        if masks:
            head.set_prune_masks(masks)
        if entry["ema"] is not None:
            shadow = {name: _read_f32(root / meta["file"], meta["shape"])
                      for name, meta in entry["ema"]["shadow"].items()}
            ema_mask = {name: _read_bits(root / meta["file"], meta["shape"])
                        for name, meta in entry["ema"]["mask"].items()} or None
            head.ema = ema_mod.EmaState(decay=entry["ema"]["decay"], shadow=shadow,
                                        active=entry["ema"]["active"], mask=ema_mask)
        heads.append(head)
        by_id[head.head_id] = head
    return encoder, heads


def state_digest(module: nn.Module) -> str:
    """sha256 over all parameter bytes, in named order."""
    h = hashlib.sha256()
    for name, p in sorted(module.named_parameters()):
        h.update(name.encode())
        h.update(p.detach().cpu().numpy().astype("<f4", copy=False).tobytes())
    return h.hexdigest()


def posterior_digest(post: torch.Tensor) -> str:
    return hashlib.sha256(
        post.detach().cpu().numpy().astype("<f4", copy=False).tobytes()
    ).hexdigest()


def clone_head(head: DecoderHead) -> DecoderHead:
    """Deep copy used to keep an old-model snapshot for distillation."""
    return copy.deepcopy(head)
