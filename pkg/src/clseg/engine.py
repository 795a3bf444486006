"""Orchestration of the two training configurations and the baselines.

Partial-label mode trains one decoder per anatomy on the union of all
samples that label it, prunes it, and synchronizes its EMA shadow.
Continual mode walks a dataset order: unseen classes get fresh decoders
(trained, pruned, synced), classes that reappear get a small-rate EMA
fine-tune, and every other decoder stays byte-frozen, which is what makes
the forgetting curves flat.  The baseline strategies (naive sequential
fine-tuning, marginal-loss distillation, pooled-feature distillation)
share one growing decoder head instead and differ only in their step
loss.

All randomness derives from (seed, step, class) so a truncated order
reproduces the shared prefix exactly.
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import _train, arch, ema as ema_mod, losses, lth, merge, metrics
from .synthdata import ContinualOrder, Sample, TaskRegistry, generate_dataset

STRATEGIES = ("clnet", "naive", "mib", "plop")


@dataclass
class LearnerStrategy:
    kind: str
    unkd_weight: float = 10.0
    pod_factor: float = 0.001
    pseudo_threshold: float = 0.5
    lr: float = 0.005
    epochs_per_step: int = 12

    def __post_init__(self):
        if self.kind not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.kind!r}")
        if self.kind == "mib" and self.unkd_weight is None:
            raise ValueError("mib needs an unkd_weight")
        if self.kind == "plop" and self.pod_factor is None:
            raise ValueError("plop needs a pod_factor")


@dataclass
class HeadState:
    head: arch.DecoderHead
    sources: list[arch.DecoderHead]
    bounds: merge.BprBounds | None = None
    scores: list[float] = field(default_factory=list)
    prune_record: lth.PruneRecord | None = None


def load_all(registry: TaskRegistry) -> dict[str, dict[str, list[Sample]]]:
    out = {}
    for d in registry.datasets:
        samples = generate_dataset(d, registry)
        out[d.dataset_id] = {
            split: [s for s in samples if s.split == split]
            for split in ("train", "val", "test")
        }
    return out


def samples_with_class(data: dict, registry: TaskRegistry, class_id: int,
                       split: str, dataset_ids=None) -> list[Sample]:
    out = []
    for d in registry.datasets:
        if dataset_ids is not None and d.dataset_id not in dataset_ids:
            continue
        if class_id in d.class_set:
            out.extend(data[d.dataset_id][split])
    return out


def class_slice_scores(samples: list[Sample], class_id: int) -> list[float]:
    """Scores of every axial slice on which the class is labeled."""
    scores: list[float] = []
    for s in samples:
        present = (s.labels == class_id).any(axis=(1, 2))
        scores.extend(float(v) for v in s.bpr_scores[present])
    return scores


def _derived_seed(*parts: int) -> int:
    return int(np.random.SeedSequence(list(parts)).generate_state(1)[0])


def gtv_links(registry: TaskRegistry) -> dict[str, str]:
    """host head id -> lesion head id (heads are named by anatomy)."""
    out = {}
    for a in registry.anatomies:
        if a.is_gtv:
            out[registry.anatomy(a.host_class).name] = a.name
    return out


def train_decoder(encoder: arch.Encoder, head: arch.DecoderHead,
                  samples: list[Sample], cfg: _train.TrainCfg, *,
                  sources=(), val_samples=None, rng=None) -> _train.TrainSession:
    """Warm-up then main phase; returns the session for further use."""
    for cid in head.class_ids:
        if not any((s.labels == cid).any() for s in samples):
            raise ValueError(f"class {cid} has no labeled voxels in the training data")
    session = _train.TrainSession(encoder, head, samples, cfg,
                                  sources=sources, val_samples=val_samples, rng=rng)
    session.warmup_then_main()
    return session


def prune_head(session: _train.TrainSession, cfg: _train.TrainCfg,
               schedule: lth.PruneSchedule | None = None) -> lth.PruneRecord:
    def trainer(head, epochs, iters):
        session.run_epochs(epochs, cfg.main_lr, poly=True, iters=iters, phase="prune")

    def evaluate(head):
        return session.evaluate_val(use_ema=False)

    return lth.lth_prune(
        session.head, trainer, evaluate, delta=cfg.prune_delta, schedule=schedule,
        baseline_mode=cfg.prune_baseline,
        retrain_epochs=cfg.prune_retrain_epochs,
        recovery_epochs=cfg.prune_recovery_epochs,
        base_iters=cfg.iters_per_epoch, ramp_cap=cfg.ramp_cap,
    )


def _build_head_state(registry, class_id, encoder, states, cfg, *, seed,
                      aux_bpr=True) -> HeadState:
    """Lesion heads take feature support from their host's head when it
    already exists; the source chain carries the host's own sources too."""
    anat = registry.anatomy(class_id)
    direct: list[arch.DecoderHead] = []
    chain: list[arch.DecoderHead] = []
    if anat.is_gtv:
        host_name = registry.anatomy(anat.host_class).name
        if host_name in states:
            host_state = states[host_name]
            direct = [host_state.head]
            chain = [*host_state.sources, host_state.head]
    torch.manual_seed(seed)
    head = arch.DecoderHead(anat.name, [class_id], encoder.config,
                            fls_sources=direct, aux_bpr=aux_bpr)
    return HeadState(head=head, sources=chain)


def train_prune_sync(registry, class_id, encoder, states, data, cfg, *, seed,
                     dataset_ids=None, aux_bpr=True, schedule=None,
                     train_log=None) -> HeadState:
    """Full lifecycle of one anatomy decoder: train, prune, EMA-sync."""
    state = _build_head_state(registry, class_id, encoder, states, cfg,
                              seed=seed, aux_bpr=aux_bpr)
    train = samples_with_class(data, registry, class_id, "train", dataset_ids)
    val = samples_with_class(data, registry, class_id, "val", dataset_ids)
    if not train:
        raise ValueError(f"class {class_id} has zero labeled samples")
    rng = np.random.default_rng(_derived_seed(seed, 1))
    session = train_decoder(encoder, state.head, train, cfg,
                            sources=state.sources, val_samples=val, rng=rng)
    state.prune_record = prune_head(session, cfg, schedule)
    ema_mod.attach(state.head, cfg.ema_decay)
    ema_mod.sync_after_prune(state.head.ema, state.head)
    state.scores = class_slice_scores(train, class_id)
    state.bounds = merge.decoder_bounds(state.scores)
    if train_log is not None:
        train_log.extend(session.log_rows)
    return state


@dataclass
class PartialLabelResult:
    encoder: arch.Encoder
    states: dict[str, HeadState]
    report: dict


def run_partial_label(registry: TaskRegistry, cfg: _train.TrainCfg,
                      encoder: arch.Encoder, data=None, *, seed: int = 0,
                      aux_bpr: bool = True, fls_ablation: bool = True,
                      schedule=None) -> PartialLabelResult:
    """One decoder per anatomy, trained on all samples labeling it."""
    if not encoder.frozen:
        raise arch.FrozenEncoderError("partial-label training expects a frozen encoder")
    data = data if data is not None else load_all(registry)
    class_ids = sorted(registry.class_union,
                       key=lambda c: (registry.anatomy(c).is_gtv, c))
    states: dict[str, HeadState] = {}
    report: dict = {"heads": {}, "fls_ablation": None}
    for class_id in class_ids:
        anat = registry.anatomy(class_id)
        state = train_prune_sync(registry, class_id, encoder, states, data, cfg,
                                 seed=_derived_seed(seed, class_id),
                                 aux_bpr=aux_bpr, schedule=schedule)
        states[anat.name] = state
        val = samples_with_class(data, registry, class_id, "val")
        vals = _train.evaluate_head_on_samples(encoder, state.head, val,
                                               sources=state.sources)
        report["heads"][anat.name] = {
            "class_ids": [class_id],
            "val_dsc": float(np.mean(vals)),
            "prune": state.prune_record.to_dict(),
        }
        if anat.is_gtv and fls_ablation:
            torch.manual_seed(_derived_seed(seed, class_id))
            bare = arch.DecoderHead(f"{anat.name}_nofls", [class_id], encoder.config,
                                    aux_bpr=aux_bpr)
            rng = np.random.default_rng(_derived_seed(seed, class_id, 1))
            train = samples_with_class(data, registry, class_id, "train")
            bare_session = train_decoder(encoder, bare, train, cfg,
                                         val_samples=val, rng=rng)
            bare_vals = bare_session.evaluate_val(use_ema=False)
            report["fls_ablation"] = {
                "head": anat.name,
                "with_fls_dsc": report["heads"][anat.name]["val_dsc"],
                "without_fls_dsc": float(np.mean(bare_vals)),
                "margin": report["heads"][anat.name]["val_dsc"] - float(np.mean(bare_vals)),
            }
    heads = [s.head for s in states.values()]
    report["dense_params"] = arch.count_params(encoder, heads, sparse=False)
    report["sparse_params"] = arch.count_params(encoder, heads, sparse=True)
    report["retained_fraction"] = arch.retained_fraction(heads)
    report["sum_pruning_complements"] = float(
        sum(s.prune_record.complement for s in states.values()))
    return PartialLabelResult(encoder=encoder, states=states, report=report)


# ---------------------------------------------------------------------------
# continual runs
# ---------------------------------------------------------------------------

def _eval_class_cases(encoder, head, class_id, samples, spacing, *, sources=(),
                      channel: int | None = None, use_ema=True) -> list[metrics.SegScore]:
    out = []
    chan = channel if channel is not None else _train.class_channel_map(head)[class_id]
    session = _train.TrainSession.__new__(_train.TrainSession)
    session.encoder = encoder
    session.head = head
    session.cfg = _train.TrainCfg()
    session.sources = list(sources)
    session.rng = np.random.default_rng(0)
    for s in samples:
        entry = session._prepare(s)
        post = session._posterior(entry, use_ema)
        pred = (post.argmax(dim=0).numpy() == chan)
        gt = s.labels == class_id
        out.append(metrics.SegScore(
            dsc=metrics.dsc(pred, gt), asd=metrics.asd(pred, gt, spacing),
            class_id=class_id, case_id=s.case_id))
    return out


def _snapshot_clnet(step, ds_id, registry, encoder, states, data, seen_ids,
                    probe) -> metrics.StepSnapshot:
    class_dsc, class_asd = {}, {}
    scores: list[metrics.SegScore] = []
    for name, state in states.items():
        for class_id in state.head.class_ids:
            test = samples_with_class(data, registry, class_id, "test", seen_ids)
            spacing = registry.datasets[0].voxel_spacing
            cases = _eval_class_cases(encoder, state.head, class_id, test,
                                      spacing, sources=state.sources)
            scores.extend(cases)
            class_dsc[class_id] = float(np.mean([c.dsc for c in cases]))
            vals = [c.asd for c in cases if not np.isnan(c.asd)]
            class_asd[class_id] = float(np.mean(vals)) if vals else float("nan")
    heads = [s.head for s in states.values()]
    digests = {}
    posts = arch.forward(encoder, heads, probe.image)
    for name, post in posts.items():
        digests[name] = arch.posterior_digest(post)
    return metrics.StepSnapshot(
        step=step, dataset_id=ds_id, class_dsc=class_dsc, class_asd=class_asd,
        dense_params=arch.count_params(encoder, heads, sparse=False),
        sparse_params=arch.count_params(encoder, heads, sparse=True),
        prune_records={n: s.prune_record.to_dict() for n, s in states.items()
                       if s.prune_record is not None},
        posterior_digests=digests,
        scores=scores,
    )


def run_continual(registry: TaskRegistry, order: ContinualOrder,
                  strategy: LearnerStrategy, cfg: _train.TrainCfg,
                  encoder: arch.Encoder, data=None, *, seed: int = 0,
                  aux_bpr: bool = True, schedule=None, run_dir=None,
                  ) -> tuple[list[metrics.StepSnapshot], dict]:
    """Sequential training over a dataset order; snapshot after every step."""
    if not encoder.frozen:
        raise arch.FrozenEncoderError("continual training expects a frozen encoder")
    data = data if data is not None else load_all(registry)
    known = {d.dataset_id for d in registry.datasets}
    if set(order.dataset_ids) != known:
        raise ValueError("order must permute the registry's datasets")
    probe = data[order.dataset_ids[0]]["test"][0]

    if strategy.kind == "clnet":
        snapshots, state = _run_clnet(registry, order, cfg, encoder, data,
                                      seed=seed, aux_bpr=aux_bpr,
                                      schedule=schedule, run_dir=run_dir,
                                      probe=probe)
    else:
        snapshots, state = _run_shared_head(registry, order, strategy, cfg,
                                            encoder, data, seed=seed,
                                            run_dir=run_dir, probe=probe)
    return snapshots, state


def _run_clnet(registry, order, cfg, encoder, data, *, seed, aux_bpr, schedule,
               run_dir, probe):
    states: dict[str, HeadState] = {}
    snapshots: list[metrics.StepSnapshot] = []
    seen_ids: list[str] = []
    seen_classes: set[int] = set()
    for t, ds_id in enumerate(order.dataset_ids):
        descriptor = registry.dataset(ds_id)
        seen_ids.append(ds_id)
        step_log: list[dict] = []
        new_classes = sorted(descriptor.class_set - seen_classes,
                             key=lambda c: (registry.anatomy(c).is_gtv, c))
        existing = sorted(descriptor.class_set & seen_classes)
        for class_id in new_classes:
            state = train_prune_sync(
                registry, class_id, encoder, states, data, cfg,
                seed=_derived_seed(seed, t, class_id),
                dataset_ids=seen_ids, aux_bpr=aux_bpr, schedule=schedule,
                train_log=step_log)
            states[registry.anatomy(class_id).name] = state
        for class_id in existing:
            name = registry.anatomy(class_id).name
            state = states[name]
            new_train = data[ds_id]["train"]
            rng = np.random.default_rng(_derived_seed(seed, t, class_id, 7))
            ema_mod.continual_update(state.head, encoder, new_train, cfg,
                                     sources=state.sources, rng=rng)
            state.scores.extend(class_slice_scores(new_train, class_id))
            state.bounds = merge.decoder_bounds(state.scores)
        seen_classes |= descriptor.class_set
        snap = _snapshot_clnet(t, ds_id, registry, encoder, states, data,
                               seen_ids, probe)
        snapshots.append(snap)
        if run_dir is not None:
            write_step_artifacts(run_dir, t, encoder,
                                 [s.head for s in states.values()], snap, step_log)
    return snapshots, {"states": states}


def _grow_shared_head(old_head, class_ids, encoder, strategy, *, seed):
    """New shared head covering ``class_ids``; old parameters carried over.

    Upsampling/conv stacks are class-count independent and copy directly;
    per-stage segmentation convs are re-laid-out by class.  The marginal
    strategy initializes new class rows from the background row so the new
    classes start by splitting the background's probability mass evenly.
    """
    torch.manual_seed(seed)
    head = arch.DecoderHead("shared", sorted(class_ids), encoder.config, aux_bpr=False)
    if old_head is None:
        return head
    old_map = _train.class_channel_map(old_head)
    new_map = _train.class_channel_map(head)
    with torch.no_grad():
        named_old = dict(old_head.named_parameters())
        for name, p in head.named_parameters():
            if name.startswith("seg."):
                continue
            p.copy_(named_old[name])
        for s in range(head.n_stages):
            w_old, b_old = old_head.seg[s].weight, old_head.seg[s].bias
            w_new, b_new = head.seg[s].weight, head.seg[s].bias
            w_new[0].copy_(w_old[0])
            b_new[0].copy_(b_old[0])
            for cid, ch_old in old_map.items():
                w_new[new_map[cid]].copy_(w_old[ch_old])
                b_new[new_map[cid]].copy_(b_old[ch_old])
            fresh = [new_map[c] for c in new_map if c not in old_map]
            if strategy.kind == "mib" and fresh:
                # split the old background mass over background + new rows
                shift = float(np.log(len(fresh) + 1))
                for ch in fresh:
                    w_new[ch].copy_(w_old[0])
                    b_new[ch].copy_(b_old[0] - shift)
                b_new[0].copy_(b_old[0] - shift)
    return head


def _shared_head_loss(head, old_head, entries, labels, strategy, ctx, cfg):
    """Per-batch loss for the baseline strategies."""
    stages = [torch.cat([e["pyramid"][s] for e in entries])
              for s in range(len(entries[0]["pyramid"]))]
    logits, feats = head(stages, {})
    weights = _train.ds_weights(head.n_stages, cfg.deep_supervision)
    old_logits = old_feats = None
    if old_head is not None and strategy.kind in ("mib", "plop"):
        with torch.no_grad():
            old_head.eval()
            old_logits, old_feats = old_head(stages, {})

    total = None
    for s, w in enumerate(weights):
        if w == 0.0:
            continue
        post = torch.softmax(logits[s], dim=1)
        lbl_s = labels[:, ::2 ** s, ::2 ** s, ::2 ** s]
        if strategy.kind == "naive":
            term = losses.ce_dice(post.transpose(0, 1), lbl_s)
        elif strategy.kind == "mib":
            c = post.shape[1]
            flat = post.permute(0, 2, 3, 4, 1).reshape(-1, c)
            ids = torch.tensor(ctx.channel_classes)[lbl_s.reshape(-1)]
            voxels = losses.VoxelSet(probs=flat, labels=ids)
            term = losses.unce(voxels, ctx)
            if old_logits is not None:
                old_post = torch.softmax(old_logits[s], dim=1)
                old_flat = old_post.permute(0, 2, 3, 4, 1).reshape(-1, old_post.shape[1])
                # scatter the old model's channels into the new layout by id
                old_full = torch.zeros_like(flat)
                old_full[:, 0] = old_flat[:, 0]
                for cid, ch in _train.class_channel_map(old_head).items():
                    old_full[:, _train.class_channel_map(head)[cid]] = old_flat[:, ch]
                voxels = losses.VoxelSet(probs=flat, labels=ids, old_probs=old_full)
                term = term + strategy.unkd_weight * losses.unkd(voxels, ctx)
        elif strategy.kind == "plop":
            lbl_eff = lbl_s
            if old_logits is not None:
                old_post = torch.softmax(old_logits[s], dim=1)
                conf, old_arg = old_post[:, 1:].max(dim=1)
                pseudo_ch = old_arg + 1
                old_ids = torch.tensor([0] + [cid for cid, _ in sorted(
                    _train.class_channel_map(old_head).items(), key=lambda kv: kv[1])])
                new_chan_of_old = torch.tensor(
                    [0] + [_train.class_channel_map(head)[int(c)] for c in old_ids[1:]])
                pseudo = new_chan_of_old[pseudo_ch]
                use = (lbl_s == 0) & (conf > strategy.pseudo_threshold)
                lbl_eff = torch.where(use, pseudo, lbl_s)
            term = losses.cross_entropy(post.transpose(0, 1), lbl_eff)
            if old_feats is not None:
                pod = None
                for i in range(len(entries)):
                    stage_new = [feats[s2][i] for s2 in range(head.n_stages)]
                    stage_old = [old_feats[s2][i] for s2 in range(head.n_stages)]
                    p_i = losses.pod3d_loss(stage_new, stage_old, strategy.pod_factor)
                    pod = p_i if pod is None else pod + p_i
                term = term + pod / len(entries)
        else:
            raise ValueError(strategy.kind)
        total = w * term if total is None else total + w * term
    return total / sum(weights)


def _run_shared_head(registry, order, strategy, cfg, encoder, data, *, seed,
                     run_dir, probe):
    snapshots: list[metrics.StepSnapshot] = []
    head = None
    seen_ids: list[str] = []
    seen_classes: set[int] = set()
    for t, ds_id in enumerate(order.dataset_ids):
        descriptor = registry.dataset(ds_id)
        seen_ids.append(ds_id)
        old_head = arch.clone_head(head) if head is not None else None
        old_classes = frozenset({0} | seen_classes)
        seen_classes |= descriptor.class_set
        ctx = losses.ClassContext(old_classes=old_classes,
                                  current_classes=frozenset({0} | descriptor.class_set))
        head = _grow_shared_head(head, seen_classes, encoder,
                                 strategy, seed=_derived_seed(seed, t))

        session = _train.TrainSession(encoder, head, data[ds_id]["train"], cfg,
                                      rng=np.random.default_rng(_derived_seed(seed, t, 3)))
        # current-step labels only: ids outside this dataset map to 0
        step_map = _train.class_channel_map(head)
        for entry, sample in zip(session.train_data, data[ds_id]["train"]):
            mapped = np.zeros_like(sample.labels, dtype=np.int64)
            for cid in descriptor.class_set:
                mapped[sample.labels == cid] = step_map[cid]
            lbl = torch.zeros_like(entry["labels"])
            sl = tuple(slice((c - o) // 2, (c - o) // 2 + o)
                       for c, o in zip(lbl.shape, entry["orig"]))
            lbl[sl] = torch.from_numpy(mapped)
            entry["labels"] = lbl

        head.train()
        opt = torch.optim.SGD(head.parameters(), lr=strategy.lr, momentum=cfg.momentum)
        step_log = []
        for e in range(strategy.epochs_per_step):
            cur_lr = _train.poly_lr(strategy.lr, e, strategy.epochs_per_step,
                                    cfg.poly_power)
            for g in opt.param_groups:
                g["lr"] = cur_lr
            t0 = time.perf_counter()
            running = 0.0
            for _ in range(cfg.iters_per_epoch):
                idx = session.rng.integers(0, len(session.train_data),
                                           size=cfg.batch_size)
                entries = [session.train_data[i] for i in idx]
                labels = torch.stack([e2["labels"] for e2 in entries])
                opt.zero_grad(set_to_none=True)
                loss = _shared_head_loss(head, old_head, entries, labels,
                                         strategy, ctx, cfg)
                loss.backward()
                opt.step()
                running += float(loss.detach())
            step_log.append({"epoch": e, "phase": f"{strategy.kind}_step{t}",
                             "loss": running / cfg.iters_per_epoch, "lr": cur_lr,
                             "wall_seconds": time.perf_counter() - t0})
        head.eval()

        class_dsc, class_asd, scores = {}, {}, []
        spacing = registry.datasets[0].voxel_spacing
        for class_id in sorted(seen_classes):
            test = samples_with_class(data, registry, class_id, "test", seen_ids)
            cases = _eval_class_cases(encoder, head, class_id, test, spacing,
                                      use_ema=False)
            scores.extend(cases)
            class_dsc[class_id] = float(np.mean([c.dsc for c in cases]))
            vals = [c.asd for c in cases if not np.isnan(c.asd)]
            class_asd[class_id] = float(np.mean(vals)) if vals else float("nan")
        posts = arch.forward(encoder, [head], probe.image, use_ema=False)
        snap = metrics.StepSnapshot(
            step=t, dataset_id=ds_id, class_dsc=class_dsc, class_asd=class_asd,
            dense_params=arch.count_params(encoder, [head], sparse=False),
            sparse_params=arch.count_params(encoder, [head], sparse=True),
            posterior_digests={h: arch.posterior_digest(p) for h, p in posts.items()},
            scores=scores,
        )
        snapshots.append(snap)
        if run_dir is not None:
            write_step_artifacts(run_dir, t, encoder, [head], snap, step_log)
    return snapshots, {"head": head}


# ---------------------------------------------------------------------------
# run-directory artifacts
# ---------------------------------------------------------------------------

def snapshot_to_dict(snap: metrics.StepSnapshot) -> dict:
    return {
        "step": snap.step,
        "dataset_id": snap.dataset_id,
        "class_dsc": {str(k): v for k, v in sorted(snap.class_dsc.items())},
        "class_asd": {str(k): (None if np.isnan(v) else v)
                      for k, v in sorted(snap.class_asd.items())},
        "dense_params": snap.dense_params,
        "sparse_params": snap.sparse_params,
        "posterior_digests": dict(sorted(snap.posterior_digests.items())),
    }


def write_step_artifacts(run_dir, step, encoder, heads, snap, log_rows) -> Path:
    step_dir = Path(run_dir) / f"step_{step}"
    step_dir.mkdir(parents=True, exist_ok=True)
    arch.save_checkpoint(step_dir / "checkpoint", encoder, heads)
    with open(step_dir / "snapshot.json", "w") as f:
        json.dump(snapshot_to_dict(snap), f, indent=2, sort_keys=True)
        f.write("\n")
    with open(step_dir / "prune_records.json", "w") as f:
        json.dump(snap.prune_records, f, indent=2, sort_keys=True)
        f.write("\n")
    with open(step_dir / "train_log.csv", "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["epoch", "loss", "lr", "wall_seconds"])
        for row in log_rows:
            writer.writerow([row["epoch"], repr(float(row["loss"])),
                             repr(float(row["lr"])), f"{row['wall_seconds']:.3f}"])
    return step_dir


def snapshots_to_metric_rows(run_name: str, snapshots, registry) -> list[dict]:
    rows = []
    class_to_ds = {}
    for d in registry.datasets:
        for c in d.class_set:
            class_to_ds.setdefault(c, d.dataset_id)
    for snap in snapshots:
        for score in snap.scores:
            rows.append({
                "run": run_name, "step": snap.step,
                "dataset": class_to_ds.get(score.class_id, ""),
                "class": score.class_id, "case": score.case_id,
                "dsc": score.dsc,
                "asd": score.asd if not np.isnan(score.asd) else float("nan"),
            })
    return rows


# ---------------------------------------------------------------------------
# single-volume prediction with bounding and merging
# ---------------------------------------------------------------------------

def predict_volume(encoder, states: dict[str, HeadState], registry,
                   image: np.ndarray, slice_scores: np.ndarray
                   ) -> tuple[dict[str, np.ndarray], np.ndarray]:
    """Per-head bounded posteriors plus the merged label map."""
    heads = [s.head for s in states.values()]
    posts = arch.forward(encoder, heads, image)
    posts = {k: v.numpy() for k, v in posts.items()}
    links = gtv_links(registry)

    bounded: dict[str, np.ndarray] = {}
    bounds_of: dict[str, merge.BprBounds] = {}
    for name, state in states.items():
        anat = registry.anatomy(state.head.class_ids[0])
        if anat.is_gtv:
            host_name = registry.anatomy(anat.host_class).name
            host_state = states.get(host_name)
            bounds = host_state.bounds if host_state is not None else merge.full_bounds()
        else:
            bounds = state.bounds if state.bounds is not None else merge.full_bounds()
        bounds_of[name] = bounds
        bounded[name] = merge.apply_bound(posts[name], bounds, slice_scores)

    preds = []
    for name, state in states.items():
        gtv_field = None
        if name in links and links[name] in bounded:
            gtv_post = bounded[links[name]]
            gtv_field = (gtv_post[1:].max(axis=0) > 0.5).astype(np.float64)
        preds.append(merge.head_prediction(
            name, posts[name], bounds_of[name], slice_scores,
            state.head.class_ids, gtv_binarized=gtv_field))
    merged = merge.merge_predictions(merge.MergeContext(heads=preds))
    return bounded, merged
