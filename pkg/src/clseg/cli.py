"""Command-line surface binding the pipeline into reproducible runs.

Every command takes a JSON config (validated against the shipped schema)
plus a mandatory seed; identical config + seed reproduce run outputs
byte-for-byte.  A run directory is owned exclusively by one invocation
via a lock file and is self-describing: `eval` recomputes a snapshot from
the stored checkpoints alone.
"""

from __future__ import annotations

import argparse
import copy
import importlib.resources
import json
import os
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import _train, arch, engine, lth, merge, metrics, sslge, synthdata

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2
EXIT_CONFIG = 3

DEFAULT_ORDERS = {
    "order1": [0, 1, 2, 3, 4],
    "order2": [4, 3, 2, 1, 0],
    "order3": [1, 3, 0, 2, 4],
    "order4": [2, 0, 4, 1, 3],
}


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    seed: int
    out_root: str = "runs"
    scale: str = "desk"
    threads: int = 2
    volume_shape: tuple[int, int, int] = (48, 32, 32)
    voxel_spacing: tuple[float, float, float] = (1.5, 1.0, 1.0)
    n_train: int = 8
    n_val: int = 4
    n_test: int = 4
    registry_seed: int = 1234
    aux_bpr: bool = True
    fls_ablation: bool = True
    encoder: arch.EncoderConfig = field(default_factory=arch.EncoderConfig)
    train: _train.TrainCfg = field(default_factory=_train.TrainCfg)
    prune_schedule: tuple[float, ...] | None = None
    ge_epochs: int = 30
    ge_lr: float = 0.01
    ge_groups: int = 3
    ssl: dict = field(default_factory=lambda: {
        "epochs": 10, "lr": 1e-3, "iters_per_epoch": 8,
        "queue_capacity": 1024, "queue_weight": 0.1, "temperature": 0.07,
        "ema_encoder": False,
    })
    strategy: engine.LearnerStrategy = field(
        default_factory=lambda: engine.LearnerStrategy(kind="clnet"))
    orders: dict[str, list[int]] = field(
        default_factory=lambda: copy.deepcopy(DEFAULT_ORDERS))
    merge_opts: dict = field(default_factory=lambda: {
        "binarize_threshold": 0.5, "use_raw_posteriors": False})

    def registry(self) -> synthdata.TaskRegistry:
        return synthdata.default_registry(
            volume_shape=self.volume_shape, voxel_spacing=self.voxel_spacing,
            n_train=self.n_train, n_val=self.n_val, n_test=self.n_test,
            seed=self.registry_seed)

    def schedule(self) -> lth.PruneSchedule:
        if self.prune_schedule is None:
            return lth.default_schedule()
        return lth.PruneSchedule(tuple(self.prune_schedule))

    def to_dict(self) -> dict:
        return {
            "seed": self.seed, "out_root": self.out_root, "scale": self.scale,
            "threads": self.threads,
            "volume_shape": list(self.volume_shape),
            "voxel_spacing": list(self.voxel_spacing),
            "n_train": self.n_train, "n_val": self.n_val, "n_test": self.n_test,
            "registry_seed": self.registry_seed,
            "aux_bpr": self.aux_bpr, "fls_ablation": self.fls_ablation,
            "encoder": vars(self.encoder).copy(),
            "train": vars(self.train).copy(),
            "prune_schedule": list(self.prune_schedule) if self.prune_schedule else None,
            "ge": {"epochs": self.ge_epochs, "lr": self.ge_lr, "groups": self.ge_groups},
            "ssl": dict(self.ssl),
            "strategy": vars(self.strategy).copy(),
            "orders": {k: list(v) for k, v in self.orders.items()},
            "merge": dict(self.merge_opts),
        }


def _schema() -> dict:
    text = importlib.resources.files("clseg.data").joinpath("config.schema.json").read_text()
    return json.loads(text)


def validate_config_dict(raw: dict) -> None:
    import jsonschema

    try:
        jsonschema.validate(raw, _schema())
    except jsonschema.ValidationError as exc:
        raise ConfigError(f"config violation: {exc.message}") from exc


def config_from_dict(raw: dict) -> RunConfig:
    validate_config_dict(raw)
    cfg = RunConfig(seed=int(raw["seed"]))
    if raw.get("scale") == "paper":
        cfg.scale = "paper"
        cfg.encoder = arch.PAPER_ENCODER
        cfg.train = cfg.train.paper_scale()
        cfg.volume_shape = (112, 128, 96)
        cfg.ge_epochs = 1000
    for key in ("out_root", "threads", "n_train", "n_val", "n_test",
                "registry_seed", "aux_bpr", "fls_ablation"):
        if key in raw:
            setattr(cfg, key, raw[key])
    if "volume_shape" in raw:
        cfg.volume_shape = tuple(raw["volume_shape"])
    if "voxel_spacing" in raw:
        cfg.voxel_spacing = tuple(raw["voxel_spacing"])
    if "encoder" in raw:
        cfg.encoder = replace(cfg.encoder, **raw["encoder"])
    if "train" in raw:
        cfg.train = replace(cfg.train, **raw["train"])
    if "prune_schedule" in raw:
        cfg.prune_schedule = tuple(raw["prune_schedule"])
    if "ge" in raw:
        cfg.ge_epochs = raw["ge"].get("epochs", cfg.ge_epochs)
        cfg.ge_lr = raw["ge"].get("lr", cfg.ge_lr)
        cfg.ge_groups = raw["ge"].get("groups", cfg.ge_groups)
    if "ssl" in raw:
        cfg.ssl.update(raw["ssl"])
    if "strategy" in raw:
        cfg.strategy = engine.LearnerStrategy(**{
            **vars(cfg.strategy), **raw["strategy"]})
    if "orders" in raw:
        cfg.orders = {k: list(v) for k, v in raw["orders"].items()}
    if "merge" in raw:
        cfg.merge_opts.update(raw["merge"])
    return cfg


def load_config(path: str | None, seed_override: int | None,
                paper_scale: bool = False) -> RunConfig:
    raw: dict = {}
    if path is not None:
        with open(path) as f:
            raw = json.load(f)
    if seed_override is not None:
        raw["seed"] = seed_override
    if "seed" not in raw:
        raise ConfigError("a seed is mandatory (config key 'seed' or --seed)")
    if paper_scale:
        raw["scale"] = "paper"
    return config_from_dict(raw)


class RunLock:
    """Exclusive ownership of a run directory."""

    def __init__(self, run_dir: Path):
        self.path = Path(run_dir) / ".lock"

    def __enter__(self):
        self.path.parent.mkdir(parents=True, exist_ok=True)
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise ConfigError(f"run directory {self.path.parent} is locked "
                              "by another invocation") from None
        with os.fdopen(fd, "w") as f:
            f.write(str(os.getpid()))
        return self

    def __exit__(self, *exc):
        self.path.unlink(missing_ok=True)
        return False


def _init_determinism(cfg: RunConfig) -> None:
    import torch

    torch.set_num_threads(cfg.threads)
    torch.manual_seed(cfg.seed)


def _out_root(cfg: RunConfig, explicit: str | None) -> Path:
    if explicit:
        return Path(explicit)
    env = os.environ.get("CLSEG_OUT_ROOT")
    if env:
        return Path(env)
    return Path(cfg.out_root)


def _write_json(path: Path, payload: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")


def _write_bounds(path: Path, states: dict[str, engine.HeadState]) -> None:
    payload = {}
    for name, state in states.items():
        if state.bounds is None:
            continue
        b = state.bounds
        payload[name] = {"lower": b.lower, "upper": b.upper, "sigma": b.sigma,
                         "p5": b.p5, "p95": b.p95}
    _write_json(path, payload)


def _load_bounds(path: Path) -> dict[str, merge.BprBounds]:
    if not path.exists():
        return {}
    with open(path) as f:
        raw = json.load(f)
    return {name: merge.BprBounds(**vals) for name, vals in raw.items()}


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_synth(cfg: RunConfig, args) -> int:
    registry = cfg.registry()
    out = _out_root(cfg, args.out) / "datasets"
    for descriptor in registry.datasets:
        synthdata.write_dataset(out, descriptor, registry)
    print(f"wrote {len(registry.datasets)} datasets under {out}")
    return EXIT_OK


def _train_encoder(cfg: RunConfig, registry, data) -> tuple[arch.Encoder, dict]:
    comprehensive = registry.datasets[0]
    samples = data[comprehensive.dataset_id]["train"]
    val = data[comprehensive.dataset_id]["val"]
    return sslge.train_ge_supervised(
        comprehensive, registry, cfg.train, samples=samples, val_samples=val,
        encoder_cfg=cfg.encoder, epochs=cfg.ge_epochs, lr=cfg.ge_lr,
        n_groups=cfg.ge_groups, seed=cfg.seed)


def cmd_pretrain_ssl(cfg: RunConfig, args) -> int:
    import torch

    registry = cfg.registry()
    data = engine.load_all(registry)
    samples = data[registry.datasets[0].dataset_id]["train"]
    torch.manual_seed(cfg.seed)
    encoder = arch.Encoder(cfg.encoder)
    dim = cfg.encoder.stage_channels(cfg.encoder.n_blocks - 1)
    predictor = sslge.PredictorMLP(dim)
    rng = np.random.default_rng(cfg.seed)
    log: list = []
    sslge.simsiam_pretrain(samples, encoder, predictor,
                           epochs=cfg.ssl["epochs"], rng=rng,
                           lr=cfg.ssl["lr"],
                           iters_per_epoch=cfg.ssl["iters_per_epoch"], log=log)
    out = _out_root(cfg, args.out) / "encoder_ssl"
    arch.save_checkpoint(out, encoder, [])
    _write_training_log(out / "train_log.csv", log)
    print(f"SSL-pretrained encoder saved to {out}")
    return EXIT_OK


def cmd_train_ge(cfg: RunConfig, args) -> int:
    registry = cfg.registry()
    data = engine.load_all(registry)
    encoder, report = _train_encoder(cfg, registry, data)
    if args.momentum_finetune:
        queue = sslge.MomentumQueue(capacity=cfg.ssl["queue_capacity"])
        # fine-tuning happens pre-freeze; rebuild an unfrozen copy
        encoder_ft = arch.Encoder(cfg.encoder)
        encoder_ft.load_state_dict(encoder.state_dict())
        datasets = [(d, data[d.dataset_id]["train"]) for d in registry.datasets[1:]]
        sslge.momentum_finetune(encoder_ft, datasets, queue, cfg.train,
                                queue_weight=cfg.ssl["queue_weight"],
                                temperature=cfg.ssl["temperature"],
                                ema_encoder=cfg.ssl["ema_encoder"], seed=cfg.seed)
        encoder = encoder_ft.freeze()
    out = _out_root(cfg, args.out) / "encoder"
    arch.save_checkpoint(out, encoder, [])
    _write_training_log(out / "train_log.csv", report.get("log", []))
    _write_json(out / "ge_report.json",
                {"groups": report["groups"]})
    print(f"frozen encoder saved to {out}")
    for name, info in report["groups"].items():
        print(f"  {name}: val DSC {info['val_dsc']:.4f} (classes {info['class_ids']})")
    return EXIT_OK


def _load_encoder(cfg: RunConfig, args, registry, data) -> arch.Encoder:
    if args.encoder:
        encoder, _ = arch.load_checkpoint(args.encoder)
        if not encoder.frozen:
            encoder.freeze()
        return encoder
    encoder, _ = _train_encoder(cfg, registry, data)
    return encoder


def _write_training_log(path: Path, rows: list[dict]) -> None:
    import csv as _csv

    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = _csv.writer(f, lineterminator="\n")
        writer.writerow(["epoch", "loss", "lr", "wall_seconds"])
        for row in rows:
            writer.writerow([row["epoch"], repr(float(row["loss"])),
                             repr(float(row["lr"])), f"{row['wall_seconds']:.3f}"])


def cmd_run_pl(cfg: RunConfig, args) -> int:
    registry = cfg.registry()
    data = engine.load_all(registry)
    run_dir = _out_root(cfg, args.out) / "pl"
    with RunLock(run_dir):
        encoder = _load_encoder(cfg, args, registry, data)
        result = engine.run_partial_label(
            registry, cfg.train, encoder, data, seed=cfg.seed,
            aux_bpr=cfg.aux_bpr, fls_ablation=cfg.fls_ablation,
            schedule=cfg.schedule())
        heads = [s.head for s in result.states.values()]
        arch.save_checkpoint(run_dir / "checkpoint", encoder, heads)
        _write_bounds(run_dir / "checkpoint" / "bounds.json", result.states)
        _write_json(run_dir / "report.json", result.report)
        _write_json(run_dir / "run.json", {"config": cfg.to_dict(), "mode": "pl"})
    print(f"partial-label run complete: {run_dir}")
    for name, info in result.report["heads"].items():
        print(f"  {name}: val DSC {info['val_dsc']:.4f} "
              f"pruned to {info['prune']['final_rate']:.3f}")
    return EXIT_OK


def cmd_run_cs(cfg: RunConfig, args) -> int:
    registry = cfg.registry()
    if args.order not in cfg.orders:
        raise ConfigError(f"unknown order {args.order!r}")
    order = synthdata.make_orders(registry, [cfg.orders[args.order]])[0]
    order = synthdata.ContinualOrder(name=args.order, dataset_ids=order.dataset_ids)
    strategy = cfg.strategy
    if args.strategy:
        strategy = engine.LearnerStrategy(**{**vars(cfg.strategy), "kind": args.strategy})
    data = engine.load_all(registry)
    run_name = f"cs_{order.name}_{strategy.kind}"
    run_dir = _out_root(cfg, args.out) / run_name
    with RunLock(run_dir):
        encoder = _load_encoder(cfg, args, registry, data)
        snapshots, state = engine.run_continual(
            registry, order, strategy, cfg.train, encoder, data,
            seed=cfg.seed, aux_bpr=cfg.aux_bpr, schedule=cfg.schedule(),
            run_dir=run_dir)
        rows = engine.snapshots_to_metric_rows(run_name, snapshots, registry)
        metrics.write_metrics_csv(run_dir / "metrics.csv", rows)
        if strategy.kind == "clnet":
            _write_bounds(run_dir / f"step_{len(snapshots) - 1}" / "checkpoint" /
                          "bounds.json", state["states"])
        _write_json(run_dir / "run.json", {
            "config": cfg.to_dict(), "mode": "cs", "order": list(order.dataset_ids),
            "strategy": vars(strategy).copy(), "steps": len(snapshots),
        })
    print(f"continual run complete: {run_dir}")
    for snap in snapshots:
        mean = float(np.mean(list(snap.class_dsc.values())))
        print(f"  step {snap.step} ({snap.dataset_id}): mean DSC {mean:.4f} "
              f"sparse params {snap.sparse_params}")
    return EXIT_OK


def cmd_prune(cfg: RunConfig, args) -> int:
    registry = cfg.registry()
    data = engine.load_all(registry)
    encoder, heads = arch.load_checkpoint(args.checkpoint)
    if not encoder.frozen:
        encoder.freeze()
    out = _out_root(cfg, args.out) / "pruned"
    records = {}
    by_id = {h.head_id: h for h in heads}
    for head in heads:
        if head.prune_masks:
            continue
        class_id = head.class_ids[0]
        train = engine.samples_with_class(data, registry, class_id, "train")
        val = engine.samples_with_class(data, registry, class_id, "val")
        sources = [by_id[s] for s in head.fls_sources]
        session = _train.TrainSession(encoder, head, train, cfg.train,
                                      sources=sources, val_samples=val,
                                      rng=np.random.default_rng(cfg.seed))
        record = engine.prune_head(session, cfg.train, cfg.schedule())
        records[head.head_id] = record.to_dict()
    arch.save_checkpoint(out, encoder, heads)
    _write_json(out / "prune_records.json", records)
    print(f"pruned checkpoint saved to {out}")
    return EXIT_OK


def cmd_predict(cfg: RunConfig, args) -> int:
    registry = cfg.registry()
    encoder, heads = arch.load_checkpoint(args.checkpoint)
    if not encoder.frozen:
        encoder.freeze()
    bounds = _load_bounds(Path(args.checkpoint) / "bounds.json")
    states = {}
    by_id = {h.head_id: h for h in heads}
    for head in heads:
        sources = [by_id[s] for s in head.fls_sources]
        states[head.head_id] = engine.HeadState(
            head=head, sources=sources, bounds=bounds.get(head.head_id))
    image = synthdata.read_volume(args.volume)
    comprehensive = registry.datasets[0]
    meta = comprehensive
    for d in registry.datasets:
        if tuple(d.volume_shape) == image.shape:
            meta = d
            break
    scores = synthdata.bpr_oracle(image.shape, meta)
    posts, merged = engine.predict_volume(encoder, states, registry, image, scores)
    out = _out_root(cfg, args.out) / "prediction"
    out.mkdir(parents=True, exist_ok=True)
    for name, post in posts.items():
        fg = (post[1:].max(axis=0) > cfg.merge_opts["binarize_threshold"])
        synthdata.write_volume(out / f"head_{name}.raw", fg.astype(np.int32))
    synthdata.write_volume(out / "merged.raw", merged.astype(np.int32))
    print(f"wrote merged map and {len(posts)} head maps to {out}")
    return EXIT_OK


def cmd_eval(cfg: RunConfig, args) -> int:
    registry = cfg.registry()
    data = engine.load_all(registry)
    step_dir = Path(args.step_dir)
    encoder, heads = arch.load_checkpoint(step_dir / "checkpoint")
    with open(Path(args.run_dir) / "run.json") as f:
        run_info = json.load(f)
    step = int(step_dir.name.split("_")[1])
    seen_ids = run_info["order"][:step + 1]
    probe = data[run_info["order"][0]]["test"][0]
    by_id = {h.head_id: h for h in heads}
    states = {h.head_id: engine.HeadState(head=h, sources=[by_id[s] for s in h.fls_sources])
              for h in heads}
    if run_info["strategy"]["kind"] == "clnet":
        snap = engine._snapshot_clnet(step, seen_ids[-1], registry, encoder,
                                      states, data, seen_ids, probe)
    else:
        head = heads[0]
        spacing = registry.datasets[0].voxel_spacing
        class_dsc, class_asd = {}, {}
        for class_id in sorted(c for h in heads for c in h.class_ids):
            test = engine.samples_with_class(data, registry, class_id, "test", seen_ids)
            cases = engine._eval_class_cases(encoder, head, class_id, test,
                                             spacing, use_ema=False)
            class_dsc[class_id] = float(np.mean([c.dsc for c in cases]))
            vals = [c.asd for c in cases if not np.isnan(c.asd)]
            class_asd[class_id] = float(np.mean(vals)) if vals else float("nan")
        posts = arch.forward(encoder, [head], probe.image, use_ema=False)
        snap = metrics.StepSnapshot(
            step=step, dataset_id=seen_ids[-1], class_dsc=class_dsc,
            class_asd=class_asd,
            dense_params=arch.count_params(encoder, heads, sparse=False),
            sparse_params=arch.count_params(encoder, heads, sparse=True),
            posterior_digests={h: arch.posterior_digest(p) for h, p in posts.items()})
    payload = engine.snapshot_to_dict(snap)
    _write_json(step_dir / "snapshot_eval.json", payload)
    with open(step_dir / "snapshot.json") as f:
        stored = json.load(f)
    match = stored == payload
    print(f"re-evaluated step {step}: {'matches' if match else 'DIFFERS FROM'} snapshot.json")
    return EXIT_OK if match else EXIT_FAILURE


def cmd_report(cfg: RunConfig, args) -> int:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    run_dir = Path(args.run_dir)
    with open(run_dir / "run.json") as f:
        run_info = json.load(f)
    registry = cfg.registry()
    steps = sorted(run_dir.glob("step_*"), key=lambda p: int(p.name.split("_")[1]))
    snaps = []
    for step_dir in steps:
        with open(step_dir / "snapshot.json") as f:
            snaps.append(json.load(f))

    order = run_info["order"]
    fig, ax = plt.subplots(figsize=(7, 4.5))
    table_rows = []
    for ds_id in order:
        classes = sorted(registry.dataset(ds_id).class_set)
        xs, ys = [], []
        for snap in snaps:
            if all(str(c) in snap["class_dsc"] for c in classes):
                xs.append(snap["step"])
                ys.append(float(np.mean([snap["class_dsc"][str(c)] for c in classes])))
        ax.plot(xs, ys, marker="o", label=ds_id)
        for x, y in zip(xs, ys):
            table_rows.append({"dataset": ds_id, "step": x, "mean_dsc": y})
    ax.set_xlabel("continual step")
    ax.set_ylabel("mean DSC")
    ax.set_ylim(0, 1.05)
    ax.legend(fontsize=8)
    ax.set_title("forgetting curves")
    fig.tight_layout()
    fig.savefig(run_dir / "forgetting_curves.png", dpi=120)
    plt.close(fig)

    fig, ax = plt.subplots(figsize=(6, 4.5))
    xs = [snap["sparse_params"] / 1e6 for snap in snaps]
    ys = [float(np.mean(list(snap["class_dsc"].values()))) for snap in snaps]
    ax.plot(xs, ys, marker="s")
    for snap, x, y in zip(snaps, xs, ys):
        ax.annotate(f"s{snap['step']}", (x, y), fontsize=8)
    ax.set_xlabel("effective parameters (millions)")
    ax.set_ylabel("mean DSC over learned classes")
    ax.set_title("accuracy vs model size")
    fig.tight_layout()
    fig.savefig(run_dir / "dsc_vs_params.png", dpi=120)
    plt.close(fig)

    import csv as _csv
    with open(run_dir / "report.csv", "w", newline="") as f:
        writer = _csv.writer(f, lineterminator="\n")
        writer.writerow(["dataset", "step", "mean_dsc"])
        for row in table_rows:
            writer.writerow([row["dataset"], row["step"], repr(row["mean_dsc"])])
    print(f"report written to {run_dir} (forgetting_curves.png, dsc_vs_params.png, report.csv)")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="clseg",
        description="continual 3D segmentation experiments on synthetic volumes")
    parser.add_argument("--config", help="JSON run configuration")
    parser.add_argument("--seed", type=int, help="seed override (mandatory if no config)")
    parser.add_argument("--paper-scale", action="store_true",
                        help="switch desk defaults to paper hyperparameters")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("synth", help="generate and store the synthetic datasets") \
        .add_argument("--out")
    sub.add_parser("pretrain-ssl", help="self-supervised encoder pretraining") \
        .add_argument("--out")
    p = sub.add_parser("train-ge", help="supervised encoder training, then freeze")
    p.add_argument("--out")
    p.add_argument("--momentum-finetune", action="store_true")
    p = sub.add_parser("run-pl", help="partial-label configuration")
    p.add_argument("--out")
    p.add_argument("--encoder", help="frozen encoder checkpoint")
    p = sub.add_parser("run-cs", help="continual configuration")
    p.add_argument("--order", default="order1")
    p.add_argument("--strategy", choices=engine.STRATEGIES)
    p.add_argument("--out")
    p.add_argument("--encoder", help="frozen encoder checkpoint")
    p = sub.add_parser("prune", help="prune the unpruned heads of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out")
    p = sub.add_parser("predict", help="per-head + merged maps for one volume")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--volume", required=True)
    p.add_argument("--out")
    p = sub.add_parser("eval", help="recompute a snapshot from stored checkpoints")
    p.add_argument("--run-dir", required=True)
    p.add_argument("--step-dir", required=True)
    p = sub.add_parser("report", help="tables and plots for a finished run")
    p.add_argument("--run-dir", required=True)
    return parser


COMMANDS = {
    "synth": cmd_synth,
    "pretrain-ssl": cmd_pretrain_ssl,
    "train-ge": cmd_train_ge,
    "run-pl": cmd_run_pl,
    "run-cs": cmd_run_cs,
    "prune": cmd_prune,
    "predict": cmd_predict,
    "eval": cmd_eval,
    "report": cmd_report,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args.config, args.seed, args.paper_scale)
    except ConfigError as exc:
        print(json.dumps({"error": "config", "detail": str(exc)}), file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, json.JSONDecodeError) as exc:
        print(json.dumps({"error": "config", "detail": str(exc)}), file=sys.stderr)
        return EXIT_CONFIG
    _init_determinism(cfg)
    try:
        return COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(json.dumps({"error": "config", "detail": str(exc)}), file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - boundary of the CLI
        print(json.dumps({"error": type(exc).__name__, "detail": str(exc)}),
              file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
