"""Command-line surface.

Verbs:

    tpp pretrain-backbone --config C --seed S --out DIR
    tpp tpp              --config C --seed S --backbone CKPT [--peft M] --out DIR
    tpp finetune         --config C --seed S --backbone CKPT
                         [--target-init random|CKPT] [--grid lr,lr,...] --out DIR
    tpp audit            BEFORE AFTER [--groups backbone,target,head]
    tpp report           LOG [LOG ...] [--csv PATH] [--out PATH]

Exit codes: 0 success, 1 config error, 2 runtime/divergence, 3 audit failure.
Every command is idempotent on its outputs given --seed and identical inputs.
TPP_NUM_WORKERS sets the augmentation worker count (results are identical
regardless, because per-sample rng streams are derived, not shared).
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import replace

import numpy as np

from .checkpoint import Checkpoint, audit_freeze
from .config import AUTO, ExperimentConfig
from .errors import ArgumentError, ConfigError, StructuralError, TrainingDiverged
from .optim import AdamWSpec, ScheduleSpec
from .peft import BitFitSpec, mechanism_name
from .pipeline import (InitSpec, MetricLog, ModelBundle, Objective, Stage,
                       StagePlan, build_bundle, default_plan, ensure_mae,
                       evaluate, grid_search, init_target_params, run_stage)
from .registry import ParamGroup
from .rng import SeededRng

_GROUPS = {"backbone": ParamGroup.BACKBONE, "target": ParamGroup.TARGET,
           "head": ParamGroup.HEAD}


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tpp",
                                     description="Target-parameter pre-training workflows")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", required=True, help="experiment config file")
        p.add_argument("--seed", type=int, default=0, help="master seed")
        p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("pretrain-backbone", help="self-supervised backbone pre-training (all groups trainable)")
    common(p)

    p = sub.add_parser("tpp", help="pre-train target parameters with the configured pretext task")
    common(p)
    p.add_argument("--backbone", required=True, help="backbone checkpoint")
    p.add_argument("--peft", default=None,
                   help="override [peft] method (adapter|adaptformer|vpt|ssf|bitfit|lora)")

    p = sub.add_parser("finetune", help="supervised fine-tuning of target + head params")
    common(p)
    p.add_argument("--backbone", required=True, help="backbone checkpoint")
    p.add_argument("--peft", default=None, help="override [peft] method")
    p.add_argument("--target-init", default="random",
                   help="'random' or a target-parameter checkpoint path")
    p.add_argument("--grid", default=None,
                   help="comma-separated learning rates to grid-search on the val split")

    p = sub.add_parser("audit", help="compare frozen-group hashes between two checkpoints")
    p.add_argument("before")
    p.add_argument("after")
    p.add_argument("--groups", default="backbone",
                   help="comma-separated groups to audit (default: backbone)")

    p = sub.add_parser("report", help="aggregate run logs into a markdown/CSV table")
    p.add_argument("logs", nargs="+")
    p.add_argument("--csv", default=None, help="also write CSV here")
    p.add_argument("--out", default=None, help="write markdown here instead of stdout")
    return parser


# -- shared helpers ----------------------------------------------------------


def _load_backbone(bundle: ModelBundle, path: str) -> Checkpoint:
    ckpt = Checkpoint.load(path)
    ckpt.apply_to_registry(bundle.registry, groups={ParamGroup.BACKBONE}, require_all=True)
    return ckpt


def _stage_plan(cfg: ExperimentConfig, stage: Stage, objective: Objective, task: str) -> StagePlan:
    plan = default_plan(stage, objective, task)
    schedule = plan.schedule
    lr = cfg.resolved("stage", "lr", schedule.base_lr)
    warmup = cfg.resolved("stage", "warmup_epochs", schedule.warmup_epochs)
    wd = cfg.resolved("stage", "weight_decay", schedule.wd_start)
    wd_end = cfg.resolved("stage", "wd_end", schedule.wd_end)
    schedule = ScheduleSpec(base_lr=lr, warmup_epochs=warmup, wd_start=wd,
                            wd_end=wd_end, lr_batch_scaling=schedule.lr_batch_scaling)
    batch = cfg.resolved("stage", "batch_size", plan.batch_size)
    epochs = cfg.resolved("stage", "epochs", AUTO)
    iterations = cfg.resolved("stage", "iterations", AUTO)
    if epochs != AUTO and iterations != AUTO:
        raise ConfigError("[stage] set either epochs or iterations, not both")
    if iterations != AUTO:
        budget = {"max_epochs": None, "max_iterations": int(iterations)}
    elif epochs != AUTO:
        budget = {"max_epochs": int(epochs), "max_iterations": None}
    else:
        budget = {"max_epochs": plan.max_epochs, "max_iterations": plan.max_iterations}
    augment = cfg.resolved("stage", "augment", plan.augment_policy)
    s = cfg.values["stage"]
    optimizer = AdamWSpec(beta1=s["beta1"], beta2=s["beta2"], eps=s["eps"])
    return replace(plan, schedule=schedule, batch_size=int(batch),
                   augment_policy=augment, optimizer=optimizer, **budget)


def _task_and_data(cfg: ExperimentConfig, seed: int):
    data = cfg.load_data(seed)
    task = data.train.task
    return task, data


def _echo_config(cfg: ExperimentConfig, log: MetricLog, seed: int) -> None:
    log.log(event="effective_config", seed=seed, **cfg.effective())


def _finetune_objective(task: str) -> Objective:
    return Objective.CE if task == "classification" else Objective.DICE_CE


def _pretext_objective(cfg: ExperimentConfig) -> Objective:
    name = cfg.get("pretext", "task")
    if name == "mae":
        return Objective.MAE
    if name == "dino":
        return Objective.DINO
    raise ConfigError(f"unknown pretext task: {name!r}")


def _write_outputs(out_dir: str, name: str, ckpt: Checkpoint, log: MetricLog) -> str:
    os.makedirs(out_dir, exist_ok=True)
    ckpt_path = os.path.join(out_dir, f"{name}.tppc")
    ckpt.save(ckpt_path)
    log.write_jsonl(os.path.join(out_dir, f"{name}.jsonl"))
    return ckpt_path


# -- commands ---------------------------------------------------------------


def cmd_pretrain_backbone(args) -> int:
    cfg = ExperimentConfig.load(args.config)
    task, data = _task_and_data(cfg, args.seed)
    objective = _pretext_objective(cfg)
    bundle = build_bundle(cfg.vit_config(), args.seed)
    plan = _stage_plan(cfg, Stage.BACKBONE_PRETRAIN, objective, task)
    rng = SeededRng(args.seed, "stage/pretrain")
    ckpt, log = run_stage(plan, bundle, data, rng,
                          mae_cfg=cfg.mae_config(), dino_cfg=cfg.dino_config())
    _echo_config(cfg, log, args.seed)
    path = _write_outputs(args.out, "backbone", ckpt, log)
    print(f"wrote {path}")
    return 0


def _prepare_decoder(cfg: ExperimentConfig, bundle: ModelBundle,
                     backbone_ckpt: Checkpoint, task: str, rng: SeededRng) -> tuple[str, bool]:
    """Resolve the decoder handling mode and inherit weights when asked.

    Returns (mode, inherited). auto: freeze for classification, update for
    segmentation, falling back to random when the checkpoint carries no
    decoder. Explicit freeze/update without an inheritable decoder is a
    config error.
    """
    mode = cfg.get("pretext", "decoder_mode")
    mae = ensure_mae(bundle, cfg.mae_config(), rng)
    decoder_names = {p.name for p in bundle.registry.params(prefix="pretext.mae.")}
    available = decoder_names <= set(backbone_ckpt.entries)
    if mode == "auto":
        if available:
            mode = "freeze" if task == "classification" else "update"
        else:
            mode = "random"
    if mode in ("freeze", "update"):
        if not available:
            raise ConfigError(
                f"decoder_mode={mode} needs an inheritable decoder, but the backbone "
                f"checkpoint has none")
        state = {n: backbone_ckpt.entries[n].data for n in sorted(decoder_names)}
        bundle.registry.load_state(state)
        return mode, True
    if mode == "random":
        return mode, False
    raise ConfigError(f"unknown decoder_mode: {mode!r}")


def cmd_tpp(args) -> int:
    cfg = ExperimentConfig.load(args.config)
    task, data = _task_and_data(cfg, args.seed)
    objective = _pretext_objective(cfg)
    peft_spec = cfg.peft_spec(args.peft)
    if peft_spec is None:
        raise ConfigError("tpp requires a PEFT method that introduces target parameters")
    if isinstance(peft_spec, BitFitSpec):
        print("warning: BitFit adds no parameters; pre-training its biases is experimental",
              file=sys.stderr)
    bundle = build_bundle(cfg.vit_config(), args.seed, peft_spec=peft_spec)
    backbone_ckpt = _load_backbone(bundle, args.backbone)
    rng = SeededRng(args.seed, "stage/tpp")

    plan = _stage_plan(cfg, Stage.TPP, objective, task)
    if objective is Objective.MAE:
        mode, inherited = _prepare_decoder(cfg, bundle, backbone_ckpt, task, rng)
        head_groups = ({ParamGroup.HEAD} if mode == "freeze" else set())
        plan = replace(plan,
                       frozen_groups=frozenset({ParamGroup.BACKBONE} | head_groups),
                       trainable_groups=frozenset({ParamGroup.TARGET, ParamGroup.HEAD}
                                                  - head_groups))
    ckpt, log = run_stage(plan, bundle, data, rng,
                          mae_cfg=cfg.mae_config(), dino_cfg=cfg.dino_config())
    _echo_config(cfg, log, args.seed)

    ratio = bundle.registry.trainable_ratio()
    print(f"trainable ratio: {ratio:.4f}%")

    # input-side snapshot: post-run registry with the Backbone-group entries
    # replaced by the checkpoint's values, so the audit compares input vs output
    before = Checkpoint.from_registry(bundle.registry, stage="tpp-input")
    for name, entry in backbone_ckpt.entries.items():
        if name in before.entries and before.entries[name].group is ParamGroup.BACKBONE:
            before.entries[name] = entry
    report = audit_freeze(before, ckpt, {ParamGroup.BACKBONE})
    print(f"backbone freeze audit: {report.summary().splitlines()[0]}")

    target = Checkpoint.from_registry(
        bundle.registry, stage="tpp",
        config={"peft": mechanism_name(peft_spec), **ckpt.meta["config"]},
        rng_state=ckpt.meta["rng"],
        groups={ParamGroup.TARGET}, exclude_prefixes=("pretext.",))
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, "target.tppc")
    target.save(path)
    log.log(event="trainable_ratio", value=ratio)
    log.write_jsonl(os.path.join(args.out, "tpp.jsonl"))
    print(f"wrote {path}")
    return 0 if report.passed else 3


def cmd_finetune(args) -> int:
    cfg = ExperimentConfig.load(args.config)
    task, data = _task_and_data(cfg, args.seed)
    loss = cfg.resolved("stage", "loss", "ce" if task == "classification" else "dice_ce")
    if loss == "dice_ce" and task == "classification":
        raise ConfigError("loss/task mismatch: Dice+CE on a classification task")
    if loss not in ("ce", "dice_ce"):
        raise ConfigError(f"unknown loss: {loss!r}")
    objective = Objective.CE if loss == "ce" else Objective.DICE_CE
    peft_spec = cfg.peft_spec(args.peft)
    num_classes = (data.train.num_classes if task == "classification" else 2)
    head_spec = cfg.head_spec(task, num_classes)

    def make_bundle() -> ModelBundle:
        bundle = build_bundle(cfg.vit_config(), args.seed, head_spec=head_spec,
                              peft_spec=peft_spec)
        _load_backbone(bundle, args.backbone)
        if args.target_init != "random":
            init_target_params(bundle, InitSpec("from_checkpoint", args.target_init))
        return bundle

    plan = _stage_plan(cfg, Stage.FINETUNE, objective, task)
    rng_label = "stage/finetune"

    if args.grid:
        lr_grid = [float(v) for v in args.grid.split(",") if v.strip()]
        primary = cfg.resolved("eval", "primary",
                               "acc" if task == "classification" else "dice")
        plan, rows = grid_search(plan, lr_grid, make_bundle, data, args.seed, primary)
        print("grid search (best first):")
        for row in rows:
            score = "diverged" if row["score"] is None else f"{row['score']:.4f}"
            print(f"  lr={row['lr']:.6g}  {primary}={score}  [{row['status']}]")

    bundle = make_bundle()
    ckpt, log = run_stage(plan, bundle, data, SeededRng(args.seed, rng_label))
    test_report = evaluate(bundle, data.test, cfg.get("eval", "batch_size"))
    log.extend(test_report.to_records("test"))
    ratio = bundle.registry.trainable_ratio()
    log.log(event="trainable_ratio", value=ratio)
    log.log(event="run_info", label=os.path.splitext(os.path.basename(args.config))[0],
            seed=args.seed, peft=(mechanism_name(peft_spec) if peft_spec else "none"),
            target_init=args.target_init)
    _echo_config(cfg, log, args.seed)
    path = _write_outputs(args.out, "finetune", ckpt, log)
    metrics = "  ".join(f"{k}={v:.4f}" for k, v in test_report.metrics.items())
    print(f"test: {metrics}")
    print(f"trainable ratio: {ratio:.4f}%")
    print(f"wrote {path}")
    return 0


def cmd_audit(args) -> int:
    groups = set()
    for name in args.groups.split(","):
        name = name.strip().lower()
        if name not in _GROUPS:
            raise ConfigError(f"unknown group {name!r}; expected backbone/target/head")
        groups.add(_GROUPS[name])
    before = Checkpoint.load(args.before)
    after = Checkpoint.load(args.after)
    report = audit_freeze(before, after, groups)
    print(report.summary())
    return 0 if report.passed else 3


def cmd_report(args) -> int:
    runs = []
    for path in args.logs:
        log = MetricLog.read_jsonl(path)
        info = next((r for r in log.records if r.get("event") == "run_info"), None)
        ratio = next((r["value"] for r in log.records if r.get("event") == "trainable_ratio"), None)
        tests = {r["metric"]: r["value"] for r in log.records if r.get("split") == "test"}
        label = info["label"] if info else os.path.splitext(os.path.basename(path))[0]
        if info and info.get("target_init") not in (None, "random"):
            label += "+tpp"
        runs.append({"label": label, "seed": info["seed"] if info else None,
                     "ratio": ratio, "metrics": tests})
    by_label: dict[str, list[dict]] = {}
    for run in runs:
        by_label.setdefault(run["label"], []).append(run)

    metric_names = sorted({m for run in runs for m in run["metrics"]})
    header = ["Method", "Seeds"] + [m.upper() for m in metric_names] + ["Ratio"]
    table_rows = []
    for label in sorted(by_label):
        group = by_label[label]
        row = [label, str(len(group))]
        for m in metric_names:
            vals = [g["metrics"][m] for g in group if m in g["metrics"]]
            row.append(f"{np.mean(vals):.2f}" if vals else "-")
        ratios = [g["ratio"] for g in group if g["ratio"] is not None]
        row.append(f"{np.mean(ratios):.3f}" if ratios else "-")
        table_rows.append(row)

    widths = [max(len(h), *(len(r[i]) for r in table_rows)) if table_rows else len(h)
              for i, h in enumerate(header)]
    lines = ["| " + " | ".join(h.ljust(w) for h, w in zip(header, widths)) + " |",
             "|-" + "-|-".join("-" * w for w in widths) + "-|"]
    for row in table_rows:
        lines.append("| " + " | ".join(c.ljust(w) for c, w in zip(row, widths)) + " |")
    markdown = "\n".join(lines)

    if args.out:
        with open(args.out, "w") as fh:
            fh.write(markdown + "\n")
    else:
        print(markdown)
    if args.csv:
        with open(args.csv, "w") as fh:
            fh.write(",".join(header) + "\n")
            for row in table_rows:
                fh.write(",".join(row) + "\n")
    return 0


_COMMANDS = {
    "pretrain-backbone": cmd_pretrain_backbone,
    "tpp": cmd_tpp,
    "finetune": cmd_finetune,
    "audit": cmd_audit,
    "report": cmd_report,
}


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except (ConfigError, ArgumentError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except TrainingDiverged as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return 2
    except (StructuralError, RuntimeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
