"""Stage orchestration: backbone pretraining, target-parameter pre-training,
and supervised fine-tuning.

A stage is described by a StagePlan: which parameter groups are frozen,
which objective runs, the optimizer and schedules, and the budget. The
runner enforces the plan's freezing at the tensor level, audits that
frozen groups come out bit-identical, logs one JSON-serializable record
per step plus per-epoch validation metrics, and returns a full parameter
checkpoint.

Everything is driven by one SeededRng: data order, masking, augmentation
and any re-initialization derive labeled sub-streams, so identical
(config, seed, data) reproduce identical logs and checkpoints.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np

from . import tensor as T
from .checkpoint import Checkpoint
from .data import Dataset, SplitDatasets
from .errors import ArgumentError, StateError, TrainingDiverged
from .metrics import EvalReport, classification_report, segmentation_report
from .optim import AdamW, AdamWSpec, ScheduleSpec, lr_at, wd_at
from .peft import PeftSpec, attach, reinit_target_params
from .pretext import (DinoConfig, MaeConfig, MaskedReconstruction,
                      SelfDistillation, augment)
from .registry import ParamGroup, ParamRegistry
from .rng import SeededRng
from .tensor import Tensor
from .vit import HeadSpec, SegmentationSpec, ViTConfig, VisionTransformer, build_head


class Stage(Enum):
    BACKBONE_PRETRAIN = "backbone_pretrain"
    TPP = "tpp"
    FINETUNE = "finetune"


class Objective(Enum):
    MAE = "mae"
    DINO = "dino"
    CE = "ce"
    DICE_CE = "dice_ce"


@dataclass(frozen=True)
class InitSpec:
    """How to initialize Target params before a stage.

    mode "random" re-applies the mechanism default (identity-at-init);
    "from_checkpoint" / "transfer" / "upstream" load the Target group from
    a checkpoint file, leaving Backbone and Head untouched.
    """

    mode: str = "random"
    path: str | None = None

    def __post_init__(self):
        if self.mode not in ("random", "from_checkpoint", "transfer", "upstream"):
            raise ArgumentError(f"unknown init mode: {self.mode!r}")
        if self.mode != "random" and not self.path:
            raise ArgumentError(f"init mode {self.mode!r} requires a checkpoint path")


@dataclass(frozen=True)
class StagePlan:
    stage: Stage
    objective: Objective
    frozen_groups: frozenset[ParamGroup]
    trainable_groups: frozenset[ParamGroup]
    schedule: ScheduleSpec
    optimizer: AdamWSpec = AdamWSpec()
    batch_size: int = 64
    max_epochs: int | None = None
    max_iterations: int | None = None
    init: InitSpec | None = None
    augment_policy: str = "none"
    eval_each_epoch: bool = False

    def validate(self, groups_present: set[ParamGroup]) -> None:
        if self.frozen_groups & self.trainable_groups:
            raise StateError(
                f"plan: groups both frozen and trainable: "
                f"{sorted(g.value for g in self.frozen_groups & self.trainable_groups)}")
        missing = groups_present - (self.frozen_groups | self.trainable_groups)
        if missing:
            raise StateError(
                f"plan: groups present but unassigned: {sorted(g.value for g in missing)}")
        if self.stage is Stage.TPP:
            if ParamGroup.BACKBONE not in self.frozen_groups:
                raise StateError("TPP plan must freeze the Backbone group")
            if ParamGroup.TARGET not in self.trainable_groups:
                raise StateError("TPP plan must train the Target group")
        if self.stage is Stage.FINETUNE:
            if ParamGroup.BACKBONE not in self.frozen_groups:
                raise StateError("finetune plan must freeze the Backbone group")
        if (self.max_epochs is None) == (self.max_iterations is None):
            raise StateError("plan needs exactly one of max_epochs / max_iterations")
        if self.batch_size < 1:
            raise StateError(f"batch_size must be >= 1, got {self.batch_size}")


def default_plan(stage: Stage, objective: Objective, task: str = "classification",
                 batch_size: int | None = None, **overrides) -> StagePlan:
    """Stage plans with the published training recipes as defaults.

    Masked-reconstruction pre-training: AdamW, base lr 1.5e-3 after a
    40-epoch linear warmup then cosine decay, weight decay 1.5e-2, batch
    64, 500 epochs for classification tasks and 1000 for segmentation.
    Self-distillation: batch 64, 10-epoch warmup to a base lr scaled as
    0.0001 * batch/256 with cosine decay, weight decay cosine 0.04 -> 0.4.
    """
    if objective is Objective.MAE:
        schedule = ScheduleSpec(base_lr=1.5e-3, warmup_epochs=40, wd_start=1.5e-2)
        epochs = 500 if task == "classification" else 1000
        batch = 64 if batch_size is None else batch_size
    elif objective is Objective.DINO:
        schedule = ScheduleSpec(base_lr=1e-4, warmup_epochs=10,
                                wd_start=0.04, wd_end=0.4, lr_batch_scaling=True)
        epochs = 500 if task == "classification" else 1000
        batch = 64 if batch_size is None else batch_size
    else:
        schedule = ScheduleSpec(base_lr=1e-4, wd_start=0.0)
        epochs = None
        batch = 32 if batch_size is None else batch_size

    if stage is Stage.BACKBONE_PRETRAIN:
        frozen, trainable = frozenset(), frozenset(ParamGroup)
    elif stage is Stage.TPP:
        frozen = frozenset({ParamGroup.BACKBONE})
        trainable = frozenset({ParamGroup.TARGET, ParamGroup.HEAD})
    else:
        frozen = frozenset({ParamGroup.BACKBONE})
        trainable = frozenset({ParamGroup.TARGET, ParamGroup.HEAD})

    plan = StagePlan(stage=stage, objective=objective, frozen_groups=frozen,
                     trainable_groups=trainable, schedule=schedule,
                     batch_size=batch, max_epochs=epochs)
    if objective in (Objective.CE, Objective.DICE_CE):
        plan = replace(plan, max_epochs=None, max_iterations=1000,
                       eval_each_epoch=True)
    return replace(plan, **overrides) if overrides else plan


# -- model bundle ---------------------------------------------------------


@dataclass
class ModelBundle:
    """Backbone + optional head + pretext scaffolding over one registry."""

    cfg: ViTConfig
    backbone: VisionTransformer
    registry: ParamRegistry
    seed: int
    head: object | None = None
    head_spec: HeadSpec | None = None
    peft_spec: PeftSpec | None = None
    mae: MaskedReconstruction | None = None
    dino: SelfDistillation | None = None

    def groups_present(self) -> set[ParamGroup]:
        return {p.group for p in self.registry}


def build_bundle(cfg: ViTConfig, seed: int, head_spec: HeadSpec | None = None,
                 peft_spec: PeftSpec | None = None) -> ModelBundle:
    """Deterministic construction: same (config, seed) gives identical params."""
    registry = ParamRegistry()
    backbone = VisionTransformer(cfg, registry, SeededRng(seed, "init/backbone"))
    bundle = ModelBundle(cfg=cfg, backbone=backbone, registry=registry, seed=seed)
    if peft_spec is not None:
        attach(backbone, peft_spec, SeededRng(seed, "init/peft"))
        bundle.peft_spec = peft_spec
    if head_spec is not None:
        bundle.head = build_head(cfg, head_spec, registry, SeededRng(seed, "init/head"))
        bundle.head_spec = head_spec
    return bundle


def ensure_mae(bundle: ModelBundle, cfg: MaeConfig, rng: SeededRng) -> MaskedReconstruction:
    if bundle.mae is None:
        bundle.mae = MaskedReconstruction(bundle.backbone, cfg, rng.child("init/mae"))
    return bundle.mae


def ensure_dino(bundle: ModelBundle, cfg: DinoConfig, rng: SeededRng) -> SelfDistillation:
    if bundle.dino is None:
        bundle.dino = SelfDistillation(bundle.backbone, cfg, rng.child("init/dino"))
    return bundle.dino


def init_target_params(bundle: ModelBundle, init: InitSpec, rng: SeededRng | None = None) -> None:
    """Apply an initialization mode to the Target group only."""
    if init.mode == "random":
        if bundle.backbone.peft_spec is not None:
            reinit_target_params(bundle.backbone,
                                 rng if rng is not None else SeededRng(bundle.seed, "init/peft"))
        return
    ckpt = Checkpoint.load(init.path)
    ckpt.apply_to_registry(bundle.registry, groups={ParamGroup.TARGET}, require_all=True)


# -- metric log -----------------------------------------------------------


class MetricLog:
    """JSON-lines log: one record per step, plus eval and event records."""

    def __init__(self):
        self.records: list[dict] = []

    def log(self, **fields) -> None:
        self.records.append(fields)

    def extend(self, records) -> None:
        self.records.extend(records)

    def losses(self) -> list[float]:
        return [r["loss"] for r in self.records if "loss" in r]

    def write_jsonl(self, path: str) -> None:
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        with open(path, "w") as fh:
            for rec in self.records:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")

    @classmethod
    def read_jsonl(cls, path: str) -> "MetricLog":
        log = cls()
        with open(path) as fh:
            for line in fh:
                line = line.strip()
                if line:
                    log.records.append(json.loads(line))
        return log


# -- evaluation --------------------------------------------------------------


def evaluate(bundle: ModelBundle, dataset: Dataset, batch_size: int = 64) -> EvalReport:
    """Deterministic full-dataset evaluation (no augmentation, no rng)."""
    if bundle.head is None:
        raise StateError("evaluate: bundle has no task head")
    seg = isinstance(bundle.head_spec, SegmentationSpec)
    scores, labels = [], []
    pred_masks, gt_masks = [], []
    with T.no_grad():
        for start in range(0, len(dataset), batch_size):
            batch = dataset.samples[start:start + batch_size]
            images = Tensor(np.stack([s.image for s in batch]))
            feats = bundle.backbone.forward_images(images)
            logits = bundle.head(feats)
            if seg:
                preds = np.argmax(logits.data, axis=1)
                for s, p in zip(batch, preds):
                    pred_masks.append(p)
                    gt_masks.append(s.mask)
            else:
                z = logits.data - logits.data.max(axis=-1, keepdims=True)
                e = np.exp(z)
                scores.append(e / e.sum(axis=-1, keepdims=True))
                labels.extend(s.label for s in batch)
    if seg:
        return segmentation_report(pred_masks, gt_masks)
    num_classes = bundle.head.spec.num_classes
    return classification_report(np.concatenate(scores), np.array(labels), num_classes)


# -- stage runner -------------------------------------------------------------


def _steps_per_epoch(n: int, batch_size: int) -> int:
    return math.ceil(n / batch_size)


def _batch_images(samples, indices, policy: str, rng: SeededRng, epoch: int) -> np.ndarray:
    if policy == "none":
        return np.stack([samples[i].image for i in indices])
    return np.stack([
        augment(rng.child(f"augment/epoch{epoch}/sample{i}"), samples[i].image, policy)
        for i in indices
    ])


def _dino_views(samples, indices, dino_cfg: DinoConfig, rng: SeededRng, epoch: int) -> list[Tensor]:
    views = []
    for v in range(dino_cfg.num_global_views + dino_cfg.num_local_views):
        policy = "dino_global" if v < dino_cfg.num_global_views else "dino_local"
        views.append(Tensor(np.stack([
            augment(rng.child(f"dino/epoch{epoch}/view{v}/sample{i}"),
                    samples[i].image, policy)
            for i in indices
        ])))
    return views


def _segmentation_loss(bundle: ModelBundle, images: Tensor, masks: np.ndarray) -> Tensor:
    logits = bundle.head(bundle.backbone.forward_images(images))  # [B,C,H,W]
    bsz, ncls, h, w = logits.shape
    pixel_logits = T.transpose(logits, (0, 2, 3, 1))
    ce = T.cross_entropy(pixel_logits, masks)
    probs = T.softmax(logits, 1.0, axis=1)
    fg = T.reshape(T.narrow(probs, 1, 1, 1), (bsz, h, w))
    return T.add(ce, T.dice_loss(fg, Tensor(masks.astype(np.float64))))


def run_stage(plan: StagePlan, bundle: ModelBundle, data: SplitDatasets | Dataset,
              rng: SeededRng, mae_cfg: MaeConfig | None = None,
              dino_cfg: DinoConfig | None = None) -> tuple[Checkpoint, MetricLog]:
    """Run one training stage under the plan's freezing and budget.

    Returns a full-parameter checkpoint and the step/eval log. Frozen
    groups are audited for bit-identity; a violation is a hard error. A
    non-finite loss aborts with step, lr and recent loss history.
    """
    train = data.train if isinstance(data, SplitDatasets) else data
    val = data.val if isinstance(data, SplitDatasets) else None
    if len(train) == 0:
        raise ArgumentError("run_stage: empty training dataset")

    # scaffolding first (it may add params), then apply the plan's freezing
    if plan.objective is Objective.MAE:
        mae = ensure_mae(bundle, mae_cfg or MaeConfig(), rng)
    elif plan.objective is Objective.DINO:
        dino = ensure_dino(bundle, dino_cfg or DinoConfig(), rng)

    present = bundle.groups_present()
    plan.validate(present)
    for group in present:
        bundle.registry.set_group_trainable(group, group in plan.trainable_groups)

    if plan.objective is Objective.DINO:
        dino.init_teacher()
    if plan.init is not None:
        init_target_params(bundle, plan.init, rng.child("init/peft"))

    frozen_before = {
        p.name: p.data.copy()
        for p in bundle.registry
        if p.group in plan.frozen_groups
    }

    optimizer = AdamW(bundle.registry.params(trainable=True), plan.optimizer)
    n = len(train)
    spe = _steps_per_epoch(n, plan.batch_size)
    total_steps = plan.max_iterations if plan.max_iterations is not None \
        else plan.max_epochs * spe
    base_lr = plan.schedule.effective_base_lr(plan.batch_size)

    log = MetricLog()
    log.log(event="config", stage=plan.stage.value, objective=plan.objective.value,
            batch_size=plan.batch_size, total_steps=total_steps,
            base_lr=base_lr, trainable_ratio=bundle.registry.trainable_ratio())

    order: np.ndarray | None = None
    loss_history: list[float] = []
    epoch = -1
    for step in range(total_steps):
        new_epoch = step // spe
        if new_epoch != epoch:
            if plan.eval_each_epoch and val is not None and epoch >= 0:
                report = evaluate(bundle, val, plan.batch_size)
                log.extend(report.to_records("val"))
            epoch = new_epoch
            order = rng.child(f"order/epoch{epoch}").permutation(n)
        pos = (step % spe) * plan.batch_size
        indices = order[pos:pos + plan.batch_size]

        if plan.objective is Objective.MAE:
            images = Tensor(_batch_images(train.samples, indices, plan.augment_policy, rng, epoch))
            loss = mae.loss(images, rng.child(f"mask/epoch{epoch}"),
                            sample_keys=[int(i) for i in indices])
        elif plan.objective is Objective.DINO:
            views = _dino_views(train.samples, indices, bundle.dino.cfg, rng, epoch)
            loss, teacher_out = dino.step_loss(views)
        elif plan.objective is Objective.CE:
            images = Tensor(_batch_images(train.samples, indices, plan.augment_policy, rng, epoch))
            labels = np.array([train.samples[i].label for i in indices], dtype=np.intp)
            logits = bundle.head(bundle.backbone.forward_images(images))
            loss = T.cross_entropy(logits, labels)
        elif plan.objective is Objective.DICE_CE:
            images = Tensor(_batch_images(train.samples, indices, plan.augment_policy, rng, epoch))
            masks = np.stack([train.samples[i].mask for i in indices])
            loss = _segmentation_loss(bundle, images, masks)
        else:
            raise ArgumentError(f"unknown objective {plan.objective}")

        loss_value = float(loss.data)
        if not np.isfinite(loss_value):
            T.clear_tape()
            raise TrainingDiverged(step, lr_at(plan.schedule, step, total_steps, spe, base_lr),
                                   loss_history)
        loss_history.append(loss_value)

        lr = lr_at(plan.schedule, step, total_steps, spe, base_lr)
        wd = wd_at(plan.schedule, step, total_steps)
        T.backward(loss)
        optimizer.step(lr, wd)
        optimizer.zero_grad()
        T.clear_tape()
        if plan.objective is Objective.DINO:
            dino.after_step(teacher_out)

        log.log(stage=plan.stage.value, step=step, epoch=epoch, lr=lr, wd=wd, loss=loss_value)

    if plan.eval_each_epoch and val is not None:
        report = evaluate(bundle, val, plan.batch_size)
        log.extend(report.to_records("val"))

    violations = [
        name for name, before in frozen_before.items()
        if not np.array_equal(before, bundle.registry.get(name).data)
    ]
    if violations:
        raise StateError(f"freeze violation: frozen params changed: {violations}")

    ckpt = Checkpoint.from_registry(
        bundle.registry, stage=plan.stage.value,
        config=_plan_snapshot(plan, base_lr, total_steps),
        rng_state={"seed": rng.seed, "path": rng.path},
    )
    return ckpt, log


def _plan_snapshot(plan: StagePlan, base_lr: float, total_steps: int) -> dict:
    return {
        "stage": plan.stage.value,
        "objective": plan.objective.value,
        "frozen_groups": sorted(g.value for g in plan.frozen_groups),
        "trainable_groups": sorted(g.value for g in plan.trainable_groups),
        "batch_size": plan.batch_size,
        "total_steps": total_steps,
        "base_lr": base_lr,
        "warmup_epochs": plan.schedule.warmup_epochs,
        "wd_start": plan.schedule.wd_start,
        "wd_end": plan.schedule.wd_end,
        "augment_policy": plan.augment_policy,
        "betas": [plan.optimizer.beta1, plan.optimizer.beta2],
        "eps": plan.optimizer.eps,
    }


# -- grid search ---------------------------------------------------------------


HIGHER_IS_BETTER = {"acc": True, "auc": True, "f1": True, "dice": True, "hd95": False}


def grid_search(base_plan: StagePlan, lr_grid: list[float], make_bundle,
                data: SplitDatasets, seed: int, primary_metric: str = "acc",
                rng_path: str = "stage/finetune") -> tuple[StagePlan, list[dict]]:
    """Train one run per learning rate; pick the best validation score.

    Every run uses the same derived rng stream, so re-running the selected
    plan with the same seed reproduces its recorded score. Diverged
    (non-finite loss) runs rank last instead of aborting the search.
    Returns (best plan, ranked table rows).
    """
    if not lr_grid:
        raise ArgumentError("grid_search: empty learning-rate grid")
    higher = HIGHER_IS_BETTER.get(primary_metric, True)
    rows = []
    for lr in lr_grid:
        plan = replace(base_plan, schedule=replace(base_plan.schedule, base_lr=lr))
        bundle = make_bundle()
        try:
            _, log = run_stage(plan, bundle, data, SeededRng(seed, rng_path))
            report = evaluate(bundle, data.val, plan.batch_size)
            rows.append({"lr": lr, "score": report.metrics[primary_metric], "status": "ok"})
        except TrainingDiverged as exc:
            rows.append({"lr": lr, "score": None, "status": f"diverged@{exc.step}"})
    worst = -np.inf if higher else np.inf
    rows.sort(key=lambda r: (r["score"] if r["score"] is not None else worst),
              reverse=higher)
    best_lr = rows[0]["lr"]
    if rows[0]["score"] is None:
        raise TrainingDiverged(0, best_lr, [])
    best = replace(base_plan, schedule=replace(base_plan.schedule, base_lr=best_lr))
    return best, rows
