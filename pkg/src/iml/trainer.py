"""Episodic training loops: base training, incremental updates, paragon.

All randomness is derived from the config seed through named sub-streams
(episode sampling, anchor subsets, exemplar episodes, validation), so a
run is a pure function of its config and inputs.  Training is plain Adam
with a reduce-on-plateau learning-rate schedule driven by validation
episode accuracy.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .anchorstore import extract_anchors
from .autodiff import Array, Tape
from .data import Dataset, EpisodeSpec, ExemplarSet, sample_anchor_subset, sample_episode
from .losses import KL_ORDERS, AlignAux, MethodKind, incremental_objective, meta_xent_loss
from .model import (
    BackboneConfig,
    ModelSnapshot,
    ParamStore,
    SnapshotMeta,
    freeze_snapshot,
    init_backbone,
    merge_anchor_sets,
    score_episode,
)

# Sub-stream tags hashed into every rng seed.
_EPISODE_STREAM = 101
_ANCHOR_STREAM = 102
_EXEMPLAR_STREAM = 103
_VAL_STREAM = 104


class TrainingDivergenceError(RuntimeError):
    """Loss or gradients stopped being finite."""


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    tasks_per_epoch: int = 100
    episode: EpisodeSpec = field(default_factory=lambda: EpisodeSpec(5, 5, 15))
    lam: float = 1.0
    lam_old: float | None = None
    lam_new: float | None = None
    temperature: float = 2.0
    lr: float = 1e-3
    lr_decay: float = 0.5
    patience: int = 3
    seed: int = 0
    val_episodes: int = 50
    exemplars_per_class: int = 15
    anchors_per_step: int | None = None
    kl_order: str = "student_first"
    backbone: BackboneConfig | None = None
    log_path: str | None = None

    def __post_init__(self):
        if self.epochs < 1 or self.tasks_per_epoch < 1:
            raise ValueError("epochs and tasks_per_epoch must be at least 1")
        if self.lam < 0:
            raise ValueError(f"lambda must be non-negative, got {self.lam}")
        if self.temperature <= 0:
            raise ValueError(f"temperature must be positive, got {self.temperature}")
        if self.lr <= 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if not 0 < self.lr_decay <= 1:
            raise ValueError(f"lr_decay must be in (0, 1], got {self.lr_decay}")
        if self.patience < 0:
            raise ValueError("patience must be non-negative")
        if self.val_episodes < 1:
            raise ValueError("val_episodes must be at least 1")
        if self.kl_order not in KL_ORDERS:
            raise ValueError(f"kl_order must be one of {KL_ORDERS}, got {self.kl_order!r}")


@dataclass
class OptimState:
    """Adam moments plus the plateau-schedule bookkeeping."""

    m: list[Array]
    v: list[Array]
    step: int = 0
    lr: float = 1e-3
    best: float = -math.inf
    plateau: int = 0
    decays: int = 0


def init_optim(params: ParamStore, cfg: TrainConfig) -> OptimState:
    arrays = params.arrays()
    return OptimState(
        m=[np.zeros_like(a) for a in arrays],
        v=[np.zeros_like(a) for a in arrays],
        lr=cfg.lr,
    )


def adam_step(
    params: ParamStore,
    grads: list[Array],
    state: OptimState,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """One bias-corrected Adam update, in place on the live parameters."""
    arrays = params.arrays()
    if len(grads) != len(arrays):
        raise ValueError(f"got {len(grads)} gradients for {len(arrays)} parameter arrays")
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise TrainingDivergenceError(
                f"non-finite gradient at optimizer step {state.step + 1}"
            )
    state.step += 1
    c1 = 1.0 - beta1 ** state.step
    c2 = 1.0 - beta2 ** state.step
    for a, g, m, v in zip(arrays, grads, state.m, state.v):
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        a -= state.lr * (m / c1) / (np.sqrt(v / c2) + eps)


def lr_schedule_update(state: OptimState, val_metric: float, cfg: TrainConfig) -> None:
    """Decay lr once the metric has failed to improve for more than `patience` epochs."""
    if val_metric > state.best:
        state.best = val_metric
        state.plateau = 0
        return
    state.plateau += 1
    if state.plateau > cfg.patience:
        state.lr *= cfg.lr_decay
        state.decays += 1
        state.plateau = 0


class _EpochLog:
    """CSV lines `epoch,split,loss,acc,lr`; overwrites any previous log."""

    def __init__(self, path: str | None):
        self.path = Path(path) if path else None
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text("epoch,split,loss,acc,lr\n")

    def row(self, epoch: int, split: str, loss: float, acc: float, lr: float) -> None:
        if self.path:
            with self.path.open("a") as f:
                f.write(f"{epoch},{split},{loss:.6f},{acc:.4f},{lr:.8g}\n")


def _check_finite(value: float, epoch: int, task: int) -> None:
    if not math.isfinite(value):
        raise TrainingDivergenceError(
            f"non-finite loss {value} at epoch {epoch}, task {task}"
        )


def _validate(
    params: ParamStore, val_ds: Dataset, cfg: TrainConfig, round_index: int, epoch: int
) -> tuple[float, float]:
    rng = np.random.default_rng([cfg.seed, _VAL_STREAM, round_index, epoch])
    losses, accs = [], []
    for _ in range(cfg.val_episodes):
        ep = sample_episode(val_ds, cfg.episode, rng)
        losses.append(float(meta_xent_loss(params, ep, cfg.temperature)))
        accs.append(score_episode(params, ep))
    return float(np.mean(losses)), float(np.mean(accs))


def _exemplar_episode_spec(cfg: TrainConfig, exemplar_ds: Dataset) -> EpisodeSpec:
    """Shrink the episode spec so it fits inside the retained exemplar rows."""
    avail = exemplar_ds.min_class_count()
    if avail < 2:
        raise ValueError("exemplar episodes need at least 2 rows per class")
    ways = min(cfg.episode.ways, exemplar_ds.n_classes)
    shots = max(1, min(cfg.episode.shots, avail - 1))
    queries = max(1, min(cfg.episode.queries, avail - shots))
    return EpisodeSpec(ways, shots, queries)


def train_base(
    train_ds: Dataset,
    val_ds: Dataset,
    cfg: TrainConfig,
    method_tag: str = "base",
) -> ModelSnapshot:
    """Meta-train a fresh backbone on episodic tasks, then freeze it with anchors."""
    backbone = cfg.backbone or BackboneConfig(train_ds.dim)
    if backbone.input_dim != train_ds.dim:
        raise ValueError(
            f"backbone expects {backbone.input_dim}-dim inputs, data is {train_ds.dim}-dim"
        )
    params = init_backbone(backbone, cfg.seed)
    state = init_optim(params, cfg)
    epi_rng = np.random.default_rng([cfg.seed, _EPISODE_STREAM, 0])
    log = _EpochLog(cfg.log_path)
    for epoch in range(cfg.epochs):
        ep_losses, ep_accs = [], []
        for task in range(cfg.tasks_per_epoch):
            ep = sample_episode(train_ds, cfg.episode, epi_rng)
            tape = Tape()
            bound = params.bind(tape)
            loss = meta_xent_loss(bound, ep, cfg.temperature)
            _check_finite(float(loss), epoch, task)
            grads = tape.backward(loss, bound.ids)
            adam_step(params, [grads[i] for i in bound.ids], state)
            ep_losses.append(float(loss))
            ep_accs.append(score_episode(params, ep))
        log.row(epoch, "train", float(np.mean(ep_losses)), float(np.mean(ep_accs)), state.lr)
        val_loss, val_acc = _validate(params, val_ds, cfg, 0, epoch)
        log.row(epoch, "val", val_loss, val_acc, state.lr)
        lr_schedule_update(state, val_acc, cfg)
    anchors = extract_anchors(params, train_ds, round_tag=0)
    meta = SnapshotMeta(seed=cfg.seed, round_index=0, method=method_tag)
    return freeze_snapshot(backbone, params, anchors, meta)


def train_paragon(union_ds: Dataset, val_ds: Dataset, cfg: TrainConfig) -> ModelSnapshot:
    """Same recipe as base training, run on the union of old and new data."""
    return train_base(union_ds, val_ds, cfg, method_tag=MethodKind.PAR.value)


def train_incremental(
    old: ModelSnapshot,
    new_ds: Dataset,
    val_ds: Dataset,
    method: MethodKind | str,
    cfg: TrainConfig,
    exemplars: ExemplarSet | None = None,
) -> ModelSnapshot:
    """Continue from a frozen teacher on new-class data with one method's objective.

    The returned snapshot carries the union of the teacher's anchors
    (bit-for-bit) and anchors freshly extracted from the new data.
    """
    method = MethodKind(method)
    if method in (MethodKind.NU, MethodKind.PAR):
        raise ValueError(
            f"{method.value} is not an incremental update: nu keeps the teacher, "
            "par retrains from scratch on the union"
        )
    if method is MethodKind.EIML and exemplars is None:
        raise ValueError("eiml needs reserved exemplars from the old data")
    if old.config.input_dim != new_ds.dim:
        raise ValueError(
            f"teacher expects {old.config.input_dim}-dim inputs, data is {new_ds.dim}-dim"
        )
    overlap = set(old.anchors.class_ids) & set(new_ds.classes)
    if overlap:
        raise ValueError(f"new data reuses already-anchored classes {sorted(overlap)}")

    round_index = old.meta.round_index + 1
    params = old.params.copy()
    state = init_optim(params, cfg)
    epi_rng = np.random.default_rng([cfg.seed, _EPISODE_STREAM, round_index])
    anchor_rng = np.random.default_rng([cfg.seed, _ANCHOR_STREAM, round_index])
    ex_rng = np.random.default_rng([cfg.seed, _EXEMPLAR_STREAM, round_index])

    lam_old = cfg.lam if cfg.lam_old is None else cfg.lam_old
    lam_new = cfg.lam if cfg.lam_new is None else cfg.lam_new
    need_align = (
        (lam_old != 0.0 or lam_new != 0.0)
        if method is MethodKind.EIML
        else cfg.lam != 0.0
    )
    exemplar_ds = exemplar_spec = None
    if method is MethodKind.EIML and need_align:
        exemplar_ds = exemplars.as_dataset()
        exemplar_spec = _exemplar_episode_spec(cfg, exemplar_ds)

    log = _EpochLog(cfg.log_path)
    for epoch in range(cfg.epochs):
        ep_losses, ep_accs = [], []
        for task in range(cfg.tasks_per_epoch):
            ep = sample_episode(new_ds, cfg.episode, epi_rng)
            aux = AlignAux(batch=ep.all_inputs())
            if need_align and method is MethodKind.IDA:
                k = cfg.anchors_per_step or min(cfg.episode.ways, len(old.anchors))
                aux = AlignAux(
                    anchors=sample_anchor_subset(old.anchors, k, anchor_rng),
                    batch=aux.batch,
                )
            elif need_align and method is MethodKind.EIML:
                aux = AlignAux(
                    batch=aux.batch,
                    exemplar_episode=sample_episode(exemplar_ds, exemplar_spec, ex_rng),
                )
            tape = Tape()
            bound = params.bind(tape)
            breakdown = incremental_objective(
                method, old, bound, ep, aux,
                cfg.lam, cfg.temperature, cfg.kl_order, cfg.lam_old, cfg.lam_new,
            )
            _check_finite(float(breakdown.total), epoch, task)
            grads = tape.backward(breakdown.total, bound.ids)
            adam_step(params, [grads[i] for i in bound.ids], state)
            ep_losses.append(float(breakdown.total))
            ep_accs.append(score_episode(params, ep))
        log.row(epoch, "train", float(np.mean(ep_losses)), float(np.mean(ep_accs)), state.lr)
        val_loss, val_acc = _validate(params, val_ds, cfg, round_index, epoch)
        log.row(epoch, "val", val_loss, val_acc, state.lr)
        lr_schedule_update(state, val_acc, cfg)

    new_anchors = extract_anchors(params, new_ds, round_tag=round_index)
    anchors = merge_anchor_sets(old.anchors, new_anchors)
    meta = SnapshotMeta(seed=cfg.seed, round_index=round_index, method=method.value)
    return freeze_snapshot(old.config, params, anchors, meta)


def run_rounds(
    base: ModelSnapshot,
    round_datasets: list[Dataset],
    method: MethodKind | str,
    cfg: TrainConfig,
    round_vals: list[Dataset] | None = None,
    round_exemplars: list[ExemplarSet] | None = None,
) -> list[ModelSnapshot]:
    """Chain incremental updates; each round's snapshot teaches the next.

    Without explicit validation sets a round validates on its own data
    (fresh episodes, metric only steers the lr schedule).
    """
    if not round_datasets:
        raise ValueError("need at least one round dataset")
    if round_vals is not None and len(round_vals) != len(round_datasets):
        raise ValueError("need one validation dataset per round")
    if round_exemplars is not None and len(round_exemplars) != len(round_datasets):
        raise ValueError("need one exemplar set per round")
    snapshots: list[ModelSnapshot] = []
    teacher = base
    for i, ds in enumerate(round_datasets):
        val = round_vals[i] if round_vals is not None else ds
        ex = round_exemplars[i] if round_exemplars is not None else None
        snap = train_incremental(teacher, ds, val, method, cfg, exemplars=ex)
        snapshots.append(snap)
        teacher = snap
    return snapshots
