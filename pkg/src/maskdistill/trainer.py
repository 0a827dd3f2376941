"""Teacher-student training loop with SGD, step schedules and checkpoints."""
from __future__ import annotations

import copy
import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .backbone import TeacherHandle, build_backbone, embed_images, images_to_tensor
from .core import (
    ConfigError, FaceImage, MarginHeadConfig, Paradigm, TrainingAborted, TrainingConfig,
    config_hash, dump_config, make_rng,
)
from .dataio import IdentityDataset, batch_indices
from .losses import LossBreakdown, MarginHead, draw_elastic_margin, kd_mse, total_loss
from .maskgen import MaskPolicy, MaskTemplate, maybe_mask

log = logging.getLogger(__name__)

LOG_COLUMNS = ("iteration", "l_arc", "l_kd", "lambda", "l_total", "lr")


def lr_schedule(iteration: int, config: TrainingConfig) -> float:
    """Step decay: divide by ``lr_decay_factor`` at each milestone reached."""
    passed = sum(1 for m in config.lr_milestones if iteration >= m)
    lr = config.lr_initial
    for _ in range(passed):
        lr /= config.lr_decay_factor
    return lr


def lambda_schedule(iteration: int, config: TrainingConfig) -> float:
    if config.paradigm is Paradigm.NO_KD:
        return 0.0
    if config.paradigm is Paradigm.LG:
        return config.lambda_base
    if config.lambda_switch_iteration is None:
        raise ConfigError("paradigm HG needs lambda_switch_iteration")
    return config.lambda_base if iteration < config.lambda_switch_iteration else config.lambda_high


@dataclass
class LogRecord:
    iteration: int
    losses: LossBreakdown
    lr: float

    def row(self) -> tuple:
        b = self.losses
        return (self.iteration, b.l_elastic_arc, b.l_kd, b.lambda_effective, b.l_total, self.lr)


@dataclass
class TrainState:
    config: TrainingConfig
    head_config: MarginHeadConfig
    student: nn.Module
    head: MarginHead
    optimizer: torch.optim.Optimizer
    iteration: int = 0
    log: list[LogRecord] = field(default_factory=list)

    @property
    def policy(self) -> MaskPolicy:
        return MaskPolicy(self.config.p_mask, MaskTemplate(jitter_px=self.config.mask_jitter_px))

    def loss_rows(self) -> list[tuple]:
        return [r.row() for r in self.log]


def init_state(config: TrainingConfig, head_config: MarginHeadConfig, num_classes: int,
               teacher: TeacherHandle | None = None) -> TrainState:
    if head_config.num_classes is not None and head_config.num_classes != num_classes:
        raise ConfigError(f"num_classes {head_config.num_classes} does not match the dataset "
                          f"({num_classes} identities)")
    spec = {"kind": "toy", "embedding_dim": head_config.embedding_dim,
            "width": config.backbone_width}
    if config.student_init == "teacher":
        if teacher is None:
            raise ConfigError("student_init = teacher needs a teacher")
        student = copy.deepcopy(teacher.backbone)
        for p in student.parameters():
            p.requires_grad_(True)
    else:
        student = build_backbone(spec, seed=config.seed)
    student.train()
    head = MarginHead(head_config, num_classes, seed=config.seed)
    opt = torch.optim.SGD(list(student.parameters()) + list(head.parameters()),
                          lr=config.lr_initial, momentum=config.momentum,
                          weight_decay=config.weight_decay)
    return TrainState(config, head_config, student, head, opt)


def train_step(state: TrainState, teacher: TeacherHandle | None,
               batch: tuple[list[FaceImage], np.ndarray], policy: MaskPolicy | None = None,
               rng: np.random.Generator | None = None) -> TrainState:
    """One optimizer step on ``batch``; mutates and returns ``state``.

    Mask and margin draws come from ``rng`` when given, otherwise from the
    per-iteration streams ``("mask", it)`` and ``("margin", it)`` of the
    configured seed, which keeps resumed runs bit-identical.
    """
    cfg = state.config
    it = state.iteration
    if it >= cfg.total_iterations:
        raise TrainingAborted(f"iteration {it} already reached total_iterations")
    policy = policy or state.policy
    mask_rng = rng if rng is not None else make_rng(cfg.seed, "mask", it)
    margin_rng = rng if rng is not None else make_rng(cfg.seed, "margin", it)
    images, labels = batch
    lr = lr_schedule(it, cfg)
    lam = lambda_schedule(it, cfg)
    for g in state.optimizer.param_groups:
        g["lr"] = lr

    student_images = [maybe_mask(im, policy, mask_rng)[0] for im in images]
    x_student = images_to_tensor(student_images)
    y = torch.as_tensor(np.asarray(labels), dtype=torch.long)
    margins = torch.as_tensor(draw_elastic_margin(state.head_config, margin_rng, len(images)),
                              dtype=torch.float32)

    emb = F.normalize(state.student(x_student), dim=1)
    l_arc = state.head(emb, y, margins)
    if teacher is not None:
        t_emb = teacher.embed_tensor(images_to_tensor(images))
        l_kd = kd_mse(emb, t_emb)
        loss = l_arc + lam * l_kd
    else:
        l_kd = torch.zeros(())
        loss = l_arc
    breakdown = total_loss(l_arc.item(), l_kd.item(), lam)
    if not math.isfinite(breakdown.l_total):
        raise TrainingAborted(f"non-finite loss at iteration {it}: {breakdown}",
                              _snapshot(state, breakdown, lr, labels, margins, emb))

    state.optimizer.zero_grad(set_to_none=True)
    loss.backward()
    state.optimizer.step()
    state.log.append(LogRecord(it, breakdown, lr))
    state.iteration = it + 1
    return state


def _snapshot(state, breakdown, lr, labels, margins, emb) -> dict:
    """Small summary of the failing step, for TrainingAborted."""
    finite = [bool(torch.isfinite(p).all()) for p in state.student.parameters()]
    with torch.no_grad():
        return {
            "iteration": state.iteration,
            "losses": breakdown,
            "lr": lr,
            "labels": np.asarray(labels).tolist(),
            "margins": margins.tolist(),
            "embedding_finite": bool(torch.isfinite(emb).all()),
            "parameters_finite": all(finite),
            "head_finite": bool(torch.isfinite(state.head.weight).all()),
            "recent_log": state.loss_rows()[-10:],
        }


# ---------------------------------------------------------------------------
# checkpoints and logs


def checkpoint_iterations(config: TrainingConfig) -> set[int]:
    every = config.checkpoint_every or max(1, config.total_iterations // 10)
    marks = set(range(every, config.total_iterations + 1, every))
    marks.update(config.lr_milestones)
    if config.paradigm is Paradigm.HG:
        marks.add(config.lambda_switch_iteration)
    marks.add(config.total_iterations)
    return {m for m in marks if 0 < m <= config.total_iterations}


def checkpoint_path(directory: Path, iteration: int) -> Path:
    return Path(directory) / f"ckpt_{iteration:07d}.pt"


def save_checkpoint(state: TrainState, directory: str | Path) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    path = checkpoint_path(directory, state.iteration)
    blob = {
        "iteration": state.iteration,
        "config_text": dump_config(state.config, state.head_config),
        "config_hash": config_hash(state.config, state.head_config),
        "backbone_spec": state.student.spec() if hasattr(state.student, "spec") else None,
        "student": state.student.state_dict(),
        "head": state.head.state_dict(),
        "num_classes": state.head.num_classes,
        "optimizer": state.optimizer.state_dict(),
        "log": state.loss_rows(),
    }
    tmp = path.with_suffix(".tmp")
    torch.save(blob, tmp)
    tmp.replace(path)
    return path


def latest_checkpoint(directory: str | Path) -> Path | None:
    found = sorted(Path(directory).glob("ckpt_*.pt")) if Path(directory).is_dir() else []
    return found[-1] if found else None


def load_checkpoint(path: str | Path, config: TrainingConfig, head_config: MarginHeadConfig,
                    teacher: TeacherHandle | None = None) -> TrainState:
    blob = torch.load(path, map_location="cpu", weights_only=False)
    if blob["config_hash"] != config_hash(config, head_config):
        raise ConfigError(f"{path}: checkpoint was written with a different config")
    state = init_state(config, head_config, blob["num_classes"], teacher)
    state.student.load_state_dict(blob["student"])
    state.head.load_state_dict(blob["head"])
    state.optimizer.load_state_dict(blob["optimizer"])
    state.iteration = blob["iteration"]
    state.log = [LogRecord(int(r[0]), LossBreakdown(r[1], r[2], r[3], r[4]), r[5])
                 for r in blob["log"]]
    return state


def write_loss_log(path: str | Path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(LOG_COLUMNS)
        w.writerows(_fmt_row(r) for r in rows)


def _fmt_row(row) -> list[str]:
    return [str(row[0])] + [repr(float(v)) for v in row[1:]]


def read_loss_log(path: str | Path) -> list[tuple]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if tuple(header) != LOG_COLUMNS:
            raise ValueError(f"{path}: unexpected header {header}")
        return [(int(r[0]),) + tuple(float(v) for v in r[1:]) for r in reader]


# ---------------------------------------------------------------------------
# runs


def train(config: TrainingConfig, head_config: MarginHeadConfig, dataset: IdentityDataset,
          teacher: TeacherHandle | None, checkpoint_dir: str | Path | None = None,
          resume: bool = True, stop_at: int | None = None) -> TrainState:
    """Run the configured number of iterations (or up to ``stop_at``).

    Checkpoints go to ``checkpoint_dir`` at the configured cadence and at every
    learning-rate or lambda milestone; ``loss_log.csv`` there mirrors the
    in-memory log.  With ``resume`` an existing checkpoint for the same config
    is picked up and training continues from it.
    """
    lambda_schedule(0, config)
    if config.paradigm is not Paradigm.NO_KD and teacher is None:
        raise ConfigError(f"paradigm {config.paradigm.value} needs a teacher")
    torch.set_num_threads(config.num_threads)
    ckpt_dir = Path(checkpoint_dir) if checkpoint_dir is not None else None
    state = None
    if ckpt_dir is not None and resume:
        last = latest_checkpoint(ckpt_dir)
        if last is not None:
            state = load_checkpoint(last, config, head_config, teacher)
            log.info("resuming from %s at iteration %d", last, state.iteration)
    if state is None:
        state = init_state(config, head_config, dataset.num_identities, teacher)
    if ckpt_dir is not None:
        ckpt_dir.mkdir(parents=True, exist_ok=True)
        (ckpt_dir / "config.cfg").write_text(dump_config(config, head_config))
        write_loss_log(ckpt_dir / "loss_log.csv", state.loss_rows())
    marks = checkpoint_iterations(config)
    end = config.total_iterations if stop_at is None else min(stop_at, config.total_iterations)
    policy = state.policy
    log_fh = open(ckpt_dir / "loss_log.csv", "a", newline="") if ckpt_dir is not None else None
    try:
        writer = csv.writer(log_fh) if log_fh else None
        while state.iteration < end:
            idx = batch_indices(len(dataset), config.batch_size, config.seed, state.iteration)
            batch = (dataset.images(idx), dataset.labels[idx])
            train_step(state, teacher, batch, policy)
            if writer is not None:
                writer.writerow(_fmt_row(state.log[-1].row()))
            if ckpt_dir is not None and state.iteration in marks:
                log_fh.flush()
                save_checkpoint(state, ckpt_dir)
            if state.iteration % 100 == 0:
                b = state.log[-1].losses
                log.info("it %d arc %.4f kd %.6f lambda %g total %.4f", state.iteration,
                         b.l_elastic_arc, b.l_kd, b.lambda_effective, b.l_total)
    finally:
        if log_fh:
            log_fh.close()
    return state


def train_teacher(config: TrainingConfig, head_config: MarginHeadConfig,
                  dataset: IdentityDataset, checkpoint_dir: str | Path | None = None,
                  ) -> TeacherHandle:
    """Plain margin-softmax training on unmasked images, returned frozen."""
    if config.paradigm is not Paradigm.NO_KD:
        raise ConfigError("teacher training needs paradigm NO_KD")
    if config.p_mask != 0:
        raise ConfigError("teacher training needs p_mask = 0 (unmasked data)")
    state = train(config, head_config, dataset, None, checkpoint_dir)
    if checkpoint_dir is not None:
        TeacherHandle(copy.deepcopy(state.student)).export(Path(checkpoint_dir) / "teacher.pt")
    return TeacherHandle(state.student)


@torch.no_grad()
def training_accuracy(backbone: nn.Module, head: MarginHead, dataset: IdentityDataset) -> float:
    """Top-1 accuracy of nearest-prototype classification on ``dataset``."""
    emb = torch.from_numpy(embed_images(backbone, dataset.images(range(len(dataset)))))
    pred = (emb @ head.prototypes().double().T).argmax(dim=1).numpy()
    return float(np.mean(pred == dataset.labels))


__all__ = [
    "LOG_COLUMNS", "LogRecord", "TrainState", "checkpoint_iterations", "init_state",
    "lambda_schedule", "latest_checkpoint", "load_checkpoint", "lr_schedule", "read_loss_log",
    "save_checkpoint", "train", "train_step", "train_teacher", "training_accuracy",
    "write_loss_log",
]
