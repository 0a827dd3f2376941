"""Elastic angular-margin softmax loss, embedding distillation loss and their sum.

Both losses are written with explicit backward formulas (no autograd inside)
and exposed twice: as numpy functions returning ``(loss, grads...)`` and as
``torch.autograd.Function`` subclasses used by the trainer.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .core import ContractError, MarginHeadConfig, make_rng

COS_CLAMP = 1e-7
NORM_TOL = 1e-4


@dataclass(frozen=True)
class LossBreakdown:
    l_elastic_arc: float
    l_kd: float
    lambda_effective: float
    l_total: float


def total_loss(l_arc: float, l_kd: float, lambda_effective: float) -> LossBreakdown:
    l_arc, l_kd, lam = float(l_arc), float(l_kd), float(lambda_effective)
    return LossBreakdown(l_arc, l_kd, lam, l_arc + lam * l_kd)


def draw_elastic_margin(config: MarginHeadConfig, rng: np.random.Generator,
                        batch_size: int) -> np.ndarray:
    """One Gaussian margin per sample, mean ``config.margin``, std ``config.sigma``."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    if config.sigma == 0:
        return np.full(batch_size, float(config.margin))
    return rng.normal(config.margin, config.sigma, size=batch_size)


def init_prototypes(num_classes: int, dim: int, seed: int) -> np.ndarray:
    """Isotropic Gaussian rows, L2-normalized, from the "prototypes" stream."""
    w = make_rng(seed, "prototypes").standard_normal((num_classes, dim))
    return w / np.linalg.norm(w, axis=1, keepdims=True)


def _check_unit_rows(x: torch.Tensor, what: str) -> None:
    dev = (x.norm(dim=1) - 1).abs().max().item() if x.numel() else 0.0
    if dev > NORM_TOL:
        raise ContractError(f"{what} rows must be L2-normalized (max deviation {dev:.2e})")


# ---------------------------------------------------------------------------
# elastic arc


def _elastic_arc_forward(emb, protos, labels, margins, scale):
    n = emb.shape[0]
    rows = torch.arange(n)
    raw_cos = emb @ protos.T
    cos = raw_cos.clamp(-1, 1)
    ct = cos[rows, labels]
    st = (1 - ct * ct).clamp_min(0).sqrt()
    cm, sm = torch.cos(margins), torch.sin(margins)
    # cos(theta + m) without arccos
    target = ct * cm - st * sm
    logits = scale * cos
    logits[rows, labels] = scale * target
    # per-sample loss = softplus(logsumexp_{j != y}(z_j - z_y)), exact when z_y dominates
    rel = logits - logits[rows, labels][:, None]
    rel[rows, labels] = -torch.inf
    rest = torch.logsumexp(rel, dim=1)
    loss = _softplus(rest).mean()
    return loss, (raw_cos, cos, ct, st, cm, sm, logits, rest)


def _softplus(x):
    return x.clamp_min(0) + torch.log1p(torch.exp(-x.abs()))


def _elastic_arc_backward(emb, protos, labels, scale, saved):
    raw_cos, cos, ct, st, cm, sm, logits, rest = saved
    n = emb.shape[0]
    rows = torch.arange(n)
    lse = logits[rows, labels] + _softplus(rest)
    d_logits = torch.exp(logits - lse[:, None])
    d_logits[rows, labels] = -torch.sigmoid(rest)  # p_y - 1
    d_logits /= n
    d_cos = scale * d_logits
    # d/dct of cos(theta+m) = cos m + sin m * ct / st; gradient is cut where
    # |cos| is within COS_CLAMP of 1 so the division stays bounded
    inside = (raw_cos > -1 + COS_CLAMP) & (raw_cos < 1 - COS_CLAMP)
    safe_st = torch.where(inside[rows, labels], st, torch.ones_like(st))
    d_target = cm + sm * ct / safe_st
    d_cos[rows, labels] = scale * d_logits[rows, labels] * d_target
    d_cos = d_cos * inside
    return d_cos @ protos, d_cos.T @ emb


class ElasticArcFunction(torch.autograd.Function):
    @staticmethod
    def forward(ctx, emb, protos, labels, margins, scale):
        loss, saved = _elastic_arc_forward(emb, protos, labels, margins, scale)
        ctx.save_for_backward(emb, protos, labels, *saved)
        ctx.scale = scale
        return loss

    @staticmethod
    def backward(ctx, grad_out):
        emb, protos, labels, *saved = ctx.saved_tensors
        g_emb, g_protos = _elastic_arc_backward(emb, protos, labels, ctx.scale, saved)
        return grad_out * g_emb, grad_out * g_protos, None, None, None


def elastic_arc(emb: torch.Tensor, protos: torch.Tensor, labels: torch.Tensor,
                margins: torch.Tensor, scale: float) -> torch.Tensor:
    """Differentiable loss on already-normalized embeddings and prototypes."""
    return ElasticArcFunction.apply(emb, protos, labels.long(), margins.to(emb.dtype), float(scale))


def elastic_arc_loss(embeddings, labels, head: "MarginHead | np.ndarray", margins,
                     scale: float | None = None):
    """Mean elastic-margin softmax loss with exact gradients.

    ``head`` is a :class:`MarginHead` (its current prototype matrix is used
    as-is) or a raw ``(c, D)`` prototype array together with ``scale``.
    Returns ``(loss, grad_embeddings, grad_prototypes)`` as numpy values.
    """
    if isinstance(head, MarginHead):
        protos = head.weight.detach().to(torch.float64)
        scale = head.config.scale if scale is None else scale
    else:
        protos = torch.as_tensor(np.asarray(head, dtype=np.float64))
    if scale is None:
        raise ValueError("scale is required with a raw prototype array")
    emb = torch.as_tensor(np.asarray(embeddings, dtype=np.float64))
    lab = torch.as_tensor(np.asarray(labels), dtype=torch.long)
    mar = torch.as_tensor(np.asarray(margins, dtype=np.float64))
    if emb.ndim != 2 or protos.ndim != 2 or emb.shape[1] != protos.shape[1]:
        raise ContractError(f"shape mismatch: embeddings {tuple(emb.shape)}, "
                            f"prototypes {tuple(protos.shape)}")
    if mar.shape != (emb.shape[0],) or lab.shape != (emb.shape[0],):
        raise ContractError("labels and margins need one entry per sample")
    if lab.numel() and (lab.min() < 0 or lab.max() >= protos.shape[0]):
        raise IndexError(f"label out of range [0, {protos.shape[0]})")
    _check_unit_rows(emb, "embedding")
    _check_unit_rows(protos, "prototype")
    loss, saved = _elastic_arc_forward(emb, protos, lab, mar, float(scale))
    g_emb, g_protos = _elastic_arc_backward(emb, protos, lab, float(scale), saved)
    return float(loss), g_emb.numpy(), g_protos.numpy()


class MarginHead(nn.Module):
    """Class-prototype matrix plus the elastic margin hyperparameters.

    Rows are stored unnormalized and renormalized on every forward pass.
    """

    def __init__(self, config: MarginHeadConfig, num_classes: int | None = None, seed: int = 0):
        super().__init__()
        c = num_classes if num_classes is not None else config.num_classes
        if c is None or c < 2:
            raise ContractError("margin head needs num_classes >= 2")
        self.config = config
        self.num_classes = int(c)
        w = init_prototypes(self.num_classes, config.embedding_dim, seed)
        self.weight = nn.Parameter(torch.as_tensor(w, dtype=torch.float32))

    def prototypes(self) -> torch.Tensor:
        return nn.functional.normalize(self.weight, dim=1)

    def forward(self, emb: torch.Tensor, labels: torch.Tensor, margins: torch.Tensor):
        return elastic_arc(emb, self.prototypes().to(emb.dtype), labels, margins, self.config.scale)


# ---------------------------------------------------------------------------
# embedding distillation


class KDFunction(torch.autograd.Function):
    @staticmethod
    def forward(ctx, student, teacher):
        diff = student - teacher
        ctx.save_for_backward(diff)
        return (diff * diff).mean()

    @staticmethod
    def backward(ctx, grad_out):
        (diff,) = ctx.saved_tensors
        return grad_out * 2.0 * diff / diff.numel(), None


def kd_mse(student: torch.Tensor, teacher: torch.Tensor) -> torch.Tensor:
    if student.shape != teacher.shape:
        raise ContractError(f"student {tuple(student.shape)} vs teacher {tuple(teacher.shape)}")
    return KDFunction.apply(student, teacher.detach())


def kd_embedding_loss(student, teacher):
    """Mean squared error between student and teacher embeddings.

    Averages over both the batch and the embedding dimension.  Returns
    ``(loss, grad_student)``; the teacher receives no gradient.
    """
    s = np.asarray(student, dtype=np.float64)
    t = np.asarray(teacher, dtype=np.float64)
    if s.shape != t.shape or s.ndim != 2:
        raise ContractError(f"student {s.shape} vs teacher {t.shape}")
    diff = s - t
    return float(np.mean(diff * diff)), 2.0 * diff / diff.size


__all__ = [
    "ElasticArcFunction", "KDFunction", "LossBreakdown", "MarginHead", "draw_elastic_margin",
    "elastic_arc", "elastic_arc_loss", "init_prototypes", "kd_embedding_loss", "kd_mse",
    "total_loss",
]
