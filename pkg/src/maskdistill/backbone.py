"""Embedding networks and the frozen-teacher wrapper.

Any ``nn.Module`` mapping a float tensor ``(N, 3, 112, 112)`` to features
``(N, D)`` can serve as a backbone.  :class:`ToyBackbone` is the small
default used for desk-scale runs.
"""
from __future__ import annotations

import hashlib
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .core import ContractError, FaceImage, derive_seed


class ToyBackbone(nn.Module):
    """Four stride-2 conv stages (GroupNorm + ReLU) and a linear embedding layer.

    GroupNorm keeps the forward pass independent of batch composition, so
    training and inference modes compute the same function.
    """

    def __init__(self, embedding_dim: int = 512, width: int = 16):
        super().__init__()
        self.embedding_dim = embedding_dim
        self.width = width
        chans = [3, width, 2 * width, 4 * width, 8 * width]
        layers: list[nn.Module] = [nn.AvgPool2d(2)]  # 112 -> 56
        for cin, cout in zip(chans, chans[1:]):
            layers += [nn.Conv2d(cin, cout, 3, stride=2, padding=1, bias=False),
                       nn.GroupNorm(4, cout), nn.ReLU(inplace=True)]
        self.features = nn.Sequential(*layers)  # 56 -> 28 -> 14 -> 7 -> 4
        self.fc = nn.Linear(8 * width * 4 * 4, embedding_dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc(self.features(x).flatten(1))

    def spec(self) -> dict:
        return {"kind": "toy", "embedding_dim": self.embedding_dim, "width": self.width}


def build_backbone(spec: dict, seed: int | None = None) -> nn.Module:
    if spec.get("kind", "toy") != "toy":
        raise ContractError(f"unknown backbone kind {spec.get('kind')!r}")
    if seed is None:
        return ToyBackbone(spec["embedding_dim"], spec["width"])
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(derive_seed(seed, "backbone-init"))
        return ToyBackbone(spec["embedding_dim"], spec["width"])


def images_to_tensor(images: Sequence[FaceImage]) -> torch.Tensor:
    arr = np.stack([im.pixels for im in images]).astype(np.float32)
    return torch.from_numpy(arr).permute(0, 3, 1, 2).contiguous()


def parameter_checksum(module: nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


@torch.no_grad()
def embed_images(backbone: nn.Module, images: Sequence[FaceImage],
                 batch_size: int = 128) -> np.ndarray:
    """L2-normalized embeddings, computed in inference mode."""
    was_training = backbone.training
    backbone.eval()
    out = []
    for i in range(0, len(images), batch_size):
        feats = backbone(images_to_tensor(images[i:i + batch_size]))
        out.append(F.normalize(feats.double(), dim=1).numpy())
    backbone.train(was_training)
    return np.concatenate(out) if out else np.zeros((0, 0))


class TeacherHandle:
    """Frozen backbone producing reference embeddings."""

    def __init__(self, backbone: nn.Module):
        backbone.eval()
        for p in backbone.parameters():
            p.requires_grad_(False)
        self.backbone = backbone
        self._checksum = parameter_checksum(backbone)

    @property
    def checksum(self) -> str:
        return self._checksum

    def verify_frozen(self) -> bool:
        return parameter_checksum(self.backbone) == self._checksum

    @torch.no_grad()
    def embed_tensor(self, x: torch.Tensor) -> torch.Tensor:
        return F.normalize(self.backbone(x), dim=1)

    def embed(self, images: Sequence[FaceImage]) -> np.ndarray:
        return embed_images(self.backbone, images)

    def export(self, path: str | Path) -> None:
        spec = self.backbone.spec() if hasattr(self.backbone, "spec") else {"kind": "external"}
        torch.save({"backbone_spec": spec, "state_dict": self.backbone.state_dict()}, path)


def load_teacher(path: str | Path, backbone: nn.Module | None = None) -> TeacherHandle:
    """Load exported teacher weights.

    Pass ``backbone`` to import weights for an architecture other than the toy
    network; the file may then be a bare ``state_dict``.
    """
    blob = torch.load(path, map_location="cpu", weights_only=False)
    state = blob.get("state_dict", blob) if isinstance(blob, dict) else blob
    if backbone is None:
        if not isinstance(blob, dict) or "backbone_spec" not in blob:
            raise ContractError(f"{path}: no backbone spec; pass the target module")
        backbone = build_backbone(blob["backbone_spec"])
    backbone.load_state_dict(state)
    return TeacherHandle(backbone)


def load_model(path: str | Path) -> TeacherHandle:
    """Frozen embedder from an exported teacher file or a training checkpoint."""
    blob = torch.load(path, map_location="cpu", weights_only=False)
    if isinstance(blob, dict) and "student" in blob:
        if blob.get("backbone_spec") is None:
            raise ContractError(f"{path}: checkpoint has no backbone spec")
        backbone = build_backbone(blob["backbone_spec"])
        backbone.load_state_dict(blob["student"])
        return TeacherHandle(backbone)
    return load_teacher(path)


__all__ = ["TeacherHandle", "ToyBackbone", "build_backbone", "embed_images", "images_to_tensor",
           "load_model", "load_teacher", "parameter_checksum"]
