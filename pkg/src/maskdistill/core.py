"""Shared types, configuration handling and seeded random streams."""
from __future__ import annotations

import dataclasses
import enum
import hashlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

IMAGE_SIZE = 112
NUM_LANDMARKS = 5
LANDMARK_NAMES = ("left_eye", "right_eye", "nose", "mouth_left", "mouth_right")


class MaskDistillError(Exception):
    """Base class for every error raised by this package."""

    category = "error"


class ConfigError(MaskDistillError, ValueError):
    category = "config"


class ValidationError(ConfigError):
    category = "validation"


class ContractError(MaskDistillError, ValueError):
    category = "contract"


class GeometryError(MaskDistillError, ValueError):
    category = "geometry"


class IngestionError(MaskDistillError, ValueError):
    category = "ingestion"


class ProtocolError(MaskDistillError, ValueError):
    category = "protocol"


class MetricError(MaskDistillError, ValueError):
    category = "metric"


class ScoringError(MaskDistillError, RuntimeError):
    category = "scoring"


class TrainingAborted(MaskDistillError, RuntimeError):
    """Training stopped; ``snapshot`` holds whatever state helps diagnose why."""

    category = "training"

    def __init__(self, message: str, snapshot: dict | None = None):
        super().__init__(message)
        self.snapshot = snapshot or {}


class Paradigm(str, enum.Enum):
    HG = "HG"  # lambda raised late in training
    LG = "LG"  # constant lambda
    NO_KD = "NO_KD"


# ---------------------------------------------------------------------------
# random streams


def _label_key(label: str) -> int:
    return int.from_bytes(hashlib.sha256(label.encode("utf-8")).digest()[:8], "little")


def make_rng(seed: int, stream_label: str, *indices: int) -> np.random.Generator:
    """Return a generator for the stream ``(seed, stream_label, *indices)``.

    The same arguments always give the same draw sequence; changing any of
    them gives a statistically independent stream.  Extra ``indices`` derive
    per-worker or per-iteration sub-streams.
    """
    entropy = int(seed) % (1 << 64)
    key = (_label_key(stream_label),) + tuple(int(i) for i in indices)
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy, spawn_key=key)))


def derive_seed(seed: int, stream_label: str, *indices: int) -> int:
    """A 63-bit integer seed for libraries that want a plain integer."""
    return int(make_rng(seed, stream_label, *indices).integers(0, 2**63 - 1))


# ---------------------------------------------------------------------------
# domain types


def _frozen_array(a, dtype) -> np.ndarray:
    arr = np.array(a, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class FaceImage:
    """An aligned 112x112 RGB crop with pixels in [-1, 1] and 5 landmarks.

    ``pixels`` is (H, W, 3) float32; ``landmarks`` is (5, 2) as (x, y) in
    pixel coordinates, ordered left eye, right eye, nose tip, left and right
    mouth corner.
    """

    pixels: np.ndarray
    landmarks: np.ndarray
    source_id: str = ""
    identity_label: int | None = None

    def __post_init__(self):
        px = _frozen_array(self.pixels, np.float32)
        lm = _frozen_array(self.landmarks, np.float64)
        if px.shape != (IMAGE_SIZE, IMAGE_SIZE, 3):
            raise ContractError(f"pixels must have shape (112, 112, 3), got {px.shape}")
        if not np.all(np.isfinite(px)) or px.min() < -1.0 or px.max() > 1.0:
            raise ContractError(f"{self.source_id}: pixel values outside [-1, 1]")
        validate_landmarks(lm, self.source_id)
        if self.identity_label is not None and self.identity_label < 0:
            raise ContractError(f"{self.source_id}: negative identity label")
        object.__setattr__(self, "pixels", px)
        object.__setattr__(self, "landmarks", lm)

    def with_pixels(self, pixels: np.ndarray) -> "FaceImage":
        return FaceImage(pixels, self.landmarks, self.source_id, self.identity_label)


def validate_landmarks(landmarks: np.ndarray, where: str = "") -> None:
    lm = np.asarray(landmarks, dtype=np.float64)
    if lm.shape != (NUM_LANDMARKS, 2):
        raise ContractError(f"{where}: expected 5 landmarks of (x, y), got shape {lm.shape}")
    if not np.all(np.isfinite(lm)) or lm.min() < 0 or lm.max() >= IMAGE_SIZE:
        raise ContractError(f"{where}: landmark outside the 112x112 image")
    nose_y = lm[2, 1]
    if not (nose_y > lm[0, 1] and nose_y > lm[1, 1]):
        raise ContractError(f"{where}: nose tip must lie below both eyes")


@dataclass(frozen=True, eq=False)
class Embedding:
    """A feature vector; use :func:`normalize` to get the unit-norm form."""

    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "values", _frozen_array(self.values, np.float64).reshape(-1))

    @property
    def dim(self) -> int:
        return int(self.values.shape[0])

    def normalized(self) -> "Embedding":
        return Embedding(normalize(self.values))


def normalize(x, axis: int = -1, eps: float = 1e-12) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    norm = np.linalg.norm(x, axis=axis, keepdims=True)
    return x / np.maximum(norm, eps)


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class TrainingConfig:
    batch_size: int = 512
    total_iterations: int = 295_000
    lr_initial: float = 0.1
    lr_milestones: tuple[int, ...] = (80_000, 140_000, 210_000)
    lr_decay_factor: float = 10.0
    momentum: float = 0.9
    weight_decay: float = 5e-4
    lambda_base: float = 100.0
    lambda_high: float = 3000.0
    lambda_switch_iteration: int | None = 227_000
    p_mask: float = 0.5
    paradigm: Paradigm = Paradigm.HG
    seed: int = 0
    # artifact-level knobs
    mask_jitter_px: float = 2.0
    checkpoint_every: int | None = None  # None: every 10% of the run
    student_init: str = "random"  # or "teacher"
    backbone_width: int = 16
    num_threads: int = 1

    def __post_init__(self):
        object.__setattr__(self, "paradigm", Paradigm(self.paradigm))
        object.__setattr__(self, "lr_milestones", tuple(int(v) for v in self.lr_milestones))
        _check(self.batch_size > 0, "batch_size", "must be positive")
        _check(self.total_iterations > 0, "total_iterations", "must be positive")
        _check(self.lr_initial > 0, "lr_initial", "must be positive")
        ms = self.lr_milestones
        _check(all(a < b for a, b in zip(ms, ms[1:])), "lr_milestones", "not ascending")
        _check(all(0 <= v < self.total_iterations for v in ms), "lr_milestones",
               "must lie in [0, total_iterations)")
        _check(self.lr_decay_factor > 0, "lr_decay_factor", "must be positive")
        _check(0 <= self.momentum < 1, "momentum", "must lie in [0, 1)")
        _check(self.weight_decay >= 0, "weight_decay", "must be non-negative")
        _check(self.lambda_base >= 0, "lambda_base", "must be non-negative")
        _check(self.lambda_high >= 0, "lambda_high", "must be non-negative")
        sw = self.lambda_switch_iteration
        if self.paradigm is Paradigm.HG:
            _check(sw is not None, "lambda_switch_iteration", "required for paradigm HG")
            _check(0 < sw < self.total_iterations, "lambda_switch_iteration",
                   "must lie in (0, total_iterations)")
        else:
            _check(sw is None, "lambda_switch_iteration",
                   f"only meaningful for paradigm HG, not {self.paradigm.value}")
        _check(0 <= self.p_mask <= 1, "p_mask", "must lie in [0, 1]")
        _check(self.mask_jitter_px >= 0, "mask_jitter_px", "must be non-negative")
        _check(self.checkpoint_every is None or self.checkpoint_every > 0, "checkpoint_every",
               "must be positive")
        _check(self.student_init in ("random", "teacher"), "student_init",
               "must be 'random' or 'teacher'")
        _check(self.backbone_width > 0, "backbone_width", "must be positive")
        _check(self.num_threads > 0, "num_threads", "must be positive")


@dataclass(frozen=True)
class MarginHeadConfig:
    scale: float = 64.0
    margin: float = 0.5
    sigma: float = 0.5
    num_classes: int | None = None  # None: taken from the training dataset
    embedding_dim: int = 512

    def __post_init__(self):
        _check(self.scale > 0, "scale", "must be positive")
        _check(self.sigma >= 0, "sigma", "must be non-negative")
        _check(self.num_classes is None or self.num_classes >= 2, "num_classes", "must be >= 2")
        _check(self.embedding_dim > 0, "embedding_dim", "must be positive")


def _check(ok: bool, name: str, msg: str) -> None:
    if not ok:
        raise ValidationError(f"{name} {msg}")


def _parse_bool(text: str) -> bool:
    low = text.lower()
    if low in ("true", "yes", "1"):
        return True
    if low in ("false", "no", "0"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_int_list(text: str) -> tuple[int, ...]:
    body = text.strip()
    if body.startswith("[") and body.endswith("]"):
        body = body[1:-1]
    parts = [p.strip() for p in body.replace(",", " ").split()]
    return tuple(int(p) for p in parts if p)


def _optional(parse):
    def inner(text: str):
        return None if text.lower() in ("none", "") else parse(text)
    return inner


_PARSERS = {
    "int": int,
    "float": float,
    "str": str,
    "bool": _parse_bool,
    "tuple[int, ...]": _parse_int_list,
    "Paradigm": lambda t: Paradigm(t.upper()),
    "int | None": _optional(int),
}


def _fields(cls) -> dict[str, str]:
    return {f.name: str(f.type) for f in dataclasses.fields(cls)}


TRAINING_KEYS = _fields(TrainingConfig)
HEAD_KEYS = _fields(MarginHeadConfig)
ALL_KEYS = {**TRAINING_KEYS, **HEAD_KEYS}


def parse_value(key: str, text: str) -> Any:
    """Convert the textual value of a config key to its typed form."""
    try:
        return _PARSERS[ALL_KEYS[key]](text.strip())
    except KeyError:
        raise ConfigError(f"unknown key {key!r}") from None


def read_config_values(text: str, source: str = "<config>") -> dict[str, Any]:
    """Typed values of the keys present in ``key = value`` text."""
    values: dict[str, Any] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep or not key:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        if key not in ALL_KEYS:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        try:
            values[key] = _PARSERS[ALL_KEYS[key]](value.strip())
        except ValueError as exc:
            raise ConfigError(f"{source}:{lineno}: bad value for {key!r}: {exc}") from None
    return values


def parse_config(text: str, overrides: dict[str, Any] | None = None,
                 source: str = "<config>") -> tuple[TrainingConfig, MarginHeadConfig]:
    """Parse ``key = value`` text into validated configs.

    Absent keys take the defaults of the dataclasses.  When the paradigm is not
    HG and no switch iteration is given, the switch is left unset.
    """
    values = read_config_values(text, source)
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return build_configs(values)


def build_configs(values: dict[str, Any]) -> tuple[TrainingConfig, MarginHeadConfig]:
    values = dict(values)
    paradigm = Paradigm(values.get("paradigm", Paradigm.HG))
    if paradigm is not Paradigm.HG and "lambda_switch_iteration" not in values:
        values["lambda_switch_iteration"] = None
    train = TrainingConfig(**{k: v for k, v in values.items() if k in TRAINING_KEYS})
    head = MarginHeadConfig(**{k: v for k, v in values.items() if k in HEAD_KEYS})
    return train, head


def load_config(path: str | Path, overrides: dict[str, Any] | None = None
                ) -> tuple[TrainingConfig, MarginHeadConfig]:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config(text, overrides, source=str(path))


def _format(value: Any) -> str:
    if value is None:
        return "none"
    if isinstance(value, enum.Enum):
        return value.value
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return "[" + ", ".join(str(v) for v in value) + "]"
    return repr(value) if isinstance(value, float) else str(value)


def dump_config(train: TrainingConfig, head: MarginHeadConfig) -> str:
    """Serialize both configs as ``key = value`` text, every key present."""
    lines = ["# training"]
    lines += [f"{k} = {_format(getattr(train, k))}" for k in TRAINING_KEYS]
    lines.append("# margin head")
    lines += [f"{k} = {_format(getattr(head, k))}" for k in HEAD_KEYS]
    return "\n".join(lines) + "\n"


def config_hash(train: TrainingConfig, head: MarginHeadConfig) -> str:
    return hashlib.sha256(dump_config(train, head).encode("utf-8")).hexdigest()[:16]


def default_config_values() -> dict[str, Any]:
    train, head = TrainingConfig(), MarginHeadConfig()
    out = {k: getattr(train, k) for k in TRAINING_KEYS}
    out.update({k: getattr(head, k) for k in HEAD_KEYS})
    return out


__all__ = [
    "ALL_KEYS", "ConfigError", "ContractError", "Embedding", "FaceImage", "GeometryError",
    "IMAGE_SIZE", "IngestionError", "MarginHeadConfig", "MaskDistillError", "MetricError",
    "Paradigm", "ProtocolError", "ScoringError", "TrainingAborted", "TrainingConfig",
    "ValidationError", "build_configs", "config_hash", "default_config_values", "derive_seed",
    "dump_config", "load_config", "make_rng", "normalize", "parse_config", "parse_value", "read_config_values",
    "validate_landmarks",
]
