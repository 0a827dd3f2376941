"""Datasets, preprocessing, pair protocols and training batch streams.

Dataset layout::

    root/<identity>/<image>.png
    root/<identity>/<image>.landmarks     # 5 lines "x y": eyes, nose, mouth corners

Pair files accept the LFW ``pairs.txt`` convention (``name i j`` genuine,
``name1 i name2 j`` impostor, optional ``folds pairs_per_fold`` header) and a
generic ``pathA pathB label`` form with label 1 for genuine, 0 for impostor.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from PIL import Image

from .core import (
    IMAGE_SIZE, ContractError, FaceImage, IngestionError, ProtocolError, TrainingConfig,
    make_rng, validate_landmarks,
)

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp")
LANDMARK_SUFFIX = ".landmarks"


class Scenario(str, enum.Enum):
    NO_MASK = "none"
    MASKED_VS_NONMASKED = "masked-vs-nonmasked"
    MASKED_VS_MASKED = "both-masked"

    @property
    def mask_flags(self) -> tuple[bool, bool]:
        """(mask_ref, mask_probe); one-sided masks always land on the probe."""
        return {
            Scenario.NO_MASK: (False, False),
            Scenario.MASKED_VS_NONMASKED: (False, True),
            Scenario.MASKED_VS_MASKED: (True, True),
        }[self]


# ---------------------------------------------------------------------------
# images


def preprocess(raw: np.ndarray, landmarks, source_id: str = "",
               identity_label: int | None = None) -> FaceImage:
    """Map an aligned uint8 112x112x3 crop to [-1, 1] via ``p / 127.5 - 1``."""
    raw = np.asarray(raw)
    if raw.shape != (IMAGE_SIZE, IMAGE_SIZE, 3):
        raise ContractError(f"{source_id}: expected a 112x112x3 image, got shape {raw.shape}")
    if raw.dtype != np.uint8:
        if not np.all((raw >= 0) & (raw <= 255) & (raw == np.round(raw))):
            raise ContractError(f"{source_id}: channel values must be integers in [0, 255]")
    pixels = raw.astype(np.float64) / 127.5 - 1.0
    return FaceImage(pixels, landmarks, source_id, identity_label)


def to_uint8(image: FaceImage) -> np.ndarray:
    """Inverse of :func:`preprocess` (exact on the integer lattice)."""
    return np.rint((image.pixels.astype(np.float64) + 1.0) * 127.5).clip(0, 255).astype(np.uint8)


def sidecar_path(image_path: str | Path) -> Path:
    return Path(image_path).with_suffix(LANDMARK_SUFFIX)


def read_landmarks(path: str | Path) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise IngestionError(f"missing landmark sidecar {path}")
    rows = []
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split()
        try:
            if len(parts) != 2:
                raise ValueError
            rows.append((float(parts[0]), float(parts[1])))
        except ValueError:
            raise IngestionError(f"{path}:{lineno}: expected 'x y', got {line.strip()!r}") from None
    if len(rows) != 5:
        raise IngestionError(f"{path}: expected 5 landmark lines, found {len(rows)}")
    return np.array(rows)


def write_landmarks(path: str | Path, landmarks) -> None:
    lm = np.asarray(landmarks, dtype=np.float64)
    Path(path).write_text("".join(f"{x:.4f} {y:.4f}\n" for x, y in lm))


def load_face_image(path: str | Path, identity_label: int | None = None) -> FaceImage:
    path = Path(path)
    if not path.is_file():
        raise IngestionError(f"missing image {path}")
    landmarks = read_landmarks(sidecar_path(path))
    with Image.open(path) as im:
        raw = np.asarray(im.convert("RGB"))
    try:
        return preprocess(raw, landmarks, str(path), identity_label)
    except ContractError as exc:
        raise IngestionError(str(exc)) from None


def save_face_image(path: str | Path, image: FaceImage) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(image)).save(path)
    write_landmarks(sidecar_path(path), image.landmarks)


# ---------------------------------------------------------------------------
# identity datasets


@dataclass(frozen=True)
class Record:
    path: Path
    label: int
    landmarks: np.ndarray


@dataclass(eq=False)
class IdentityDataset:
    records: list[Record]
    names: list[str]
    root: Path | None = None
    _cache: dict[int, FaceImage] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        labels = sorted({r.label for r in self.records})
        if labels != list(range(len(self.names))):
            raise IngestionError("identity labels must form the contiguous range [0, c)")
        self.index: dict[int, list[int]] = {}
        for pos, r in enumerate(self.records):
            self.index.setdefault(r.label, []).append(pos)

    @property
    def num_identities(self) -> int:
        return len(self.names)

    def __len__(self) -> int:
        return len(self.records)

    def image(self, i: int) -> FaceImage:
        if i not in self._cache:
            rec = self.records[i]
            self._cache[i] = load_face_image(rec.path, rec.label)
        return self._cache[i]

    def images(self, indices: Sequence[int]) -> list[FaceImage]:
        return [self.image(int(i)) for i in indices]

    @property
    def labels(self) -> np.ndarray:
        return np.array([r.label for r in self.records], dtype=np.int64)


def _image_files(directory: Path) -> list[Path]:
    return sorted(p for p in directory.iterdir()
                  if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES)


def load_dataset(root: str | Path) -> IdentityDataset:
    """Scan ``root`` (one subdirectory per identity) in sorted order."""
    root = Path(root)
    if not root.is_dir():
        raise IngestionError(f"dataset root {root} is not a directory")
    names = sorted(p.name for p in root.iterdir() if p.is_dir())
    if not names:
        raise IngestionError(f"{root}: no identity directories")
    records = []
    for label, name in enumerate(names):
        files = _image_files(root / name)
        if not files:
            raise IngestionError(f"{root / name}: identity directory contains no images")
        for f in files:
            lm = read_landmarks(sidecar_path(f))
            try:
                validate_landmarks(lm, str(f))
            except ContractError as exc:
                raise IngestionError(str(exc)) from None
            records.append(Record(f, label, lm))
    return IdentityDataset(records, names, root)


# ---------------------------------------------------------------------------
# batches


def epoch_order(num_records: int, seed: int, epoch: int) -> np.ndarray:
    return make_rng(seed, "shuffle", epoch).permutation(num_records)


def batch_indices(num_records: int, batch_size: int, seed: int, iteration: int) -> np.ndarray:
    """Record indices of the batch consumed at ``iteration``.

    Each epoch is a fresh permutation; the final batch of an epoch may be
    short.  Being a pure function of the iteration keeps resumed runs aligned.
    """
    per_epoch = math.ceil(num_records / batch_size)
    epoch, step = divmod(iteration, per_epoch)
    order = epoch_order(num_records, seed, epoch)
    return order[step * batch_size:(step + 1) * batch_size]


def training_batches(dataset: IdentityDataset, config: TrainingConfig,
                     start_iteration: int = 0, stop_iteration: int | None = None
                     ) -> Iterator[tuple[list[FaceImage], np.ndarray]]:
    """Yield ``(images, labels)`` batches from ``start_iteration`` onward."""
    if len(dataset) == 0:
        raise IngestionError("empty dataset")
    it = start_iteration
    while stop_iteration is None or it < stop_iteration:
        idx = batch_indices(len(dataset), config.batch_size, config.seed, it)
        yield dataset.images(idx), dataset.labels[idx]
        it += 1


# ---------------------------------------------------------------------------
# pair protocols


@dataclass(frozen=True)
class Pair:
    ref: str
    probe: str
    genuine: bool
    mask_ref: bool = False
    mask_probe: bool = False


@dataclass(frozen=True)
class PairProtocol:
    pairs: tuple[Pair, ...]
    scenario: Scenario
    fold_boundaries: tuple[int, ...] | None = None

    def __post_init__(self):
        want = self.scenario.mask_flags
        for i, p in enumerate(self.pairs):
            if (p.mask_ref, p.mask_probe) != want:
                raise ProtocolError(f"pair {i}: mask flags do not match scenario "
                                    f"{self.scenario.value}")
        fb = self.fold_boundaries
        if fb is not None:
            ok = (len(fb) >= 2 and fb[0] == 0 and fb[-1] == len(self.pairs)
                  and all(a < b for a, b in zip(fb, fb[1:])))
            if not ok:
                raise ProtocolError("fold boundaries must partition the pair list")

    @property
    def num_folds(self) -> int:
        return 0 if self.fold_boundaries is None else len(self.fold_boundaries) - 1

    def fold_of(self) -> np.ndarray:
        """Fold index per pair."""
        if self.fold_boundaries is None:
            raise ProtocolError("protocol has no folds")
        out = np.empty(len(self.pairs), dtype=np.int64)
        for f, (a, b) in enumerate(zip(self.fold_boundaries, self.fold_boundaries[1:])):
            out[a:b] = f
        return out

    @property
    def genuine(self) -> np.ndarray:
        return np.array([p.genuine for p in self.pairs], dtype=bool)


def _is_int(text: str) -> bool:
    try:
        int(text)
    except ValueError:
        return False
    return True


def parse_pair_lines(lines: Sequence[str], image_root: str | Path | None = None,
                     ext: str = ".png", source: str = "<pairs>") -> list[tuple[str, str, bool]]:
    """Parse pair lines into ``(ref, probe, genuine)`` path triples."""
    root = Path(image_root) if image_root is not None else None

    def lfw_path(name: str, idx: str) -> str:
        rel = Path(name) / f"{name}_{int(idx):04d}{ext}"
        return str(root / rel if root is not None else rel)

    def generic_path(p: str) -> str:
        return str(root / p) if root is not None and not Path(p).is_absolute() else p

    out = []
    seen_content = False
    for lineno, raw in enumerate(lines, start=1):
        cols = raw.split()
        if not cols or cols[0].startswith("#"):
            continue
        if not seen_content and len(cols) == 2 and all(_is_int(c) for c in cols):
            seen_content = True  # LFW header: folds, pairs per fold
            continue
        seen_content = True
        if len(cols) == 3 and _is_int(cols[1]) and _is_int(cols[2]):
            out.append((lfw_path(cols[0], cols[1]), lfw_path(cols[0], cols[2]), True))
        elif len(cols) == 4 and _is_int(cols[1]) and _is_int(cols[3]):
            out.append((lfw_path(cols[0], cols[1]), lfw_path(cols[2], cols[3]), False))
        elif len(cols) == 3 and cols[2] in ("0", "1"):
            out.append((generic_path(cols[0]), generic_path(cols[1]), cols[2] == "1"))
        else:
            raise ProtocolError(f"{source}:{lineno}: malformed pair line {raw.strip()!r}")
    return out


def build_protocol(pair_file: str | Path, scenario: Scenario | str, k_folds: int | None = None,
                   image_root: str | Path | None = None, ext: str = ".png") -> PairProtocol:
    """Read a pair file and stamp mask flags for ``scenario``.

    With ``k_folds`` the pairs are split into equal contiguous folds in file
    order.  Generic relative paths resolve against ``image_root`` when given,
    else against the pair file's directory.
    """
    pair_file = Path(pair_file)
    scenario = Scenario(scenario)
    lines = pair_file.read_text().splitlines()
    root = image_root if image_root is not None else pair_file.parent
    triples = parse_pair_lines(lines, root, ext, source=str(pair_file))
    return make_protocol(triples, scenario, k_folds)


def make_protocol(triples: Sequence[tuple[str, str, bool]], scenario: Scenario | str,
                  k_folds: int | None = None) -> PairProtocol:
    scenario = Scenario(scenario)
    mref, mprobe = scenario.mask_flags
    pairs = tuple(Pair(str(a), str(b), bool(g), mref, mprobe) for a, b, g in triples)
    bounds = None
    if k_folds is not None:
        if k_folds < 1:
            raise ProtocolError("k_folds must be positive")
        if len(pairs) % k_folds:
            raise ProtocolError(f"{len(pairs)} pairs cannot be split into {k_folds} equal folds")
        size = len(pairs) // k_folds
        bounds = tuple(range(0, len(pairs) + 1, size)) if size else None
        if bounds is None:
            raise ProtocolError("no pairs to split into folds")
    return PairProtocol(pairs, scenario, bounds)


def write_protocol(path: str | Path, protocol: PairProtocol) -> None:
    """Tab-separated dump: ``ref probe genuine mask_ref mask_probe fold``."""
    folds = protocol.fold_of() if protocol.fold_boundaries is not None else None
    lines = [f"# scenario\t{protocol.scenario.value}",
             "# ref\tprobe\tgenuine\tmask_ref\tmask_probe\tfold"]
    for i, p in enumerate(protocol.pairs):
        fold = "-" if folds is None else str(folds[i])
        lines.append(f"{p.ref}\t{p.probe}\t{int(p.genuine)}\t{int(p.mask_ref)}\t"
                     f"{int(p.mask_probe)}\t{fold}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_protocol(path: str | Path) -> PairProtocol:
    path = Path(path)
    scenario = None
    pairs, folds = [], []
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        if line.startswith("# scenario"):
            scenario = Scenario(line.split("\t")[1].strip())
            continue
        if not line.strip() or line.startswith("#"):
            continue
        cols = line.split("\t")
        if len(cols) != 6:
            raise ProtocolError(f"{path}:{lineno}: expected 6 tab-separated columns")
        pairs.append(Pair(cols[0], cols[1], cols[2] == "1", cols[3] == "1", cols[4] == "1"))
        folds.append(None if cols[5] == "-" else int(cols[5]))
    if scenario is None:
        raise ProtocolError(f"{path}: missing '# scenario' header")
    bounds = None
    if folds and folds[0] is not None:
        bounds = [0] + [i for i in range(1, len(folds)) if folds[i] != folds[i - 1]] + [len(folds)]
        bounds = tuple(bounds)
    return PairProtocol(tuple(pairs), scenario, bounds)


__all__ = [
    "IdentityDataset", "Pair", "PairProtocol", "Record", "Scenario", "batch_indices",
    "build_protocol", "epoch_order", "load_dataset", "load_face_image", "make_protocol",
    "parse_pair_lines", "preprocess", "read_landmarks", "read_protocol", "save_face_image",
    "sidecar_path", "to_uint8", "training_batches", "write_landmarks", "write_protocol",
]
