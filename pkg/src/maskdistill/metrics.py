"""Verification scoring and biometric error metrics.

A comparison is a *match* when its score is ``>= threshold``.  All
threshold searches are exact: the candidates are the distinct observed
scores plus ``+inf`` (and ``-inf`` where accepting everything is allowed).
"""
from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field
from pathlib import Path, PurePath
from typing import Callable, Sequence

import numpy as np

from .core import ContractError, FaceImage, MetricError, ProtocolError, ScoringError, make_rng
from .dataio import PairProtocol, load_face_image
from .maskgen import mask_for_benchmark

FMR1000 = 1e-3
FMR100 = 1e-2
FAR2000 = 2e-3
NORM_TOL = 1e-4


@dataclass(frozen=True, eq=False)
class ScoreSet:
    genuine: np.ndarray
    impostor: np.ndarray
    # per-pair view in protocol order, when scores came from a protocol
    pair_scores: np.ndarray | None = None
    pair_genuine: np.ndarray | None = None

    def __post_init__(self):
        g = np.asarray(self.genuine, dtype=np.float64).reshape(-1)
        i = np.asarray(self.impostor, dtype=np.float64).reshape(-1)
        if not (np.all(np.isfinite(g)) and np.all(np.isfinite(i))):
            raise MetricError("scores must be finite")
        object.__setattr__(self, "genuine", g)
        object.__setattr__(self, "impostor", i)

    @classmethod
    def from_pairs(cls, scores, genuine) -> "ScoreSet":
        s = np.asarray(scores, dtype=np.float64)
        g = np.asarray(genuine, dtype=bool)
        if s.shape != g.shape:
            raise MetricError("scores and genuine flags differ in length")
        return cls(s[g], s[~g], s, g)

    @property
    def counts(self) -> tuple[int, int]:
        return len(self.genuine), len(self.impostor)

    def require_nonempty(self) -> None:
        if len(self.genuine) == 0 or len(self.impostor) == 0:
            raise MetricError(f"need genuine and impostor scores, got counts {self.counts}")


# ---------------------------------------------------------------------------
# rates


def match_count(scores: np.ndarray, threshold) -> np.ndarray:
    """Number of ``scores`` at or above each threshold."""
    s = np.sort(np.asarray(scores, dtype=np.float64))
    t = np.asarray(threshold, dtype=np.float64)
    return len(s) - np.searchsorted(s, t, side="left")


def match_rate(scores: np.ndarray, threshold) -> np.ndarray:
    """Fraction of ``scores`` at or above each threshold."""
    return match_count(scores, threshold) / len(scores)


def fmr_at(scores: ScoreSet, threshold):
    return match_rate(scores.impostor, threshold)


def fnmr_at(scores: ScoreSet, threshold):
    n = len(scores.genuine)
    return (n - match_count(scores.genuine, threshold)) / n


def candidate_thresholds(scores: ScoreSet, low: bool = True) -> np.ndarray:
    """Distinct scores ascending, with ``+inf`` appended and ``-inf`` prepended if ``low``."""
    uniq = np.unique(np.concatenate([scores.genuine, scores.impostor]))
    parts = ([np.array([-np.inf])] if low else []) + [uniq, np.array([np.inf])]
    return np.concatenate(parts)


def det_curve(scores: ScoreSet) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """``(thresholds, fmr, fnmr)`` over every candidate threshold, ascending."""
    scores.require_nonempty()
    t = candidate_thresholds(scores)
    return t, fmr_at(scores, t), fnmr_at(scores, t)


def fnmr_at_fmr(scores: ScoreSet, fmr_ceiling: float, strict: bool = True
                ) -> tuple[float, float]:
    """Lowest FNMR subject to FMR below ``fmr_ceiling``.

    ``strict`` selects FMR < ceiling (else <=).  Returns ``(fnmr, threshold)``
    with the smallest threshold attaining the minimum.
    """
    if not 0 < fmr_ceiling <= 1:
        raise MetricError("fmr_ceiling must lie in (0, 1]")
    scores.require_nonempty()
    t = candidate_thresholds(scores, low=False)
    fmr = fmr_at(scores, t)
    fnmr = fnmr_at(scores, t)
    ok = fmr < fmr_ceiling if strict else fmr <= fmr_ceiling
    best = fnmr[ok].min()
    k = np.flatnonzero(ok & (fnmr == best))[0]
    return float(fnmr[k]), float(t[k])


def tpr_at_far(scores: ScoreSet, far_ceiling: float, strict: bool = False
               ) -> tuple[float, float]:
    """Highest TPR with FAR at most ``far_ceiling`` (``strict``: below it)."""
    if not 0 < far_ceiling <= 1:
        raise MetricError("far_ceiling must lie in (0, 1]")
    scores.require_nonempty()
    t = candidate_thresholds(scores)
    far = fmr_at(scores, t)
    tpr = match_rate(scores.genuine, t)
    ok = far < far_ceiling if strict else far <= far_ceiling
    best = tpr[ok].max()
    k = np.flatnonzero(ok & (tpr == best))[0]
    return float(tpr[k]), float(t[k])


def accuracy_at_threshold(scores: ScoreSet, threshold: float) -> float:
    ng, ni = scores.counts
    if ng + ni == 0:
        raise MetricError("no scores")
    tp = np.count_nonzero(scores.genuine >= threshold)
    tn = np.count_nonzero(scores.impostor < threshold)
    return (tp + tn) / (ng + ni)


def _accuracies(scores: ScoreSet, t: np.ndarray) -> np.ndarray:
    ng, ni = scores.counts
    tp = match_count(scores.genuine, t)
    tn = ni - match_count(scores.impostor, t)
    return (tp + tn) / (ng + ni)


def max_accuracy(scores: ScoreSet) -> tuple[float, float]:
    """Best accuracy over all thresholds; ties go to the lowest interval.

    Every threshold in ``(s_prev, s_k]`` between neighbouring distinct scores
    gives the same counts.  The returned threshold sits just above ``s_prev``,
    so it accepts every score above the best-rejected one.  That transfers to
    unseen scores (k-fold use) and is unaffected by monotone rescaling.
    """
    if sum(scores.counts) == 0:
        raise MetricError("no scores")
    t = candidate_thresholds(scores)
    acc = _accuracies(scores, t)
    k = int(np.argmax(acc))
    thr = t[k]
    if k > 0 and np.isfinite(t[k - 1]):
        thr = np.nextafter(t[k - 1], np.inf)
    return float(acc[k]), float(thr)


def fdr(scores: ScoreSet) -> float:
    """Fisher discriminant ratio with unbiased sample variances."""
    if len(scores.genuine) < 2 or len(scores.impostor) < 2:
        raise MetricError("fdr needs at least two genuine and two impostor scores")
    mg, mi = scores.genuine.mean(), scores.impostor.mean()
    var = scores.genuine.var(ddof=1) + scores.impostor.var(ddof=1)
    num = (mg - mi) ** 2
    if var == 0:
        if num == 0:
            return 0.0
        raise MetricError("fdr undefined: zero variance with distinct means")
    return float(num / var)


def kfold_accuracy(protocol: PairProtocol | Sequence[int], scores, genuine=None
                   ) -> tuple[float, list[float]]:
    """Cross-validated accuracy: each fold is scored at the threshold that
    maximizes accuracy on the remaining folds.

    ``protocol`` is a :class:`PairProtocol` with folds (genuine flags taken
    from it) or a per-pair fold index array, in which case ``genuine`` is
    required.  ``scores`` is per pair, aligned with the protocol.
    """
    if isinstance(protocol, PairProtocol):
        if protocol.fold_boundaries is None:
            raise ProtocolError("protocol has no folds")
        folds = protocol.fold_of()
        genuine = protocol.genuine if genuine is None else genuine
    else:
        folds = np.asarray(protocol)
    s = np.asarray(scores.pair_scores if isinstance(scores, ScoreSet) else scores,
                   dtype=np.float64)
    g = np.asarray(genuine, dtype=bool)
    if not (len(s) == len(g) == len(folds)):
        raise ProtocolError("scores, genuine flags and folds must align")
    ks = np.unique(folds)
    if len(ks) < 2:
        raise ProtocolError("k-fold accuracy needs at least 2 folds")
    accs = []
    for k in ks:
        test = folds == k
        _, thr = max_accuracy(ScoreSet(s[~test & g], s[~test & ~g]))
        accs.append(accuracy_at_threshold(ScoreSet(s[test & g], s[test & ~g]), thr))
    return float(np.mean(accs)), accs


# ---------------------------------------------------------------------------
# scoring


def cosine_score(a, b) -> float:
    a = np.asarray(getattr(a, "values", a), dtype=np.float64)
    b = np.asarray(getattr(b, "values", b), dtype=np.float64)
    for v in (a, b):
        if abs(np.linalg.norm(v) - 1) > NORM_TOL:
            raise ContractError("cosine_score needs unit-norm embeddings")
    return float(np.clip(a @ b, -1.0, 1.0))


def _embedder(model) -> Callable[[list[FaceImage]], np.ndarray]:
    if hasattr(model, "embed"):
        return model.embed
    from .backbone import embed_images  # torch modules

    return lambda images: embed_images(model, images)


def _relative_keys(paths: Sequence[str]) -> dict[str, str]:
    unique = sorted(set(paths))
    if not unique:
        return {}
    try:
        root = os.path.commonpath(unique) if len(unique) > 1 else os.path.dirname(unique[0])
    except ValueError:  # mixed absolute and relative paths
        return {p: p for p in unique}
    return {p: PurePath(os.path.relpath(p, root or ".")).as_posix() for p in unique}


def score_protocol(protocol: PairProtocol, model, masker=mask_for_benchmark,
                   rng: np.random.Generator | None = None,
                   loader: Callable[[str], FaceImage] = load_face_image) -> ScoreSet:
    """Embed every pair side (masking flagged sides) and score by cosine.

    Each distinct ``(image, masked)`` side is embedded once.  The mask color of
    an image comes from its own stream keyed by the image path (relative to
    the common root of all protocol paths, so moving a dataset does not change
    scores) and one base seed drawn from ``rng``.  An image masked in several
    pairs looks the same everywhere and both sides of a pair get independent
    colors.
    """
    base = int(rng.integers(0, 2**63 - 1)) if rng is not None else 0
    stream_key = _relative_keys([q for p in protocol.pairs for q in (p.ref, p.probe)])
    keys: dict[tuple[str, bool], int] = {}
    pair_keys = []
    for p in protocol.pairs:
        ka, kb = (p.ref, p.mask_ref), (p.probe, p.mask_probe)
        for k in (ka, kb):
            keys.setdefault(k, len(keys))
        pair_keys.append((keys[ka], keys[kb]))

    raw: dict[str, FaceImage] = {}
    images = []
    first_use = {}
    for i, (ka, kb) in enumerate(pair_keys):
        first_use.setdefault(ka, i)
        first_use.setdefault(kb, i)
    for (path, masked), slot in keys.items():
        try:
            if path not in raw:
                raw[path] = loader(path)
            img = raw[path]
            if masked:
                img = masker(img, make_rng(base, "benchmark-mask:" + stream_key[path]))
        except (OSError, ValueError) as exc:
            raise ScoringError(f"pair {first_use[slot]}: cannot prepare {path}: {exc}") from None
        images.append(img)

    emb = np.asarray(_embedder(model)(images), dtype=np.float64)
    idx = np.array(pair_keys, dtype=np.int64).reshape(-1, 2)
    s = np.clip(np.einsum("ij,ij->i", emb[idx[:, 0]], emb[idx[:, 1]]), -1.0, 1.0)
    return ScoreSet.from_pairs(s, protocol.genuine)


def write_scores(path: str | Path, scores: ScoreSet) -> None:
    if scores.pair_scores is None:
        raise MetricError("score dump needs per-pair scores")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("pair_index", "genuine", "score"))
        for i, (g, s) in enumerate(zip(scores.pair_genuine, scores.pair_scores)):
            w.writerow((i, int(g), repr(float(s))))


def read_scores(path: str | Path) -> ScoreSet:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["pair_index", "genuine", "score"]:
            raise MetricError(f"{path}: expected header pair_index,genuine,score")
        rows = [(int(r[0]), r[1] == "1", float(r[2])) for r in reader if r]
    rows.sort()
    return ScoreSet.from_pairs([r[2] for r in rows], [r[1] for r in rows])


# ---------------------------------------------------------------------------
# reports


@dataclass(frozen=True)
class MetricsReport:
    fmr1000_fnmr: float
    fmr100_fnmr: float
    fdr: float
    tpr_at_far2000: float
    acc2000: float
    max_acc: float
    thresholds: dict = field(default_factory=dict)
    counts: tuple[int, int] = (0, 0)
    kfold_acc: float | None = None
    name: str = ""

    COLUMNS = ("name", "FMR1000", "FMR100", "FDR", "FAR2000", "ACC2000", "ACC", "kfold_ACC",
               "n_genuine", "n_impostor")

    def values(self) -> tuple:
        return (self.name, self.fmr1000_fnmr, self.fmr100_fnmr, self.fdr, self.tpr_at_far2000,
                self.acc2000, self.max_acc, self.kfold_acc, *self.counts)

    def to_csv(self, path: str | Path | None = None) -> str:
        head = ",".join(self.COLUMNS)
        row = ",".join("" if v is None else (f"{v:.6f}" if isinstance(v, float) else str(v))
                       for v in self.values())
        text = head + "\n" + row + "\n"
        if path is not None:
            Path(path).write_text(text)
        return text

    def to_text(self) -> str:
        cells = []
        for col, v in zip(self.COLUMNS, self.values()):
            cells.append((col, "-" if v is None else (f"{v:.5f}" if isinstance(v, float) else str(v))))
        widths = [max(len(c), len(v)) for c, v in cells]
        line1 = "  ".join(c.rjust(w) for (c, _), w in zip(cells, widths))
        line2 = "  ".join(v.rjust(w) for (_, v), w in zip(cells, widths))
        return line1 + "\n" + line2 + "\n"


def report(scores: ScoreSet, protocol: PairProtocol | None = None, name: str = "",
           strict_fmr: bool = True, strict_far: bool = False) -> MetricsReport:
    """Every metric in one record; k-fold accuracy when the protocol has folds."""
    scores.require_nonempty()
    f1000, t1000 = fnmr_at_fmr(scores, FMR1000, strict_fmr)
    f100, t100 = fnmr_at_fmr(scores, FMR100, strict_fmr)
    tpr, t2000 = tpr_at_far(scores, FAR2000, strict_far)
    acc2000 = accuracy_at_threshold(scores, t2000)
    acc, t_acc = max_accuracy(scores)
    kacc = None
    if protocol is not None and protocol.fold_boundaries is not None and scores.pair_scores is not None:
        kacc, _ = kfold_accuracy(protocol, scores)
    return MetricsReport(
        fmr1000_fnmr=f1000, fmr100_fnmr=f100, fdr=fdr(scores), tpr_at_far2000=tpr,
        acc2000=acc2000, max_acc=acc,
        thresholds={"fmr1000": t1000, "fmr100": t100, "far2000": t2000, "acc2000": t2000,
                    "max_acc": t_acc},
        counts=scores.counts, kfold_acc=kacc, name=name,
    )


__all__ = [
    "FAR2000", "FMR100", "FMR1000", "MetricsReport", "ScoreSet", "accuracy_at_threshold",
    "candidate_thresholds", "cosine_score", "det_curve", "fdr", "fmr_at", "fnmr_at",
    "fnmr_at_fmr", "kfold_accuracy", "match_rate", "max_accuracy", "read_scores", "report",
    "score_protocol", "tpr_at_far", "write_scores",
]
