"""Procedural toy face corpus for desk-scale runs.

Every identity is a fixed set of drawing parameters (skin, hair, eye,
brow, nose and mouth colors and shapes, plus a small landmark offset).
Images of one identity differ by translation, landmark noise, lighting and
pixel noise.  Identity cues sit in both the upper and the lower half of the
face so masked images stay recognisable.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

from .core import IMAGE_SIZE, make_rng
from .dataio import load_dataset, save_face_image, preprocess

# canonical 112x112 five-point alignment template
REFERENCE_LANDMARKS = np.array([
    [38.2946, 51.6963],
    [73.5318, 51.5014],
    [56.0252, 71.7366],
    [41.5493, 92.3655],
    [70.7299, 92.2041],
])


@dataclass(frozen=True)
class ToyIdentity:
    skin: tuple[int, int, int]
    hair: tuple[int, int, int]
    eye: tuple[int, int, int]
    mouth: tuple[int, int, int]
    hair_height: float
    eye_radius: float
    brow_tilt: float
    nose_width: float
    mouth_thickness: float
    offset: np.ndarray  # (5, 2) identity-specific landmark displacement


def _color(rng) -> tuple[int, int, int]:
    return tuple(int(v) for v in rng.integers(20, 236, size=3))


def sample_identity(rng: np.random.Generator) -> ToyIdentity:
    return ToyIdentity(
        skin=_color(rng), hair=_color(rng), eye=_color(rng), mouth=_color(rng),
        hair_height=float(rng.uniform(12, 30)),
        eye_radius=float(rng.uniform(3, 8)),
        brow_tilt=float(rng.uniform(-5, 5)),
        nose_width=float(rng.uniform(4, 12)),
        mouth_thickness=float(rng.uniform(2, 8)),
        offset=rng.uniform(-3, 3, size=(5, 2)),
    )


def render_identity(ident: ToyIdentity, rng: np.random.Generator
                    ) -> tuple[np.ndarray, np.ndarray]:
    """One uint8 image and its landmarks for ``ident``."""
    shift = rng.uniform(-2, 2, size=2)
    lm = REFERENCE_LANDMARKS + ident.offset + shift + rng.normal(0, 0.5, size=(5, 2))
    bg = tuple(int(v) for v in rng.integers(0, 256, size=3))
    im = Image.new("RGB", (IMAGE_SIZE, IMAGE_SIZE), bg)
    d = ImageDraw.Draw(im)
    cx = lm[:, 0].mean()
    d.ellipse([cx - 40, 18 + shift[1], cx + 40, 124 + shift[1]], fill=ident.skin)
    d.rectangle([cx - 44, 0, cx + 44, ident.hair_height + shift[1]], fill=ident.hair)
    r = ident.eye_radius
    for (x, y), sign in zip(lm[:2], (-1, 1)):
        d.ellipse([x - r, y - r * 0.7, x + r, y + r * 0.7], fill=ident.eye)
        d.line([x - 8, y - 10 - sign * ident.brow_tilt, x + 8, y - 10 + sign * ident.brow_tilt],
               fill=ident.hair, width=3)
    nx, ny = lm[2]
    nw = ident.nose_width
    d.polygon([(nx, ny - 14), (nx - nw / 2, ny + 2), (nx + nw / 2, ny + 2)], fill=ident.mouth)
    d.line([tuple(lm[3]), tuple(lm[4])], fill=ident.mouth, width=int(round(ident.mouth_thickness)))
    d.ellipse([cx - 10, 100 + shift[1], cx + 10, 110 + shift[1]], fill=ident.hair)
    img = np.asarray(im).astype(np.float64)
    gain = rng.uniform(0.8, 1.2)
    bias = rng.uniform(-20, 20)
    img = img * gain + bias + rng.normal(0, 6.0, size=img.shape)
    return np.clip(np.rint(img), 0, 255).astype(np.uint8), lm


def make_identities(num_identities: int, seed: int, stream: str = "toy-identities"
                    ) -> list[ToyIdentity]:
    rng = make_rng(seed, stream)
    return [sample_identity(rng) for _ in range(num_identities)]


def write_toy_dataset(root: str | Path, num_identities: int = 20, images_per_identity: int = 20,
                      seed: int = 0, stream: str = "toy-identities"):
    """Write a toy corpus in the dataset layout and return it loaded."""
    root = Path(root)
    for k, ident in enumerate(make_identities(num_identities, seed, stream)):
        rng = make_rng(seed, stream + "/images", k)
        for j in range(images_per_identity):
            raw, lm = render_identity(ident, rng)
            name = f"id{k:04d}"
            img = preprocess(raw, lm, f"{name}/{j:04d}")
            save_face_image(root / name / f"{name}_{j + 1:04d}.png", img)
    return load_dataset(root)


def write_toy_pairs(path: str | Path, dataset, num_genuine: int, num_impostor: int,
                    seed: int = 0, per_fold: int | None = None) -> Path:
    """Write a generic ``pathA pathB label`` pair file over ``dataset``.

    With ``per_fold`` the file interleaves genuine and impostor pairs in
    blocks so each fold gets a balanced share.
    """
    rng = make_rng(seed, "toy-pairs")
    root = Path(path).parent
    labels = dataset.labels
    by_id = dataset.index
    ids = sorted(by_id)

    def rel(i):
        p = dataset.records[i].path
        try:
            return str(p.relative_to(root))
        except ValueError:
            return str(p)

    gen, imp = [], []
    while len(gen) < num_genuine:
        k = ids[rng.integers(len(ids))]
        if len(by_id[k]) < 2:
            continue
        a, b = rng.choice(by_id[k], size=2, replace=False)
        gen.append((rel(a), rel(b), 1))
    while len(imp) < num_impostor:
        a, b = rng.integers(len(labels), size=2)
        if labels[a] != labels[b]:
            imp.append((rel(a), rel(b), 0))
    if per_fold:
        folds = (num_genuine + num_impostor) // per_fold
        g, i = np.array_split(np.arange(len(gen)), folds), np.array_split(np.arange(len(imp)), folds)
        rows = []
        for gf, jf in zip(g, i):
            rows += [gen[x] for x in gf] + [imp[x] for x in jf]
    else:
        rows = gen + imp
    Path(path).write_text("".join(f"{a} {b} {lab}\n" for a, b, lab in rows))
    return Path(path)


__all__ = ["REFERENCE_LANDMARKS", "ToyIdentity", "make_identities", "render_identity",
           "sample_identity", "write_toy_dataset", "write_toy_pairs"]
