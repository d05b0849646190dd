"""Datasets: image folders, a synthetic oocyst-like generator, stratified splits, augmentation."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

log = logging.getLogger(__name__)

F32 = np.float32


@dataclass
class LabeledDataset:
    images: np.ndarray            # [N, 3, H, W] float32 in [0, 1]
    labels: np.ndarray            # [N] int64
    class_names: list
    split: str = "all"
    paths: list | None = None
    skipped: int = 0

    def __post_init__(self):
        self.images = np.asarray(self.images, F32)
        self.labels = np.asarray(self.labels, np.int64)
        if len(self.images) != len(self.labels):
            raise ValueError("images and labels differ in length")

    def __len__(self):
        return len(self.labels)

    @property
    def n_classes(self):
        return len(self.class_names)

    def subset(self, idx, split=None):
        idx = np.asarray(idx, np.int64)
        paths = [self.paths[i] for i in idx] if self.paths is not None else None
        return LabeledDataset(self.images[idx], self.labels[idx], list(self.class_names),
                              split or self.split, paths)

    def class_counts(self):
        return np.bincount(self.labels, minlength=self.n_classes)


def concat(a: LabeledDataset, b: LabeledDataset, split: str) -> LabeledDataset:
    if a.class_names != b.class_names:
        raise ValueError("cannot merge datasets with different class lists")
    paths = (a.paths or []) + (b.paths or []) if a.paths is not None and b.paths is not None else None
    return LabeledDataset(np.concatenate([a.images, b.images]), np.concatenate([a.labels, b.labels]),
                          list(a.class_names), split, paths)


# ---------------------------------------------------------------------------
# image folders

def load_image(path, target_size=224) -> np.ndarray:
    """One RGB image as ``[3, size, size]`` float32 in [0, 1] (bilinear resize)."""
    with Image.open(path) as im:
        im = im.convert("RGB").resize((target_size, target_size), Image.BILINEAR)
        arr = np.asarray(im, np.uint8)
    return arr.transpose(2, 0, 1).astype(F32) / F32(255)


def load_image_folder(path, target_size=224) -> LabeledDataset:
    """Directory-per-class images, bilinearly resized to ``target_size`` and scaled to [0, 1]."""
    root = Path(path)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset folder {root} does not exist")
    class_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if not class_dirs:
        raise ValueError(f"{root} contains no class directories")
    images, labels, paths = [], [], []
    skipped = 0
    for label, d in enumerate(class_dirs):
        files = sorted(p for p in d.iterdir() if p.is_file())
        if not files:
            raise ValueError(f"class directory {d.name!r} is empty")
        n_before = len(labels)
        for f in files:
            try:
                images.append(load_image(f, target_size))
            except (OSError, ValueError) as exc:
                log.warning("skipping unreadable image %s: %s", f, exc)
                skipped += 1
                continue
            labels.append(label)
            paths.append(str(f))
        if len(labels) == n_before:
            raise ValueError(f"class directory {d.name!r} has no readable images")
    ds = LabeledDataset(np.stack(images), np.array(labels), [d.name for d in class_dirs], "all", paths)
    ds.skipped = skipped
    return ds


def save_image_folder(ds: LabeledDataset, root) -> list:
    """Write ``ds`` as PNGs in the directory-per-class layout; returns the file paths."""
    root = Path(root)
    out = []
    for i, (img, label) in enumerate(zip(ds.images, ds.labels)):
        d = root / ds.class_names[label]
        d.mkdir(parents=True, exist_ok=True)
        p = d / f"{i:05d}.png"
        arr = np.clip(np.rint(img.transpose(1, 2, 0) * 255), 0, 255).astype(np.uint8)
        Image.fromarray(arr).save(p)
        out.append(str(p))
    return out


def write_manifest(path, splits):
    """CSV manifest ``path,class,split`` over several datasets (rows without paths use the index)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["path", "class", "split"])
        for ds in splits:
            for i, label in enumerate(ds.labels):
                ref = ds.paths[i] if ds.paths is not None else f"{ds.split}:{i}"
                w.writerow([ref, ds.class_names[label], ds.split])


# ---------------------------------------------------------------------------
# synthetic oocysts

_BACKGROUND = np.array([0.86, 0.84, 0.80], F32)
_WALL = np.array([0.32, 0.24, 0.16], F32)
_INTERIOR = np.array([0.74, 0.68, 0.52], F32)
_SPECKLE = np.array([0.42, 0.36, 0.26], F32)
_INTERIOR_TINT = np.array([0.56, 0.72, 0.60], F32)   # greenish end of the interior colour range


def class_morphology(n_classes):
    """Per-class (eccentricity, wall thickness, speckle density, tint), each spread over its range.

    Eccentricities are chosen so the minor/major axis ratios are evenly spaced
    between 1.0 and 0.4; wall thickness, speckle density and interior tint are
    permuted against shape so no single cue orders the classes.
    """
    rows = []
    for k in range(n_classes):
        t = k / (n_classes - 1)
        t_wall = (n_classes - 1 - k) / (n_classes - 1)
        t_speck = ((k + n_classes // 2) % n_classes) / (n_classes - 1)
        t_tint = ((k % 2) * ((n_classes + 1) // 2) + k // 2) / (n_classes - 1)
        aspect = 1.0 - 0.6 * t
        rows.append((math.sqrt(1.0 - aspect ** 2), 0.06 + 0.30 * t_wall, 0.5 * t_speck, t_tint))
    return rows


def render_oocyst(size, ecc, wall, speckle, rng, tint=0.0):
    """One ``[3, size, size]`` image: a jittered, rotated elliptical shell on a noisy background."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    cx = size / 2 + rng.uniform(-0.08, 0.08) * size
    cy = size / 2 + rng.uniform(-0.08, 0.08) * size
    ang = rng.uniform(0, math.pi)
    a = 0.32 * size * rng.uniform(0.94, 1.06)
    b = a * math.sqrt(1 - ecc ** 2)
    u = (xx - cx) * math.cos(ang) + (yy - cy) * math.sin(ang)
    v = -(xx - cx) * math.sin(ang) + (yy - cy) * math.cos(ang)
    r = np.sqrt((u / a) ** 2 + (v / b) ** 2)
    edge = 1.5 / b
    inside = np.clip((1 - r) / edge + 0.5, 0, 1)
    interior = np.clip((1 - wall - r) / edge + 0.5, 0, 1)
    shell = inside - interior
    speck = (rng.random((size, size)) < speckle).astype(np.float64) * interior
    fill = (1 - tint) * _INTERIOR + tint * _INTERIOR_TINT
    img = (_BACKGROUND[:, None, None] * (1 - inside) + _WALL[:, None, None] * shell
           + fill[:, None, None] * (interior - speck) + _SPECKLE[:, None, None] * speck)
    img = img * rng.uniform(0.95, 1.05) + rng.normal(0, 0.02, img.shape)
    return np.clip(img, 0, 1).astype(F32)


def synth_generate(n_classes=4, n_per_class=100, image_size=64, seed=0) -> LabeledDataset:
    """Deterministic synthetic dataset; classes differ in shape, wall thickness, speckle density and tint."""
    if n_classes < 2:
        raise ValueError("synth_generate needs at least two classes")
    rng = np.random.default_rng(seed)
    morph = class_morphology(n_classes)
    images = np.empty((n_classes * n_per_class, 3, image_size, image_size), F32)
    labels = np.repeat(np.arange(n_classes), n_per_class)
    for i, label in enumerate(labels):
        ecc, wall, speckle, tint = morph[label]
        images[i] = render_oocyst(image_size, ecc, wall, speckle, rng, tint)
    names = [f"class_{k}" for k in range(n_classes)]
    return LabeledDataset(images, labels, names, "all")


def synth_embeddings(n_classes=4, n_per_class=100, n_features=64, seed=0, on_rate=0.6,
                     off_rate=0.05, noise=0.05):
    """Well-separated Gaussian rate vectors: each class drives its own block of features."""
    rng = np.random.default_rng(seed)
    protos = np.full((n_classes, n_features), off_rate)
    blocks = np.array_split(rng.permutation(n_features), n_classes)
    for k, blk in enumerate(blocks):
        protos[k, blk] = on_rate
    labels = np.repeat(np.arange(n_classes), n_per_class)
    feats = np.clip(protos[labels] + rng.normal(0, noise, (len(labels), n_features)), 0, 1)
    return feats.astype(F32), labels


# ---------------------------------------------------------------------------
# splits

def _round(x):
    return int(math.floor(x + 0.5))


def stratified_split(ds: LabeledDataset, seed=0, test_frac=0.2, val_frac=0.1):
    """Per-class hold-out: ``test_frac`` to test, then ``val_frac`` of the rest to validation."""
    rng = np.random.default_rng(seed)
    parts = {"train": [], "val": [], "test": []}
    for c in range(ds.n_classes):
        idx = np.flatnonzero(ds.labels == c)
        n_test = _round(len(idx) * test_frac)
        n_val = _round((len(idx) - n_test) * val_frac)
        n_train = len(idx) - n_test - n_val
        if min(n_test, n_val, n_train) < 1:
            raise ValueError(f"class {ds.class_names[c]!r} has {len(idx)} samples, too few for a "
                             f"train/val/test split")
        idx = rng.permutation(idx)
        parts["test"].append(idx[:n_test])
        parts["val"].append(idx[n_test:n_test + n_val])
        parts["train"].append(idx[n_test + n_val:])
    return tuple(ds.subset(np.sort(np.concatenate(parts[s])), s) for s in ("train", "val", "test"))


# ---------------------------------------------------------------------------
# augmentation

@dataclass
class AugmentDraws:
    flip: bool = False
    angle: float = 0.0
    brightness: float = 1.0
    contrast: float = 1.0
    saturation: float = 1.0

    @classmethod
    def sample(cls, rng, max_angle=20.0, jitter=0.2):
        return cls(bool(rng.random() < 0.5), float(rng.uniform(-max_angle, max_angle)),
                   *(float(rng.uniform(1 - jitter, 1 + jitter)) for _ in range(3)))


_LUMA = np.array([0.299, 0.587, 0.114], F32)


def augment(image, rng=None, draws: AugmentDraws | None = None):
    """Flip, rotate (bilinear, edge fill) and jitter brightness/contrast/saturation; clamps to [0, 1]."""
    if draws is None:
        draws = AugmentDraws.sample(rng if rng is not None else np.random.default_rng())
    img = np.asarray(image, F32)
    if draws.flip:
        img = img[:, :, ::-1]
    if draws.angle:
        img = ndimage.rotate(img, draws.angle, axes=(2, 1), reshape=False, order=1, mode="nearest")
    img = img * F32(draws.brightness)
    gray = np.tensordot(_LUMA, img, axes=1)
    img = (img - gray.mean()) * F32(draws.contrast) + gray.mean()
    gray = np.tensordot(_LUMA, img, axes=1)[None]
    img = (img - gray) * F32(draws.saturation) + gray
    return np.clip(img, 0, 1).astype(F32)


def augment_batch(images, rng):
    return np.stack([augment(img, rng) for img in images])
