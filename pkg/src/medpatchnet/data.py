"""Synthetic images with pixel-exact masks, and manifest/PGM ingestion.

Every positive class in a synthetic image carries one localized
signature (blob, ridge, texture patch or corner marker) whose added
intensity lies entirely inside that class's mask.  Negatives carry none.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import netpbm

SIGNATURES = ("blob", "ridge", "texture", "corner-marker")
SPLITS = ("train", "valid", "test")


class ManifestError(ValueError):
    def __init__(self, errors: Sequence[str]):
        self.errors = list(errors)
        super().__init__("manifest errors:\n  " + "\n  ".join(self.errors))


@dataclass
class Sample:
    image: np.ndarray  # [S, S] in [0, 1]
    labels: np.ndarray  # [C] in {0, 1}
    masks: Optional[List[Optional[np.ndarray]]]  # per class [S, S] bool, None when not annotated
    id: str
    split: str = "train"

    def gt_mask(self, c: int) -> Optional[np.ndarray]:
        """Ground-truth mask for class ``c``; negatives without a mask count as empty."""
        m = None if self.masks is None else self.masks[c]
        if m is not None:
            return m
        if self.labels[c] == 0:
            return np.zeros(self.image.shape, dtype=bool)
        return None


def validate_sample(s: Sample) -> List[str]:
    errs = []
    if s.image.ndim != 2 or s.image.shape[0] != s.image.shape[1]:
        errs.append(f"{s.id}: image must be square, got {s.image.shape}")
    elif s.image.min() < 0 or s.image.max() > 1:
        errs.append(f"{s.id}: image values outside [0, 1]")
    if not np.isin(s.labels, (0, 1)).all():
        errs.append(f"{s.id}: labels must be binary")
    if s.split not in SPLITS:
        errs.append(f"{s.id}: unknown split {s.split!r}")
    for c, m in enumerate(s.masks or []):
        if m is None:
            continue
        if m.shape != s.image.shape:
            errs.append(f"{s.id}: mask for class {c} has shape {m.shape}, image is {s.image.shape}")
        elif s.labels[c] == 0 and m.any():
            errs.append(f"{s.id}: class {c} is labelled negative but its mask is nonempty")
    return errs


# ------------------------------------------------------------------ synthetic
@dataclass(frozen=True)
class SyntheticSpec:
    image_side: int = 64
    num_classes: int = 4
    signatures: Tuple[str, ...] = ("blob", "ridge", "texture", "corner-marker")
    class_names: Tuple[str, ...] = ("blob", "ridge", "texture", "marker")
    blob_radius: Tuple[float, float] = (3.0, 6.0)
    blob_amplitude: float = 0.4
    ridge_length: Tuple[float, float] = (12.0, 24.0)
    ridge_amplitude: float = 0.3
    texture_side: Tuple[int, int] = (8, 12)
    texture_amplitude: float = 0.2
    marker_side: int = 10
    background: Tuple[float, float] = (0.25, 0.45)
    noise_sigma: float = 0.05
    prevalence: float = 0.5
    shortcut_class: Optional[int] = 3

    def __post_init__(self):
        if len(self.signatures) != self.num_classes or len(self.class_names) != self.num_classes:
            raise ValueError("signatures and class_names need one entry per class")
        bad = [s for s in self.signatures if s not in SIGNATURES]
        if bad:
            raise ValueError(f"unknown signature(s) {bad}; choose from {SIGNATURES}")
        if len(set(self.class_names)) != self.num_classes:
            raise ValueError("class names must be unique")
        if not 0 < self.prevalence < 1:
            raise ValueError("prevalence must lie in (0, 1)")
        if self.shortcut_class is not None:
            if not 0 <= self.shortcut_class < self.num_classes:
                raise ValueError("shortcut_class out of range")
            if self.signatures[self.shortcut_class] != "corner-marker":
                raise ValueError("the shortcut class must use the corner-marker signature")
        if self.marker_side * 2 > self.image_side:
            raise ValueError("marker_side too large for the image")


def _grid(S: int):
    return np.meshgrid(np.arange(S, dtype=np.float64), np.arange(S, dtype=np.float64), indexing="ij")


def _blob(spec: SyntheticSpec, rng) -> Tuple[np.ndarray, np.ndarray]:
    S = spec.image_side
    r = rng.uniform(*spec.blob_radius)
    cy, cx = rng.uniform(r, S - 1 - r, size=2)
    yy, xx = _grid(S)
    d2 = ((yy - cy) ** 2 + (xx - cx) ** 2) / r**2
    add = np.where(d2 < 1, spec.blob_amplitude * (1 - d2), 0.0)
    return add, d2 <= 1


def _ridge(spec: SyntheticSpec, rng) -> Tuple[np.ndarray, np.ndarray]:
    S = spec.image_side
    length = rng.uniform(*spec.ridge_length)
    theta = rng.uniform(0, np.pi)
    dy, dx = np.sin(theta) * length / 2, np.cos(theta) * length / 2
    margin = 2.0
    cy = rng.uniform(abs(dy) + margin, S - 1 - abs(dy) - margin)
    cx = rng.uniform(abs(dx) + margin, S - 1 - abs(dx) - margin)
    yy, xx = _grid(S)
    # distance to the segment
    vy, vx = 2 * dy, 2 * dx
    t = np.clip(((yy - (cy - dy)) * vy + (xx - (cx - dx)) * vx) / (vy * vy + vx * vx), 0, 1)
    dist = np.hypot(yy - (cy - dy + t * vy), xx - (cx - dx + t * vx))
    add = np.where(dist < 1.5, spec.ridge_amplitude * (1 - dist / 1.5), 0.0)
    return add, dist <= 1.5


def _texture(spec: SyntheticSpec, rng) -> Tuple[np.ndarray, np.ndarray]:
    S = spec.image_side
    side = int(rng.integers(spec.texture_side[0], spec.texture_side[1] + 1))
    top, left = rng.integers(0, S - side + 1, size=2)
    yy, xx = _grid(S)
    inside = (yy >= top) & (yy < top + side) & (xx >= left) & (xx < left + side)
    checker = ((yy.astype(int) + xx.astype(int)) % 2) * 2 - 1
    return np.where(inside, spec.texture_amplitude * checker, 0.0), inside


def _marker_pattern(k: int) -> np.ndarray:
    """Bright frame with a bright "R"-like bar pattern on a dark square."""
    pat = np.full((k, k), -0.3)
    pat[1:-1, 1] = 0.6
    pat[1, 1:-2] = 0.6
    pat[k // 2, 1:-2] = 0.6
    pat[1 : k // 2, -3] = 0.6
    for i in range(k // 2, k - 1):
        j = 1 + (i - k // 2) * (k - 4) // max(1, k // 2 - 1)
        pat[i, min(j, k - 2)] = 0.6
    return pat


def _corner_marker(spec: SyntheticSpec, rng) -> Tuple[np.ndarray, np.ndarray]:
    S, k = spec.image_side, spec.marker_side
    corner = int(rng.integers(4))
    top = 0 if corner in (0, 1) else S - k
    left = 0 if corner in (0, 2) else S - k
    add = np.zeros((S, S))
    add[top : top + k, left : left + k] = _marker_pattern(k)
    mask = np.zeros((S, S), dtype=bool)
    mask[top : top + k, left : left + k] = True
    return add, mask


_PAINTERS = {"blob": _blob, "ridge": _ridge, "texture": _texture, "corner-marker": _corner_marker}


def generate(spec: SyntheticSpec, n: int, seed: int, split: str = "train") -> List[Sample]:
    """``n`` samples drawn from a single stream keyed by ``(seed, split)``."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if split not in SPLITS:
        raise ValueError(f"unknown split {split!r}")
    rng = np.random.default_rng([seed, SPLITS.index(split)])
    S, C = spec.image_side, spec.num_classes
    out = []
    for i in range(n):
        labels = (rng.random(C) < spec.prevalence).astype(np.int64)
        img = np.full((S, S), rng.uniform(*spec.background))
        img += rng.normal(0.0, spec.noise_sigma, (S, S))
        masks: List[Optional[np.ndarray]] = []
        for c in range(C):
            if labels[c]:
                add, mask = _PAINTERS[spec.signatures[c]](spec, rng)
                img = np.where(mask, img + add, img)
                masks.append(mask)
            else:
                masks.append(np.zeros((S, S), dtype=bool))
        out.append(Sample(np.clip(img, 0.0, 1.0), labels, masks, f"{split}_{i:05d}", split))
    return out


def generate_splits(spec: SyntheticSpec, n_train: int, n_valid: int, n_test: int, seed: int) -> List[Sample]:
    out = []
    for split, n in zip(SPLITS, (n_train, n_valid, n_test)):
        if n:
            out.extend(generate(spec, n, seed, split))
    return out


def stack(samples: Sequence[Sample]) -> Tuple[np.ndarray, np.ndarray]:
    """Images ``[N, S, S]`` and labels ``[N, C]`` as arrays."""
    return np.stack([s.image for s in samples]), np.stack([s.labels for s in samples]).astype(np.float64)


# ------------------------------------------------------------------- manifest
def manifest_header(class_names: Sequence[str]) -> List[str]:
    return ["id", "split", "image_path"] + [f"label_{c}" for c in class_names] + [f"mask_path_{c}" for c in class_names]


def write_dataset(samples: Sequence[Sample], out_dir, class_names: Sequence[str]) -> Path:
    """Write PGM images/masks plus ``manifest.csv``; only nonempty masks get files."""
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    (out_dir / "masks").mkdir(parents=True, exist_ok=True)
    rows = []
    for s in samples:
        img_rel = f"images/{s.id}.pgm"
        netpbm.write_pgm(out_dir / img_rel, s.image, maxval=65535)
        mask_rels = []
        for c, name in enumerate(class_names):
            m = None if s.masks is None else s.masks[c]
            if m is not None and m.any():
                rel = f"masks/{s.id}_{name}.pgm"
                netpbm.write_pgm(out_dir / rel, m.astype(np.int64) * 255, maxval=255)
                mask_rels.append(rel)
            else:
                mask_rels.append("")
        rows.append([s.id, s.split, img_rel] + [str(int(v)) for v in s.labels] + mask_rels)
    path = out_dir / "manifest.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(manifest_header(class_names))
        w.writerows(rows)
    return path


@dataclass
class Dataset:
    samples: List[Sample]
    class_names: List[str]
    root: Optional[Path] = None

    def split(self, name: str) -> List[Sample]:
        return [s for s in self.samples if s.split == name]

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def prevalence(self) -> Dict[str, float]:
        labels = np.stack([s.labels for s in self.samples])
        return {name: float(labels[:, c].mean()) for c, name in enumerate(self.class_names)}


def _class_names_from_header(header: List[str]) -> Tuple[List[str], List[str]]:
    errs = []
    if header[:3] != ["id", "split", "image_path"]:
        errs.append(f"header must start with id,split,image_path; got {','.join(header[:3])}")
    rest = header[3:]
    if len(rest) % 2 or not rest:
        errs.append("header needs matching label_<class> and mask_path_<class> columns")
        return [], errs
    half = len(rest) // 2
    labels, masks = rest[:half], rest[half:]
    names = []
    for lab, msk in zip(labels, masks):
        if not lab.startswith("label_") or not msk.startswith("mask_path_"):
            errs.append(f"bad column pair {lab!r}/{msk!r}")
            continue
        name = lab[len("label_") :]
        if msk[len("mask_path_") :] != name:
            errs.append(f"label column {lab!r} and mask column {msk!r} name different classes")
        names.append(name)
    return names, errs


def load_manifest(path) -> Dataset:
    """Load a manifest CSV; all problems are collected and raised together."""
    path = Path(path)
    root = path.parent
    errors: List[str] = []
    if not path.exists():
        raise ManifestError([f"manifest {path} does not exist"])
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ManifestError([f"{path}: empty manifest"])
    names, errs = _class_names_from_header(rows[0])
    if errs:
        raise ManifestError(errs)
    C = len(names)
    samples = []
    for lineno, row in enumerate(rows[1:], 2):
        if not row:
            continue
        if len(row) != 3 + 2 * C:
            errors.append(f"line {lineno}: expected {3 + 2 * C} columns, got {len(row)}")
            continue
        sid, split, img_rel = row[:3]
        try:
            labels = np.array([int(v) for v in row[3 : 3 + C]], dtype=np.int64)
        except ValueError:
            errors.append(f"line {lineno} ({sid}): labels must be integers 0/1")
            continue
        img_path = root / img_rel
        if not img_path.exists():
            errors.append(f"line {lineno} ({sid}): missing image file {img_rel}")
            continue
        try:
            image = netpbm.read_pgm(img_path)
        except (netpbm.NetpbmError, OSError) as exc:
            errors.append(f"line {lineno} ({sid}): unreadable image: {exc}")
            continue
        masks: List[Optional[np.ndarray]] = []
        bad = False
        for c, rel in enumerate(row[3 + C :]):
            if not rel:
                masks.append(None)
                continue
            mpath = root / rel
            if not mpath.exists():
                errors.append(f"line {lineno} ({sid}): missing mask file {rel}")
                bad = True
                continue
            try:
                raw, _ = netpbm.read_pgm_raw(mpath)
            except (netpbm.NetpbmError, OSError) as exc:
                errors.append(f"line {lineno} ({sid}): unreadable mask {rel}: {exc}")
                bad = True
                continue
            masks.append(raw > 0)
        if bad:
            continue
        sample = Sample(image, labels, masks, sid, split)
        errs = validate_sample(sample)
        if errs:
            errors.extend(f"line {lineno}: {e}" for e in errs)
            continue
        samples.append(sample)
    if errors:
        raise ManifestError(errors)
    if not samples:
        raise ManifestError([f"{path}: no samples"])
    return Dataset(samples, names, root)
