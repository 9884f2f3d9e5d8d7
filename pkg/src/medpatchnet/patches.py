"""Patch partition, per-patch inference and logit averaging.

An ``S x S`` image is cut into a ``P x P`` grid of ``p x p`` patches
(row-major order).  The backbone scores every patch on its own and the
image-level logits are the plain arithmetic mean of the patch logits.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Tuple

import numpy as np

from .backbone import Backbone
from .tensor import Tensor, sigmoid_np


@dataclass(frozen=True)
class PatchGridSpec:
    image_side: int
    patches_per_side: int

    def __post_init__(self):
        if self.patches_per_side < 1 or self.image_side < 1:
            raise ValueError("image_side and patches_per_side must be >= 1")
        if self.image_side % self.patches_per_side:
            raise ValueError(
                f"image side {self.image_side} is not divisible into {self.patches_per_side} patches per side"
            )

    @property
    def patch_side(self) -> int:
        return self.image_side // self.patches_per_side

    @property
    def num_patches(self) -> int:
        return self.patches_per_side**2

    @classmethod
    def from_patch_side(cls, image_side: int, patch_side: int) -> "PatchGridSpec":
        if patch_side < 1 or image_side % patch_side:
            raise ValueError(f"patch side {patch_side} does not divide image side {image_side}")
        return cls(image_side, image_side // patch_side)

    def to_dict(self) -> dict:
        return {"image_side": self.image_side, "patches_per_side": self.patches_per_side}


@dataclass
class PatchLogitGrid:
    logits: np.ndarray  # [P, P, C]
    global_logits: np.ndarray  # [C]
    probabilities: np.ndarray  # [C]
    scaled_logits: np.ndarray  # [P, P, C]

    @classmethod
    def from_patch_logits(cls, z: np.ndarray) -> "PatchLogitGrid":
        z = np.asarray(z, dtype=np.float64)
        if z.ndim != 3 or z.shape[0] != z.shape[1]:
            raise ValueError(f"patch logits must have shape [P,P,C], got {z.shape}")
        Z = mean_patch_logits(z.reshape(-1, z.shape[2]))
        y = sigmoid_np(Z)
        return cls(logits=z, global_logits=Z, probabilities=y, scaled_logits=z * y)

    @property
    def patches_per_side(self) -> int:
        return self.logits.shape[0]

    @property
    def num_classes(self) -> int:
        return self.logits.shape[2]


def mean_patch_logits(z: np.ndarray) -> np.ndarray:
    """Correctly rounded mean over rows of ``z`` ([n, C]).

    ``math.fsum`` makes the result independent of patch order, so the
    global logits are bit-identical under any permutation of patches.
    """
    n = z.shape[0]
    if n == 0:
        raise ValueError("cannot average zero patches")
    return np.array([math.fsum(z[:, c]) / n for c in range(z.shape[1])])


def _as_image(image) -> np.ndarray:
    arr = image.data if isinstance(image, Tensor) else np.asarray(image, dtype=np.float64)
    if arr.ndim == 3 and arr.shape[0] == 1:
        arr = arr[0]
    if arr.ndim != 2 or arr.shape[0] != arr.shape[1]:
        raise ValueError(f"expected a square single-channel image [1,S,S] or [S,S], got {arr.shape}")
    return arr


def partition(image, spec: PatchGridSpec) -> np.ndarray:
    """Cut an image into ``[P*P, 1, p, p]`` patches in row-major grid order."""
    img = _as_image(image)
    if img.shape[0] != spec.image_side:
        raise ValueError(f"image side {img.shape[0]} does not match grid image_side {spec.image_side}")
    P, p = spec.patches_per_side, spec.patch_side
    return img.reshape(P, p, P, p).transpose(0, 2, 1, 3).reshape(P * P, 1, p, p).copy()


def partition_batch(images: np.ndarray, spec: PatchGridSpec) -> np.ndarray:
    """``[B, S, S]`` (or ``[B,1,S,S]``) to ``[B*P*P, 1, p, p]``, image-major then row-major."""
    images = np.asarray(images, dtype=np.float64)
    if images.ndim == 4:
        images = images[:, 0]
    B, S = images.shape[0], images.shape[1]
    if S != spec.image_side or images.shape[2] != S:
        raise ValueError(f"images of side {images.shape[1:]} do not match grid image_side {spec.image_side}")
    P, p = spec.patches_per_side, spec.patch_side
    return images.reshape(B, P, p, P, p).transpose(0, 1, 3, 2, 4).reshape(B * P * P, 1, p, p)


def reassemble(patches: np.ndarray, spec: PatchGridSpec) -> np.ndarray:
    P, p = spec.patches_per_side, spec.patch_side
    return np.asarray(patches).reshape(P, P, p, p).transpose(0, 2, 1, 3).reshape(1, P * p, P * p)


def _check_model(model: Backbone, spec: PatchGridSpec) -> None:
    if model.config.input_side != spec.patch_side:
        raise ValueError(
            f"model input side {model.config.input_side} does not match patch side {spec.patch_side}"
        )


def predict(image, model: Backbone, spec: PatchGridSpec) -> PatchLogitGrid:
    _check_model(model, spec)
    z = model.logits(partition(image, spec))
    P = spec.patches_per_side
    return PatchLogitGrid.from_patch_logits(z.reshape(P, P, -1))


def predict_batch(images: np.ndarray, model: Backbone, spec: PatchGridSpec) -> np.ndarray:
    """Patch logits for many images, shape ``[B, P, P, C]``.

    Each image's patch stack goes through the backbone as its own batch,
    so an image's logits are bit-identical to ``predict`` on it alone,
    whatever else is in ``images``.
    """
    _check_model(model, spec)
    images = np.asarray(images, dtype=np.float64)
    if images.ndim == 4:
        images = images[:, 0]
    P = spec.patches_per_side
    out = np.zeros((len(images), P, P, model.config.num_classes))
    for i, img in enumerate(images):
        out[i] = model.logits(partition(img, spec)).reshape(P, P, -1)
    return out


def grids_from_batch(z: np.ndarray):
    return [PatchLogitGrid.from_patch_logits(zi) for zi in z]


def occlusion_delta(grid: PatchLogitGrid, patch_index: Tuple[int, int], replacement_logits) -> np.ndarray:
    """Global logits after swapping one patch's logits, without a forward pass."""
    r, c = patch_index
    P = grid.patches_per_side
    if not (0 <= r < P and 0 <= c < P):
        raise IndexError(f"patch index {patch_index} outside {P}x{P} grid")
    rep = np.asarray(replacement_logits, dtype=np.float64)
    return (grid.global_logits * P * P - grid.logits[r, c] + rep) / (P * P)


def degenerate_fullimage_equivalence(image, model: Backbone) -> Tuple[np.ndarray, np.ndarray]:
    """Global logits from a one-patch grid and from a direct full-image forward."""
    img = _as_image(image)
    spec = PatchGridSpec(img.shape[0], 1)
    via_grid = predict(img, model, spec).global_logits
    direct = model.logits(img[None, None])[0]
    return via_grid, direct
