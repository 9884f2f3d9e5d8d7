"""Per-pixel evidence maps: patch-logit maps, shift-averaged maps, Grad-CAM.

Patch maps are signed: positive blocks vote for a class, negative blocks
against it.  Shift averaging translates the image by every multiple of
the offset ``o`` inside one patch, scores each translated copy, moves the
block map back into image coordinates and averages the ``(p/o)**2`` maps.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import List, Tuple

import numpy as np

from . import netpbm
from .backbone import Backbone
from .imaging import resize_bilinear
from .patches import PatchGridSpec, PatchLogitGrid, _as_image, mean_patch_logits, predict_batch
from .tensor import Tensor, sigmoid_np

KINDS = ("raw_patch", "scaled_patch", "gradcam")
OVERLAY_ALPHA = 0.5


@dataclass(frozen=True)
class ShiftSpec:
    offset: int

    def validate(self, patch_side: int) -> None:
        o = self.offset
        if not 1 <= o <= patch_side or patch_side % o:
            raise ValueError(f"shift offset {o} must divide patch side {patch_side} and lie in 1..{patch_side}")

    def offsets(self, patch_side: int) -> List[Tuple[int, int]]:
        self.validate(patch_side)
        steps = range(0, patch_side, self.offset)
        return [(dy, dx) for dy in steps for dx in steps]

    def num_shifts(self, patch_side: int) -> int:
        self.validate(patch_side)
        return (patch_side // self.offset) ** 2


@dataclass
class SaliencyMap:
    values: np.ndarray
    class_id: int
    kind: str

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown saliency kind {self.kind!r}; expected one of {KINDS}")


def block_map(patch_values: np.ndarray, patch_side: int) -> np.ndarray:
    """Expand a [P, P] (or [P, P, C]) grid to pixel resolution."""
    out = np.repeat(np.repeat(patch_values, patch_side, axis=0), patch_side, axis=1)
    return out if out.ndim == 2 else np.moveaxis(out, 2, 0)


def patch_saliency(grid: PatchLogitGrid, class_id: int, use_scaled: bool, patch_side: int) -> SaliencyMap:
    if not 0 <= class_id < grid.num_classes:
        raise ValueError(f"class_id {class_id} outside 0..{grid.num_classes - 1}")
    src = grid.scaled_logits if use_scaled else grid.logits
    kind = "scaled_patch" if use_scaled else "raw_patch"
    return SaliencyMap(block_map(src[:, :, class_id], patch_side), class_id, kind)


def shift_image(img: np.ndarray, dy: int, dx: int) -> np.ndarray:
    """Translate by ``(-dy, -dx)``: ``out[y, x] = img[y + dy, x + dx]``, zero outside."""
    out = np.zeros_like(img)
    S = img.shape[-1]
    out[..., : S - dy, : S - dx] = img[..., dy:, dx:]
    return out


def unshift_map(m: np.ndarray, dy: int, dx: int) -> np.ndarray:
    """Inverse translation of :func:`shift_image`; uncovered pixels get zero."""
    out = np.zeros_like(m)
    S = m.shape[-1]
    out[..., dy:, dx:] = m[..., : S - dy, : S - dx]
    return out


def shifted_maps_batch(images: np.ndarray, model: Backbone, spec: PatchGridSpec, shift: ShiftSpec):
    """Raw and scaled shift-averaged maps for every class, each ``[B, C, S, S]``."""
    images = np.asarray(images, dtype=np.float64)
    if images.ndim == 4:
        images = images[:, 0]
    p = spec.patch_side
    offsets = shift.offsets(p)
    n = len(offsets)
    B, S = images.shape[0], spec.image_side
    shifted = np.stack([shift_image(images, dy, dx) for dy, dx in offsets], axis=1)  # [B, n, S, S]
    z = predict_batch(shifted.reshape(B * n, S, S), model, spec).reshape(B, n, spec.patches_per_side, -1, model.config.num_classes)
    C = model.config.num_classes
    Z = np.array([[mean_patch_logits(z[b, k].reshape(-1, C)) for k in range(n)] for b in range(B)])
    y = sigmoid_np(Z)  # [B, n, C]
    raw = np.zeros((B, model.config.num_classes, S, S))
    scaled = np.zeros_like(raw)
    for k, (dy, dx) in enumerate(offsets):
        blocks = np.stack([block_map(z[b, k], p) for b in range(B)])  # [B, C, S, S]
        raw += unshift_map(blocks, dy, dx)
        scaled += unshift_map(blocks * y[:, k, :, None, None], dy, dx)
    return raw / n, scaled / n


def shifted_saliency(image, model: Backbone, spec: PatchGridSpec, shift: ShiftSpec, class_id: int, use_scaled: bool) -> SaliencyMap:
    img = _as_image(image)
    shift.validate(spec.patch_side)
    if not 0 <= class_id < model.config.num_classes:
        raise ValueError(f"class_id {class_id} outside 0..{model.config.num_classes - 1}")
    raw, scaled = shifted_maps_batch(img[None], model, spec, shift)
    values = (scaled if use_scaled else raw)[0, class_id]
    return SaliencyMap(values, class_id, "scaled_patch" if use_scaled else "raw_patch")


# -------------------------------------------------------------------- Grad-CAM
def gradcam_from_activations(activations: np.ndarray, gradients: np.ndarray, out_side: int) -> np.ndarray:
    """Combine feature maps ``[K, h, w]`` with their gradients into a [0, 1] map."""
    weights = gradients.mean(axis=(1, 2))
    cam = np.maximum(np.tensordot(weights, activations, axes=1), 0.0)
    cam = resize_bilinear(cam, out_side, out_side)
    lo, hi = cam.min(), cam.max()
    if hi <= 0 or hi - lo <= 0:
        return np.zeros((out_side, out_side))
    return (cam - lo) / (hi - lo)


def gradcam_inputs(image, model: Backbone, class_id: int) -> Tuple[np.ndarray, np.ndarray]:
    """Final-stage activations and d(class logit)/d(activation) for one image."""
    img = _as_image(image)
    if model.config.input_side != img.shape[0]:
        raise ValueError(f"Grad-CAM needs a full-image model (input side {img.shape[0]}), got {model.config.input_side}")
    frozen = Backbone(model.config, {k: Tensor(v.data) for k, v in model.params.items()})
    feats = Tensor(frozen.features(Tensor(img[None, None])).data, requires_grad=True)
    logits = frozen.head(feats)
    logits[0, class_id].backward()
    return feats.data[0], feats.grad[0]


def gradcam_all_classes(image, model: Backbone) -> np.ndarray:
    """Grad-CAM maps ``[C, S, S]`` for every class from a single feature pass."""
    img = _as_image(image)
    if model.config.input_side != img.shape[0]:
        raise ValueError(f"Grad-CAM needs a full-image model (input side {img.shape[0]}), got {model.config.input_side}")
    frozen = Backbone(model.config, {k: Tensor(v.data) for k, v in model.params.items()})
    acts = frozen.features(Tensor(img[None, None])).data
    out = []
    for c in range(model.config.num_classes):
        feats = Tensor(acts, requires_grad=True)
        frozen.head(feats)[0, c].backward()
        out.append(gradcam_from_activations(acts[0], feats.grad[0], img.shape[0]))
    return np.stack(out)


def gradcam(image, model: Backbone, class_id: int) -> SaliencyMap:
    acts, grads = gradcam_inputs(image, model, class_id)
    return SaliencyMap(gradcam_from_activations(acts, grads, _as_image(image).shape[0]), class_id, "gradcam")


# ------------------------------------------------------------- map utilities
def most_salient_point(values) -> Tuple[int, int]:
    """Row-major first argmax."""
    v = values.values if isinstance(values, SaliencyMap) else np.asarray(values)
    if v.size == 0:
        raise ValueError("empty saliency map")
    r, c = np.unravel_index(int(np.argmax(v)), v.shape)
    return int(r), int(c)


def normalize_map(values: np.ndarray) -> np.ndarray:
    """Min-max normalize to [0, 1]; a constant map normalizes to all zeros."""
    v = np.asarray(values, dtype=np.float64)
    lo, hi = v.min(), v.max()
    if hi - lo <= 0:
        return np.zeros_like(v)
    return (v - lo) / (hi - lo)


def threshold_to_mask(values, threshold: float) -> np.ndarray:
    v = values.values if isinstance(values, SaliencyMap) else values
    return normalize_map(v) >= threshold


def block_boundary_tv(values: np.ndarray, patch_side: int) -> float:
    """Total absolute jump across the patch-grid lines of a map."""
    v = np.asarray(values, dtype=np.float64)
    cuts = np.arange(patch_side, v.shape[0], patch_side)
    vertical = np.abs(v[:, cuts] - v[:, cuts - 1]).sum()
    horizontal = np.abs(v[cuts, :] - v[cuts - 1, :]).sum()
    return float(vertical + horizontal)


def overlay_rgb(image, values: np.ndarray) -> np.ndarray:
    """Blend a grayscale image with a signed red/blue map.

    The map is scaled by its largest magnitude; a pixel with scaled value
    ``a`` is tinted toward red (``a > 0``) or blue (``a < 0``) with weight
    ``OVERLAY_ALPHA * |a|``.
    """
    base = np.clip(_as_image(image), 0.0, 1.0)
    v = np.asarray(values, dtype=np.float64)
    if v.shape != base.shape:
        raise ValueError(f"map shape {v.shape} does not match image shape {base.shape}")
    peak = np.abs(v).max()
    a = v / peak if peak > 0 else np.zeros_like(v)
    pos, neg = np.maximum(a, 0.0), np.maximum(-a, 0.0)
    color = np.stack([1.0 - neg, 1.0 - pos - neg, 1.0 - pos], axis=-1)
    weight = (OVERLAY_ALPHA * np.abs(a))[..., None]
    return base[..., None] * (1.0 - weight) + color * weight


def render_overlay(image, saliency, out_path) -> None:
    values = saliency.values if isinstance(saliency, SaliencyMap) else saliency
    netpbm.write_ppm(out_path, overlay_rgb(image, values))


def save_map(saliency: SaliencyMap, path) -> None:
    """16-bit PGM of the min-max quantized map plus a JSON sidecar with the range."""
    path = Path(path)
    v = saliency.values
    lo, hi = float(v.min()), float(v.max())
    netpbm.write_pgm(path, normalize_map(v), maxval=65535)
    sidecar = {"min": lo, "max": hi, "class_id": saliency.class_id, "kind": saliency.kind}
    path.with_suffix(".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")


def load_map(path) -> SaliencyMap:
    path = Path(path)
    meta = json.loads(path.with_suffix(".json").read_text())
    q = netpbm.read_pgm(path)
    values = meta["min"] + q * (meta["max"] - meta["min"])
    return SaliencyMap(values, int(meta["class_id"]), meta["kind"])
