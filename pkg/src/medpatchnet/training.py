"""AdamW, one-cycle schedule, image augmentation and the training loop.

Only image-level labels reach the loss: the patch logits of each image
are averaged into global logits and scored with binary cross-entropy.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from .backbone import Backbone
from .imaging import crop_rotate_coords, sample
from .patches import PatchGridSpec, partition_batch, predict_batch
from .tensor import Tensor, bce_with_logits, sigmoid_np


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    batch_images: int = 16
    peak_lr: float = 1e-4
    warmup_fraction: float = 0.05
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    augment_crop: bool = True
    augment_rotate: bool = True
    augment_brightness: bool = True

    def __post_init__(self):
        if not 0 < self.warmup_fraction < 1:
            raise ValueError("warmup_fraction must lie in (0, 1)")
        if self.peak_lr <= 0:
            raise ValueError("peak_lr must be positive")
        if self.epochs < 1 or self.batch_images < 1:
            raise ValueError("epochs and batch_images must be >= 1")


@dataclass(frozen=True)
class AugmentSpec:
    crop_area_range: Tuple[float, float] = (0.5, 1.0)
    rotation_range_deg: Tuple[float, float] = (-5.0, 5.0)
    brightness_range: Tuple[float, float] = (0.7, 1.3)

    def __post_init__(self):
        for name in ("crop_area_range", "rotation_range_deg", "brightness_range"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name} must be ordered (got {lo} > {hi})")
        if not 0 < self.crop_area_range[0] <= self.crop_area_range[1] <= 1:
            raise ValueError("crop_area_range must lie in (0, 1]")

    @classmethod
    def from_config(cls, config: TrainConfig) -> "AugmentSpec":
        return cls(
            crop_area_range=(0.5, 1.0) if config.augment_crop else (1.0, 1.0),
            rotation_range_deg=(-5.0, 5.0) if config.augment_rotate else (0.0, 0.0),
            brightness_range=(0.7, 1.3) if config.augment_brightness else (1.0, 1.0),
        )


IDENTITY_AUGMENT = AugmentSpec((1.0, 1.0), (0.0, 0.0), (1.0, 1.0))


# ------------------------------------------------------------------ optimizer
@dataclass
class AdamWState:
    step: int = 0
    m: List[np.ndarray] = field(default_factory=list)
    v: List[np.ndarray] = field(default_factory=list)


def adamw_step(
    params: Sequence[np.ndarray],
    grads: Sequence[Optional[np.ndarray]],
    state: AdamWState,
    lr: float,
    betas: Tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
    weight_decay: float = 0.0,
) -> None:
    """In-place AdamW update: decoupled decay first, then a bias-corrected Adam step."""
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    if len(state.m) != len(params) or len(grads) != len(params):
        raise ValueError("optimizer state, params and grads must have equal length")
    b1, b2 = betas
    state.step += 1
    c1 = 1 - b1**state.step
    c2 = 1 - b2**state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            g = np.zeros_like(p)
        if p.shape != g.shape or p.shape != m.shape:
            raise ValueError(f"shape mismatch: param {p.shape}, grad {g.shape}, state {m.shape}")
        if weight_decay:
            p *= 1 - lr * weight_decay
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


def onecycle_lr(step: int, total_steps: int, config: TrainConfig, div_factor: float = 25.0, final_div: float = 1e4) -> float:
    """Cosine warm-up from ``peak/div_factor`` to the peak, cosine decay to ``peak/final_div``."""
    if not 0 <= step < total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps})")
    peak = config.peak_lr
    if total_steps == 1:
        return peak
    start, final = peak / div_factor, peak / final_div
    warm_end = warmup_end_step(total_steps, config.warmup_fraction)
    if step <= warm_end:
        t = step / warm_end
        return peak - (peak - start) * (1 + math.cos(math.pi * t)) / 2
    u = (step - warm_end) / (total_steps - 1 - warm_end)
    return peak - (peak - final) * (1 - math.cos(math.pi * u)) / 2


def warmup_end_step(total_steps: int, warmup_fraction: float) -> int:
    return min(max(1, round(warmup_fraction * total_steps)), total_steps - 1)


# --------------------------------------------------------------- augmentation
def augment(image: np.ndarray, mask: Optional[np.ndarray], spec: AugmentSpec, rng: np.random.Generator):
    """Random square crop + resize, small rotation (zero fill), brightness scale.

    ``mask`` may be [S, S] or [C, S, S]; it receives the same geometric
    transform with nearest-neighbour sampling.
    """
    img = np.asarray(image, dtype=np.float64)
    squeeze = img.ndim == 3
    if squeeze:
        img = img[0]
    S = img.shape[0]
    area = rng.uniform(*spec.crop_area_range)
    crop = S * math.sqrt(area)
    top = rng.uniform(0.0, S - crop)
    left = rng.uniform(0.0, S - crop)
    angle = rng.uniform(*spec.rotation_range_deg)
    gain = rng.uniform(*spec.brightness_range)
    coords = crop_rotate_coords(S, top, left, crop, angle)
    out = np.clip(sample(img, coords, order=1) * gain, 0.0, 1.0)
    out_mask = None
    if mask is not None:
        m = np.asarray(mask)
        if m.ndim == 2:
            out_mask = sample(m.astype(np.float64), coords, order=0) > 0.5
        else:
            out_mask = np.stack([sample(mc.astype(np.float64), coords, order=0) > 0.5 for mc in m])
    return (out[None] if squeeze else out), out_mask


# ------------------------------------------------------------------- training
def global_logits(model: Backbone, images: np.ndarray, spec: PatchGridSpec) -> Tensor:
    """Differentiable image-level logits ``[B, C]`` as the mean of patch logits."""
    B = images.shape[0]
    z = model(Tensor(partition_batch(images, spec)))
    return z.reshape(B, spec.num_patches, model.config.num_classes).mean(axis=1)


def _mean_auroc(scores: np.ndarray, labels: np.ndarray) -> Tuple[Optional[float], List[Optional[float]]]:
    from .metrics import auroc

    per = []
    for c in range(labels.shape[1]):
        if 0 < labels[:, c].sum() < len(labels):
            per.append(auroc(scores[:, c], labels[:, c]))
        else:
            per.append(None)
    defined = [a for a in per if a is not None]
    return (float(np.mean(defined)) if defined else None), per


@dataclass
class TrainResult:
    model: Backbone
    log: List[dict]
    initial_loss: float
    final_loss: float


def evaluate_loss(model: Backbone, images: np.ndarray, labels: np.ndarray, spec: PatchGridSpec) -> Tuple[float, np.ndarray]:
    z = predict_batch(images, model, spec)
    Z = z.mean(axis=(1, 2))
    loss = bce_with_logits(Tensor(Z), labels).item()
    return loss, sigmoid_np(Z)


def train(
    model: Backbone,
    images: np.ndarray,
    labels: np.ndarray,
    spec: PatchGridSpec,
    config: TrainConfig,
    valid: Optional[Tuple[np.ndarray, np.ndarray]] = None,
    on_log: Optional[Callable[[dict], None]] = None,
) -> TrainResult:
    """Fit ``model`` in place from image-level labels only.

    Sample ``i`` in epoch ``e`` is augmented with an rng keyed by
    ``(seed, e, i)`` and the epoch order by ``(seed, e)``, so results do
    not depend on how work is scheduled.
    """
    images = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    N = len(images)
    if N == 0:
        raise ValueError("cannot train on an empty dataset")
    if labels.shape != (N, model.config.num_classes):
        raise ValueError(f"labels must have shape [{N}, {model.config.num_classes}], got {labels.shape}")
    if model.config.input_side != spec.patch_side:
        raise ValueError(f"model input side {model.config.input_side} != patch side {spec.patch_side}")

    aug = AugmentSpec.from_config(config)
    use_aug = aug != IDENTITY_AUGMENT
    B = config.batch_images
    steps_per_epoch = math.ceil(N / B)
    total = config.epochs * steps_per_epoch
    params = model.parameters()
    state = AdamWState()
    initial_loss, _ = evaluate_loss(model, images, labels, spec)
    log: List[dict] = []
    step = 0
    for epoch in range(config.epochs):
        order = np.random.default_rng([config.seed, epoch]).permutation(N)
        losses = []
        for s in range(steps_per_epoch):
            idx = order[s * B : (s + 1) * B]
            batch = images[idx]
            if use_aug:
                batch = np.stack(
                    [augment(images[i], None, aug, np.random.default_rng([config.seed, epoch, int(i)]))[0] for i in idx]
                )
            model.zero_grad()
            loss = bce_with_logits(global_logits(model, batch, spec), labels[idx])
            loss.backward()
            adamw_step(
                [p.data for p in params],
                [p.grad for p in params],
                state,
                lr=onecycle_lr(step, total, config),
                betas=(config.beta1, config.beta2),
                eps=config.eps,
                weight_decay=config.weight_decay,
            )
            losses.append(loss.item() * len(idx))
            step += 1
        entry = {"epoch": epoch + 1, "split": "train", "loss": float(np.sum(losses) / N), "auroc": None}
        log.append(entry)
        if on_log:
            on_log(entry)
        if valid is not None:
            vloss, vscores = evaluate_loss(model, valid[0], valid[1], spec)
            mean_auc, per_class = _mean_auroc(vscores, valid[1])
            entry = {"epoch": epoch + 1, "split": "valid", "loss": vloss, "auroc": mean_auc, "auroc_per_class": per_class}
            log.append(entry)
            if on_log:
                on_log(entry)
    model.zero_grad()
    final_loss, _ = evaluate_loss(model, images, labels, spec)
    return TrainResult(model, log, initial_loss, final_loss)


def format_log_line(entry: dict) -> str:
    return json.dumps(entry, sort_keys=True)
