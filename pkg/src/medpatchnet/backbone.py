"""Small grayscale CNN classifier and its binary checkpoint format.

Inputs are standardized with a fixed mean and scale stored in the
config.  Each stage is ``conv3x3 -> ReLU -> conv2x2/stride2 -> ReLU``;
the stack ends in a global average pool and a linear layer producing
``C`` logits.  Nothing depends on batch statistics, so every sample in
a batch is processed independently of the others.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from .tensor import Tensor, conv2d, global_avg_pool, linear, relu

MAGIC = b"MPNCKPT1"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    """Raised for unreadable, truncated or incompatible checkpoint files."""


class ConfigMismatchError(CheckpointError):
    """Raised when a checkpoint was written for a different model configuration."""


@dataclass(frozen=True)
class BackboneConfig:
    num_classes: int
    input_side: int
    stage_channels: Tuple[int, ...] = (16, 32, 64)
    kernel_size: int = 3
    in_channels: int = 1
    input_mean: float = 0.5
    input_std: float = 0.25

    def __post_init__(self):
        object.__setattr__(self, "stage_channels", tuple(int(c) for c in self.stage_channels))
        if self.in_channels != 1:
            raise ValueError("backbone takes single-channel (grayscale) input; in_channels must be 1")
        if self.num_classes < 1:
            raise ValueError("num_classes must be >= 1")
        if not self.stage_channels or min(self.stage_channels) < 1:
            raise ValueError("stage_channels must be a non-empty list of positive ints")
        if not self.input_std > 0:
            raise ValueError("input_std must be positive")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ValueError("kernel_size must be a positive odd integer")
        if self.input_side < 2 ** len(self.stage_channels):
            raise ValueError(
                f"input_side {self.input_side} too small for {len(self.stage_channels)} stride-2 stages "
                f"(needs >= {2 ** len(self.stage_channels)})"
            )

    @property
    def feature_side(self) -> int:
        side = self.input_side
        for _ in self.stage_channels:
            side = (side - 2) // 2 + 1
        return side

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stage_channels"] = list(self.stage_channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "BackboneConfig":
        return cls(**d)


class Backbone:
    def __init__(self, config: BackboneConfig, params: Dict[str, Tensor]):
        self.config = config
        self.params = params

    @classmethod
    def build(cls, config: BackboneConfig, seed: int = 0) -> "Backbone":
        """Fan-in scaled normal init (He for convs, LeCun for the head), zero biases."""
        rng = np.random.default_rng(seed)
        params: Dict[str, Tensor] = {}
        cin = config.in_channels
        k = config.kernel_size
        for i, cout in enumerate(config.stage_channels):
            params[f"stage{i}.conv.weight"] = rng.normal(0.0, np.sqrt(2.0 / (cin * k * k)), (cout, cin, k, k))
            params[f"stage{i}.conv.bias"] = np.zeros(cout)
            params[f"stage{i}.down.weight"] = rng.normal(0.0, np.sqrt(2.0 / (cout * 4)), (cout, cout, 2, 2))
            params[f"stage{i}.down.bias"] = np.zeros(cout)
            cin = cout
        params["head.weight"] = rng.normal(0.0, np.sqrt(1.0 / cin), (config.num_classes, cin))
        params["head.bias"] = np.zeros(config.num_classes)
        return cls(config, {name: Tensor(v, requires_grad=True) for name, v in params.items()})

    def parameters(self) -> List[Tensor]:
        return list(self.params.values())

    def named_parameters(self):
        return self.params.items()

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def _check_input(self, x: Tensor) -> None:
        side = self.config.input_side
        if x.ndim != 4 or x.shape[1] != 1 or x.shape[2] != side or x.shape[3] != side:
            raise ValueError(f"backbone expects input [N,1,{side},{side}], got {list(x.shape)}")

    def features(self, x: Tensor) -> Tensor:
        """Output of the final stage, shape [N, channels, f, f]."""
        self._check_input(x)
        # fixed standardization: [0, 1] intensities are far from zero-centred
        x = (x - self.config.input_mean) * (1.0 / self.config.input_std)
        pad = self.config.kernel_size // 2
        for i in range(len(self.config.stage_channels)):
            p = self.params
            x = relu(conv2d(x, p[f"stage{i}.conv.weight"], p[f"stage{i}.conv.bias"], stride=1, padding=pad))
            x = relu(conv2d(x, p[f"stage{i}.down.weight"], p[f"stage{i}.down.bias"], stride=2, padding=0))
        return x

    def head(self, feats: Tensor) -> Tensor:
        return linear(global_avg_pool(feats), self.params["head.weight"], self.params["head.bias"])

    def forward(self, x: Tensor) -> Tensor:
        if isinstance(x, np.ndarray):
            x = Tensor(x)
        self._check_input(x)
        if x.shape[0] == 0:
            return Tensor(np.zeros((0, self.config.num_classes)))
        return self.head(self.features(x))

    __call__ = forward

    def logits(self, batch: np.ndarray, chunk: int = 4096) -> np.ndarray:
        """Inference-only forward on plain arrays; no graph is recorded."""
        batch = np.asarray(batch, dtype=np.float64)
        frozen = Backbone(self.config, {k: Tensor(v.data) for k, v in self.params.items()})
        if batch.shape[0] == 0:
            frozen._check_input(Tensor(batch))
            return np.zeros((0, self.config.num_classes))
        out = [frozen.forward(Tensor(batch[i : i + chunk])).data for i in range(0, batch.shape[0], chunk)]
        return np.concatenate(out, axis=0)

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}


# ----------------------------------------------------------------- checkpoint
def _pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


def save(model: Backbone, path, grid: Optional[dict] = None, metadata: Optional[dict] = None) -> None:
    """Write ``model`` as a little-endian binary checkpoint.

    Layout: magic, u32 format version, u32-length JSON config block, u32
    tensor count, then per tensor (u32 name length, name, u32 rank, u32
    dims..., f64 payload).
    """
    block = {"backbone": model.config.to_dict(), "patch_grid": grid, "metadata": metadata or {}}
    chunks = [MAGIC, struct.pack("<I", FORMAT_VERSION), _pack_str(json.dumps(block, sort_keys=True))]
    chunks.append(struct.pack("<I", len(model.params)))
    for name, t in model.params.items():
        chunks.append(_pack_str(name))
        chunks.append(struct.pack("<I", t.data.ndim))
        chunks.append(struct.pack(f"<{t.data.ndim}I", *t.data.shape))
        chunks.append(t.data.astype("<f8").tobytes())
    Path(path).write_bytes(b"".join(chunks))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError(f"checkpoint truncated at byte {self.pos} (wanted {n} more bytes)")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def string(self) -> str:
        return self.take(self.u32()).decode("utf-8")


def load_checkpoint(path, expected_config: Optional[BackboneConfig] = None) -> Tuple[Backbone, dict]:
    """Read a checkpoint, returning the model and the full config block."""
    r = _Reader(Path(path).read_bytes())
    if r.take(len(MAGIC)) != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    version = r.u32()
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version} (expected {FORMAT_VERSION})")
    try:
        block = json.loads(r.string())
        config = BackboneConfig.from_dict(block["backbone"])
    except (ValueError, KeyError, TypeError) as exc:
        raise CheckpointError(f"{path}: malformed config block: {exc}") from exc
    if expected_config is not None and config != expected_config:
        raise ConfigMismatchError(f"{path}: checkpoint config {config} does not match expected {expected_config}")

    tensors: Dict[str, np.ndarray] = {}
    for _ in range(r.u32()):
        name = r.string()
        rank = r.u32()
        dims = struct.unpack(f"<{rank}I", r.take(4 * rank))
        count = int(np.prod(dims)) if rank else 1
        tensors[name] = np.frombuffer(r.take(8 * count), dtype="<f8").reshape(dims).astype(np.float64)
    if r.pos != len(r.buf):
        raise CheckpointError(f"{path}: {len(r.buf) - r.pos} trailing bytes after last tensor")

    reference = Backbone.build(config, seed=0)
    if set(tensors) != set(reference.params):
        raise ConfigMismatchError(f"{path}: parameter names do not match the stored config")
    for name, ref in reference.params.items():
        if tensors[name].shape != ref.shape:
            raise ConfigMismatchError(
                f"{path}: parameter {name} has shape {tensors[name].shape}, config implies {ref.shape}"
            )
    params = {name: Tensor(tensors[name], requires_grad=True) for name in reference.params}
    return Backbone(config, params), block


def load(path, expected_config: Optional[BackboneConfig] = None) -> Backbone:
    return load_checkpoint(path, expected_config)[0]
