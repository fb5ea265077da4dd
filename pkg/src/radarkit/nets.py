"""Desk-scale classifier and detector networks plus a binary checkpoint format.

Two architectures are registered:

========  ===================================================================
name      layers
========  ===================================================================
cnn-small conv(16,3x3,pad1) relu pool2 conv(32,3x3,pad1) relu pool2 flatten
          dense(128) relu head
cnn-res   conv(16,3x3,pad1) relu residual[conv(16,3x3,pad1) relu] pool2
          conv(32,3x3,pad1) relu pool2 flatten dense(128) relu head
========  ===================================================================

The classifier head is a dense layer to ``K`` logits; the detector head is a
dense layer to one logit followed by a sigmoid giving P(adv). For an input of
``C x H x W`` the parameter count of ``cnn-small`` is::

    16*C*9 + 16  +  32*16*9 + 32  +  32*(H/4)*(W/4)*128 + 128  +  128*out + out
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import diffcore as dc
from .diffcore import Tape, Tensor

ARCHITECTURES = ("cnn-small", "cnn-res")
LAYER_KINDS = ("conv", "relu", "pool", "flatten", "dense", "residual", "head")

CHECKPOINT_MAGIC = b"RDR1"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    in_ch: int = 0
    out_ch: int = 0
    k: int = 0
    pad: int = 0
    stride: int = 1
    sigmoid: bool = False

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        if self.kind in ("conv", "residual"):
            return {"weight": (self.out_ch, self.in_ch, self.k, self.k), "bias": (self.out_ch,)}
        if self.kind in ("dense", "head"):
            return {"weight": (self.in_ch, self.out_ch), "bias": (self.out_ch,)}
        return {}

    def fan_in(self) -> int:
        if self.kind in ("conv", "residual"):
            return self.in_ch * self.k * self.k
        return self.in_ch


@dataclass(frozen=True)
class ArchConfig:
    name: str = "cnn-small"
    in_channels: int = 3
    image_size: int = 32
    num_outputs: int = 10
    detector: bool = False


def layer_specs(cfg: ArchConfig) -> list[LayerSpec]:
    if cfg.name not in ARCHITECTURES:
        raise ValueError(f"unknown architecture {cfg.name!r}; registered: {ARCHITECTURES}")
    if cfg.image_size % 4:
        raise ValueError("image_size must be divisible by 4 (two 2x2 pools)")
    C, S = cfg.in_channels, cfg.image_size
    specs = [LayerSpec("conv", C, 16, 3, 1), LayerSpec("relu")]
    if cfg.name == "cnn-res":
        specs.append(LayerSpec("residual", 16, 16, 3, 1))
    specs += [
        LayerSpec("pool", k=2),
        LayerSpec("conv", 16, 32, 3, 1),
        LayerSpec("relu"),
        LayerSpec("pool", k=2),
        LayerSpec("flatten"),
        LayerSpec("dense", 32 * (S // 4) ** 2, 128),
        LayerSpec("relu"),
    ]
    out = 1 if cfg.detector else cfg.num_outputs
    specs.append(LayerSpec("head", 128, out, sigmoid=cfg.detector))
    return specs


def param_count(cfg: ArchConfig) -> int:
    return int(sum(np.prod(s) for spec in layer_specs(cfg) for s in spec.param_shapes().values()))


@dataclass
class Model:
    """Ordered layers with named parameter tensors ``layerN.weight`` / ``layerN.bias``."""

    arch: ArchConfig
    layers: list[LayerSpec]
    params: dict[str, Tensor] = field(default_factory=dict)
    mode: str = "train"

    def __post_init__(self):
        self.set_mode(self.mode)

    # mode handling: eval freezes parameters so only input gradients flow
    def set_mode(self, mode: str) -> "Model":
        if mode not in ("train", "eval"):
            raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
        self.mode = mode
        for p in self.params.values():
            p.requires_grad = mode == "train"
            if mode == "eval":
                p.grad = None
        return self

    def train(self) -> "Model":
        return self.set_mode("train")

    def eval(self) -> "Model":
        return self.set_mode("eval")

    @property
    def is_detector(self) -> bool:
        return self.arch.detector

    def num_params(self) -> int:
        return int(sum(p.data.size for p in self.params.values()))

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for k, v in state.items():
            self.params[k].data = np.array(v, dtype=dc.DTYPE)

    def copy(self) -> "Model":
        new = build_model(self.arch, seed=0)
        new.load_state(self.state())
        return new.set_mode(self.mode)

    def forward(self, x: Tensor) -> Tensor:
        """Raw output: class logits (classifier) or the pre-sigmoid logit (detector)."""
        x = x if isinstance(x, Tensor) else Tensor(x)
        expected = (self.arch.in_channels, self.arch.image_size, self.arch.image_size)
        if x.data.ndim != 4 or x.shape[1:] != expected:
            raise ValueError(f"input shape {x.shape} does not match model input {expected}")
        h = x
        for i, spec in enumerate(self.layers):
            w = self.params.get(f"layer{i}.weight")
            b = self.params.get(f"layer{i}.bias")
            if spec.kind == "conv":
                h = dc.add_bias(dc.conv2d(h, w, spec.stride, spec.pad), b)
            elif spec.kind == "residual":
                h = dc.add(h, dc.relu(dc.add_bias(dc.conv2d(h, w, spec.stride, spec.pad), b)))
            elif spec.kind == "relu":
                h = dc.relu(h)
            elif spec.kind == "pool":
                h = dc.mean_pool(h, spec.k)
            elif spec.kind == "flatten":
                h = dc.flatten(h)
            elif spec.kind in ("dense", "head"):
                h = dc.add_bias(dc.matmul(h, w), b)
        if self.is_detector:
            h = dc.reshape(h, (h.shape[0],))
        return h

    __call__ = forward


def build_model(arch: ArchConfig, seed: int) -> Model:
    """He-uniform weights (bound ``sqrt(6 / fan_in)``), zero biases."""
    specs = layer_specs(arch)
    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {}
    for i, spec in enumerate(specs):
        shapes = spec.param_shapes()
        if not shapes:
            continue
        bound = np.sqrt(6.0 / spec.fan_in())
        params[f"layer{i}.weight"] = Tensor(rng.uniform(-bound, bound, shapes["weight"]))
        params[f"layer{i}.bias"] = Tensor(np.zeros(shapes["bias"]))
    return Model(arch, specs, params)


def build_classifier(name: str = "cnn-small", seed: int = 0, *, num_classes: int = 10,
                     in_channels: int = 3, image_size: int = 32) -> Model:
    return build_model(ArchConfig(name, in_channels, image_size, num_classes, False), seed)


def build_detector(name: str = "cnn-small", seed: int = 0, *, in_channels: int = 3,
                   image_size: int = 32) -> Model:
    return build_model(ArchConfig(name, in_channels, image_size, 1, True), seed)


def predict(f: Model, x) -> Tensor:
    """Class logits for a batch; recorded on the active tape if any."""
    return f.forward(x)


def detect(g: Model, x) -> Tensor:
    """P(adv) per item."""
    return dc.sigmoid(g.forward(x))


def predict_labels(f: Model, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
    out = [np.argmax(f.forward(Tensor(x[i:i + batch_size])).data, axis=1)
           for i in range(0, len(x), batch_size)]
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def detect_scores(g: Model, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
    out = [detect(g, Tensor(x[i:i + batch_size])).data for i in range(0, len(x), batch_size)]
    return np.concatenate(out) if out else np.zeros(0)


def input_gradient(model: Model, x: np.ndarray, loss_fn) -> tuple[float, np.ndarray]:
    """Value and gradient of ``loss_fn(model.forward(x))`` with respect to ``x``."""
    xt = Tensor(x, requires_grad=True)
    with Tape() as tape:
        loss = loss_fn(model.forward(xt))
    dc.backward(tape, loss)
    return loss.item(), xt.grad


# ----------------------------------------------------------------------------
# checkpoints


class CheckpointError(ValueError):
    pass


class BadMagicError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


def encode_tensors(tensors: dict[str, np.ndarray]) -> bytes:
    parts = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(tensors))]
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr, dtype="<f8")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr).tobytes())
    return b"".join(parts)


def decode_tensors(buf: bytes) -> dict[str, np.ndarray]:
    if len(buf) < 4 or buf[:4] != CHECKPOINT_MAGIC:
        raise BadMagicError(f"bad magic: expected {CHECKPOINT_MAGIC!r}, got {buf[:4]!r}")
    pos = 4

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise TruncatedCheckpointError(f"truncation: needed {n} bytes at offset {pos}")
        chunk = buf[pos:pos + n]
        pos += n
        return chunk

    (version,) = struct.unpack("<I", take(4))
    if version != CHECKPOINT_VERSION:
        raise VersionMismatchError(f"version mismatch: file {version}, supported {CHECKPOINT_VERSION}")
    (count,) = struct.unpack("<I", take(4))
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        name = take(nlen).decode("utf-8")
        (rank,) = struct.unpack("<B", take(1))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        n = int(np.prod(dims)) if rank else 1
        out[name] = np.frombuffer(take(8 * n), dtype="<f8").astype(np.float64).reshape(dims)
    if pos != len(buf):
        raise CheckpointError(f"{len(buf) - pos} trailing bytes after last tensor")
    return out


def save_checkpoint(model: Model, path) -> None:
    Path(path).write_bytes(encode_tensors({k: v.data for k, v in model.params.items()}))


def _infer_arch(tensors: dict[str, np.ndarray]) -> Optional[ArchConfig]:
    w0 = tensors.get("layer0.weight")
    if w0 is None or w0.ndim != 4:
        return None
    name = "cnn-res" if ("layer2.weight" in tensors or "layer2.bias" in tensors) else "cnn-small"
    specs = layer_specs(ArchConfig(name, image_size=4))
    head_i = len(specs) - 1
    dense_w = tensors.get(f"layer{head_i - 2}.weight")
    head_w = tensors.get(f"layer{head_i}.weight")
    if dense_w is None or head_w is None or dense_w.ndim != 2 or head_w.ndim != 2:
        return None
    side = int(round(np.sqrt(dense_w.shape[0] / 32))) * 4
    out = head_w.shape[1]
    # a one-logit head is a detector; classifiers need K >= 2
    return ArchConfig(name, w0.shape[1], side, out if out > 1 else 1, out == 1)


def load_checkpoint(path) -> Model:
    """Rebuild a model from a checkpoint; architecture is inferred from tensor shapes.

    The model comes back in eval mode.
    """
    tensors = decode_tensors(Path(path).read_bytes())
    arch = _infer_arch(tensors)
    if arch is None:
        raise TruncatedCheckpointError("truncation: checkpoint lacks the tensors that identify an architecture")
    model = build_model(arch, seed=0)
    missing = sorted(set(model.params) - set(tensors))
    if missing:
        raise TruncatedCheckpointError(f"truncation: missing tensors {missing}")
    extra = sorted(set(tensors) - set(model.params))
    if extra:
        raise CheckpointError(f"unexpected tensors {extra}")
    for name, p in model.params.items():
        if tensors[name].shape != p.shape:
            raise CheckpointError(f"tensor {name} has shape {tensors[name].shape}, expected {p.shape}")
        p.data = tensors[name].copy()
    return model.eval()
