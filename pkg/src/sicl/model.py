"""Conv encoder f, projector g and linear classification head.

Encoder: three valid conv1d layers (C_in -> 32 -> 32 -> 64, kernel 5, ReLU)
followed by a global average pool over time, giving the 64-d representation
``h``.  Projector: linear(64, 64) + ReLU + linear(64, 32), then L2
normalization, giving ``z``.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import numerics as nx
from .errors import ContractError, ShapeError
from .numerics import Tape, Tensor

CONV_CHANNELS = (32, 32, 64)
KERNEL = 5
H_DIM = 64
PROJ_HIDDEN = 64
Z_DIM = 32

CKPT_MAGIC = b"SICKPT"
CKPT_VERSION = 1


@dataclass
class EncoderParams:
    in_channels: int
    tensors: dict[str, np.ndarray]

    @property
    def num_parameters(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def copy(self) -> "EncoderParams":
        return EncoderParams(self.in_channels, {k: v.copy() for k, v in self.tensors.items()})


@dataclass
class LinearHead:
    weight: np.ndarray  # (num_classes, d_h)
    bias: np.ndarray  # (num_classes,)

    @property
    def num_classes(self) -> int:
        return self.weight.shape[0]


def _uniform(rng, shape, fan_in):
    a = np.sqrt(1.0 / fan_in)
    return rng.uniform(-a, a, size=shape)


def param_shapes(in_channels: int) -> dict[str, tuple[int, ...]]:
    c1, c2, c3 = CONV_CHANNELS
    return {
        "conv1.w": (c1, in_channels, KERNEL), "conv1.b": (c1,),
        "conv2.w": (c2, c1, KERNEL), "conv2.b": (c2,),
        "conv3.w": (c3, c2, KERNEL), "conv3.b": (c3,),
        "proj1.w": (PROJ_HIDDEN, H_DIM), "proj1.b": (PROJ_HIDDEN,),
        "proj2.w": (Z_DIM, PROJ_HIDDEN), "proj2.b": (Z_DIM,),
    }


def init_encoder(in_channels: int, rng: np.random.Generator) -> EncoderParams:
    """Uniform(-a, a) with a = sqrt(1 / fan_in) for weights and biases of each layer."""
    tensors = {}
    for name, shape in param_shapes(in_channels).items():
        layer = name.split(".")[0]
        w_shape = param_shapes(in_channels)[layer + ".w"]
        fan_in = int(np.prod(w_shape[1:]))
        tensors[name] = _uniform(rng, shape, fan_in)
    return EncoderParams(in_channels, tensors)


def zero_encoder(in_channels: int) -> EncoderParams:
    return EncoderParams(in_channels, {k: np.zeros(s) for k, s in param_shapes(in_channels).items()})


def init_head(num_classes: int, rng: np.random.Generator, d_h: int = H_DIM) -> LinearHead:
    return LinearHead(_uniform(rng, (num_classes, d_h), d_h), _uniform(rng, (num_classes,), d_h))


def _linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return nx.add(nx.matmul(x, nx.transpose(w)), b)


def forward(params: EncoderParams, x, tape: Tape | None = None):
    """Batched forward pass on ``x`` of shape ``(N, C, T)``.

    With a tape, parameters are watched and the returned dict maps parameter
    names to their leaf tensors.  Returns ``(h, z, leaves)``.
    """
    x = x if isinstance(x, Tensor) else Tensor(x)
    if x.ndim != 3:
        raise ShapeError(f"expected (N, C, T) input, got {x.shape}")
    if x.shape[1] != params.in_channels:
        raise ShapeError(f"encoder expects {params.in_channels} channels, got {x.shape[1]}")
    if tape is not None:
        p = {k: tape.watch(v) for k, v in params.tensors.items()}
    else:
        p = {k: Tensor._wrap(v.copy()) for k, v in params.tensors.items()}
    a = x
    for layer in ("conv1", "conv2", "conv3"):
        a = nx.relu(nx.conv1d(a, p[layer + ".w"], p[layer + ".b"]))
    h = nx.global_avg_pool(a)
    u = nx.relu(_linear(h, p["proj1.w"], p["proj1.b"]))
    u = _linear(u, p["proj2.w"], p["proj2.b"])
    z = nx.l2_normalize(u, axis=1)
    return h, z, p


def encode(params: EncoderParams, window) -> tuple[np.ndarray, np.ndarray]:
    """``(h, z)`` for a single window (a SensorWindow or a ``(C, T)`` array)."""
    values = getattr(window, "values", window)
    h, z, _ = forward(params, np.asarray(values)[None])
    return h.data[0].copy(), z.data[0].copy()


def encode_batch(params: EncoderParams, x: np.ndarray, chunk: int = 256) -> tuple[np.ndarray, np.ndarray]:
    hs, zs = [], []
    for start in range(0, len(x), chunk):
        h, z, _ = forward(params, x[start:start + chunk])
        hs.append(h.data)
        zs.append(z.data)
    return np.concatenate(hs), np.concatenate(zs)


def classify(head: LinearHead, h) -> np.ndarray:
    """Logits ``h W^T + b``; ``h`` may be a single vector or a batch."""
    h = np.asarray(h, dtype=np.float64)
    if h.shape[-1] != head.weight.shape[1]:
        raise ShapeError(f"head expects features of size {head.weight.shape[1]}, got {h.shape[-1]}")
    return h @ head.weight.T + head.bias


def head_forward(w: Tensor, b: Tensor, h: Tensor) -> Tensor:
    return _linear(h, w, b)


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    onehot = np.zeros(logits.shape)
    onehot[np.arange(len(labels)), labels] = 1.0
    return nx.neg(nx.mean(nx.sum(nx.mul(nx.log_softmax(logits, axis=1), onehot), axis=1)))


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------
#
# b"SICKPT" | version u16 | count u32 | count x tensor
# tensor: name_len u16 | utf-8 name | ndim u8 | dims u32 * ndim | f64 data
# little-endian throughout.

def save_checkpoint(path, tensors: dict[str, np.ndarray]) -> Path:
    path = Path(path)
    parts = [CKPT_MAGIC, struct.pack("<HI", CKPT_VERSION, len(tensors))]
    for name, arr in tensors.items():
        raw = name.encode()
        arr = np.asarray(arr, dtype="<f8")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr).tobytes())
    path.write_bytes(b"".join(parts))
    return path


def load_checkpoint(path) -> dict[str, np.ndarray]:
    path = Path(path)
    if not path.exists():
        raise ContractError(f"checkpoint not found: {path}")
    raw = path.read_bytes()
    if raw[:len(CKPT_MAGIC)] != CKPT_MAGIC:
        raise ContractError(f"{path}: not a checkpoint (bad magic)")
    pos = len(CKPT_MAGIC)
    version, count = struct.unpack_from("<HI", raw, pos)
    if version != CKPT_VERSION:
        raise ContractError(f"{path}: unsupported checkpoint version {version}")
    pos += 6
    out = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", raw, pos)
        pos += 2
        name = raw[pos:pos + nlen].decode()
        pos += nlen
        (ndim,) = struct.unpack_from("<B", raw, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}I", raw, pos)
        pos += 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        out[name] = np.frombuffer(raw, "<f8", size, pos).astype(np.float64).reshape(shape)
        pos += 8 * size
    return out


def encoders_to_tensors(encoders: dict) -> dict[str, np.ndarray]:
    """Flatten ``{modality: EncoderParams}`` into ``"modality/param"`` keys."""
    out = {}
    for modality, enc in encoders.items():
        key = getattr(modality, "value", modality)
        for name, arr in enc.tensors.items():
            out[f"{key}/{name}"] = arr
    return out


def tensors_to_encoders(tensors: dict[str, np.ndarray]) -> dict[str, EncoderParams]:
    grouped: dict[str, dict] = {}
    for key, arr in tensors.items():
        modality, name = key.split("/", 1)
        grouped.setdefault(modality, {})[name] = arr
    return {m: EncoderParams(t["conv1.w"].shape[1], t) for m, t in grouped.items()}


def fingerprint(encoders: dict) -> str:
    """SHA-256 over the checkpoint byte layout of ``encoders``."""
    h = hashlib.sha256()
    for name, arr in encoders_to_tensors(encoders).items():
        h.update(name.encode())
        h.update(np.asarray(arr, dtype="<f8").tobytes())
    return h.hexdigest()
