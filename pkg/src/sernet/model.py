"""Three-path fully convolutional SER network and its cost accounting.

Layer graph::

    [path_h 9x1 || path_v 1x11 || path_l 3x3]  (conv + BN + ReLU each)
      -> concat -> avg-pool
      -> LFLB_1 .. LFLB_k (conv 3x3 + BN + ReLU + avg-pool, last one GAP)
      -> dropout -> dense -> softmax

Input is ``[N, n_mfcc, frames, 1]``: height is the cepstral axis, width is
time, so the 9x1 path is spectral and the 1x11 path is temporal.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import struct
from pathlib import Path
from typing import Optional

import numpy as np

from .autograd import (
    AvgPool2D,
    BatchNorm,
    Conv2D,
    Dense,
    Dropout,
    GlobalAvgPool,
    Layer,
    ParallelConcat,
    ReLU,
    Sequential,
    Softmax,
    Tensor,
    cast_fp16,
)
from .errors import CompatibilityError, ConfigError, FormatError, ShapeError

ROLES = ("h", "v", "l")
ROLE_NAMES = {"h": "spectral", "v": "temporal", "l": "local"}


@dataclasses.dataclass(frozen=True)
class PathSpec:
    role: str
    kernel: tuple
    filters: int
    stride: tuple = (1, 1)


@dataclasses.dataclass(frozen=True)
class LflbSpec:
    kernel: tuple
    filters: int
    pool: Optional[tuple]  # None means global average pooling

    @property
    def gap(self) -> bool:
        return self.pool is None


DEFAULT_PATHS = (
    PathSpec("h", (9, 1), 32),
    PathSpec("v", (1, 11), 32),
    PathSpec("l", (3, 3), 32),
)

DEFAULT_LFLBS = (
    LflbSpec((3, 3), 64, (2, 2)),
    LflbSpec((3, 3), 96, (2, 2)),
    LflbSpec((3, 3), 128, (2, 1)),
    LflbSpec((3, 3), 160, None),
)


@dataclasses.dataclass(frozen=True)
class ModelConfig:
    paths: tuple = DEFAULT_PATHS
    lflbs: tuple = DEFAULT_LFLBS
    body1_pool: tuple = (2, 2)
    num_classes: int = 4
    dropout: float = 0.3
    input_mfcc: int = 40
    bn_momentum: float = 0.99
    bn_eps: float = 1e-3
    zero_init_head: bool = False

    def __post_init__(self):
        if not self.paths:
            raise ConfigError("model needs at least one Body I path")
        roles = [p.role for p in self.paths]
        if len(set(roles)) != len(roles) or not set(roles) <= set(ROLES):
            raise ConfigError(f"path roles must be distinct members of {ROLES}, got {roles}")
        if len({tuple(p.stride) for p in self.paths}) != 1:
            raise ConfigError("all Body I paths must share one stride so their maps concatenate")
        if self.num_classes < 1:
            raise ConfigError("num_classes must be >= 1")
        if not self.lflbs:
            raise ConfigError("model needs at least one LFLB")
        if not self.lflbs[-1].gap or any(b.gap for b in self.lflbs[:-1]):
            raise ConfigError("exactly the last LFLB must use global average pooling")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout rate must lie in [0, 1)")

    @property
    def concat_channels(self) -> int:
        return sum(p.filters for p in self.paths)

    def with_classes(self, n: int) -> "ModelConfig":
        return dataclasses.replace(self, num_classes=n)

    def to_dict(self) -> dict:
        return {
            "paths": [{"role": p.role, "kernel": list(p.kernel), "filters": p.filters, "stride": list(p.stride)}
                      for p in self.paths],
            "lflbs": [{"kernel": list(b.kernel), "filters": b.filters,
                       "pool": None if b.pool is None else list(b.pool)} for b in self.lflbs],
            "body1_pool": list(self.body1_pool),
            "num_classes": self.num_classes,
            "dropout": self.dropout,
            "input_mfcc": self.input_mfcc,
            "bn_momentum": self.bn_momentum,
            "bn_eps": self.bn_eps,
            "zero_init_head": self.zero_init_head,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        paths = tuple(PathSpec(p["role"], tuple(p["kernel"]), int(p["filters"]), tuple(p.get("stride", (1, 1))))
                      for p in d.pop("paths"))
        lflbs = tuple(LflbSpec(tuple(b["kernel"]), int(b["filters"]),
                               None if b["pool"] is None else tuple(b["pool"])) for b in d.pop("lflbs"))
        d["body1_pool"] = tuple(d["body1_pool"])
        return cls(paths=paths, lflbs=lflbs, **d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def config_hash(self) -> str:
        return hashlib.sha256(self.to_json().encode("utf-8")).hexdigest()


def single_path_config(cfg: ModelConfig, role: str) -> ModelConfig:
    """Keep one Body I path, widened to the total filter count of ``cfg``."""
    spec = next((p for p in cfg.paths if p.role == role), None)
    if spec is None:
        spec = next(p for p in DEFAULT_PATHS if p.role == role)
    path = dataclasses.replace(spec, filters=cfg.concat_channels)
    return dataclasses.replace(cfg, paths=(path,))


# ---------------------------------------------------------------------------
# the network


class Identity(Layer):
    kind = "identity"

    def forward(self, x, training=False):
        return x


class SerNetModel:
    def __init__(self, cfg: ModelConfig, *, rng: np.random.Generator = None, dtype=np.float32):
        self.cfg = cfg
        self.dtype = np.dtype(dtype)
        self.meta: dict = {}
        rng = rng if rng is not None else np.random.default_rng(0)
        bn = dict(momentum=cfg.bn_momentum, eps=cfg.bn_eps, dtype=dtype)

        branches = []
        for p in cfg.paths:
            branches.append(Sequential([
                Conv2D(p.kernel, 1, p.filters, p.stride, rng=rng, dtype=dtype, name="conv"),
                BatchNorm(p.filters, name="bn", **bn),
                ReLU(),
            ], name=p.role))
        body1 = Sequential([ParallelConcat(branches, name="paths"), AvgPool2D(cfg.body1_pool, name="pool")],
                           name="body1")

        blocks = []
        c_in = cfg.concat_channels
        for i, b in enumerate(cfg.lflbs, start=1):
            layers = [
                Conv2D(b.kernel, c_in, b.filters, rng=rng, l2=True, dtype=dtype, name="conv"),
                BatchNorm(b.filters, name="bn", **bn),
                ReLU(),
                GlobalAvgPool(name="gap") if b.gap else AvgPool2D(b.pool, name="pool"),
            ]
            blocks.append(Sequential(layers, name=f"lflb{i}"))
            c_in = b.filters

        self.dropout = Dropout(cfg.dropout, name="dropout")
        head = Sequential([
            self.dropout,
            Dense(c_in, cfg.num_classes, rng=rng, zero_init=cfg.zero_init_head, dtype=dtype, name="dense"),
            Softmax(),
        ], name="head")
        self.net = Sequential([body1, Sequential(blocks, name="body2"), head], name="sernet")

    # -- execution ---------------------------------------------------------

    def forward(self, x, training: bool = False) -> Tensor:
        """``x`` [N, n_mfcc, T, 1] → class probabilities [N, num_classes]."""
        x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=self.dtype))
        if x.ndim != 4 or x.shape[3] != 1:
            raise ShapeError(f"model input must be [N, n_mfcc, T, 1], got {x.shape}")
        return self.net(x, training)

    __call__ = forward

    def predict_proba(self, x, batch_size: int = 64) -> np.ndarray:
        x = np.asarray(x, dtype=self.dtype)
        return np.concatenate([self.forward(x[i:i + batch_size]).data for i in range(0, len(x), batch_size)]) \
            if len(x) else np.zeros((0, self.cfg.num_classes), dtype=self.dtype)

    def set_dropout_rng(self, rng: np.random.Generator):
        self.dropout.rng = rng

    # -- state ---------------------------------------------------------------

    def parameters(self) -> list:
        return self.net.parameters()

    def named_tensors(self) -> list:
        return list(self.net.named_tensors())

    def state_dict(self) -> dict:
        return {name: t.data.copy() for name, t in self.named_tensors()}

    def load_state_dict(self, state: dict):
        own = dict(self.named_tensors())
        if set(own) != set(state):
            missing = sorted(set(own) - set(state))
            extra = sorted(set(state) - set(own))
            raise FormatError(f"state mismatch: missing {missing[:3]}, unexpected {extra[:3]}")
        for name, t in own.items():
            arr = np.asarray(state[name])
            if arr.shape != t.shape:
                raise FormatError(f"{name}: shape {arr.shape} != expected {t.shape}")
            t.data = arr.astype(self.dtype)


def build_model(cfg: ModelConfig, *, rng: np.random.Generator = None, dtype=np.float32) -> SerNetModel:
    return SerNetModel(cfg, rng=rng, dtype=dtype)


# ---------------------------------------------------------------------------
# accounting


def _net(model) -> Layer:
    return model.net if isinstance(model, SerNetModel) else model


def spatial_ops(cfg: ModelConfig) -> list:
    """``(name, (kh, kw), (sh, sw))`` for each spatially local stage, in order.

    Body I contributes one stage: the bounding box of its parallel kernels.
    A trailing GAP is omitted; it sees the whole map.
    """
    kh = max(p.kernel[0] for p in cfg.paths)
    kw = max(p.kernel[1] for p in cfg.paths)
    ops = [("body1.paths", (kh, kw), tuple(cfg.paths[0].stride)),
           ("body1.pool", tuple(cfg.body1_pool), tuple(cfg.body1_pool))]
    for i, b in enumerate(cfg.lflbs, start=1):
        ops.append((f"lflb{i}.conv", tuple(b.kernel), (1, 1)))
        if not b.gap:
            ops.append((f"lflb{i}.pool", tuple(b.pool), tuple(b.pool)))
    return ops


def receptive_field_of(ops) -> tuple:
    """Per-axis receptive field of a chain of ``(kernel, stride)`` stages."""
    rf = [1, 1]
    jump = [1, 1]
    for kernel, stride in ops:
        for a in (0, 1):
            rf[a] += (kernel[a] - 1) * jump[a]
            jump[a] *= stride[a]
    return tuple(rf)


def receptive_field(cfg: ModelConfig, up_to_layer=None) -> tuple:
    """Receptive field ``(rf_h, rf_w)`` after stage ``up_to_layer`` (index or name, inclusive)."""
    ops = spatial_ops(cfg)
    if up_to_layer is None:
        stop = len(ops)
    elif isinstance(up_to_layer, str):
        names = [o[0] for o in ops]
        if up_to_layer not in names:
            raise ValueError(f"unknown stage {up_to_layer!r}; choose from {names}")
        stop = names.index(up_to_layer) + 1
    else:
        if not 0 <= up_to_layer < len(ops):
            raise IndexError(f"stage index {up_to_layer} out of range 0..{len(ops) - 1}")
        stop = up_to_layer + 1
    return receptive_field_of([(k, s) for _, k, s in ops[:stop]])


def count_params(model) -> int:
    """Trainable parameter count."""
    return sum(p.size for p in _net(model).parameters())


def count_buffers(model) -> int:
    """Non-trainable stored values (BN moving statistics)."""
    return sum(b.size for b in _net(model).buffers())


def input_shape_for(seconds: float, n_mfcc: int = 40, hop: int = 256, frame_len: int = 1024,
                    sample_rate: int = 16000) -> tuple:
    n = int(round(seconds * sample_rate))
    return (n_mfcc, 1 + (n - frame_len) // hop, 1)


def profile(model, input_shape) -> list:
    _, records = _net(model).profile(tuple(input_shape))
    return records


def count_flops(model, input_shape) -> int:
    """Forward FLOPs for one sample of shape ``(H, W, C)``.

    conv ``2*kh*kw*cin*cout*H'*W'``, dense ``2*in*out``, BN/ReLU/pooling/
    softmax one op per element.
    """
    return sum(r.flops for r in profile(model, input_shape))


_ITEMSIZE = {"fp64": 8, "fp32": 4, "fp16": 2}


def peak_memory(model, input_shape, dtype: str = "fp32") -> int:
    """Bytes: max over layers of input + output activations + that layer's weights."""
    size = _ITEMSIZE[dtype]
    return max(size * (r.input_elems + r.output_elems + r.n_params) for r in profile(model, input_shape))


@dataclasses.dataclass
class ModelStats:
    n_params: int
    n_buffers: int
    size_bytes_fp32: int
    size_bytes_fp16: int
    flops: int
    mflops: float
    peak_memory_bytes: int
    pmu_dtype: str
    input_shape: list

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d) -> "ModelStats":
        return cls(**d)


def model_stats(model, input_shape, pmu_dtype: str = "fp32") -> ModelStats:
    net = _net(model)
    stored = [t for _, t in net.named_tensors()]
    flops = count_flops(net, input_shape)
    return ModelStats(
        n_params=count_params(net),
        n_buffers=count_buffers(net),
        size_bytes_fp32=sum(4 * t.size for t in stored),
        size_bytes_fp16=sum(2 * t.size for t in stored),
        flops=flops,
        mflops=flops / 1e6,
        peak_memory_bytes=peak_memory(net, input_shape, pmu_dtype),
        pmu_dtype=pmu_dtype,
        input_shape=list(input_shape),
    )


# ---------------------------------------------------------------------------
# checkpoints
#
#   "SERN" | u16 version | u8 dtype (0 fp32, 1 fp16) | u32 len + UTF-8 JSON config
#   u32 tensor count | per tensor: u8 len + name, u8 rank, u32 dims..., raw LE data

CKPT_MAGIC = b"SERN"
CKPT_VERSION = 1
_DTYPE_CODES = {"fp32": 0, "fp16": 1}
_CODE_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f2")}


def save_checkpoint(model: SerNetModel, path, dtype: str = "fp32", meta: dict = None) -> int:
    """Write ``model`` to ``path``; returns the file size in bytes."""
    if dtype not in _DTYPE_CODES:
        raise ValueError(f"checkpoint dtype must be fp32 or fp16, got {dtype!r}")
    blob = json.dumps({
        "model": model.cfg.to_dict(),
        "config_hash": model.cfg.config_hash(),
        "meta": meta if meta is not None else model.meta,
    }, sort_keys=True).encode("utf-8")
    parts = [CKPT_MAGIC, struct.pack("<HB", CKPT_VERSION, _DTYPE_CODES[dtype]),
             struct.pack("<I", len(blob)), blob]
    tensors = model.named_tensors()
    parts.append(struct.pack("<I", len(tensors)))
    for name, t in tensors:
        raw = name.encode("utf-8")
        if dtype == "fp16":
            arr = cast_fp16(t).data.astype("<f2")
        else:
            arr = t.data.astype("<f4")
        parts.append(struct.pack("<B", len(raw)) + raw + struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr).tobytes())
    data = b"".join(parts)
    Path(path).write_bytes(data)
    return len(data)


class _Reader:
    def __init__(self, blob: bytes, path):
        self.blob, self.pos, self.path = blob, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise FormatError(f"{self.path}: truncated checkpoint")
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path, expected_hash: str = None) -> SerNetModel:
    """Rebuild a model from a checkpoint; ``model.meta`` holds saved metadata.

    fp16 checkpoints load as fp32 arrays holding the fp16-quantized values.
    """
    path = Path(path)
    r = _Reader(path.read_bytes(), path)
    if r.take(4) != CKPT_MAGIC:
        raise FormatError(f"{path}: not a SERN checkpoint")
    version, code = r.unpack("<HB")
    if version != CKPT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    if code not in _CODE_DTYPES:
        raise FormatError(f"{path}: unknown dtype code {code}")
    (blob_len,) = r.unpack("<I")
    try:
        header = json.loads(r.take(blob_len).decode("utf-8"))
        cfg = ModelConfig.from_dict(header["model"])
    except (ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"{path}: corrupt config block ({exc})") from exc
    if cfg.config_hash() != header.get("config_hash"):
        raise CompatibilityError(f"{path}: config hash does not match the stored architecture")
    if expected_hash is not None and cfg.config_hash() != expected_hash:
        raise CompatibilityError(f"{path}: checkpoint architecture differs from the requested config")

    dt = _CODE_DTYPES[code]
    (count,) = r.unpack("<I")
    state = {}
    for _ in range(count):
        (n,) = r.unpack("<B")
        name = r.take(n).decode("utf-8")
        (rank,) = r.unpack("<B")
        dims = r.unpack(f"<{rank}I") if rank else ()
        nbytes = dt.itemsize * math.prod(dims)
        state[name] = np.frombuffer(r.take(nbytes), dtype=dt).reshape(dims)
    if r.pos != len(r.blob):
        raise FormatError(f"{path}: {len(r.blob) - r.pos} trailing bytes")

    model = build_model(cfg)
    model.load_state_dict(state)
    model.meta = header.get("meta", {})
    return model
