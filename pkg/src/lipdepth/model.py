"""Tiny vision transformer whose residual blocks are dropped per sample by a DropSchedule."""

from __future__ import annotations

import io
import json
import struct
from collections import OrderedDict
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import tensor as T
from .rng import Rng
from .schedule import DropSchedule
from .tensor import Tensor

CHECKPOINT_MAGIC = b"LDVT"
CHECKPOINT_VERSION = 1


class ConfigError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class ViTConfig:
    image_size: int = 32
    patch_size: int = 4
    in_channels: int = 3
    embed_dim: int = 64
    depth: int = 12
    heads: int = 4
    mlp_ratio: float = 2.0
    num_classes: int = 10
    droppath_mode: str = "unscaled"
    eval_mode: str = "full"
    ln_eps: float = 1e-6
    dtype: str = "float32"

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ConfigError("image_size must be divisible by patch_size")
        if self.embed_dim % self.heads:
            raise ConfigError("embed_dim must be divisible by heads")
        if self.depth < 1:
            raise ConfigError("depth must be >= 1")
        if self.droppath_mode not in ("unscaled", "inverted_scaling"):
            raise ConfigError(f"unknown droppath_mode {self.droppath_mode!r}")
        if self.eval_mode not in ("full", "sampled"):
            raise ConfigError(f"unknown eval_mode {self.eval_mode!r}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"unsupported dtype {self.dtype!r}")

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def tokens(self) -> int:
        return self.num_patches + 1

    @property
    def patch_dim(self) -> int:
        return self.in_channels * self.patch_size ** 2

    @property
    def mlp_hidden(self) -> int:
        return int(round(self.embed_dim * self.mlp_ratio))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> ViTConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown ViTConfig keys: {sorted(unknown)}")
        return cls(**d)


def desk_config(**overrides) -> ViTConfig:
    return ViTConfig(**overrides)


def paper_shape_config(**overrides) -> ViTConfig:
    """ViT-Tiny/16 at 224x224; used for FLOPs accounting only."""
    base = dict(image_size=224, patch_size=16, embed_dim=192, depth=12, heads=3,
                mlp_ratio=4.0, num_classes=10)
    base.update(overrides)
    return ViTConfig(**base)


def parameter_shapes(cfg: ViTConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Parameter names and shapes in declaration (checkpoint) order."""
    D, Hd = cfg.embed_dim, cfg.mlp_hidden
    shapes = [
        ("patch_embed.weight", (cfg.patch_dim, D)),
        ("patch_embed.bias", (D,)),
        ("cls_token", (1, 1, D)),
        ("pos_embed", (1, cfg.tokens, D)),
    ]
    for i in range(cfg.depth):
        b = f"blocks.{i}."
        shapes += [
            (b + "norm1.weight", (D,)), (b + "norm1.bias", (D,)),
            (b + "attn.qkv.weight", (D, 3 * D)), (b + "attn.qkv.bias", (3 * D,)),
            (b + "attn.proj.weight", (D, D)), (b + "attn.proj.bias", (D,)),
            (b + "norm2.weight", (D,)), (b + "norm2.bias", (D,)),
            (b + "mlp.fc1.weight", (D, Hd)), (b + "mlp.fc1.bias", (Hd,)),
            (b + "mlp.fc2.weight", (Hd, D)), (b + "mlp.fc2.bias", (D,)),
        ]
    shapes += [
        ("norm.weight", (D,)), ("norm.bias", (D,)),
        ("head.weight", (D, cfg.num_classes)), ("head.bias", (cfg.num_classes,)),
    ]
    return shapes


class DropTrace:
    """Per-block keep masks recorded during one forward pass."""

    def __init__(self):
        self.keep: list[np.ndarray] = []

    def record(self, keep: np.ndarray) -> None:
        self.keep.append(np.asarray(keep, dtype=bool))

    def as_array(self) -> np.ndarray:
        """(L, N) boolean array, True where the block's branch executed."""
        return np.stack(self.keep) if self.keep else np.zeros((0, 0), dtype=bool)

    def active_counts(self) -> np.ndarray:
        return self.as_array().sum(axis=0)


def count_active_blocks(trace: DropTrace, sample: int = 0) -> int:
    """Number of blocks whose residual branch executed for one sample of a traced forward."""
    arr = trace.as_array()
    return int(arr[:, sample].sum()) if arr.size else 0


class Model:
    def __init__(self, config: ViTConfig, schedule: DropSchedule, params: OrderedDict[str, Tensor]):
        if schedule.L != config.depth:
            raise ConfigError(f"schedule has {schedule.L} blocks but depth is {config.depth}")
        self.config = config
        self.schedule = schedule
        self.params = params

    @property
    def dtype(self):
        return np.dtype(self.config.dtype)

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def with_schedule(self, schedule: DropSchedule) -> Model:
        return Model(self.config, schedule, self.params)

    def __call__(self, x, training: bool = False, rng: Rng | None = None, trace: DropTrace | None = None):
        return self.forward(x, training=training, rng=rng, trace=trace)

    # -- forward ---------------------------------------------------------
    def _keep_mask(self, l: int, n: int, stochastic: bool, rng: Rng | None):
        p = self.schedule.probs[l]
        if not stochastic or p == 0.0:
            return None
        if rng is None:
            raise ValueError("stochastic forward needs an Rng")
        return rng.bernoulli(1.0 - p, (n,)).astype(bool)

    def _attention(self, h: Tensor, pre: str) -> Tensor:
        cfg, P = self.config, self.params
        N, Tn, D = h.shape
        H = cfg.heads
        dh = D // H
        qkv = h @ P[pre + "qkv.weight"] + P[pre + "qkv.bias"]
        qkv = T.transpose(T.reshape(qkv, (N, Tn, 3, H, dh)), (2, 0, 3, 1, 4))
        q, k, v = qkv[0], qkv[1], qkv[2]
        att = T.softmax(T.mul(q @ T.swapaxes(k, -1, -2), 1.0 / np.sqrt(dh)), axis=-1)
        out = T.reshape(T.transpose(att @ v, (0, 2, 1, 3)), (N, Tn, D))
        return out @ P[pre + "proj.weight"] + P[pre + "proj.bias"]

    def _mlp(self, h: Tensor, pre: str) -> Tensor:
        P = self.params
        h = T.gelu(h @ P[pre + "fc1.weight"] + P[pre + "fc1.bias"])
        return h @ P[pre + "fc2.weight"] + P[pre + "fc2.bias"]

    def embed(self, x: Tensor) -> Tensor:
        cfg, P = self.config, self.params
        N, C, H, W = x.shape
        if (C, H, W) != (cfg.in_channels, cfg.image_size, cfg.image_size):
            raise ValueError(f"expected input (N, {cfg.in_channels}, {cfg.image_size}, {cfg.image_size}), got {x.shape}")
        ps, g = cfg.patch_size, cfg.image_size // cfg.patch_size
        t = T.reshape(x, (N, C, g, ps, g, ps))
        t = T.reshape(T.transpose(t, (0, 2, 4, 1, 3, 5)), (N, g * g, C * ps * ps))
        t = t @ P["patch_embed.weight"] + P["patch_embed.bias"]
        cls = T.add(Tensor(np.zeros((N, 1, cfg.embed_dim), dtype=self.dtype)), P["cls_token"])
        return T.concat([cls, t], axis=1) + P["pos_embed"]

    def forward(self, x, training: bool = False, rng: Rng | None = None,
                trace: DropTrace | None = None) -> Tensor:
        """Logits for a (N, C, H, W) batch.

        Drops are sampled when ``training`` is set or ``eval_mode == "sampled"``.
        A dropped block contributes only its skip connection for that sample.
        """
        cfg, P = self.config, self.params
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x, dtype=self.dtype))
        else:
            x = T.cast(x, self.dtype)
        if x.ndim != 4:
            raise ValueError(f"expected a 4-d image batch, got shape {x.shape}")
        stochastic = training or cfg.eval_mode == "sampled"
        t = self.embed(x)
        N = x.shape[0]
        for l in range(cfg.depth):
            keep = self._keep_mask(l, N, stochastic, rng)
            if trace is not None:
                trace.record(np.ones(N, dtype=bool) if keep is None else keep)
            if keep is not None and not keep.any():
                continue
            scale = None
            if keep is not None:
                s = keep.astype(self.dtype)
                if cfg.droppath_mode == "inverted_scaling":
                    s = s / (1.0 - self.schedule.probs[l])
                scale = Tensor(s.reshape(N, 1, 1).astype(self.dtype))
            b = f"blocks.{l}."
            h = self._attention(T.layernorm(t, P[b + "norm1.weight"], P[b + "norm1.bias"], eps=cfg.ln_eps),
                                b + "attn.")
            t = t + (h if scale is None else h * scale)
            h = self._mlp(T.layernorm(t, P[b + "norm2.weight"], P[b + "norm2.bias"], eps=cfg.ln_eps),
                          b + "mlp.")
            t = t + (h if scale is None else h * scale)
        t = T.layernorm(t, P["norm.weight"], P["norm.bias"], eps=cfg.ln_eps)
        return t[:, 0] @ P["head.weight"] + P["head.bias"]

    def predict(self, x, batch_size: int = 256) -> np.ndarray:
        x = x.data if isinstance(x, Tensor) else np.asarray(x)
        out = [self.forward(x[i:i + batch_size]).data.argmax(axis=1) for i in range(0, x.shape[0], batch_size)]
        return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)

    # -- serialisation ---------------------------------------------------
    def state_bytes(self) -> bytes:
        return b"".join(p.data.astype("<f8").tobytes() for p in self.params.values())


def forward(model: Model, batch, training: bool = False, rng: Rng | None = None,
            trace: DropTrace | None = None) -> Tensor:
    return model.forward(batch, training=training, rng=rng, trace=trace)


def build_vit(config: ViTConfig, schedule: DropSchedule, rng: Rng) -> Model:
    """Initialise weights (truncated normal, std 0.02), zero biases, unit norm gains."""
    if schedule.L != config.depth:
        raise ConfigError(f"schedule has {schedule.L} blocks but depth is {config.depth}")
    dtype = np.dtype(config.dtype)
    params: OrderedDict[str, Tensor] = OrderedDict()
    for name, shape in parameter_shapes(config):
        if name.endswith("norm1.weight") or name.endswith("norm2.weight") or name == "norm.weight":
            data = np.ones(shape, dtype=dtype)
        elif name.endswith("bias"):
            data = np.zeros(shape, dtype=dtype)
        else:
            data = rng.truncated_normal(shape, std=0.02, dtype=dtype)
        params[name] = Tensor(data, requires_grad=True)
    return Model(config, schedule, params)


def save_checkpoint(model: Model, path) -> None:
    """Write magic, version, JSON header and float64 little-endian params, atomically."""
    header = json.dumps({"config": model.config.to_dict(), "schedule": model.schedule.to_dict()},
                        sort_keys=True).encode()
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<II", CHECKPOINT_VERSION, len(header)))
    buf.write(header)
    buf.write(model.state_bytes())
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(buf.getvalue())
    tmp.replace(path)


def load_checkpoint(path) -> Model:
    raw = Path(path).read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {raw[:4]!r}")
    if len(raw) < 12:
        raise CheckpointError(f"{path}: truncated header")
    version, hlen = struct.unpack("<II", raw[4:12])
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    try:
        header = json.loads(raw[12:12 + hlen])
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header") from exc
    config = ViTConfig.from_dict(header["config"])
    schedule = DropSchedule.from_dict(header["schedule"])
    dtype = np.dtype(config.dtype)
    offset = 12 + hlen
    params: OrderedDict[str, Tensor] = OrderedDict()
    for name, shape in parameter_shapes(config):
        n = int(np.prod(shape))
        chunk = raw[offset:offset + 8 * n]
        if len(chunk) != 8 * n:
            raise CheckpointError(f"{path}: truncated at parameter {name}")
        params[name] = Tensor(np.frombuffer(chunk, dtype="<f8").reshape(shape).astype(dtype), requires_grad=True)
        offset += 8 * n
    if offset != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - offset} trailing bytes")
    return Model(config, schedule, params)
