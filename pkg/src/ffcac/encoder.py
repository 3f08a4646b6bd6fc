"""A miniature AST-style encoder written functionally over named parameter sets.

Input spectrograms are split into non-overlapping patches, linearly projected,
offset by a trainable positional embedding and passed through pre-norm
transformer blocks.  The clip embedding is the mean over all output tokens
(there is no class token).  Gradients come from torch autograd.
"""
from __future__ import annotations

import json
import math
import struct
from collections import Counter
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .errors import CorruptCheckpoint, IncompatibleCheckpoint, InvalidConfig, NumericalError, ShapeError
from .utils import atomic_write_bytes, stable_digest

# instrumentation: number of samples that entered each stage
call_counts: Counter = Counter()


@dataclass(frozen=True)
class EncoderConfig:
    n_mels: int = 128
    n_frames: int = 48  # 0.5 s clips at a 10 ms hop
    patch_h: int = 16  # along mel bins
    patch_w: int = 16  # along frames
    model_dim: int = 64
    depth: int = 4
    n_heads: int = 4
    mlp_ratio: float = 2.0
    split_index: int | None = None  # None -> depth - 1
    activation: str = "gelu"
    norm_eps: float = 1e-6
    input_mean: float = 0.0
    input_std: float = 2.5
    init_std: float = 0.02

    def __post_init__(self):
        if self.model_dim < 1 or self.n_heads < 1 or self.model_dim % self.n_heads:
            raise InvalidConfig("model_dim must be a positive multiple of n_heads")
        if self.depth < 0:
            raise InvalidConfig("depth must be >= 0")
        if self.patch_h < 1 or self.patch_w < 1:
            raise InvalidConfig("patch sizes must be >= 1")
        if self.patch_h > self.n_mels or self.patch_w > self.n_frames:
            raise InvalidConfig(
                f"patch {self.patch_h}x{self.patch_w} larger than input {self.n_mels}x{self.n_frames}"
            )
        if self.activation not in _ACTIVATIONS:
            raise InvalidConfig(f"unknown activation {self.activation!r}")
        if self.input_std <= 0:
            raise InvalidConfig("input_std must be > 0")
        if self.depth >= 2 and not (1 <= self.split < self.depth):
            raise InvalidConfig("need 1 <= split_index < depth")

    @property
    def split(self) -> int:
        return self.depth - 1 if self.split_index is None else self.split_index

    @property
    def grid(self) -> tuple[int, int]:
        return math.ceil(self.n_mels / self.patch_h), math.ceil(self.n_frames / self.patch_w)

    @property
    def n_patches(self) -> int:
        gh, gw = self.grid
        return gh * gw

    @property
    def mlp_dim(self) -> int:
        return max(1, int(round(self.model_dim * self.mlp_ratio)))

    def digest(self) -> str:
        return stable_digest(asdict(self))

    @classmethod
    def paper_scale(cls, **kw) -> "EncoderConfig":
        # published AST width/depth; never exercised by the test-suite
        return cls(model_dim=768, depth=12, n_heads=12, mlp_ratio=4.0, **kw)


_ACTIVATIONS = {
    "gelu": F.gelu,
    "gelu_tanh": lambda x: F.gelu(x, approximate="tanh"),
    "silu": F.silu,
}


class ParamSet:
    """Ordered name -> tensor map with per-tensor frozen flags."""

    def __init__(self, tensors=None, frozen=()):
        self._t: dict[str, torch.Tensor] = dict(tensors or {})
        self.frozen: set[str] = set(frozen) & set(self._t)

    def __getitem__(self, name) -> torch.Tensor:
        return self._t[name]

    def __contains__(self, name) -> bool:
        return name in self._t

    def __len__(self) -> int:
        return len(self._t)

    def __iter__(self):
        return iter(self._t)

    def names(self) -> list[str]:
        return list(self._t)

    def items(self):
        return self._t.items()

    def shapes(self) -> dict[str, tuple[int, ...]]:
        return {k: tuple(v.shape) for k, v in self._t.items()}

    def trainable_names(self) -> list[str]:
        return [n for n in self._t if n not in self.frozen]

    @property
    def dtype(self):
        return next(iter(self._t.values())).dtype if self._t else torch.float32

    def set(self, name, value: torch.Tensor) -> None:
        if name in self._t and tuple(value.shape) != tuple(self._t[name].shape):
            raise ShapeError(f"{name}: shape {tuple(value.shape)} != {tuple(self._t[name].shape)}")
        self._t[name] = value

    def freeze(self, names=None) -> "ParamSet":
        self.frozen |= set(self._t if names is None else names)
        return self

    def unfreeze(self, names=None) -> "ParamSet":
        self.frozen -= set(self._t if names is None else names)
        return self

    def clone(self) -> "ParamSet":
        return ParamSet({k: v.detach().clone() for k, v in self._t.items()}, self.frozen)

    def to(self, dtype) -> "ParamSet":
        return ParamSet({k: v.detach().to(dtype) for k, v in self._t.items()}, self.frozen)

    def select(self, predicate) -> "ParamSet":
        keep = {k: v for k, v in self._t.items() if predicate(k)}
        return ParamSet(keep, self.frozen & set(keep))

    def prefixed(self, prefix: str) -> "ParamSet":
        return ParamSet({prefix + k: v for k, v in self._t.items()}, {prefix + k for k in self.frozen})

    def strip(self, prefix: str) -> "ParamSet":
        keep = {k[len(prefix):]: v for k, v in self._t.items() if k.startswith(prefix)}
        return ParamSet(keep, {k[len(prefix):] for k in self.frozen if k.startswith(prefix)})

    def merged(self, *others: "ParamSet") -> "ParamSet":
        out = ParamSet(self._t, self.frozen)
        for o in others:
            clash = set(out._t) & set(o._t)
            if clash:
                raise ShapeError(f"duplicate parameter names: {sorted(clash)[:3]}")
            out._t.update(o._t)
            out.frozen |= o.frozen
        return out

    def equal(self, other: "ParamSet") -> bool:
        """Bitwise equality of names (in order), shapes, dtypes, payloads and frozen flags."""
        if self.names() != other.names() or self.frozen != other.frozen:
            return False
        return all(a.dtype == b.dtype and torch.equal(a, b) for a, b in zip(self._t.values(), other._t.values()))

    def abs_sum(self, names=None) -> float:
        names = self.names() if names is None else names
        return float(sum(self._t[n].detach().abs().sum().item() for n in names))

    def __repr__(self):
        return f"ParamSet({len(self)} tensors, {len(self.frozen)} frozen)"


# --------------------------------------------------------------------------
# parameters


def block_names(i: int) -> list[str]:
    p = f"blocks.{i}."
    return [p + s for s in (
        "norm1.g", "norm1.b", "attn.qkv.w", "attn.qkv.b", "attn.proj.w", "attn.proj.b",
        "norm2.g", "norm2.b", "mlp.fc1.w", "mlp.fc1.b", "mlp.fc2.w", "mlp.fc2.b",
    )]


def init_params(cfg: EncoderConfig, seed: int = 0, dtype=torch.float32) -> ParamSet:
    g = torch.Generator().manual_seed(int(seed))
    d, h, pdim = cfg.model_dim, cfg.mlp_dim, cfg.patch_h * cfg.patch_w

    def normal(*shape):
        w = torch.empty(*shape, dtype=torch.float64)
        torch.nn.init.trunc_normal_(w, std=cfg.init_std, a=-2 * cfg.init_std, b=2 * cfg.init_std, generator=g)
        return w.to(dtype)

    def zeros(*shape):
        return torch.zeros(*shape, dtype=dtype)

    def ones(*shape):
        return torch.ones(*shape, dtype=dtype)

    t = {"patch.w": normal(pdim, d), "patch.b": zeros(d), "pos": normal(cfg.n_patches, d)}
    for i in range(cfg.depth):
        p = f"blocks.{i}."
        t.update({
            p + "norm1.g": ones(d), p + "norm1.b": zeros(d),
            p + "attn.qkv.w": normal(d, 3 * d), p + "attn.qkv.b": zeros(3 * d),
            p + "attn.proj.w": normal(d, d), p + "attn.proj.b": zeros(d),
            p + "norm2.g": ones(d), p + "norm2.b": zeros(d),
            p + "mlp.fc1.w": normal(d, h), p + "mlp.fc1.b": zeros(h),
            p + "mlp.fc2.w": normal(h, d), p + "mlp.fc2.b": zeros(d),
        })
    return ParamSet(t)


def shallow_names(cfg: EncoderConfig) -> list[str]:
    names = ["patch.w", "patch.b", "pos"]
    for i in range(cfg.split):
        names += block_names(i)
    return names


def deep_names(cfg: EncoderConfig) -> list[str]:
    return [n for i in range(cfg.split, cfg.depth) for n in block_names(i)]


# --------------------------------------------------------------------------
# forward


def _as_batch(x, dtype) -> torch.Tensor:
    """(B, frames, mels) or (frames, mels) array -> float tensor (B, frames, mels)."""
    if hasattr(x, "values") and not isinstance(x, (np.ndarray, torch.Tensor)):
        x = x.values
    t = torch.as_tensor(np.asarray(x) if not isinstance(x, torch.Tensor) else x).to(dtype)
    return t.unsqueeze(0) if t.dim() == 2 else t


def patch_tokens(x, params: ParamSet, cfg: EncoderConfig) -> torch.Tensor:
    """Batch of spectrograms (B, frames, mels) -> token tensor (B, n_patches, d)."""
    x = _as_batch(x, params.dtype)
    b, frames, mels = x.shape
    if (frames, mels) != (cfg.n_frames, cfg.n_mels):
        raise ShapeError(f"spectrogram {frames}x{mels} does not match config {cfg.n_frames}x{cfg.n_mels}")
    call_counts["patchify"] += b
    gh, gw = cfg.grid
    grid = (x.transpose(1, 2) - cfg.input_mean) / cfg.input_std  # (B, mels, frames)
    grid = F.pad(grid, (0, gw * cfg.patch_w - frames, 0, gh * cfg.patch_h - mels))
    patches = (grid.reshape(b, gh, cfg.patch_h, gw, cfg.patch_w)
               .permute(0, 1, 3, 2, 4)
               .reshape(b, gh * gw, cfg.patch_h * cfg.patch_w))
    return patches @ params["patch.w"] + params["patch.b"] + params["pos"]


def patchify(spec, params: ParamSet, cfg: EncoderConfig) -> torch.Tensor:
    """Single spectrogram -> (n_patches, d) tokens; patches are ordered mel-major."""
    return patch_tokens(spec, params, cfg)[0]


def layer_norm(x, g, b, eps):
    return F.layer_norm(x, (x.shape[-1],), g, b, eps)


def attention(x: torch.Tensor, params: ParamSet, prefix: str, n_heads: int) -> torch.Tensor:
    *lead, t, d = x.shape
    dh = d // n_heads
    qkv = x @ params[prefix + "attn.qkv.w"] + params[prefix + "attn.qkv.b"]
    q, k, v = (z.reshape(*lead, t, n_heads, dh).transpose(-3, -2) for z in qkv.split(d, dim=-1))
    att = torch.softmax(q @ k.transpose(-2, -1) / math.sqrt(dh), dim=-1)
    out = (att @ v).transpose(-3, -2).reshape(*lead, t, d)
    return out @ params[prefix + "attn.proj.w"] + params[prefix + "attn.proj.b"]


def block_forward(tokens: torch.Tensor, params: ParamSet, index: int, cfg: EncoderConfig) -> torch.Tensor:
    p = f"blocks.{index}."
    act = _ACTIVATIONS[cfg.activation]
    h = layer_norm(tokens, params[p + "norm1.g"], params[p + "norm1.b"], cfg.norm_eps)
    x = tokens + attention(h, params, p, cfg.n_heads)
    h = layer_norm(x, params[p + "norm2.g"], params[p + "norm2.b"], cfg.norm_eps)
    h = act(h @ params[p + "mlp.fc1.w"] + params[p + "mlp.fc1.b"])
    x = x + (h @ params[p + "mlp.fc2.w"] + params[p + "mlp.fc2.b"])
    if not torch.isfinite(x).all():
        raise NumericalError(f"blocks.{index}")
    return x


def run_blocks(tokens, params: ParamSet, cfg: EncoderConfig, start: int = 0, stop: int | None = None):
    stop = cfg.depth if stop is None else stop
    for i in range(start, stop):
        tokens = block_forward(tokens, params, i, cfg)
    return tokens


def shallow_forward(x, params: ParamSet, cfg: EncoderConfig) -> torch.Tensor:
    """Patch embedding plus the generalizable blocks [0, split)."""
    return run_blocks(patch_tokens(x, params, cfg), params, cfg, 0, cfg.split)


def deep_forward(tokens, params: ParamSet, cfg: EncoderConfig) -> torch.Tensor:
    """Specialized blocks [split, depth) followed by mean pooling."""
    call_counts["deep"] += tokens.shape[0] if tokens.dim() == 3 else 1
    return run_blocks(tokens, params, cfg, cfg.split, cfg.depth).mean(dim=-2)


def encode_batch(x, params: ParamSet, cfg: EncoderConfig) -> torch.Tensor:
    out = run_blocks(patch_tokens(x, params, cfg), params, cfg).mean(dim=1)
    if not torch.isfinite(out).all():
        raise NumericalError("pooling")
    return out


def encode(spec, params: ParamSet, cfg: EncoderConfig) -> torch.Tensor:
    return encode_batch(spec, params, cfg)[0]


@torch.no_grad()
def encode_numpy(x, params: ParamSet, cfg: EncoderConfig, batch_size: int = 256) -> np.ndarray:
    x = np.asarray(x)
    outs = [encode_batch(x[i:i + batch_size], params, cfg) for i in range(0, len(x), batch_size)]
    return torch.cat(outs).numpy() if outs else np.zeros((0, cfg.model_dim), np.float32)


# --------------------------------------------------------------------------
# gradients


def value_and_grad(params: ParamSet, loss_evaluator):
    """Evaluate ``loss_evaluator(params)`` and its exact gradient.

    Frozen tensors map to zero gradients and never require grad.
    """
    live = ParamSet({n: (t.detach() if n in params.frozen else t.detach().clone().requires_grad_(True))
                     for n, t in params.items()}, params.frozen)
    loss = loss_evaluator(live)
    if not torch.isfinite(loss).all():
        raise NumericalError("loss")
    names = live.trainable_names()
    grads = [None] * len(names)
    if names and loss.requires_grad:
        grads = torch.autograd.grad(loss, [live[n] for n in names], allow_unused=True)
    out = {n: torch.zeros_like(t) for n, t in params.items()}
    for n, gr in zip(names, grads):
        if gr is not None:
            out[n] = gr.detach()
    return loss.detach(), ParamSet(out, params.frozen)


def grad(params: ParamSet, loss_evaluator) -> ParamSet:
    return value_and_grad(params, loss_evaluator)[1]


# --------------------------------------------------------------------------
# checkpoints

_CKPT_MAGIC = b"FFCK"
CHECKPOINT_VERSION = 1
_PREAMBLE = struct.Struct("<4sII")


def checkpoint_bytes(params: ParamSet, config_digest: str | None = None, meta: dict | None = None) -> bytes:
    header = {
        "format_version": CHECKPOINT_VERSION,
        "tensor_count": len(params),
        "tensors": [{"name": n, "shape": list(t.shape), "frozen": n in params.frozen}
                    for n, t in params.items()],
        "config_digest": config_digest,
        "meta": meta or {},
    }
    hdr = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = b"".join(t.detach().to(torch.float32).contiguous().numpy().astype("<f4").tobytes()
                    for _, t in params.items())
    return _PREAMBLE.pack(_CKPT_MAGIC, CHECKPOINT_VERSION, len(hdr)) + hdr + body


def save_checkpoint(params: ParamSet, path, config_digest: str | None = None, meta: dict | None = None) -> Path:
    """Write a versioned checkpoint; payloads are little-endian float32."""
    return atomic_write_bytes(path, checkpoint_bytes(params, config_digest, meta))


def read_checkpoint(path) -> tuple[ParamSet, dict]:
    data = Path(path).read_bytes()
    if len(data) < _PREAMBLE.size:
        raise CorruptCheckpoint(f"{path}: truncated preamble")
    magic, version, hlen = _PREAMBLE.unpack_from(data)
    if magic != _CKPT_MAGIC:
        raise CorruptCheckpoint(f"{path}: bad magic")
    if version != CHECKPOINT_VERSION:
        raise IncompatibleCheckpoint(f"{path}: format version {version}, expected {CHECKPOINT_VERSION}")
    off = _PREAMBLE.size
    if len(data) < off + hlen:
        raise CorruptCheckpoint(f"{path}: truncated header")
    try:
        header = json.loads(data[off:off + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise CorruptCheckpoint(f"{path}: unreadable header") from None
    if header.get("format_version") != CHECKPOINT_VERSION:
        raise IncompatibleCheckpoint(f"{path}: header version {header.get('format_version')}")
    off += hlen
    tensors, frozen = {}, set()
    for rec in header["tensors"]:
        shape = tuple(rec["shape"])
        n = int(np.prod(shape)) if shape else 1
        if len(data) < off + 4 * n:
            raise CorruptCheckpoint(f"{path}: truncated payload at {rec['name']}")
        arr = np.frombuffer(data, dtype="<f4", count=n, offset=off).astype(np.float32).reshape(shape)
        tensors[rec["name"]] = torch.from_numpy(arr.copy())
        if rec["frozen"]:
            frozen.add(rec["name"])
        off += 4 * n
    if off != len(data) or len(tensors) != header["tensor_count"]:
        raise CorruptCheckpoint(f"{path}: trailing bytes or tensor count mismatch")
    return ParamSet(tensors, frozen), header


def load_checkpoint(path) -> ParamSet:
    return read_checkpoint(path)[0]
