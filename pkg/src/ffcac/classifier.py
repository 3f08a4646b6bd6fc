"""Cosine heads, class prototypes, covariance statistics and embedding replay."""
from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    CorruptCheckpoint,
    DegenerateNorm,
    DuplicateClass,
    EmptyClass,
    InvalidConfig,
    NoClasses,
    ShapeError,
    SingularCovariance,
)
from .utils import atomic_write_bytes

NORM_FLOOR = 1e-12


@dataclass
class CosineHead:
    weights: np.ndarray  # n_classes x dim, one row per class
    eta: float = 16.0
    class_ids: tuple = ()

    def __post_init__(self):
        if self.eta <= 0:
            raise InvalidConfig("eta must be > 0")
        self.weights = np.atleast_2d(np.asarray(self.weights, dtype=np.float64))
        if not self.class_ids:
            self.class_ids = tuple(range(self.weights.shape[0]))


def _safe_norm(x: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(x, axis=-1, keepdims=True)
    if np.any(n < NORM_FLOOR):
        warnings.warn("vector norm below floor; clamped", DegenerateNorm, stacklevel=3)
    return np.maximum(n, NORM_FLOOR)


def cosine_matrix(e: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Pairwise cosine similarities, rows of ``e`` against rows of ``w``."""
    e = np.atleast_2d(np.asarray(e, dtype=np.float64))
    w = np.atleast_2d(np.asarray(w, dtype=np.float64))
    if e.shape[-1] != w.shape[-1]:
        raise ShapeError(f"dimension mismatch {e.shape[-1]} vs {w.shape[-1]}")
    return np.clip((e / _safe_norm(e)) @ (w / _safe_norm(w)).T, -1.0, 1.0)


def cosine_logits(e, head: CosineHead) -> np.ndarray:
    return head.eta * cosine_matrix(e, head.weights)[0]


def compute_prototype(embeddings) -> np.ndarray:
    x = np.asarray(embeddings, dtype=np.float64)
    if x.size == 0 or x.ndim != 2:
        raise EmptyClass("cannot form a prototype from no embeddings")
    return x.mean(axis=0)


def compute_covariance(embeddings) -> np.ndarray:
    """Population covariance (divide by K) around the prototype."""
    x = np.asarray(embeddings, dtype=np.float64)
    if x.size == 0 or x.ndim != 2:
        raise EmptyClass("cannot form a covariance from no embeddings")
    c = x - x.mean(axis=0)
    cov = c.T @ c / x.shape[0]
    return 0.5 * (cov + cov.T)


@dataclass
class ClassStats:
    class_id: str
    prototype: np.ndarray
    covariance: np.ndarray
    count: int

    @property
    def dim(self) -> int:
        return self.prototype.shape[0]

    @classmethod
    def from_embeddings(cls, class_id, embeddings) -> "ClassStats":
        x = np.asarray(embeddings, dtype=np.float64)
        return cls(str(class_id), compute_prototype(x), compute_covariance(x), int(x.shape[0]))


@dataclass(frozen=True)
class ReconstructionConfig:
    reg_gamma: float = 0.01
    transform: str = "inverse"  # "inverse" follows e' = p + eps @ inv(sigma); "sqrt" uses sigma^(1/2)
    samples_per_class: int = 5
    eps_abs: float = 1e-8
    max_condition: float = 1e12

    def __post_init__(self):
        if self.reg_gamma < 0:
            raise InvalidConfig("reg_gamma must be >= 0")
        if self.samples_per_class < 1:
            raise InvalidConfig("samples_per_class must be >= 1")
        if self.transform not in ("inverse", "sqrt"):
            raise InvalidConfig(f"unknown transform {self.transform!r}")


def regularized_covariance(sigma: np.ndarray, cfg: ReconstructionConfig) -> np.ndarray:
    dim = sigma.shape[0]
    shrink = cfg.reg_gamma * (np.trace(sigma) / dim + cfg.eps_abs)
    return sigma + shrink * np.eye(dim)


def noise_transform(stats: ClassStats, cfg: ReconstructionConfig) -> np.ndarray:
    """The matrix applied on the right of the standard-normal row vector."""
    sig = regularized_covariance(np.asarray(stats.covariance, dtype=np.float64), cfg)
    if not np.all(np.isfinite(sig)):
        raise SingularCovariance(f"class {stats.class_id}: non-finite covariance")
    if cfg.transform == "sqrt":
        vals, vecs = np.linalg.eigh(sig)
        return (vecs * np.sqrt(np.clip(vals, 0.0, None))) @ vecs.T
    try:
        cond = np.linalg.cond(sig)
        if not np.isfinite(cond) or cond > cfg.max_condition:
            raise np.linalg.LinAlgError
        inv = np.linalg.inv(sig)
    except np.linalg.LinAlgError:
        raise SingularCovariance(
            f"class {stats.class_id}: covariance not invertible (raise reg_gamma)") from None
    return inv


def reconstruct(stats: ClassStats, cfg: ReconstructionConfig, seed, noise=None, transform=None) -> np.ndarray:
    """Draw ``samples_per_class`` pseudo-embeddings around the class prototype.

    ``noise`` overrides the standard-normal draws (shape samples x dim);
    ``transform`` reuses a matrix from :func:`noise_transform`.
    """
    m = noise_transform(stats, cfg) if transform is None else transform
    if noise is None:
        rng = np.random.default_rng(seed)
        noise = rng.standard_normal((cfg.samples_per_class, stats.dim))
    noise = np.atleast_2d(np.asarray(noise, dtype=np.float64))
    return stats.prototype[None, :] + noise @ m


@dataclass
class PrototypeClassifier:
    class_ids: tuple = ()
    prototypes: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))

    def __post_init__(self):
        self.class_ids = tuple(self.class_ids)
        self.prototypes = np.asarray(self.prototypes, dtype=np.float64)
        if self.prototypes.ndim != 2 or len(self.class_ids) != self.prototypes.shape[0]:
            if len(self.class_ids) or self.prototypes.size:
                raise ShapeError("one prototype row per class id is required")
        if len(set(self.class_ids)) != len(self.class_ids):
            raise DuplicateClass("class ids must be unique")

    @property
    def dim(self) -> int:
        return self.prototypes.shape[1] if self.prototypes.ndim == 2 else 0

    def __len__(self):
        return len(self.class_ids)

    @classmethod
    def from_stats(cls, stats) -> "PrototypeClassifier":
        return extend_classifier(cls(), stats)


def extend_classifier(clf: PrototypeClassifier, new_stats) -> PrototypeClassifier:
    new_stats = list(new_stats)
    if not new_stats:
        return PrototypeClassifier(clf.class_ids, clf.prototypes.copy())
    ids = list(clf.class_ids)
    dim = clf.dim if len(clf) else new_stats[0].dim
    for s in new_stats:
        if s.class_id in ids:
            raise DuplicateClass(f"class {s.class_id!r} already present")
        if s.dim != dim:
            raise ShapeError(f"prototype dim {s.dim} != classifier dim {dim}")
        ids.append(s.class_id)
    rows = np.stack([np.asarray(s.prototype, dtype=np.float64) for s in new_stats])
    protos = rows if not len(clf) else np.concatenate([clf.prototypes, rows])
    return PrototypeClassifier(tuple(ids), protos)


def predict_indices(e, clf: PrototypeClassifier) -> np.ndarray:
    if not len(clf):
        raise NoClasses("classifier has no prototypes")
    sims = cosine_matrix(e, clf.prototypes)
    return np.argmax(sims, axis=1)  # first maximum -> lowest class index on ties


def predict_batch(e, clf: PrototypeClassifier) -> list:
    return [clf.class_ids[i] for i in predict_indices(e, clf)]


def predict(e, clf: PrototypeClassifier):
    return predict_batch(np.atleast_2d(e), clf)[0]


# --------------------------------------------------------------------------
# binary ClassStats records

_STATS_MAGIC = b"FFCS"
_STATS_VERSION = 1


def stats_bytes(stats) -> bytes:
    parts = [struct.pack("<4sII", _STATS_MAGIC, _STATS_VERSION, len(stats))]
    for s in stats:
        cid = s.class_id.encode("utf-8")
        parts.append(struct.pack("<H", len(cid)) + cid + struct.pack("<II", s.dim, s.count))
        parts.append(np.asarray(s.prototype, dtype="<f8").tobytes())
        parts.append(np.asarray(s.covariance, dtype="<f8").tobytes())
    return b"".join(parts)


def save_stats(stats, path) -> Path:
    return atomic_write_bytes(path, stats_bytes(stats))


def load_stats(path) -> list[ClassStats]:
    data = Path(path).read_bytes()
    try:
        magic, version, n = struct.unpack_from("<4sII", data)
        if magic != _STATS_MAGIC or version != _STATS_VERSION:
            raise CorruptCheckpoint(f"{path}: not a class-stats file")
        off, out = 12, []
        for _ in range(n):
            (ln,) = struct.unpack_from("<H", data, off)
            off += 2
            cid = data[off:off + ln].decode("utf-8")
            off += ln
            dim, count = struct.unpack_from("<II", data, off)
            off += 8
            proto = np.frombuffer(data, "<f8", dim, off).astype(np.float64)
            off += 8 * dim
            cov = np.frombuffer(data, "<f8", dim * dim, off).astype(np.float64).reshape(dim, dim)
            off += 8 * dim * dim
            out.append(ClassStats(cid, proto, cov, count))
    except (struct.error, ValueError):
        raise CorruptCheckpoint(f"{path}: truncated class-stats file") from None
    if off != len(data):
        raise CorruptCheckpoint(f"{path}: trailing bytes")
    return out
