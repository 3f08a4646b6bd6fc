"""Waveform -> log mel spectrogram, synthetic corpora, manifests and the feature cache.

Features are frames x n_mels float32 matrices of natural-log mel energies
computed from a Hann-windowed power spectrogram with HTK triangular filters.
"""
from __future__ import annotations

import functools
import json
import logging
import struct
import wave
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.signal import get_window

from .errors import (
    CacheInvalidated,
    InputTooShort,
    InvalidConfig,
    InvalidInput,
    InvalidSpec,
    MissingAudio,
)
from .utils import atomic_write_bytes, stable_digest

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Waveform:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        x = np.asarray(self.samples, dtype=np.float64)
        if x.ndim != 1 or x.size == 0:
            raise InvalidInput("waveform must be a non-empty 1-D sequence")
        if not np.all(np.isfinite(x)):
            raise InvalidInput("waveform contains non-finite samples")
        if np.max(np.abs(x)) > 1.0:
            raise InvalidInput("waveform amplitudes must lie in [-1, 1]")
        if int(self.sample_rate) != self.sample_rate or self.sample_rate <= 0:
            raise InvalidInput(f"sample_rate must be a positive integer, got {self.sample_rate}")
        x.setflags(write=False)
        object.__setattr__(self, "samples", x)
        object.__setattr__(self, "sample_rate", int(self.sample_rate))

    @property
    def duration_s(self) -> float:
        return self.samples.size / self.sample_rate


@dataclass(frozen=True)
class FrontendConfig:
    n_mels: int = 128
    frame_len_ms: float = 25.0
    hop_ms: float = 10.0
    fmin: float = 20.0
    fmax: float | None = None  # None -> Nyquist
    log_floor: float = 1e-10
    window: str = "hann"
    n_fft: int = 2048
    clip_len_s: float | None = None  # pad/truncate to a fixed length when set

    def __post_init__(self):
        if self.n_mels < 1:
            raise InvalidConfig("n_mels must be >= 1")
        if self.log_floor <= 0:
            raise InvalidConfig("log_floor must be > 0")
        if self.frame_len_ms <= 0 or self.hop_ms <= 0:
            raise InvalidConfig("frame_len_ms and hop_ms must be > 0")
        if self.fmin < 0 or (self.fmax is not None and self.fmax <= self.fmin):
            raise InvalidConfig("need 0 <= fmin < fmax")
        if self.clip_len_s is not None and self.clip_len_s <= 0:
            raise InvalidConfig("clip_len_s must be > 0")

    def frame_len(self, sample_rate: int) -> int:
        return int(round(self.frame_len_ms * sample_rate / 1000.0))

    def hop(self, sample_rate: int) -> int:
        return int(round(self.hop_ms * sample_rate / 1000.0))

    def fft_size(self, sample_rate: int) -> int:
        n = self.frame_len(sample_rate)
        return max(self.n_fft, 1 << (n - 1).bit_length())

    def resolved_fmax(self, sample_rate: int) -> float:
        nyquist = sample_rate / 2.0
        fmax = nyquist if self.fmax is None else float(self.fmax)
        if fmax > nyquist:
            raise InvalidConfig(f"fmax {fmax} exceeds Nyquist {nyquist}")
        if self.fmin >= fmax:
            raise InvalidConfig("fmin must be below fmax")
        return fmax

    def n_frames(self, sample_rate: int) -> int | None:
        if self.clip_len_s is None:
            return None
        n = int(round(self.clip_len_s * sample_rate))
        return frame_count(n, self.frame_len(sample_rate), self.hop(sample_rate))

    def digest(self) -> str:
        return stable_digest(asdict(self))


@dataclass(frozen=True)
class LogMelSpec:
    values: np.ndarray  # frames x n_mels, float32
    config_digest: str

    @property
    def shape(self):
        return self.values.shape


def frame_count(n_samples: int, frame_len: int, hop: int) -> int:
    if n_samples < frame_len:
        raise InputTooShort(f"{n_samples} samples is shorter than one frame ({frame_len})")
    return (n_samples - frame_len) // hop + 1


def fit_length(samples: np.ndarray, n: int) -> np.ndarray:
    if samples.size >= n:
        return samples[:n]
    return np.pad(samples, (0, n - samples.size))


def stft_magnitude(w: Waveform, cfg: FrontendConfig) -> np.ndarray:
    """Magnitude spectrogram, frames x (n_fft // 2 + 1), no centering."""
    sr = w.sample_rate
    frame_len, hop = cfg.frame_len(sr), cfg.hop(sr)
    n_frames = frame_count(w.samples.size, frame_len, hop)
    frames = sliding_window_view(w.samples, frame_len)[::hop][:n_frames]
    win = get_window(cfg.window, frame_len, fftbins=True)
    return np.abs(np.fft.rfft(frames * win, n=cfg.fft_size(sr), axis=1))


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_edges(n_mels: int, fmin: float, fmax: float) -> np.ndarray:
    """The n_mels + 2 filter edge frequencies in Hz; centers are edges[1:-1]."""
    return mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))


@functools.lru_cache(maxsize=32)
def mel_filterbank(sample_rate: int, n_fft: int, n_mels: int, fmin: float, fmax: float) -> np.ndarray:
    """HTK-style triangular filters (peak 1), n_mels x (n_fft // 2 + 1)."""
    freqs = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    edges = mel_edges(n_mels, fmin, fmax)
    lo, ctr, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    up = (freqs[None, :] - lo) / (ctr - lo)
    down = (hi - freqs[None, :]) / (hi - ctr)
    fb = np.maximum(0.0, np.minimum(up, down))
    empty = np.flatnonzero(fb.sum(axis=1) == 0)
    if empty.size:
        raise InvalidConfig(
            f"mel filters {empty.tolist()} cover no FFT bin; raise n_fft or lower n_mels"
        )
    fb.setflags(write=False)
    return fb


def logmel(w: Waveform, cfg: FrontendConfig) -> LogMelSpec:
    sr = w.sample_rate
    fmax = cfg.resolved_fmax(sr)
    if cfg.clip_len_s is not None:
        n = int(round(cfg.clip_len_s * sr))
        w = Waveform(fit_length(w.samples, n), sr)
    power = stft_magnitude(w, cfg) ** 2
    fb = mel_filterbank(sr, cfg.fft_size(sr), cfg.n_mels, float(cfg.fmin), fmax)
    mel = power @ fb.T
    values = np.log(np.maximum(mel, cfg.log_floor)).astype(np.float32)
    return LogMelSpec(values, cfg.digest())


# --------------------------------------------------------------------------
# synthetic corpora


@dataclass(frozen=True)
class ClassParams:
    label: str
    fundamental: float
    harmonic_weights: tuple[float, ...]
    noise_level: float = 0.0


@dataclass(frozen=True)
class SynthSpec:
    classes: tuple[ClassParams, ...]
    clip_len_s: float = 1.0
    clips_per_class: int = 40
    sample_rate: int = 16000
    seed: int = 0
    f0_jitter: float = 0.01  # relative, uniform in +-f0_jitter per clip
    amplitude: tuple[float, float] = (0.3, 0.8)

    @property
    def n_classes(self) -> int:
        return len(self.classes)

    def validate(self):
        if not self.classes:
            raise InvalidSpec("classes: at least one class is required")
        f0s = [c.fundamental for c in self.classes]
        if len(set(f0s)) != len(f0s):
            raise InvalidSpec("classes.fundamental: fundamentals must be distinct")
        labels = [c.label for c in self.classes]
        if len(set(labels)) != len(labels) or not all(labels):
            raise InvalidSpec("classes.label: labels must be distinct and non-empty")
        for c in self.classes:
            if c.noise_level < 0:
                raise InvalidSpec(f"classes.noise_level: negative for {c.label}")
            if not (0 < c.fundamental < self.sample_rate / 2):
                raise InvalidSpec(f"classes.fundamental: {c.fundamental} out of range")
            if not c.harmonic_weights or min(c.harmonic_weights) < 0 or sum(c.harmonic_weights) <= 0:
                raise InvalidSpec(f"classes.harmonic_weights: invalid for {c.label}")
        if self.clips_per_class < 1:
            raise InvalidSpec("clips_per_class: must be >= 1")
        if self.clip_len_s <= 0:
            raise InvalidSpec("clip_len_s: must be > 0")
        if self.sample_rate <= 0:
            raise InvalidSpec("sample_rate: must be > 0")
        if not (0 <= self.f0_jitter < 0.5):
            raise InvalidSpec("f0_jitter: must lie in [0, 0.5)")
        lo, hi = self.amplitude
        if not (0 < lo <= hi <= 1):
            raise InvalidSpec("amplitude: need 0 < low <= high <= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SynthSpec":
        d = dict(d)
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise InvalidSpec(f"{sorted(unknown)[0]}: unknown field")
        try:
            classes = tuple(
                ClassParams(
                    label=str(c["label"]),
                    fundamental=float(c["fundamental"]),
                    harmonic_weights=tuple(float(x) for x in c["harmonic_weights"]),
                    noise_level=float(c.get("noise_level", 0.0)),
                )
                for c in d.pop("classes")
            )
        except KeyError as exc:
            raise InvalidSpec(f"classes.{exc.args[0]}: missing field") from None
        except (TypeError, ValueError) as exc:
            raise InvalidSpec(f"classes: {exc}") from None
        if "amplitude" in d:
            d["amplitude"] = tuple(d["amplitude"])
        try:
            spec = cls(classes=classes, **d)
        except TypeError as exc:
            raise InvalidSpec(str(exc)) from None
        spec.validate()
        return spec


def random_classes(fundamentals, prefix: str, seed: int, n_harmonics: int = 6,
                   noise_level: float = 0.02) -> tuple[ClassParams, ...]:
    rng = np.random.default_rng(seed)
    out = []
    for i, f0 in enumerate(fundamentals):
        weights = rng.dirichlet(np.full(n_harmonics, 0.7))
        out.append(ClassParams(f"{prefix}{i:02d}", float(round(f0, 3)),
                               tuple(float(round(x, 6)) for x in weights), noise_level))
    return tuple(out)


def default_specs(seed: int = 0, n_protocol: int = 25, n_pretrain: int = 15,
                  clips_per_class: int = 40, clip_len_s: float = 0.5, f0_jitter: float = 0.05,
                  noise_level: float = 0.05) -> tuple[SynthSpec, SynthSpec]:
    """The desk-scale protocol corpus and a label-disjoint pretraining corpus.

    Fundamentals come from one log-spaced grid that is split at random, so both
    corpora span the same pitch range without sharing a class.
    """
    grid = np.geomspace(150.0, 1500.0, n_protocol + n_pretrain)
    order = np.random.default_rng(seed).permutation(grid.size)
    proto_f0 = np.sort(grid[order[:n_protocol]])
    pre_f0 = np.sort(grid[order[n_protocol:]])
    protocol = SynthSpec(random_classes(proto_f0, "c", seed + 1, noise_level=noise_level),
                         clip_len_s=clip_len_s, clips_per_class=clips_per_class, seed=seed,
                         f0_jitter=f0_jitter)
    pretrain = SynthSpec(random_classes(pre_f0, "pre", seed + 2, noise_level=noise_level),
                         clip_len_s=clip_len_s, clips_per_class=clips_per_class, seed=seed + 1000,
                         f0_jitter=f0_jitter)
    return protocol, pretrain


def synth_clip(spec: SynthSpec, class_index: int, clip_index: int) -> Waveform:
    c = spec.classes[class_index]
    rng = np.random.default_rng([spec.seed, class_index, clip_index])
    sr = spec.sample_rate
    n = int(round(spec.clip_len_s * sr))
    t = np.arange(n) / sr
    f0 = c.fundamental * (1.0 + spec.f0_jitter * rng.uniform(-1.0, 1.0))
    phases = rng.uniform(0.0, 2 * np.pi, len(c.harmonic_weights))
    x = np.zeros(n)
    for h, (wgt, ph) in enumerate(zip(c.harmonic_weights, phases), start=1):
        if wgt > 0 and h * f0 < sr / 2:
            x += wgt * np.sin(2 * np.pi * h * f0 * t + ph)
    peak = np.max(np.abs(x))
    if peak > 0:
        x *= rng.uniform(*spec.amplitude) / peak
    if c.noise_level > 0:
        x += c.noise_level * rng.standard_normal(n)
    return Waveform(np.clip(x, -1.0, 1.0), sr)


@dataclass(frozen=True)
class ManifestEntry:
    path: str
    label: str
    duration_s: float | None = None

    def __post_init__(self):
        if not self.label:
            raise InvalidInput(f"empty label for {self.path}")


def synth_corpus(spec: SynthSpec):
    """Returns (manifest entries, {path: Waveform}); paths are relative names."""
    spec.validate()
    entries, store = [], {}
    for ci, c in enumerate(spec.classes):
        for j in range(spec.clips_per_class):
            path = f"{c.label}/{c.label}_{j:03d}.wav"
            w = synth_clip(spec, ci, j)
            entries.append(ManifestEntry(path, c.label, w.duration_s))
            store[path] = w
    return entries, store


# --------------------------------------------------------------------------
# WAV + manifests


def write_wav(path, w: Waveform) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    pcm = np.round(w.samples * 32767.0).astype("<i2")
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(w.sample_rate)
        fh.writeframes(pcm.tobytes())


def read_wav(path) -> Waveform:
    path = Path(path)
    if not path.is_file():
        raise MissingAudio(path)
    with wave.open(str(path), "rb") as fh:
        nch, width, sr, n = fh.getnchannels(), fh.getsampwidth(), fh.getframerate(), fh.getnframes()
        raw = fh.readframes(n)
    if width == 1:
        x = (np.frombuffer(raw, dtype=np.uint8).astype(np.float64) - 128.0) / 128.0
    elif width == 2:
        x = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    elif width == 4:
        x = np.frombuffer(raw, dtype="<i4").astype(np.float64) / 2147483648.0
    else:
        raise InvalidInput(f"{path}: unsupported PCM sample width {width}")
    if nch > 1:
        x = x.reshape(-1, nch).mean(axis=1)
    return Waveform(x, sr)


def write_manifest(path, entries) -> Path:
    from .utils import write_jsonl

    recs = []
    for e in entries:
        rec = {"path": e.path, "label": e.label}
        if e.duration_s is not None:
            rec["duration_s"] = round(float(e.duration_s), 6)
        recs.append(rec)
    return write_jsonl(path, recs)


def load_manifest(path) -> list[ManifestEntry]:
    """Read a line-delimited manifest; relative audio paths resolve against its directory."""
    path = Path(path)
    root = path.parent
    entries = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                audio, label = rec["path"], str(rec["label"])
            except (json.JSONDecodeError, KeyError, TypeError):
                raise InvalidInput(f"{path}:{lineno}: expected an object with path and label") from None
            if not label:
                raise InvalidInput(f"{path}:{lineno}: empty label")
            audio_path = Path(audio)
            if not audio_path.is_absolute():
                audio_path = root / audio_path
            if not audio_path.is_file():
                raise MissingAudio(audio_path)
            entries.append(ManifestEntry(str(audio_path), label, rec.get("duration_s")))
    return entries


# --------------------------------------------------------------------------
# feature cache

_CACHE_MAGIC = b"FFLM"
_CACHE_VERSION = 1
_CACHE_HEADER = struct.Struct("<4sIIII64s64s")


def entries_digest(entries) -> str:
    return stable_digest([[e.path, e.label] for e in entries])


def write_cache(path, features: np.ndarray, cfg_digest: str, entries_dig: str) -> Path:
    count, frames, mels = features.shape
    head = _CACHE_HEADER.pack(_CACHE_MAGIC, _CACHE_VERSION, count, frames, mels,
                              cfg_digest.encode("ascii"), entries_dig.encode("ascii"))
    body = np.ascontiguousarray(features, dtype="<f4").tobytes()
    return atomic_write_bytes(path, head + body)


def read_cache(path, cfg_digest: str | None = None, entries_dig: str | None = None) -> np.ndarray:
    """Load a cache file; raises CacheInvalidated when it does not match the expectations."""
    data = Path(path).read_bytes()
    if len(data) < _CACHE_HEADER.size:
        raise CacheInvalidated(f"{path}: truncated header")
    magic, version, count, frames, mels, cdig, edig = _CACHE_HEADER.unpack_from(data)
    if magic != _CACHE_MAGIC or version != _CACHE_VERSION:
        raise CacheInvalidated(f"{path}: not a version-{_CACHE_VERSION} feature cache")
    if cfg_digest is not None and cdig.decode("ascii") != cfg_digest:
        raise CacheInvalidated(f"{path}: frontend config digest mismatch")
    if entries_dig is not None and edig.decode("ascii") != entries_dig:
        raise CacheInvalidated(f"{path}: manifest digest mismatch")
    n = count * frames * mels
    body = data[_CACHE_HEADER.size:]
    if len(body) != 4 * n:
        raise CacheInvalidated(f"{path}: payload size mismatch")
    return np.frombuffer(body, dtype="<f4").reshape(count, frames, mels).astype(np.float32)


def compute_features(entries, cfg: FrontendConfig, store=None) -> np.ndarray:
    specs = []
    for e in entries:
        w = store[e.path] if store is not None and e.path in store else read_wav(e.path)
        specs.append(logmel(w, cfg).values)
    if not specs:
        return np.zeros((0, 0, cfg.n_mels), dtype=np.float32)
    shapes = {s.shape for s in specs}
    if len(shapes) != 1:
        raise InvalidConfig("clips differ in length; set clip_len_s for a fixed patch grid")
    return np.stack(specs)


def cache_features(entries, cfg: FrontendConfig, cache_path, store=None) -> Path:
    """Ensure ``cache_path`` holds features for ``entries``; recompute on any mismatch."""
    cache_path = Path(cache_path)
    cdig, edig = cfg.digest(), entries_digest(entries)
    if cache_path.exists():
        try:
            read_cache(cache_path, cdig, edig)
            return cache_path
        except CacheInvalidated as exc:
            log.info("recomputing features: %s", exc)
    feats = compute_features(entries, cfg, store)
    return write_cache(cache_path, feats, cdig, edig)


def load_features(entries, cfg: FrontendConfig, cache_path=None, store=None) -> np.ndarray:
    if cache_path is None:
        return compute_features(entries, cfg, store)
    cache_features(entries, cfg, cache_path, store)
    return read_cache(cache_path, cfg.digest(), entries_digest(entries))
