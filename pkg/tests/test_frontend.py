import math
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, strategies as st

from ffcac.errors import CacheInvalidated, InputTooShort, InvalidConfig, InvalidInput, InvalidSpec, MissingAudio
from ffcac.frontend import (
    ClassParams,
    FrontendConfig,
    ManifestEntry,
    SynthSpec,
    Waveform,
    cache_features,
    compute_features,
    default_specs,
    frame_count,
    load_features,
    load_manifest,
    logmel,
    mel_filterbank,
    read_cache,
    read_wav,
    stft_magnitude,
    synth_corpus,
    write_cache,
    write_manifest,
    write_wav,
)

SR = 16000


def sine(freq, seconds=1.0, amp=0.5, sr=SR):
    t = np.arange(int(seconds * sr)) / sr
    return Waveform(amp * np.sin(2 * np.pi * freq * t), sr)


# ---------------------------------------------------------------- waveform / stft


def test_waveform_validation():
    with pytest.raises(InvalidInput):
        Waveform(np.array([0.0, 2.0]), SR)
    with pytest.raises(InvalidInput):
        Waveform(np.array([np.nan]), SR)
    with pytest.raises(InvalidInput):
        Waveform(np.zeros(10), 0)
    with pytest.raises(InvalidInput):
        Waveform(np.zeros(10), 16000.5)


def test_one_second_gives_98_frames():
    # floor((16000 - 400) / 160) + 1
    assert stft_magnitude(Waveform(np.zeros(SR), SR), FrontendConfig()).shape[0] == 98


def test_zero_waveform_zero_magnitude():
    mag = stft_magnitude(Waveform(np.zeros(4000), SR), FrontendConfig())
    assert np.all(mag == 0.0)


def test_dc_energy_in_bin_zero():
    mag = stft_magnitude(Waveform(np.ones(4000), SR), FrontendConfig())
    assert np.all(np.argmax(mag, axis=1) == 0)


def test_too_short():
    with pytest.raises(InputTooShort):
        stft_magnitude(Waveform(np.zeros(399), SR), FrontendConfig())


@given(st.integers(1, 5000), st.integers(1, 600), st.integers(1, 400))
def test_frame_count_formula(extra, frame_len, hop):
    n = frame_len + extra - 1
    assert frame_count(n, frame_len, hop) == (n - frame_len) // hop + 1
    # the last frame fits, one more would not
    k = frame_count(n, frame_len, hop)
    assert (k - 1) * hop + frame_len <= n < k * hop + frame_len


# ---------------------------------------------------------------- mel


def test_filterbank_rows_nonnegative_and_nonempty():
    fb = mel_filterbank(SR, 2048, 128, 20.0, 8000.0)
    assert fb.shape == (128, 1025)
    assert np.all(fb >= 0)
    assert np.all(fb.max(axis=1) > 0)


def test_small_fft_leaves_empty_filters():
    with pytest.raises(InvalidConfig):
        mel_filterbank(SR, 512, 128, 20.0, 8000.0)


def test_zero_waveform_hits_floor():
    cfg = FrontendConfig()
    spec = logmel(Waveform(np.zeros(SR), SR), cfg)
    assert spec.shape == (98, 128)
    assert np.all(spec.values == np.float32(math.log(cfg.log_floor)))


def test_sine_peaks_at_nearest_center():
    # centers from the HTK formula written out independently
    lo, hi = 2595 * math.log10(1 + 20 / 700), 2595 * math.log10(1 + 8000 / 700)
    mels = lo + (hi - lo) * np.arange(1, 129) / 129
    centers = 700 * (10 ** (mels / 2595) - 1)
    expected = int(np.argmin(np.abs(centers - 440.0)))
    spec = logmel(sine(440.0), FrontendConfig())
    assert np.all(np.argmax(spec.values, axis=1) == expected)


def test_logmel_deterministic():
    w = sine(300.0, 0.5)
    a, b = logmel(w, FrontendConfig()), logmel(w, FrontendConfig())
    assert a.values.tobytes() == b.values.tobytes()
    assert a.config_digest == FrontendConfig().digest()


def test_fmax_above_nyquist():
    with pytest.raises(InvalidConfig):
        logmel(sine(300.0), FrontendConfig(fmax=9000.0))


@given(st.floats(0.05, 0.9))
def test_scaling_shifts_log_energy(c):
    w = sine(523.0, 0.3, amp=0.9)
    cfg = FrontendConfig()
    a = logmel(w, cfg).values.astype(np.float64)
    b = logmel(Waveform(w.samples * c, SR), cfg).values.astype(np.float64)
    floor = math.log(cfg.log_floor)
    ok = (a > floor + 1) & (b > floor + 1)
    # float32 storage limits the match
    assert np.allclose((b - a)[ok], 2 * math.log(c), atol=1e-4)


def test_clip_len_pads_and_truncates():
    cfg = FrontendConfig(clip_len_s=0.5)
    short = logmel(sine(300.0, 0.3), cfg)
    long = logmel(sine(300.0, 0.9), cfg)
    assert short.shape == long.shape == (cfg.n_frames(SR), 128)


# ---------------------------------------------------------------- synthetic corpora


def test_default_corpus_counts():
    protocol, pre = default_specs()
    entries, store = synth_corpus(protocol)
    assert len(entries) == 1000
    labels, counts = np.unique([e.label for e in entries], return_counts=True)
    assert len(labels) == 25 and set(counts) == {40}
    assert pre.n_classes == 15
    assert not {c.label for c in protocol.classes} & {c.label for c in pre.classes}
    assert not {c.fundamental for c in protocol.classes} & {c.fundamental for c in pre.classes}


def test_synth_deterministic():
    spec, _ = default_specs(seed=3, clips_per_class=2)
    a, sa = synth_corpus(spec)
    b, sb = synth_corpus(spec)
    assert a == b
    assert all(np.array_equal(sa[k].samples, sb[k].samples) for k in sa)


def test_pure_sinusoid_class():
    spec = SynthSpec((ClassParams("a", 440.0, (1.0,), 0.0),), clip_len_s=0.25, clips_per_class=3, f0_jitter=0.0)
    entries, store = synth_corpus(spec)
    for e in entries:
        x = store[e.path].samples
        spectrum = np.abs(np.fft.rfft(x))
        peak_hz = np.argmax(spectrum) * SR / x.size
        assert abs(peak_hz - 440.0) <= SR / x.size
        # a single sinusoid: nearly all energy within a few bins of the peak
        k = np.argmax(spectrum)
        assert np.sum(spectrum[k - 3:k + 4] ** 2) > 0.99 * np.sum(spectrum ** 2)


def test_duplicate_fundamentals_rejected():
    spec = SynthSpec((ClassParams("a", 440.0, (1.0,)), ClassParams("b", 440.0, (1.0,))))
    with pytest.raises(InvalidSpec, match="fundamental"):
        synth_corpus(spec)


def test_spec_dict_roundtrip_and_errors():
    spec, _ = default_specs(clips_per_class=2)
    assert SynthSpec.from_dict(spec.to_dict()) == spec
    d = spec.to_dict()
    d["classes"][0]["noise_level"] = -1
    with pytest.raises(InvalidSpec, match="noise_level"):
        SynthSpec.from_dict(d)
    with pytest.raises(InvalidSpec, match="bogus"):
        SynthSpec.from_dict({**spec.to_dict(), "bogus": 1})


# ---------------------------------------------------------------- manifests and cache


def _tiny_corpus(tmp_path, n=2):
    spec = SynthSpec((ClassParams("a", 300.0, (1.0, 0.5)), ClassParams("b", 500.0, (0.5, 1.0))),
                     clip_len_s=0.3, clips_per_class=n)
    entries, store = synth_corpus(spec)
    for e in entries:
        write_wav(tmp_path / e.path, store[e.path])
    write_manifest(tmp_path / "manifest.jsonl", entries)
    return tmp_path / "manifest.jsonl", store


def test_wav_roundtrip(tmp_path):
    w = sine(440.0, 0.1)
    write_wav(tmp_path / "x.wav", w)
    r = read_wav(tmp_path / "x.wav")
    assert r.sample_rate == SR
    assert np.max(np.abs(r.samples - w.samples)) < 2 / 32768


def test_manifest_roundtrip(tmp_path):
    path, _ = _tiny_corpus(tmp_path)
    entries = load_manifest(path)
    assert [e.label for e in entries] == ["a", "a", "b", "b"]
    assert all(tmp_path in Path(e.path).parents for e in entries)


def test_empty_manifest(tmp_path):
    (tmp_path / "m.jsonl").write_text("")
    assert load_manifest(tmp_path / "m.jsonl") == []


def test_missing_audio_names_path(tmp_path):
    path, _ = _tiny_corpus(tmp_path)
    (tmp_path / "b" / "b_001.wav").unlink()
    with pytest.raises(MissingAudio) as info:
        load_manifest(path)
    assert info.value.path.endswith("b_001.wav")


def test_cache_roundtrip_bit_identical(tmp_path, rng):
    x = rng.standard_normal((3, 7, 5)).astype(np.float32)
    write_cache(tmp_path / "c.fflm", x, "a" * 64, "b" * 64)
    y = read_cache(tmp_path / "c.fflm", "a" * 64, "b" * 64)
    assert y.tobytes() == x.tobytes()
    with pytest.raises(CacheInvalidated):
        read_cache(tmp_path / "c.fflm", "c" * 64)


def test_cache_hit_and_invalidation(tmp_path):
    path, _ = _tiny_corpus(tmp_path)
    entries = load_manifest(path)
    cfg = FrontendConfig(clip_len_s=0.3)
    cache = tmp_path / "cache.fflm"
    feats = load_features(entries, cfg, cache)
    assert np.array_equal(feats, compute_features(entries, cfg))
    stamp = cache.stat().st_mtime_ns
    cache_features(entries, cfg, cache)
    assert cache.stat().st_mtime_ns == stamp  # hit: not rewritten
    other = FrontendConfig(clip_len_s=0.3, n_mels=64)
    feats2 = load_features(entries, other, cache)
    assert feats2.shape[-1] == 64


def test_manifest_entry_needs_label():
    with pytest.raises(InvalidInput):
        ManifestEntry("x.wav", "")
