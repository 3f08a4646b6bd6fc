import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from ffcac.classifier import (
    ClassStats,
    CosineHead,
    PrototypeClassifier,
    ReconstructionConfig,
    compute_covariance,
    compute_prototype,
    cosine_logits,
    extend_classifier,
    load_stats,
    noise_transform,
    predict,
    predict_batch,
    reconstruct,
    regularized_covariance,
    save_stats,
)
from ffcac.errors import (
    CorruptCheckpoint,
    DegenerateNorm,
    DuplicateClass,
    EmptyClass,
    InvalidConfig,
    NoClasses,
    SingularCovariance,
)

from oracles import covariance_loop, prototype_loop

finite = st.floats(-10, 10, allow_nan=False, allow_infinity=False)


# ---------------------------------------------------------------- cosine head


def test_cosine_logits_examples():
    w = np.array([[1.0, 2.0, 0.0], [0.0, 0.0, 1.0]])
    head = CosineHead(w, eta=1.0)
    assert cosine_logits(w[0], head)[0] == pytest.approx(1.0)
    assert cosine_logits(-w[0], head)[0] == pytest.approx(-1.0)
    assert cosine_logits(np.array([2.0, -1.0, 0.0]), head)[0] == pytest.approx(0.0)


def test_zero_norm_warns():
    head = CosineHead(np.eye(2), eta=1.0)
    with pytest.warns(DegenerateNorm):
        out = cosine_logits(np.zeros(2), head)
    assert np.all(out == 0)


def test_eta_must_be_positive():
    with pytest.raises(InvalidConfig):
        CosineHead(np.eye(2), eta=0.0)


@given(arrays(np.float64, 4, elements=finite), st.floats(0.1, 100))
def test_cosine_argmax_invariant_to_eta(e, eta):
    if np.linalg.norm(e) < 1e-3:
        return
    w = np.random.default_rng(0).standard_normal((5, 4))
    a = cosine_logits(e, CosineHead(w, eta=1.0))
    b = cosine_logits(e, CosineHead(w, eta=eta))
    assert np.argmax(a) == np.argmax(b)
    assert np.all(np.abs(a) <= 1.0)


# ---------------------------------------------------------------- prototypes / covariance


def test_prototype_examples(rng):
    x = rng.standard_normal((1, 3))
    assert np.array_equal(compute_prototype(x), x[0])
    assert np.array_equal(compute_prototype([[1.0, 0.0], [0.0, 1.0]]), [0.5, 0.5])
    five = rng.standard_normal((5, 6))
    assert np.allclose(compute_prototype(five), prototype_loop(five.tolist()), atol=1e-6)
    with pytest.raises(EmptyClass):
        compute_prototype(np.zeros((0, 3)))


def test_covariance_examples(rng):
    assert np.array_equal(compute_covariance(np.ones((4, 3))), np.zeros((3, 3)))
    assert np.array_equal(compute_covariance([[1.0, 0.0], [-1.0, 0.0]]), [[1.0, 0.0], [0.0, 0.0]])
    six = rng.standard_normal((6, 4))
    assert np.allclose(compute_covariance(six), covariance_loop(six.tolist()), atol=1e-6)
    with pytest.raises(EmptyClass):
        compute_covariance([])


@given(st.integers(1, 8), st.integers(1, 16), st.integers(0, 2**31 - 1))
def test_prototype_permutation_invariant_and_covariance_psd(k, dim, seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((k, dim))
    perm = rng.permutation(k)
    assert np.allclose(compute_prototype(x), compute_prototype(x[perm]), atol=1e-12)
    cov = compute_covariance(x)
    assert np.array_equal(cov, cov.T)
    assert np.all(np.diag(cov) >= 0)
    assert np.linalg.eigvalsh(cov).min() > -1e-10


# ---------------------------------------------------------------- reconstruction


def test_reconstruct_zero_noise_returns_prototype(rng):
    s = ClassStats.from_embeddings("a", rng.standard_normal((5, 8)))
    out = reconstruct(s, ReconstructionConfig(), seed=0, noise=np.zeros((3, 8)))
    assert np.array_equal(out, np.tile(s.prototype, (3, 1)))


def test_reconstruct_identity_covariance(rng):
    p = rng.standard_normal(4)
    s = ClassStats("a", p, np.eye(4), 5)
    eps = rng.standard_normal((2, 4))
    out = reconstruct(s, ReconstructionConfig(reg_gamma=0.0), seed=0, noise=eps)
    assert np.array_equal(out, p + eps)


def test_reconstruct_scalar_inverse():
    s = ClassStats("a", np.array([2.0]), np.array([[4.0]]), 5)
    out = reconstruct(s, ReconstructionConfig(reg_gamma=0.0), seed=0, noise=np.array([[1.0]]))
    assert out[0, 0] == 2.25


def test_sqrt_transform():
    s = ClassStats("a", np.zeros(2), np.diag([4.0, 9.0]), 5)
    m = noise_transform(s, ReconstructionConfig(reg_gamma=0.0, transform="sqrt"))
    assert np.allclose(m, np.diag([2.0, 3.0]))


def test_reconstruct_deterministic_per_seed(rng):
    s = ClassStats.from_embeddings("a", rng.standard_normal((5, 8)))
    cfg = ReconstructionConfig()
    assert np.array_equal(reconstruct(s, cfg, 7), reconstruct(s, cfg, 7))
    assert not np.array_equal(reconstruct(s, cfg, 7), reconstruct(s, cfg, 8))
    assert reconstruct(s, cfg, 7).shape == (cfg.samples_per_class, 8)


def test_singular_without_regularization(rng):
    s = ClassStats.from_embeddings("a", rng.standard_normal((3, 8)))
    with pytest.raises(SingularCovariance):
        reconstruct(s, ReconstructionConfig(reg_gamma=0.0), 0)


@settings(max_examples=30)
@given(st.integers(6, 24), st.integers(0, 2**31 - 1), st.floats(1e-3, 1.0))
def test_regularized_low_rank_never_singular(dim, seed, gamma):
    x = np.random.default_rng(seed).standard_normal((5, dim))
    s = ClassStats.from_embeddings("a", x)
    out = reconstruct(s, ReconstructionConfig(reg_gamma=gamma), seed)
    assert np.all(np.isfinite(out))


def test_constant_class_needs_absolute_floor():
    # zero covariance: only the eps_abs term keeps it invertible
    s = ClassStats.from_embeddings("a", np.ones((5, 3)))
    sig = regularized_covariance(s.covariance, ReconstructionConfig())
    assert np.all(np.diag(sig) > 0)
    assert np.all(np.isfinite(reconstruct(s, ReconstructionConfig(), 0)))


def test_reconstruction_mean_converges(rng):
    s = ClassStats.from_embeddings("a", rng.standard_normal((5, 4)))
    cfg = ReconstructionConfig(samples_per_class=10000, transform="sqrt")
    draws = reconstruct(s, cfg, 3)
    m = noise_transform(s, cfg)
    se = np.sqrt(np.diag(m.T @ m) / 10000)
    assert np.all(np.abs(draws.mean(axis=0) - s.prototype) < 3 * se + 1e-12)


def test_reconstruction_config_validation():
    with pytest.raises(InvalidConfig):
        ReconstructionConfig(reg_gamma=-1)
    with pytest.raises(InvalidConfig):
        ReconstructionConfig(transform="cholesky")
    with pytest.raises(InvalidConfig):
        ReconstructionConfig(samples_per_class=0)


# ---------------------------------------------------------------- prediction


def _clf():
    return PrototypeClassifier(("c1", "c2"), np.array([[1.0, 0.0], [0.0, 1.0]]))


def test_predict_examples():
    clf = _clf()
    assert predict([0.9, 0.1], clf) == "c1"
    assert predict([0.5, 0.5], clf) == "c1"  # exact tie -> lowest index
    assert predict([0.0, 1.0], clf) == "c2"
    with pytest.raises(NoClasses):
        predict([1.0, 0.0], PrototypeClassifier())


@given(arrays(np.float64, (6, 3), elements=finite), st.floats(1e-3, 1e3))
def test_predict_scale_invariant(e, c):
    if np.any(np.linalg.norm(e, axis=1) < 1e-3):
        return
    protos = np.random.default_rng(1).standard_normal((4, 3))
    clf = PrototypeClassifier(tuple("abcd"), protos)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", DegenerateNorm)
        a, b = predict_batch(e, clf), predict_batch(e * c, clf)
    sims = (e / np.linalg.norm(e, axis=1, keepdims=True)) @ (protos / np.linalg.norm(protos, axis=1, keepdims=True)).T
    near_tie = np.sort(sims, axis=1)[:, -1] - np.sort(sims, axis=1)[:, -2] < 1e-9
    assert all(x == y for x, y, t in zip(a, b, near_tie) if not t)


def test_extend_classifier(rng):
    first = [ClassStats.from_embeddings(f"a{i}", rng.standard_normal((5, 4))) for i in range(5)]
    clf = PrototypeClassifier.from_stats(first)
    before = clf.prototypes.tobytes()
    more = [ClassStats.from_embeddings(f"b{i}", rng.standard_normal((5, 4))) for i in range(5)]
    big = extend_classifier(clf, more)
    assert len(big) == 10
    assert big.prototypes[:5].tobytes() == before
    assert big.class_ids[5:] == tuple(f"b{i}" for i in range(5))
    same = extend_classifier(clf, [])
    assert same.class_ids == clf.class_ids and same.prototypes.tobytes() == before
    with pytest.raises(DuplicateClass):
        extend_classifier(clf, [first[0]])


# ---------------------------------------------------------------- persistence


def test_stats_roundtrip(tmp_path, rng):
    stats = [ClassStats.from_embeddings(f"c{i}", rng.standard_normal((5, 6))) for i in range(3)]
    save_stats(stats, tmp_path / "s.bin")
    back = load_stats(tmp_path / "s.bin")
    for a, b in zip(stats, back):
        assert a.class_id == b.class_id and a.count == b.count
        assert a.prototype.tobytes() == b.prototype.tobytes()
        assert a.covariance.tobytes() == b.covariance.tobytes()
    (tmp_path / "t.bin").write_bytes((tmp_path / "s.bin").read_bytes()[:-8])
    with pytest.raises(CorruptCheckpoint):
        load_stats(tmp_path / "t.bin")


def test_uniform_logits_value():
    # all cosines equal -> uniform softmax; cross-entropy ln N
    head = CosineHead(np.tile([1.0, 0.0], (5, 1)), eta=16.0)
    logits = cosine_logits([3.0, 0.0], head)
    p = np.exp(logits - logits.max())
    p /= p.sum()
    assert -math.log(p[0]) == pytest.approx(math.log(5))
