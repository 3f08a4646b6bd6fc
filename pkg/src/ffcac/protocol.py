"""Session orchestration: class splits, few-shot episodes, the base -> incremental
pipeline and cumulative evaluation."""
from __future__ import annotations

import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import ede as E
from . import encoder as enc
from .classifier import ClassStats, PrototypeClassifier, extend_classifier, predict_batch, save_stats
from .errors import FFCACError, InsufficientData, InvalidConfig
from .stats import accuracy, average_accuracy
from .training import derive_seed, finetune_base, finetune_baseline_step, train_incremental
from .utils import atomic_write_text, canonical_json, write_jsonl

log = logging.getLogger(__name__)

METHODS = ("ede", "finetune")


@dataclass(frozen=True)
class ProtocolConfig:
    M: int = 5
    N: int = 5
    K: int = 5
    test_per_class: int = 20
    variant: str = E.P_PLUS_EXPANDED_F
    repeats: int = 100
    seed: int = 0

    def __post_init__(self):
        if self.M < 1 or self.N < 1 or self.K < 1:
            raise InvalidConfig("M, N and K must all be >= 1")
        if self.test_per_class < 1:
            raise InvalidConfig("test_per_class must be >= 1")
        if self.repeats < 1:
            raise InvalidConfig("repeats must be >= 1")
        E.check_variant(self.variant)


@dataclass
class Session:
    labels: list  # class ids of this session, in order
    pool: list  # candidate training indices
    train: list  # the sampled N*K episode
    test: list


@dataclass
class SessionSplit:
    sessions: list
    seed: int

    @property
    def M(self) -> int:
        return len(self.sessions)

    def to_record(self) -> dict:
        return {"seed": self.seed, "sessions": [asdict(s) for s in self.sessions]}


@dataclass
class Corpus:
    """Features for every manifest entry plus their labels."""

    features: np.ndarray  # n x frames x mels
    labels: np.ndarray  # n class ids (str)

    def __post_init__(self):
        self.labels = np.asarray(self.labels).astype(str)
        if len(self.features) != len(self.labels):
            raise InvalidConfig("features and labels differ in length")


def _labels_of(manifest) -> np.ndarray:
    if len(manifest) and hasattr(manifest[0], "label"):
        return np.array([e.label for e in manifest], dtype=str)
    return np.asarray(manifest).astype(str)


def sample_episode(pool: dict, N: int, K: int, seed) -> list:
    """Pick K distinct indices per class from ``pool`` (label -> indices).

    The result is ordered by class, then by index.
    """
    if len(pool) != N:
        raise InsufficientData(f"episode needs {N} classes, pool has {len(pool)}")
    rng = np.random.default_rng(seed)
    out = []
    for label, idx in pool.items():
        idx = sorted(idx)
        if len(idx) < K:
            raise InsufficientData(f"class {label!r} has {len(idx)} training samples, need {K}")
        out.extend(sorted(int(i) for i in rng.choice(idx, size=K, replace=False)))
    return out


def build_splits(manifest, cfg: ProtocolConfig, seed) -> SessionSplit:
    """Pick M*N classes, partition them into M sessions and sample every episode."""
    labels = _labels_of(manifest)
    classes = sorted(set(labels.tolist()))
    need = cfg.M * cfg.N
    if len(classes) < need:
        raise InsufficientData(f"{len(classes)} classes available, {need} required")
    rng = np.random.default_rng(seed)
    chosen = [classes[i] for i in rng.permutation(len(classes))[:need]]
    sessions = []
    for m in range(cfg.M):
        ids = chosen[m * cfg.N:(m + 1) * cfg.N]
        pool, test = {}, []
        for c in ids:
            idx = np.flatnonzero(labels == c)
            if idx.size < cfg.K + cfg.test_per_class:
                raise InsufficientData(
                    f"class {c!r} has {idx.size} samples, need K + test_per_class = {cfg.K + cfg.test_per_class}")
            idx = rng.permutation(idx)
            test.extend(sorted(int(i) for i in idx[:cfg.test_per_class]))
            pool[c] = sorted(int(i) for i in idx[cfg.test_per_class:])
        train = sample_episode(pool, cfg.N, cfg.K, derive_seed(seed, m))
        sessions.append(Session(list(ids), [i for c in ids for i in pool[c]], train, test))
    return SessionSplit(sessions, int(seed))


def cumulative_test_set(split: SessionSplit, m: int) -> list:
    if not 0 <= m < split.M:
        raise IndexError(f"session {m} not in [0, {split.M})")
    return [i for s in split.sessions[:m + 1] for i in s.test]


@dataclass
class RunReport:
    method: str
    variant: str
    seed: int
    config_digest: str
    accuracies: list = field(default_factory=list)
    old_accuracies: list = field(default_factory=list)  # on classes of earlier sessions; None at m = 0
    aa: float | None = None
    complete: bool = False
    encoder_updates: int = 0
    error: str | None = None
    timings: dict = field(default_factory=dict)
    checks: dict = field(default_factory=dict)

    def finish(self):
        self.aa = average_accuracy(self.accuracies) if self.accuracies else None

    def to_record(self) -> dict:
        return {
            "method": self.method, "variant": self.variant, "seed": self.seed,
            "config_digest": self.config_digest, "accuracies": list(self.accuracies),
            "old_accuracies": list(self.old_accuracies), "aa": self.aa, "complete": self.complete,
            "encoder_updates": self.encoder_updates, "error": self.error,
        }

    @classmethod
    def from_record(cls, rec: dict) -> "RunReport":
        keys = ("method", "variant", "seed", "config_digest", "accuracies", "old_accuracies", "aa", "complete",
                "encoder_updates", "error")
        return cls(**{k: rec[k] for k in keys if k in rec})


# --------------------------------------------------------------------------
# running one protocol instance


class _Run:
    def __init__(self, split, pretrained, corpus, cfg, seed, run_dir, probe):
        self.split, self.corpus, self.cfg = split, corpus, cfg
        self.pretrained = pretrained.clone().freeze()
        self.seed = seed
        self.run_dir = Path(run_dir) if run_dir is not None else None
        self.probe = probe
        self.metrics = []

    def y_local(self, m):
        s = self.split.sessions[m]
        pos = {c: i for i, c in enumerate(s.labels)}
        return np.array([pos[c] for c in self.corpus.labels[s.train]])

    def log_metrics(self, m, recs):
        self.metrics.extend({"session": m, **r} for r in recs)

    def evaluate(self, m, embed_fn, clf, report) -> None:
        """Append A_m (cumulative test set) and the accuracy on earlier sessions' classes."""
        idx = cumulative_test_set(self.split, m)
        truth = self.corpus.labels[idx].tolist()
        preds = predict_batch(embed_fn(idx), clf)
        report.accuracies.append(accuracy(preds, truth))
        n_old = len(idx) - len(self.split.sessions[m].test)  # the current session's test set comes last
        report.old_accuracies.append(accuracy(preds[:n_old], truth[:n_old]) if n_old else None)

    def save_session(self, m, stats, state=None, params=None):
        if self.run_dir is None:
            return
        d = self.run_dir / f"session_{m}"
        save_stats(stats, d / "class_stats.bin")
        if state is not None:
            E.save_ede(state, d / "ede", self.cfg.protocol.variant)
        if params is not None:
            enc.save_checkpoint(params, d / "encoder.ckpt", self.cfg.encoder.digest())


def _stats_for(labels_in_order, emb, y_local):
    return [ClassStats.from_embeddings(c, emb[y_local == j]) for j, c in enumerate(labels_in_order)]


def _run_ede(run: _Run, report: RunReport):
    cfg, split, X = run.cfg, run.split, run.corpus.features
    variant = cfg.protocol.variant
    ecfg, tcfg, rcfg = cfg.encoder, cfg.training, cfg.reconstruction
    needed = sorted({i for s in split.sessions for i in s.train + s.test})
    row = {i: r for r, i in enumerate(needed)}

    pre_all = None
    if variant != E.F_ONLY:
        pre_all = torch.cat([E.pre_embed(run.pretrained_state, X[needed[i:i + 256]])
                             for i in range(0, len(needed), 256)]) if needed else None

    # session 0
    s0 = split.sessions[0]
    y0 = run.y_local(0)
    t0 = time.perf_counter()
    if variant == E.P_ONLY:
        finetuned = run.pretrained
    else:
        res = finetune_base(run.pretrained, X[s0.train], y0, ecfg, tcfg)
        finetuned = res.params
        report.encoder_updates += res.steps
        run.log_metrics(0, res.metrics)
    state = E.build_base(run.pretrained, finetuned, ecfg)

    tokens_all = None
    if variant != E.P_ONLY:
        with torch.no_grad():
            tokens_all = torch.cat([E.shallow_tokens(state, X[needed[i:i + 256]])
                                    for i in range(0, len(needed), 256)])

    def emb(idx):
        r = [row[i] for i in idx]
        return E.variant_embed(state, None, variant,
                               pre=None if pre_all is None else pre_all[r],
                               tokens=None if tokens_all is None else tokens_all[r])

    stats = _stats_for(s0.labels, emb(s0.train), y0)
    all_stats = list(stats)
    clf = PrototypeClassifier.from_stats(stats)
    run.evaluate(0, emb, clf, report)
    report.timings["session_0"] = time.perf_counter() - t0
    run.save_session(0, stats, state)
    if run.probe is not None:
        report.checks.setdefault("embed_dim", []).append(int(E.variant_embed(state, run.probe, variant).shape[-1]))

    for m in range(1, split.M):
        t0 = time.perf_counter()
        s = split.sessions[m]
        ym = run.y_local(m)
        if variant == E.P_PLUS_EXPANDED_F:
            before = E.embed(state, run.probe) if run.probe is not None else None
            state = E.expand(state)
            frozen_snapshot = state.frozen_params().clone()
            if before is not None:
                report.checks.setdefault("expand_identity", []).append(
                    bool(np.array_equal(before, E.embed(state, run.probe))))
            r = [row[i] for i in s.train]
            res = train_incremental(state, None, ym, all_stats, [st.class_id for st in all_stats], s.labels,
                                    tcfg, rcfg, derive_seed(run.seed, 7, m),
                                    pre=pre_all[r], tokens=tokens_all[r], shots=cfg.protocol.K)
            report.encoder_updates += res.steps
            run.log_metrics(m, res.metrics)
            after = state.frozen_params()
            diff = sum(float((after[n] - frozen_snapshot[n]).abs().sum()) for n in frozen_snapshot.names())
            report.checks.setdefault("frozen_diff", []).append(diff)
        stats = _stats_for(s.labels, emb(s.train), ym)
        all_stats += stats
        clf = extend_classifier(clf, stats)
        run.evaluate(m, emb, clf, report)
        report.timings[f"session_{m}"] = time.perf_counter() - t0
        run.save_session(m, stats, state)
        if run.probe is not None:
            report.checks["embed_dim"].append(int(E.variant_embed(state, run.probe, variant).shape[-1]))
    report.checks["branch_count"] = len(state.branches)


def _run_finetune(run: _Run, report: RunReport):
    cfg, split, X = run.cfg, run.split, run.corpus.features
    ecfg, tcfg = cfg.encoder, cfg.training
    params = run.pretrained
    clf = PrototypeClassifier()
    for m in range(split.M):
        t0 = time.perf_counter()
        s = split.sessions[m]
        ym = run.y_local(m)
        step = finetune_base if m == 0 else finetune_baseline_step
        res = step(params, X[s.train], ym, ecfg, tcfg)
        params = res.params
        report.encoder_updates += res.steps
        run.log_metrics(m, res.metrics)

        def emb(idx, params=params):
            return enc.encode_numpy(X[idx], params, ecfg)

        stats = _stats_for(s.labels, emb(s.train), ym)
        clf = extend_classifier(clf, stats)  # old prototypes stay as they were
        run.evaluate(m, emb, clf, report)
        report.timings[f"session_{m}"] = time.perf_counter() - t0
        run.save_session(m, stats, params=params)


def run_protocol(split: SessionSplit, pretrained, corpus: Corpus, cfg, seed: int | None = None,
                 method: str = "ede", run_dir=None, probe=None) -> RunReport:
    """Run every session of one split and score each on its cumulative test set.

    ``cfg`` provides ``encoder``, ``protocol``, ``training`` and
    ``reconstruction`` sections.  A failing session ends the run early and
    returns a report flagged incomplete.  ``probe`` (a small batch of
    spectrograms) turns on the extractor invariant checks stored in
    ``report.checks``.
    """
    if method not in METHODS:
        raise InvalidConfig(f"unknown method {method!r}")
    seed = split.seed if seed is None else seed
    variant = cfg.protocol.variant if method == "ede" else "FINETUNE"
    report = RunReport(method, variant, int(seed), cfg.digest())
    run = _Run(split, pretrained, corpus, cfg, seed, run_dir, probe)
    run.pretrained_state = E.EDEState(cfg.encoder, run.pretrained, enc.ParamSet(), [])
    t0 = time.perf_counter()
    try:
        (_run_ede if method == "ede" else _run_finetune)(run, report)
        report.complete = len(report.accuracies) == split.M
    except FFCACError as exc:
        log.error("run %s/%s seed %s failed: %s", method, variant, seed, exc)
        report.error = f"{type(exc).__name__}: {exc}"
    report.finish()
    report.timings["total"] = time.perf_counter() - t0
    if run.run_dir is not None:
        write_jsonl(run.run_dir / "metrics.jsonl", run.metrics)
        write_jsonl(run.run_dir / "report.jsonl", [report.to_record()])
        atomic_write_text(run.run_dir / "split.json", canonical_json(split.to_record()) + "\n")
        atomic_write_text(run.run_dir / "timings.json", canonical_json(report.timings) + "\n")
    return report


def _one_repeat(args):
    corpus, pretrained, cfg, seed, method = args
    torch.set_num_threads(1)
    try:
        split = build_splits(corpus.labels, cfg.protocol, seed)
    except FFCACError as exc:
        rep = RunReport(method, cfg.protocol.variant if method == "ede" else "FINETUNE", seed, cfg.digest())
        rep.error = f"{type(exc).__name__}: {exc}"
        return rep
    return run_protocol(split, pretrained, corpus, cfg, seed, method)


def run_repeats(corpus: Corpus, pretrained, cfg, method: str = "ede", repeats: int | None = None,
                jobs: int = 1) -> list:
    """Independent runs with seeds ``seed + i``; order of the result follows i."""
    repeats = cfg.protocol.repeats if repeats is None else repeats
    args = [(corpus, pretrained, cfg, cfg.protocol.seed + i, method) for i in range(repeats)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            reports = list(pool.map(_one_repeat, args))
    else:
        reports = [_one_repeat(a) for a in args]
    if all(not r.complete for r in reports):
        raise FFCACError(f"all {repeats} runs failed; first error: {reports[0].error}")
    return reports
