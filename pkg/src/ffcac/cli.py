"""Command-line entry point: ``ffcac {generate,pretrain,run,bench,ablate,stats,report}``.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure
(partial artifacts are left in place).
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from . import ede as E
from . import encoder as enc
from .config import RunConfig
from .errors import (
    FFCACError,
    InvalidConfig,
    InvalidInput,
    InvalidSpec,
    MissingAudio,
    RequiresTwoMethods,
)
from .frontend import (
    SynthSpec,
    default_specs,
    load_features,
    load_manifest,
    synth_corpus,
    write_manifest,
    write_wav,
)
from .protocol import METHODS, Corpus, RunReport, build_splits, run_protocol, run_repeats
from .stats import (
    MethodResults,
    aggregate,
    cd_diagram_data,
    friedman,
    observation_matrix,
    rank_histogram,
    rank_rows,
    results_table,
    sign_test,
    significant_pairs,
)
from .training import pretrain
from .utils import atomic_write_text, canonical_json, read_jsonl, write_jsonl

log = logging.getLogger("ffcac")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2

# errors that mean "fix your inputs" rather than "the run broke"
_CONFIG_ERRORS = (InvalidConfig, InvalidSpec, InvalidInput, MissingAudio, RequiresTwoMethods)


class CommandError(Exception):
    def __init__(self, message, code=EXIT_CONFIG):
        super().__init__(message)
        self.code = code


# --------------------------------------------------------------------------
# shared helpers


def _load_config(path) -> RunConfig:
    return RunConfig.load(path) if path else RunConfig()


def _out_dir(cfg: RunConfig) -> Path:
    return cfg.output.resolved_root() / cfg.output.name


def _pretrained_path(cfg: RunConfig) -> Path:
    if cfg.data.pretrained_checkpoint:
        return Path(cfg.data.pretrained_checkpoint)
    return _out_dir(cfg) / "pretrained.ckpt"


def _cache_path(cfg: RunConfig, which: str):
    return Path(cfg.data.cache_dir) / f"{which}.fflm" if cfg.data.cache_dir else None


def _load_corpus(cfg: RunConfig, which: str = "protocol") -> Corpus:
    manifest = getattr(cfg.data, f"{which}_manifest")
    if not manifest:
        raise InvalidConfig(f"data.{which}_manifest is not set")
    if not Path(manifest).is_file():
        raise InvalidConfig(f"{which} manifest not found: {manifest}")
    entries = load_manifest(manifest)
    feats = load_features(entries, cfg.frontend, _cache_path(cfg, which))
    frames = feats.shape[1] if feats.size else 0
    if frames != cfg.encoder.n_frames:
        raise InvalidConfig(f"features have {frames} frames but encoder.n_frames is {cfg.encoder.n_frames}; "
                            "adjust frontend.clip_len_s or encoder.n_frames")
    return Corpus(feats, np.array([e.label for e in entries]))


def _load_pretrained(cfg: RunConfig) -> enc.ParamSet:
    path = _pretrained_path(cfg)
    if not path.is_file():
        raise InvalidConfig(f"pretrained checkpoint not found: {path} (run `ffcac pretrain` first)")
    params, header = enc.read_checkpoint(path)
    if header.get("config_digest") not in (None, cfg.encoder.digest()):
        raise InvalidConfig(f"{path} was trained with a different encoder config")
    return params


def _with_variant(cfg: RunConfig, variant) -> RunConfig:
    return cfg.with_values("protocol", variant=E.check_variant(variant)) if variant else cfg


def _label(method: str, variant: str) -> str:
    return variant if method == "ede" else "FINETUNE"


def _write_results(path: Path, reports, method_label: str) -> Path:
    recs = []
    for i, r in enumerate(reports):
        rec = r.to_record()
        rec.update(method=method_label, repeat=i)
        recs.append(rec)
    return write_jsonl(path, recs)


def _complete(reports):
    bad = [r for r in reports if not r.complete]
    for r in bad:
        log.error("seed %s incomplete: %s", r.seed, r.error)
    return [r for r in reports if r.complete]


# --------------------------------------------------------------------------
# commands


def cmd_generate(args) -> int:
    if args.spec:
        try:
            doc = json.loads(Path(args.spec).read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise InvalidSpec(f"spec file not found: {args.spec}") from None
        except json.JSONDecodeError as exc:
            raise InvalidSpec(f"spec: invalid JSON ({exc.msg} at line {exc.lineno})") from None
        if not isinstance(doc, dict):
            raise InvalidSpec("spec: expected an object")
        if "protocol" in doc or "pretrain" in doc:
            specs = {k: SynthSpec.from_dict(doc[k]) for k in ("protocol", "pretrain") if k in doc}
        else:
            specs = {"protocol": SynthSpec.from_dict(doc)}
        if args.seed is not None:
            specs = {k: dataclasses.replace(s, seed=args.seed + (1000 if k == "pretrain" else 0))
                     for k, s in specs.items()}
    else:
        protocol, pre = default_specs(seed=args.seed or 0)
        specs = {"protocol": protocol, "pretrain": pre}

    out = Path(args.out)
    for name, spec in specs.items():
        entries, store = synth_corpus(spec)
        for e in entries:
            write_wav(out / name / e.path, store[e.path])
        write_manifest(out / name / "manifest.jsonl", entries)
        print(f"{name}: {spec.n_classes} classes, {len(entries)} clips -> {out / name}")
    atomic_write_text(out / "spec.json", canonical_json({k: s.to_dict() for k, s in specs.items()}) + "\n")

    # a ready-to-use config whose data paths point at the generated corpus
    clip = specs["protocol"].clip_len_s
    cfg = RunConfig().with_values("frontend", clip_len_s=clip)
    cfg = cfg.with_values("encoder", n_frames=cfg.frontend.n_frames(specs["protocol"].sample_rate))
    doc = cfg.to_dict()
    doc["data"] = {"protocol_manifest": "protocol/manifest.jsonl",
                   "pretrain_manifest": "pretrain/manifest.jsonl" if "pretrain" in specs else None,
                   "pretrained_checkpoint": "pretrained.ckpt", "cache_dir": "cache"}
    doc["output"] = {"root": "runs", "name": "run"}
    atomic_write_text(out / "config.json", json.dumps(doc, indent=2, sort_keys=True) + "\n")
    print(f"config: {out / 'config.json'}")
    return EXIT_OK


def cmd_pretrain(args) -> int:
    cfg = _load_config(args.config)
    ckpt = _pretrained_path(cfg)
    state_dir = ckpt.parent / (ckpt.stem + ".state")
    if ckpt.exists() and not args.force:
        raise CommandError(f"{ckpt} exists; pass --force to overwrite")
    corpus = _load_corpus(cfg, "pretrain")
    classes, y = np.unique(corpus.labels, return_inverse=True)
    pcfg = cfg.pretrain
    tcfg = pcfg.train_config()
    digest = cfg.encoder.digest()

    init, opt_state, start, metrics = None, None, 0, []
    if args.resume and (state_dir / "model.ckpt").is_file():
        init, header = enc.read_checkpoint(state_dir / "model.ckpt")
        if header.get("config_digest") != digest or header["meta"].get("pretrain") != dataclasses.asdict(pcfg):
            raise InvalidConfig(f"{state_dir} belongs to a different configuration")
        opt_state = enc.load_checkpoint(state_dir / "optimizer.ckpt")
        start = int(header["meta"]["epoch"]) + 1
        metrics = read_jsonl(state_dir / "log.jsonl")[:start]
        print(f"resuming at epoch {start}")

    def on_epoch(epoch, model, opt, rec):
        metrics.append(rec)
        enc.save_checkpoint(opt.state_params(), state_dir / "optimizer.ckpt", digest)
        write_jsonl(state_dir / "log.jsonl", metrics)
        # written last: its epoch marks the state as complete
        enc.save_checkpoint(model, state_dir / "model.ckpt", digest,
                            {"epoch": epoch, "pretrain": dataclasses.asdict(pcfg)})
        print(f"epoch {epoch:3d} loss {rec['loss']:.4f}", flush=True)

    res = pretrain(corpus.features, y, cfg.encoder, tcfg, batch_size=pcfg.batch_size, seed=pcfg.seed,
                   init=init, start_epoch=start, on_epoch=on_epoch, opt_state=opt_state)
    meta = {"classes": classes.tolist(), "epochs": pcfg.epochs,
            "final_loss": metrics[-1]["loss"] if metrics else None}
    enc.save_checkpoint(res.params, ckpt, digest, meta)
    write_jsonl(ckpt.with_suffix(".log.jsonl"), metrics)
    print(f"pretrained checkpoint: {ckpt}")
    return EXIT_OK


def cmd_run(args) -> int:
    cfg = _with_variant(_load_config(args.config), args.variant)
    seed = cfg.protocol.seed if args.seed is None else args.seed
    if args.dry_run:
        print(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
        print(f"digest {cfg.digest()}")
        return EXIT_OK
    corpus = _load_corpus(cfg)
    pretrained = _load_pretrained(cfg)
    split = build_splits(corpus.labels, cfg.protocol, seed)
    label = _label(args.method, cfg.protocol.variant)
    run_dir = Path(args.out) if args.out else _out_dir(cfg) / f"{label}_seed{seed}"
    atomic_write_text(run_dir / "config.json", cfg.to_json() + "\n")
    report = run_protocol(split, pretrained, corpus, cfg, seed, args.method, run_dir)
    for m, a in enumerate(report.accuracies):
        print(f"session {m}: {100 * a:.2f}")
    if report.aa is not None:
        print(f"AA: {100 * report.aa:.2f}")
    print(f"run directory: {run_dir}")
    if not report.complete:
        print(f"run incomplete: {report.error}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def _bench(cfg, corpus, pretrained, method, repeats, jobs, out: Path):
    reports = run_repeats(corpus, pretrained, cfg, method, repeats, jobs)
    label = _label(method, cfg.protocol.variant)
    _write_results(out, reports, label)
    return label, reports


def cmd_bench(args) -> int:
    cfg = _load_config(args.config)
    if args.seed is not None:
        cfg = cfg.with_values("protocol", seed=args.seed)
    corpus, pretrained = _load_corpus(cfg), _load_pretrained(cfg)
    label = _label(args.method, cfg.protocol.variant)
    out = Path(args.out) if args.out else _out_dir(cfg) / f"results_{label}.jsonl"
    _, reports = _bench(cfg, corpus, pretrained, args.method, args.repeats, args.jobs, out)
    ok = _complete(reports)
    if ok:
        print(results_table({label: aggregate(ok)}), end="")
    print(f"results: {out}")
    return EXIT_OK if len(ok) == len(reports) else EXIT_RUNTIME


def cmd_ablate(args) -> int:
    cfg = _load_config(args.config)
    if args.seed is not None:
        cfg = cfg.with_values("protocol", seed=args.seed)
    corpus, pretrained = _load_corpus(cfg), _load_pretrained(cfg)
    out = Path(args.out) if args.out else _out_dir(cfg) / "ablation"
    all_reports = {}
    for variant in E.VARIANTS:
        c = cfg.with_values("protocol", variant=variant)
        _, all_reports[variant] = _bench(c, corpus, pretrained, "ede", args.repeats, args.jobs,
                                         out / f"results_{variant}.jsonl")
        print(f"{variant}: done", flush=True)
    summaries, failed = {}, False
    for v, reps in all_reports.items():
        ok = _complete(reps)
        failed |= len(ok) != len(reps)
        if ok:
            summaries[v] = aggregate(ok)
    table = results_table(summaries)
    full = all_reports[E.P_PLUS_EXPANDED_F]
    lines = []
    for v in E.VARIANTS[:-1]:
        pairs = [(a.aa, b.aa) for a, b in zip(full, all_reports[v]) if a.complete and b.complete]
        if pairs:
            rate = np.mean([a >= b for a, b in pairs])
            lines.append(f"{E.P_PLUS_EXPANDED_F} >= {v}: {100 * rate:.0f}% of {len(pairs)} paired repeats")
    text = table + "\n".join(lines) + "\n"
    atomic_write_text(out / "ablation.txt", text)
    print(text, end="")
    return EXIT_RUNTIME if failed else EXIT_OK


def _read_results(paths) -> list:
    results, seen = [], {}
    for p in paths:
        try:
            r = MethodResults.from_records(read_jsonl(p))
        except (OSError, KeyError, ValueError) as exc:
            raise InvalidInput(f"{p}: {exc}") from None
        n = seen.get(r.method, 0)
        seen[r.method] = n + 1
        if n:
            r = MethodResults(f"{r.method}#{n + 1}", r.accuracies)
        results.append(r)
    return results


def stats_report(results, alpha: float = 0.05, per_session: bool = False) -> dict:
    if len(results) < 2:
        raise RequiresTwoMethods("statistics need results from at least two methods")
    names = [r.method for r in results]
    obs = observation_matrix(results, per_session)
    ranks = rank_rows(obs)
    fr = friedman(ranks)
    cd = cd_diagram_data(ranks, names, alpha)
    sig = significant_pairs(fr.mean_ranks, cd.cd)
    signs = {}
    for i, a in enumerate(names):
        for j, b in enumerate(names):
            if i < j:
                w, n, p = sign_test(obs[:, i], obs[:, j])
                signs[f"{a} > {b}"] = {"wins": w, "non_tied": n, "p": p}
    return {
        "methods": names,
        "observations": int(obs.shape[0]),
        "per_session": per_session,
        "friedman": {"chi2": fr.statistic, "df": fr.df, "p": fr.p_value,
                     "iman_davenport": fr.iman_davenport, "iman_davenport_p": fr.iman_davenport_p},
        "mean_ranks": dict(zip(names, map(float, fr.mean_ranks))),
        "significant_pairs": [[names[i], names[j]] for i, j in sig],
        "cd_diagram": cd.to_record(),
        "rank_histogram": {n: h.tolist() for n, h in zip(names, rank_histogram(ranks))},
        "sign_tests": signs,
    }


def cmd_stats(args) -> int:
    rep = stats_report(_read_results(args.inputs), args.alpha, args.per_session)
    text = json.dumps(rep, indent=2, sort_keys=True)
    if args.out:
        atomic_write_text(args.out, text + "\n")
    f = rep["friedman"]
    print(f"Friedman chi2 = {f['chi2']:.4f} (df {f['df']}), p = {f['p']:.4g}")
    print(f"CD = {rep['cd_diagram']['cd']:.4f} at alpha {args.alpha}")
    for m, r in rep["mean_ranks"].items():
        print(f"  {m}: mean rank {r:.3f}")
    print(f"significant pairs: {rep['significant_pairs'] or 'none'}")
    return EXIT_OK


def cmd_report(args) -> int:
    run = Path(args.run)
    files = [run] if run.is_file() else sorted(run.glob("report.jsonl")) + sorted(run.glob("results_*.jsonl"))
    if not files:
        raise InvalidInput(f"no report.jsonl or results_*.jsonl under {run}")
    summaries = {}
    for f in files:
        recs = read_jsonl(f)
        reports = [RunReport.from_record(r) for r in recs]
        ok = [r for r in reports if r.complete]
        if not ok:
            print(f"{f.name}: no complete runs", file=sys.stderr)
            continue
        name = recs[0].get("method") if len({r.get("method") for r in recs}) == 1 else f.stem
        if f.name == "report.jsonl":
            name = _label(ok[0].method, ok[0].variant)
        summaries[name] = aggregate(ok)
    print(results_table(summaries, delimiter=args.delimiter), end="")
    return EXIT_OK


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ffcac", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="synthesize a protocol corpus and a pretraining corpus")
    g.add_argument("--spec", help="JSON corpus spec (default: the desk preset)")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int)
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("pretrain", help="train the stand-in pretrained encoder")
    t.add_argument("--config")
    t.add_argument("--force", action="store_true", help="overwrite an existing checkpoint")
    t.add_argument("--resume", action="store_true", help="continue from the saved training state")
    t.set_defaults(func=cmd_pretrain)

    r = sub.add_parser("run", help="one protocol run")
    r.add_argument("--config")
    r.add_argument("--variant", default=None, choices=E.VARIANTS,
                   help=f"extractor variant (default from config, normally {E.P_PLUS_EXPANDED_F})")
    r.add_argument("--method", default="ede", choices=METHODS)
    r.add_argument("--seed", type=int)
    r.add_argument("--out", help="run directory")
    r.add_argument("--dry-run", action="store_true")
    r.set_defaults(func=cmd_run)

    b = sub.add_parser("bench", help="repeated runs with seeds seed..seed+R-1")
    b.add_argument("--config")
    b.add_argument("--repeats", type=int)
    b.add_argument("--method", default="ede", choices=METHODS)
    b.add_argument("--jobs", type=int, default=1)
    b.add_argument("--seed", type=int)
    b.add_argument("--out", help="results file")
    b.set_defaults(func=cmd_bench)

    a = sub.add_parser("ablate", help="the four extractor variants on shared seeds")
    a.add_argument("--config")
    a.add_argument("--repeats", type=int)
    a.add_argument("--jobs", type=int, default=1)
    a.add_argument("--seed", type=int)
    a.add_argument("--out", help="output directory")
    a.set_defaults(func=cmd_ablate)

    s = sub.add_parser("stats", help="Friedman / Nemenyi comparison of results files")
    s.add_argument("--inputs", nargs="+", required=True)
    s.add_argument("--alpha", type=float, default=0.05)
    s.add_argument("--per-session", action="store_true",
                   help="one observation per (repeat, session) instead of per repeat AA")
    s.add_argument("--out", help="write the full report as JSON")
    s.set_defaults(func=cmd_stats)

    o = sub.add_parser("report", help="tables for a run directory or results file")
    o.add_argument("--run", required=True)
    o.add_argument("--delimiter", help="emit delimited text instead of an aligned table")
    o.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    torch.set_num_threads(1)
    try:
        return args.func(args)
    except CommandError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except _CONFIG_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FFCACError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
