"""Full method vs. the fine-tuning baseline on the synthetic desk preset.

Generates the preset (unless it already exists), pretrains the stand-in
encoder, runs R paired repeats of both methods and writes the results
table plus a Friedman / sign-test report.

    python scripts/desk_benchmark.py --out runs/desk --repeats 20
"""
import argparse
import json
import sys
from pathlib import Path

from ffcac.cli import main as ffcac


def step(*argv):
    print("$ ffcac", " ".join(argv), flush=True)
    code = ffcac(list(argv))
    if code != 0:
        sys.exit(code)


def prepare(out: Path, seed: int) -> Path:
    config = out / "config.json"
    if not config.exists():
        step("generate", "--out", str(out), "--seed", str(seed))
    if not (out / "pretrained.ckpt").exists():
        step("pretrain", "--config", str(config))
    return config


def run():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/desk")
    ap.add_argument("--repeats", type=int, default=20)
    ap.add_argument("--seed", type=int, default=0, help="corpus seed")
    ap.add_argument("--jobs", type=int, default=1)
    args = ap.parse_args()

    out = Path(args.out)
    config = prepare(out, args.seed)
    files = []
    for method in ("ede", "finetune"):
        path = out / f"results_{method}.jsonl"
        step("bench", "--config", str(config), "--method", method, "--repeats", str(args.repeats),
             "--jobs", str(args.jobs), "--out", str(path))
        files.append(str(path))
    step("stats", "--inputs", *files, "--out", str(out / "stats.json"))
    step("report", "--run", str(out))

    signs = json.loads((out / "stats.json").read_text())["sign_tests"]
    for pair, s in signs.items():
        print(f"{pair}: {s['wins']}/{s['non_tied']} wins, one-sided p = {s['p']:.3g}")


if __name__ == "__main__":
    run()
