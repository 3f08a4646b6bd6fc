"""Extractor ablation on the desk preset: P_ONLY, F_ONLY, P_PLUS_F and the
expanded variant over shared seeds, followed by a rank-based comparison.

Reuses the corpus and checkpoint of ``desk_benchmark.py`` when they exist.

    python scripts/ablation_table.py --out runs/desk --repeats 20
"""
import argparse
from pathlib import Path

from ffcac import ede as E

from desk_benchmark import prepare, step


def run():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/desk")
    ap.add_argument("--repeats", type=int, default=20)
    ap.add_argument("--seed", type=int, default=0, help="corpus seed")
    ap.add_argument("--jobs", type=int, default=1)
    args = ap.parse_args()

    out = Path(args.out)
    config = prepare(out, args.seed)
    ablation = out / "ablation"
    step("ablate", "--config", str(config), "--repeats", str(args.repeats), "--jobs", str(args.jobs),
         "--out", str(ablation))
    inputs = [str(ablation / f"results_{v}.jsonl") for v in E.VARIANTS]
    step("stats", "--inputs", *inputs, "--out", str(ablation / "stats.json"))


if __name__ == "__main__":
    run()
