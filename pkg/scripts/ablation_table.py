"""Train every ablation variant on the synthetic benchmark and print the flag/metric table."""
import argparse
import json
import tempfile
import warnings
from pathlib import Path

from threadpoolctl import threadpool_limits

from anomize.benchmark import ABLATION_FLAGS, ABLATIONS, build_benchmark, run_ablations
from anomize.dataio import SynthSpec
from anomize.metrics import ablation_table


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--corpus-seed", type=int, default=7)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--epochs-stage1", type=int, default=30)
    ap.add_argument("--epochs-stage2", type=int, default=40)
    ap.add_argument("--variants", nargs="+", default=list(ABLATIONS), choices=list(ABLATIONS))
    ap.add_argument("--out", type=Path, default=Path("runs/ablations.json"))
    args = ap.parse_args()

    with tempfile.TemporaryDirectory() as root, threadpool_limits(1):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            bench = build_benchmark(SynthSpec(seed=args.corpus_seed), root)
        rows = run_ablations(bench, args.variants, seed=args.seed,
                             epochs_stage1=args.epochs_stage1, epochs_stage2=args.epochs_stage2)

    print(ablation_table([(flags, rep) for _, flags, rep in rows], ABLATION_FLAGS), end="")
    args.out.parent.mkdir(parents=True, exist_ok=True)
    args.out.write_text(json.dumps([{"variant": n, "flags": f, "report": r} for n, f, r in rows], indent=2) + "\n")


if __name__ == "__main__":
    main()
