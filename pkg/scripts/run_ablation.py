"""Train baseline / rp_plus / prime on the default cohorts and write reports.

    python scripts/run_ablation.py --out runs/ablation
"""

import argparse
import json
import time
from dataclasses import asdict
from pathlib import Path

from priorrisk.experiment import DEFAULT_EXPERIMENT_TRAIN, default_cohorts, run_ablation
from priorrisk.metrics import format_table, report_rows, write_report_csv, write_scores
from priorrisk.model import write_checkpoint
from priorrisk.train import write_history


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/ablation")
    ap.add_argument("--n-boot", type=int, default=1000)
    ap.add_argument("--seed", type=int, default=0, help="bootstrap seed")
    args = ap.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    t0 = time.perf_counter()
    train, test = default_cohorts()
    res = run_ablation(train, test, n_boot=args.n_boot, seed=args.seed)
    rows = []
    for v in res["scores"]:
        write_checkpoint(res["params"][v], out / f"{v}.ckpt", {"train": asdict(DEFAULT_EXPERIMENT_TRAIN)})
        write_history(res["history"][v], out / f"{v}_history.csv")
        write_scores(res["scores"][v], out / f"{v}_test_scores.csv")
        rows += report_rows(res["reports"][v], "test", v)
        print(f"== {v}")
        print(format_table(res["reports"][v]))
    write_report_csv(rows, out / "subgroups.csv")
    cmp = res["compare"]
    summary = {
        "c_index": {v: float(c) for v, c in res["c_index"].items()},
        "compare_prime_vs_baseline": {"c_a": cmp.c_a, "c_b": cmp.c_b, "z": cmp.z, "p": cmp.p},
        "seconds": time.perf_counter() - t0,
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    print(json.dumps(summary, indent=2))


if __name__ == "__main__":
    main()
