"""Train every variant/head pair plus both baselines on one synthetic corpus.

    python3 scripts/run_ablation.py --out runs/ablation [--config scripts/ablation.json]

Writes ``summary.csv`` with one row per run next to the per-run directories.
"""
import argparse
import csv
import json
import sys
from pathlib import Path

from twinpp.cli import main

RUNS = [(f"{v}/{h}", ["--variant", v, "--head", h])
        for v in ("intensity-rnn", "time-series-rnn", "event-rnn")
        for h in ("hierarchical", "flat")]
RUNS += [("logistic", ["--baseline", "logistic"]), ("hawkes", ["--baseline", "hawkes"])]


def cli(*argv):
    rc = main([str(a) for a in argv])
    if rc:
        sys.exit(f"twinpp {argv[0]} failed with {rc}")


def run(out: Path, config: Path, threads: int):
    common = ["--config", config, "--threads", threads]
    if not (out / "sim").exists():
        cli("simulate", *common, "--out", out / "sim")
    if not (out / "data").exists():
        cli("prepare", *common, "--events", out / "sim/events.jsonl",
            "--profiles", out / "sim/profiles.csv", "--taxonomy", out / "sim/taxonomy.json",
            "--out", out / "data")
    rows = []
    for name, flags in RUNS:
        slug = name.replace("/", "-")
        if not (out / slug / "checkpoint.json").exists():
            cli("train", *common, *flags, "--data", out / "data", "--out", out / slug)
        cli("evaluate", *common, "--checkpoint", out / slug / "checkpoint.json",
            "--data", out / "data", "--out", out / slug / "eval")
        rep = json.loads((out / slug / "eval/report.json").read_text())
        rows.append({"run": name, "sub_f1": rep["sub"]["macro"]["f1"],
                     "main_f1": rep["main"]["macro"]["f1"], "mae": rep["mae"],
                     "sub_f1_plus": rep["sub"]["f1_plus"], "sub_mae_plus": rep["sub"]["mae_plus"]})
        print(f"{name:30s} sub F1 {rows[-1]['sub_f1']:.3f}  MAE {rows[-1]['mae']:.2f}", flush=True)
    with open(out / "summary.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)


if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", type=Path, default=Path("runs/ablation"))
    ap.add_argument("--config", type=Path, default=Path(__file__).with_name("ablation.json"))
    ap.add_argument("--threads", type=int, default=1)
    a = ap.parse_args()
    run(a.out, a.config, a.threads)
