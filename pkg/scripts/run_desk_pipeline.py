#!/usr/bin/env python3
"""End-to-end desk experiment: dataset, training, both ensembles, reports.

Runs the same protocol the acceptance suite checks, but through the CLI, so
the artifacts (manifest, checkpoint, samples, CSVs) land in one directory
for inspection. Expect roughly half an hour of CPU time; pass --steps to
shorten the training phase for a sanity run.
"""

import argparse
import json
import sys
from pathlib import Path

from oceandiff.cli import main as cli

HERE = Path(__file__).resolve().parent
CONFIGS = HERE.parent / "configs"


def run(argv):
    print(f"$ oceandiff {' '.join(str(a) for a in argv)}", flush=True)
    code = cli([str(a) for a in argv])
    if code != 0:
        sys.exit(code)


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", default="desk_experiment", help="experiment directory")
    parser.add_argument("--steps", type=int, default=2000, help="training steps")
    parser.add_argument("--n", type=int, default=16, help="dataset size")
    parser.add_argument("--samples", type=int, default=8, help="ensemble size")
    args = parser.parse_args()

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    run(["synth", "--config", CONFIGS / "synth_desk.json", "--n", args.n, "--out", out / "data"])

    train_cfg = json.loads((CONFIGS / "train_desk.json").read_text())
    train_cfg["manifest_path"] = str(out / "data" / "manifest.json")
    train_cfg["out_dir"] = str(out / "run")
    train_cfg["total_steps"] = args.steps
    cfg_path = out / "train.json"
    cfg_path.write_text(json.dumps(train_cfg, indent=1))
    run(["train", "--config", cfg_path])

    checkpoint = out / "run" / "checkpoint.ckpt"
    run(
        ["sample", "--checkpoint", checkpoint, "--out", out / "samples_constrained",
         "--config", CONFIGS / "sampling_desk.json", "--n", args.samples,
         "--constrained", "true", "--trace", "true"]
    )
    run(
        ["compare", "--checkpoint", checkpoint, "--manifest", out / "data" / "manifest.json",
         "--out", out / "compare", "--n", args.samples, "--seed", "7",
         "--integrator-config", CONFIGS / "integrator_desk.json"]
    )

    print("\nsummary table:")
    print((out / "compare" / "summary.csv").read_text())


if __name__ == "__main__":
    main()
