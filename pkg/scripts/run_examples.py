"""Solve, verify and sweep the bundled configurations through the CLI.

Usage: python scripts/run_examples.py [output root]   (default: runs/)
"""
import os
import sys
from pathlib import Path

from heatfb.cli import main

CONFIGS = Path(__file__).resolve().parent / "configs"


def run(args):
    print("$ heatfb " + " ".join(args), flush=True)
    code = main(args)
    print(f"exit {code}\n", flush=True)
    return code


if __name__ == "__main__":
    root = Path(sys.argv[1] if len(sys.argv) > 1 else "runs")
    codes = []
    for name in ("radial", "asymmetric", "small"):
        os.environ["OUTPUT_DIR"] = str(root / name)
        codes.append(run(["solve", "--config", str(CONFIGS / f"{name}.json")]))
        codes.append(run(["verify", str(root / name)]))
    os.environ["OUTPUT_DIR"] = str(root / "radial_sweep")
    codes.append(run(["sweep", "--config", str(CONFIGS / "radial.json")]))
    run(["reference", "annulus"])
    run(["reference", "hopf", "p=2", "lam=4"])
    sys.exit(max(codes))
