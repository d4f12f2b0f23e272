"""Run experiment INI files and print each result directory.

Usage::

    python scripts/run_experiments.py [CONFIG.ini ...] [--out results] [--threads 1]

Without config files every INI in ``scripts/configs`` is run. Exit status is
the largest CLI status met (0 success, 1 failed check, 2 schema, 3 module).
"""
import argparse
import sys
from pathlib import Path

from sheball import cli

HERE = Path(__file__).resolve().parent


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("configs", nargs="*", type=Path)
    ap.add_argument("--out", default="results")
    ap.add_argument("--threads", type=int, default=1)
    a = ap.parse_args(argv)
    configs = a.configs or sorted((HERE / "configs").glob("*.ini"))
    worst = 0
    for c in configs:
        print(f"== {c.name}", flush=True)
        code = cli.main(["run", str(c), "--out", a.out, "--threads", str(a.threads)])
        worst = max(worst, code)
    return worst


if __name__ == "__main__":
    sys.exit(main())
