"""Run the acceptance criteria and print one pass/fail line per criterion.

Usage::

    python scripts/run_acceptance.py [-k EXPR]

Extra arguments are passed to pytest. Exit status is pytest's.
"""
import sys
from pathlib import Path

import pytest

ROOT = Path(__file__).resolve().parent.parent

if __name__ == "__main__":
    args = [str(ROOT / "tests" / "test_acceptance.py"), "-q", "-s", *sys.argv[1:]]
    sys.exit(pytest.main(args))
