#!/usr/bin/env python3
"""
Nudging bias-correction experiment CLI

Thin entry point around app.cli so the tool runs from a checkout:

    python scripts/cli.py generate --config configs/toy.cfg --out runs/toy
    python scripts/cli.py pipeline --config configs/toy.cfg --out runs/toy
"""
import pathlib
import sys

sys.path.insert(0, str(pathlib.Path(__file__).resolve().parent.parent))

from app.cli import main  # noqa: E402

if __name__ == "__main__":
    main()
