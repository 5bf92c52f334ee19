#!/usr/bin/env python3
"""Run one experiment config end to end and print the resulting tables.

Usage: python scripts/run_desk_experiment.py configs/desk_gaussian_iid.yaml
"""

import sys
import time
from pathlib import Path

from diffdenoise.config import load_config
from diffdenoise.pipeline import run_pipeline, verify_ledger_coverage
from diffdenoise.report import make_report


def main() -> int:
    if len(sys.argv) < 2:
        print(__doc__)
        return 2
    config = load_config(sys.argv[1])
    start = time.time()
    ledger = run_pipeline(config)
    outputs = make_report(config, ledger)
    verify_ledger_coverage(config.output_dir, ledger)
    print(f"completed in {time.time() - start:.0f}s; {len(ledger.records)} ledger records")
    for record in ledger.records:
        print(f"  {record.stage:16s} iter{record.iteration} wall {record.wall_time:7.1f}s")
    root = Path(config.output_dir)
    for rel in outputs:
        if rel.endswith(".txt"):
            print(f"\n=== {rel} ===")
            print((root / rel).read_text())
    return 0


if __name__ == "__main__":
    sys.exit(main())
