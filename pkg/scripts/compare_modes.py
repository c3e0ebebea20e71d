#!/usr/bin/env python3
"""Cloud-vs-isolated comparison on the full grid with a shared task stream.

Both runs draw identical tasks and pedestrians, so per-key learning curves in
out/compare/metrics.csv line up row for row. Any extra flags are forwarded to
`gridfleet run` and win over the defaults below (e.g. --tasks 60 for a quick
look, --seed 1 for another draw).
"""

import sys

from gridfleet.cli import main

DEFAULTS = ["run", "--mode", "both", "--tasks", "390", "--out-dir", "out/compare"]

if __name__ == "__main__":
    sys.exit(main(DEFAULTS + sys.argv[1:]))
