#!/usr/bin/env python3
"""Check every task key's seed trajectory and baseline on the full grid.

Prints one line per key and a final tally; exits nonzero if any seed fails
re-validation. Extra flags go straight to `gridfleet validate`.
"""

import sys

from gridfleet.cli import main

if __name__ == "__main__":
    sys.exit(main(["validate"] + sys.argv[1:]))
