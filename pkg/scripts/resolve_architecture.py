#!/usr/bin/env python3
"""Regenerate the committed architecture resolution report.

Runs the stage-composition resolver under the default constraints and
writes reports/arch_resolution.txt. The report is deterministic, so a
rerun must reproduce the committed file byte for byte.
"""

import os
import sys

from branchnet.resolver import format_resolution_report, resolve_architecture


def main():
    repo = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
    out = sys.argv[1] if len(sys.argv) > 1 else os.path.join(
        repo, "reports", "arch_resolution.txt")
    resolution = resolve_architecture()
    report = format_resolution_report(resolution)
    os.makedirs(os.path.dirname(out), exist_ok=True)
    with open(out, "w") as f:
        f.write(report)
    sys.stdout.write(report)
    if not resolution.candidates:
        print("error: no composition satisfies the hard constraints",
              file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
