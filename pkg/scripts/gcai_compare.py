"""GCAI closed-loop comparison, DA-DR vs tube, with the bundled configuration.

    python3 scripts/gcai_compare.py --runs 60 --out gcai_out

Writes compare.json, compare.txt and one trace CSV per run.
"""

import argparse
import sys

from dadr_mpc.cli import main


def parse():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--runs", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--config", default=None)
    p.add_argument("--out", default="gcai_out")
    return p.parse_args()


if __name__ == "__main__":
    a = parse()
    argv = ["compare", "--out", a.out]
    for flag, val in (("--runs", a.runs), ("--seed", a.seed), ("--config", a.config)):
        if val is not None:
            argv += [flag, str(val)]
    sys.exit(main(argv))
