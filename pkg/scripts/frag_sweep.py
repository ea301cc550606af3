#!/usr/bin/env python3
"""Tabulate fragment counts and per-fragment overhead across datagram
sizes and link payload budgets."""

import argparse

from modnet.sixlowpan import fragment


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--sizes", type=int, nargs="*",
                    default=[48, 128, 320, 640, 1024, 1240])
    ap.add_argument("--budgets", type=int, nargs="*",
                    default=[32, 64, 102, 110])
    args = ap.parse_args()

    print(f"{'size':>5}  {'budget':>6}  {'frags':>5}  {'overhead B':>10}")
    for size in args.sizes:
        datagram = bytes(size)
        for budget in args.budgets:
            frags = fragment(datagram, budget, tag=1)
            overhead = sum(len(f) for f in frags) - size
            print(f"{size:>5}  {budget:>6}  {len(frags):>5}  {overhead:>10}")


if __name__ == "__main__":
    main()
