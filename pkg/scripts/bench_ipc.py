#!/usr/bin/env python3
"""Measure the message-pass vs function-call overhead ratio across an
iteration ladder and print one row per run."""

import argparse

from modnet.metrics import ipc_overhead_bench


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--iterations", type=int, nargs="*",
                    default=[2_000, 10_000, 20_000, 40_000])
    args = ap.parse_args()

    print(f"{'iterations':>10}  {'call ns':>8}  {'msg rt ns':>9}  {'ratio':>6}")
    for n in args.iterations:
        r = ipc_overhead_bench(n)
        print(f"{n:>10}  {r['call_ns_median']:>8.0f}  "
              f"{r['msg_rt_ns_median']:>9.0f}  {r['ratio']:>6.1f}")


if __name__ == "__main__":
    main()
