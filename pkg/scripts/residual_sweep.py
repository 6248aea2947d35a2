"""Expected residual noise fraction after per-batch discarding, over batch size.

Prints a table with one row per N and one column per p, in both counting
modes. Capacity mode falls with N; Literal mode stays flat at p.
"""

import argparse

from noisydet.coteach import BatchNoiseParams, CountMode, expected_noisy_remaining


def sweep(ns, ps, mode):
    return [[expected_noisy_remaining(BatchNoiseParams(n, p, mode=mode))[1] for p in ps] for n in ns]


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--p", type=float, nargs="+", default=[0.1, 0.25, 0.4])
    ap.add_argument("--max-n", type=int, default=256)
    args = ap.parse_args()
    ns = [2 ** k for k in range(1, args.max_n.bit_length()) if 2 ** k <= args.max_n]
    for mode in CountMode:
        print(f"# {mode.value}")
        print("N".rjust(5) + "".join(f"p={p:<8g}".rjust(12) for p in args.p))
        for n, row in zip(ns, sweep(ns, args.p, mode)):
            print(f"{n:5d}" + "".join(f"{v:12.4f}" for v in row))


if __name__ == "__main__":
    main()
