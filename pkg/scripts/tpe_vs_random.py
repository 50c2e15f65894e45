"""Paired comparison of TPE and random search on a 1-D quadratic landscape.

    python scripts/tpe_vs_random.py [--trials 30] [--pairs 20] [--opt 1.7 -3.2 0 4.5]

Both arms of a pair share the rng seed; the score is -(x - opt)^2 on [-5, 5].
A pair counts as a TPE win when its best score is at least the random best.
"""

from __future__ import annotations

import argparse

import numpy as np

from adasearch.tpe import Dim, Space, TPEModel, random_suggest


def quadratic(opt: float):
    return Space([Dim("x", "float", lo=-5, hi=5)]), (lambda t: -(t["x"] - opt) ** 2)


def paired_wins(opt: float = 1.7, trials: int = 30, pairs: int = 20) -> tuple[int, float, float]:
    """(TPE wins, mean TPE best, mean random best)."""
    space, f = quadratic(opt)
    wins, tb, rb = 0, [], []
    for s in range(pairs):
        rng = np.random.default_rng(s)
        model = TPEModel(space)
        for _ in range(trials):
            t = model.suggest(rng)
            model.observe(t, f(t))
        best_tpe = max(v for _, v in model.observations)
        rng = np.random.default_rng(s)
        best_rand = max(f(random_suggest(space, rng)) for _ in range(trials))
        wins += best_tpe >= best_rand
        tb.append(best_tpe)
        rb.append(best_rand)
    return wins, float(np.mean(tb)), float(np.mean(rb))


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--trials", type=int, default=30)
    ap.add_argument("--pairs", type=int, default=20)
    ap.add_argument("--opt", type=float, nargs="+", default=[1.7, -3.2, 0.0, 4.5])
    args = ap.parse_args(argv)
    for opt in args.opt:
        w, t, r = paired_wins(opt, args.trials, args.pairs)
        print(f"opt {opt:+.2f}: TPE wins {w}/{args.pairs}  mean best TPE {t:.2e}  random {r:.2e}")


if __name__ == "__main__":
    main()
