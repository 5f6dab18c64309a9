"""How often the GA lands on the lattice optimum of a random quadratic, per stop rule.

Each trial draws a weighted quadratic bowl over a 10^4-point lattice, finds the
optimum exhaustively, then runs the GA with a given patience.  Prints hit rate and
mean generations used.

    python scripts/ga_stop_rule.py --trials 100 --patience 1 5 8 50
"""

import argparse
import itertools

import numpy as np

from pead.ga import Chromosome, GaConfig, Gene, SearchSpace, run_ga


def bowl(seed):
    rng = np.random.default_rng(seed)
    genes = (Gene("a", 0.0, 0.9, 0.1), Gene("b", 0, 9, 1), Gene("c", 1, 10, 1), Gene("d", 0.0, 4.5, 0.5))
    space = SearchSpace(genes)
    target = [g.value(int(rng.integers(g.size))) for g in genes]
    w = rng.uniform(0.5, 2.0, size=len(genes))

    def fitness(c):
        return float(sum(wi * (v - t) ** 2 for wi, v, t in zip(w, space.values(c).values(), target)))

    best = min((Chromosome(ix) for ix in itertools.product(*[range(g.size) for g in genes])), key=fitness)
    return space, fitness, best


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--trials", type=int, default=50)
    ap.add_argument("--patience", type=int, nargs="+", default=[1, 5, 50])
    ap.add_argument("--max-generations", type=int, default=50)
    ap.add_argument("--seed-offset", type=int, default=1000)
    args = ap.parse_args()

    problems = [bowl(args.seed_offset + t) for t in range(args.trials)]
    print(f"{'patience':>8} {'hits':>6} {'mean gens':>10}")
    for p in args.patience:
        hits, gens = 0, []
        for t, (space, fitness, best) in enumerate(problems):
            res = run_ga(space, GaConfig(seed=t, max_generations=args.max_generations, patience=p), fitness)
            hits += res.best == best
            gens.append(len(res.history))
        print(f"{p:>8} {hits:>3}/{args.trials:<3} {np.mean(gens):>9.1f}")


if __name__ == "__main__":
    main()
