"""Genetic-algorithm hyperparameter search with k-fold cross-validated fitness."""

from __future__ import annotations

import csv
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, asdict
from typing import Callable, Sequence

import numpy as np

from .gbt import LossKind, TrainConfig, train

logger = logging.getLogger(__name__)

INT_GENES = {"max_depth"}


@dataclass(frozen=True)
class Gene:
    name: str
    lo: float
    hi: float
    step: float

    def __post_init__(self):
        if not self.step > 0:
            raise ValueError(f"{self.name}: step must be > 0")
        if self.hi < self.lo:
            raise ValueError(f"{self.name}: need lo <= hi")
        span = (self.hi - self.lo) / self.step
        if abs(span - round(span)) > 1e-9 * max(1.0, span):
            raise ValueError(f"{self.name}: step {self.step} does not divide [{self.lo}, {self.hi}]")

    @property
    def size(self) -> int:
        return int(round((self.hi - self.lo) / self.step)) + 1

    def value(self, i: int):
        if not 0 <= i < self.size:
            raise IndexError(f"{self.name}: lattice index {i} out of range")
        v = round(self.lo + i * self.step, 10)
        return int(v) if self.name in INT_GENES else v


def default_genes() -> tuple[Gene, ...]:
    return (
        Gene("gamma", 0.0, 5.0, 0.1),
        Gene("max_depth", 2, 10, 1),
        Gene("subsample", 0.5, 1.0, 0.05),
        Gene("learning_rate", 0.01, 0.3, 0.01),
        Gene("min_child_weight", 0.0, 10.0, 0.5),
        Gene("colsample_bytree", 0.5, 1.0, 0.05),
    )


@dataclass(frozen=True)
class SearchSpace:
    genes: tuple[Gene, ...] = field(default_factory=default_genes)

    def __post_init__(self):
        names = [g.name for g in self.genes]
        if len(set(names)) != len(names) or not names:
            raise ValueError("gene names must be unique and non-empty")

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(g.name for g in self.genes)

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(g.size for g in self.genes)

    @property
    def n_points(self) -> int:
        return math.prod(self.shape)

    def values(self, chromosome: "Chromosome") -> dict:
        return {g.name: g.value(i) for g, i in zip(self.genes, chromosome.genes)}

    def contains(self, chromosome: "Chromosome") -> bool:
        return (len(chromosome.genes) == len(self.genes)
                and all(0 <= i < g.size for g, i in zip(self.genes, chromosome.genes)))

    def to_dict(self) -> dict:
        return {"genes": [asdict(g) for g in self.genes]}

    @classmethod
    def from_dict(cls, d: dict) -> "SearchSpace":
        return cls(tuple(Gene(**g) for g in d["genes"]))


@dataclass(frozen=True, order=True)
class Chromosome:
    """Lattice indices, one per gene of the search space."""
    genes: tuple[int, ...]


@dataclass(frozen=True)
class GaConfig:
    population: int = 40
    survivors: int = 20
    mutation_prob: float = 0.1
    epsilon: float = 1e-4
    max_generations: int = 30
    # generations in a row with best-fitness change below epsilon before stopping
    patience: int = 5
    folds: int = 5
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.survivors < self.population:
            raise ValueError("need 0 < survivors < population")
        if not 0 <= self.mutation_prob <= 1:
            raise ValueError("mutation_prob must be in [0, 1]")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be > 0")
        if self.max_generations < 1 or self.patience < 1:
            raise ValueError("max_generations and patience must be >= 1")
        if self.folds < 2:
            raise ValueError("folds must be >= 2")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "GaConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown GaConfig field(s): {sorted(unknown)}")
        return cls(**d)


@dataclass
class Generation:
    index: int
    chromosomes: list[Chromosome]
    fitness: list[float] | None = None

    def ranked(self) -> list[int]:
        """Positions sorted by fitness, ties by position."""
        if self.fitness is None:
            raise ValueError("generation not evaluated")
        return sorted(range(len(self.chromosomes)), key=lambda i: (self.fitness[i], i))

    @property
    def best(self) -> tuple[Chromosome, float]:
        i = self.ranked()[0]
        return self.chromosomes[i], self.fitness[i]


def init_generation(space: SearchSpace, cfg: GaConfig) -> Generation:
    rng = np.random.default_rng([cfg.seed, 0])
    cols = [rng.integers(0, g.size, size=cfg.population) for g in space.genes]
    return Generation(0, [Chromosome(tuple(int(c[i]) for c in cols)) for i in range(cfg.population)])


def evolve_step(gen: Generation, space: SearchSpace, cfg: GaConfig) -> Generation:
    """Elitist survivors plus crossed-over, mutated children."""
    order = gen.ranked()
    keep = order[:cfg.survivors]
    survivors = [gen.chromosomes[i] for i in keep]
    next_index = gen.index + 1
    children = []
    for c in range(cfg.population - cfg.survivors):
        # per-child stream: evolution does not depend on evaluation order
        rng = np.random.default_rng([cfg.seed, next_index, c + 1])
        a, b = rng.integers(0, len(survivors), size=2)
        take_a = rng.random(len(space.genes)) < 0.5
        genes = [pa if t else pb for pa, pb, t in
                 zip(survivors[a].genes, survivors[b].genes, take_a)]
        mutate = rng.random(len(space.genes)) < cfg.mutation_prob
        draws = [int(rng.integers(0, g.size)) for g in space.genes]
        genes = [d if m else x for x, d, m in zip(genes, draws, mutate)]
        children.append(Chromosome(tuple(genes)))
    fitness = [gen.fitness[i] for i in keep] + [math.nan] * len(children)
    return Generation(next_index, survivors + children, fitness)


@dataclass
class GaResult:
    best: Chromosome
    best_fitness: float
    history: list[tuple[int, float, float]]   # (generation, best, mean)
    generations: list[Generation]

    @property
    def trace(self) -> list[float]:
        return [b for _, b, _ in self.history]

    def write_history(self, path, header_comments: Sequence[str] = ()) -> None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            for line in header_comments:
                fh.write(f"# {line}\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["generation", "best", "mean"])
            for g, b, m in self.history:
                w.writerow([g, repr(b), repr(m)])


def run_ga(space: SearchSpace, cfg: GaConfig, fitness: Callable[[Chromosome], float],
           threads: int = 1) -> GaResult:
    """Evaluate/evolve until the best fitness settles or the generation budget runs out."""
    cache: dict[Chromosome, float] = {}

    def evaluate(gen: Generation):
        todo = [c for c in dict.fromkeys(gen.chromosomes) if c not in cache]
        if threads > 1 and len(todo) > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                values = list(pool.map(fitness, todo))
        else:
            values = [fitness(c) for c in todo]
        for c, v in zip(todo, values):
            v = float(v)
            if not math.isfinite(v):
                raise ValueError(f"non-finite fitness {v} for {space.values(c)}")
            cache[c] = v
        gen.fitness = [cache[c] for c in gen.chromosomes]

    gen = init_generation(space, cfg)
    evaluate(gen)
    generations = [gen]
    history = [(0, gen.best[1], float(np.mean(gen.fitness)))]
    calm = 0
    while len(generations) < cfg.max_generations:
        gen = evolve_step(gen, space, cfg)
        evaluate(gen)
        generations.append(gen)
        history.append((gen.index, gen.best[1], float(np.mean(gen.fitness))))
        calm = calm + 1 if abs(history[-1][1] - history[-2][1]) < cfg.epsilon else 0
        logger.debug("generation %d best %.6g", gen.index, history[-1][1])
        if calm >= cfg.patience:
            break
    best, best_fit = gen.best
    return GaResult(best, best_fit, history, generations)


# -- cross-validated fitness ---------------------------------------------------

def chromosome_config(space: SearchSpace, chromosome: Chromosome, base: TrainConfig) -> TrainConfig:
    return base.replace(**space.values(chromosome))


def fold_indices(n: int, k: int, seed: int) -> list[np.ndarray]:
    if n < k:
        raise ValueError(f"need at least k={k} rows, got {n}")
    perm = np.random.default_rng(seed).permutation(n)
    return [np.sort(f) for f in np.array_split(perm, k)]


def held_out_loss(loss: LossKind, y_true, pred) -> float:
    y_true = np.asarray(y_true, dtype=float)
    if LossKind(loss) is LossKind.SQUARED_ERROR:
        return math.sqrt(float(np.mean((pred - y_true) ** 2)))
    return float(np.mean((pred >= 0.5).astype(float) != y_true))


def cv_fitness(X, y, config: TrainConfig, k: int = 5, loss: LossKind = LossKind.SQUARED_ERROR,
               seed: int = 0) -> float:
    """Mean held-out RMSE (regression) or error rate (classification) over k folds."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    folds = fold_indices(len(y), k, seed)
    scores = []
    for held in folds:
        mask = np.ones(len(y), dtype=bool)
        mask[held] = False
        model = train(X[mask], y[mask], config, loss)
        scores.append(held_out_loss(loss, y[held], model.predict(X[held])))
    return float(np.mean(scores))


def optimize(X, y, space: SearchSpace = SearchSpace(), cfg: GaConfig = GaConfig(),
             loss: LossKind = LossKind.SQUARED_ERROR, base: TrainConfig = TrainConfig(),
             threads: int = 1) -> tuple[TrainConfig, GaResult]:
    """GA over ``space`` with k-fold CV fitness; returns the best config and the search record."""
    X = np.asarray(X, dtype=float)

    def fitness(c: Chromosome) -> float:
        return cv_fitness(X, y, chromosome_config(space, c, base), cfg.folds, loss, cfg.seed)

    result = run_ga(space, cfg, fitness, threads)
    return chromosome_config(space, result.best, base), result
