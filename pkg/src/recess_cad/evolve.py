"""Mutation-only evolutionary search over the training hyperparameter genome.

Each generation mutates a fitness-weighted combination of the best parents
seen so far: every gene independently gets a multiplicative nudge with 90%
probability (factor 1 + 0.2*g, g ~ Normal(0, variance 0.04), redrawn until it
actually changes the gene and stays positive), then is clipped to its bounds.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .model import Mode

MUTATION_PROBABILITY = 0.9
MUTATION_STD = 0.2  # variance 0.04
MUTATION_SCALE = 0.2
DEFAULT_N_KEEP = 5
_WEIGHT_EPS = 1e-9

DEFAULT_BOUNDS = {
    "learning_rate": (1e-5, 1e-1),
    "sgd_momentum": (0.6, 0.98),
    "dropout": (0.0, 0.5),
    "alpha": (0.02, 1.0),
    "beta": (0.02, 1.0),
    "gamma": (0.02, 1.0),
    "delta": (0.02, 1.0),
}


class EmptyHistory(Exception):
    pass


@dataclass(frozen=True)
class HyperParams:
    """Gene values with per-gene [lo, hi] bounds; gene sets differ by mode."""

    values: tuple[tuple[str, float], ...]
    bounds: tuple[tuple[str, tuple[float, float]], ...]

    def __post_init__(self):
        names = [n for n, _ in self.values]
        bound_names = [n for n, _ in self.bounds]
        if names != bound_names:
            raise ValueError("values and bounds must list the same genes in the same order")
        for (name, value), (_, (lo, hi)) in zip(self.values, self.bounds):
            if not (lo <= value <= hi):
                raise ValueError(f"gene {name}={value} outside bounds [{lo}, {hi}]")

    @classmethod
    def create(cls, values: dict, bounds: dict | None = None) -> "HyperParams":
        bounds = bounds or {}
        resolved = tuple(
            (name, tuple(bounds.get(name, DEFAULT_BOUNDS[name]))) for name in values
        )
        return cls(values=tuple(values.items()), bounds=resolved)

    @classmethod
    def defaults(cls, mode: Mode) -> "HyperParams":
        if mode is Mode.DETECTION_TWO_CLASS:
            return cls.create(
                {
                    "learning_rate": 0.00369,
                    "sgd_momentum": 0.77628,
                    "alpha": 0.06868,
                    "beta": 0.49062,
                    "gamma": 0.2343,
                }
            )
        return cls.create(
            {
                "learning_rate": 0.0018,
                "sgd_momentum": 0.62403,
                "dropout": 0.11008,
                "alpha": 0.05427,
                "beta": 0.67598,
                "delta": 0.41855,
            }
        )

    def as_dict(self) -> dict:
        return dict(self.values)

    def bounds_dict(self) -> dict:
        return {name: b for name, b in self.bounds}

    def replace_values(self, new_values: dict) -> "HyperParams":
        return HyperParams(
            values=tuple((name, float(new_values[name])) for name, _ in self.values),
            bounds=self.bounds,
        )

    def to_json_dict(self) -> dict:
        return {"values": self.as_dict(), "bounds": {n: list(b) for n, b in self.bounds}}

    @classmethod
    def from_json_dict(cls, obj: dict) -> "HyperParams":
        return cls.create(
            {k: float(v) for k, v in obj["values"].items()},
            {k: tuple(v) for k, v in obj.get("bounds", {}).items()},
        )


@dataclass(frozen=True)
class GenerationRecord:
    generation: int
    genome: HyperParams
    fitness: float

    def to_json_dict(self) -> dict:
        return {
            "generation": self.generation,
            "genome": self.genome.to_json_dict(),
            "fitness": self.fitness,
        }

    @classmethod
    def from_json_dict(cls, obj: dict) -> "GenerationRecord":
        return cls(
            generation=int(obj["generation"]),
            genome=HyperParams.from_json_dict(obj["genome"]),
            fitness=float(obj["fitness"]),
        )


def mutate(parent: HyperParams, rng) -> HyperParams:
    """Independently nudge each gene with probability 0.9, clip to bounds."""
    bounds = parent.bounds_dict()
    new_values = {}
    for name, value in parent.values:
        if rng.random() < MUTATION_PROBABILITY:
            while True:
                factor = 1.0 + MUTATION_SCALE * rng.normal(0.0, MUTATION_STD)
                if factor > 0.0 and factor != 1.0:
                    break
            lo, hi = bounds[name]
            value = float(np.clip(value * factor, lo, hi))
        new_values[name] = value
    return parent.replace_values(new_values)


def select_parent(history, n_keep: int = DEFAULT_N_KEEP, rng=None) -> HyperParams:
    """Fitness-weighted random convex combination of the top-n genomes."""
    if not history:
        raise EmptyHistory("no generations recorded yet")
    if rng is None:
        rng = np.random.default_rng()
    ranked = sorted(history, key=lambda r: -r.fitness)[:n_keep]
    if len(ranked) == 1:
        return ranked[0].genome
    fitness = np.array([r.fitness for r in ranked])
    weights = fitness - fitness.min() + _WEIGHT_EPS
    weights = weights * rng.random(len(ranked))
    if weights.sum() <= 0:
        weights = np.ones(len(ranked))
    weights = weights / weights.sum()
    template = ranked[0].genome
    combined = {
        name: float(sum(w * dict(r.genome.values)[name] for w, r in zip(weights, ranked)))
        for name, _ in template.values
    }
    return template.replace_values(combined)


def _generation_rng(seed: int, generation: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed % (2**63), 3, generation]))


def evolve(
    fitness_fn,
    initial: HyperParams,
    generations: int = 300,
    seed: int = 0,
    history: list[GenerationRecord] | None = None,
    on_generation=None,
) -> tuple[HyperParams, list[GenerationRecord]]:
    """Run the search; resuming from a partial history continues identically.

    Each generation is seeded from (seed, generation), so a resumed run
    reproduces the same trajectory as an uninterrupted one.
    """
    history = list(history or [])
    if not history:
        record = GenerationRecord(0, initial, float(fitness_fn(initial)))
        history.append(record)
        if on_generation:
            on_generation(record)
    while len(history) <= generations:
        generation = len(history)
        rng = _generation_rng(seed, generation)
        parent = select_parent(history, rng=rng)
        child = mutate(parent, rng)
        record = GenerationRecord(generation, child, float(fitness_fn(child)))
        history.append(record)
        if on_generation:
            on_generation(record)
    best = max(history, key=lambda r: r.fitness)  # ties: earliest generation
    return best.genome, history


def save_generations(history: list[GenerationRecord], path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for record in history:
            fh.write(json.dumps(record.to_json_dict()) + "\n")


def load_generations(path) -> list[GenerationRecord]:
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                records.append(GenerationRecord.from_json_dict(json.loads(line)))
    return records
