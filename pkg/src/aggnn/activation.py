"""Asynchronous node activation: fixed pattern collections and per-slot draws.

Nodes wake and sleep on their own clocks; on the slotted time scale this is
modeled as a fixed collection of candidate active subsets from which one is
drawn independently at every slot.  An independent per-node Bernoulli mode is
available for robustness experiments.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

ActiveSet = tuple[int, ...]


@dataclass(frozen=True)
class ActivationPatternSet:
    """A fixed collection of candidate active subsets of {0, ..., m-1}."""

    m: int
    patterns: tuple[ActiveSet, ...]

    def __post_init__(self):
        if self.m < 1:
            raise ValueError("m must be at least 1")
        if len(self.patterns) < 1:
            raise ValueError("at least one activation pattern is required")
        for pat in self.patterns:
            if any(i < 0 or i >= self.m for i in pat):
                raise ValueError(f"pattern {pat} has members outside 0..{self.m - 1}")

    def sample(self, rng: np.random.Generator) -> ActiveSet:
        return sample_active_set(self, rng)


@dataclass(frozen=True)
class BernoulliActivation:
    """Each node is active independently with probability ``prob`` per slot."""

    m: int
    prob: float

    def __post_init__(self):
        if not 0.0 <= self.prob <= 1.0:
            raise ValueError("prob must lie in [0, 1]")

    def sample(self, rng: np.random.Generator) -> ActiveSet:
        return tuple(int(i) for i in np.flatnonzero(rng.random(self.m) < self.prob))


@dataclass
class ActivationTrace:
    """Recorded active sets, indexed by slot."""

    m: int
    active: list[ActiveSet] = field(default_factory=list)

    def append(self, active: ActiveSet) -> None:
        self.active.append(tuple(sorted(active)))

    def to_csv(self, path) -> None:
        """One row per slot: (t, bitmask) with bit j set when node j is active."""
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["t", "active_bitmask"])
            for t, act in enumerate(self.active):
                mask = ["0"] * self.m
                for i in act:
                    mask[i] = "1"
                writer.writerow([t, "".join(mask)])


def build_pattern_sets(
    m: int, n_act: int, size_mean: float, rng: np.random.Generator
) -> ActivationPatternSet:
    """Draw ``n_act`` candidate subsets with Poisson(``size_mean``) sizes.

    Sizes are clipped to [0, m] (a subset cannot exceed the node count);
    members are drawn uniformly without replacement.
    """
    if m < 1:
        raise ValueError("m must be at least 1")
    if n_act < 1:
        raise ValueError("n_act must be at least 1")
    if size_mean <= 0:
        raise ValueError("size_mean must be positive")
    sizes = np.minimum(rng.poisson(size_mean, size=n_act), m)
    patterns = tuple(
        tuple(sorted(int(i) for i in rng.choice(m, size=int(s), replace=False)))
        for s in sizes
    )
    return ActivationPatternSet(m=m, patterns=patterns)


def sample_active_set(patterns: ActivationPatternSet, rng: np.random.Generator) -> ActiveSet:
    """Pick one of the stored patterns uniformly at random."""
    if len(patterns.patterns) == 0:
        raise ValueError("cannot sample from an empty pattern collection")
    idx = int(rng.integers(len(patterns.patterns)))
    return patterns.patterns[idx]


def active_mask(active, m: int) -> np.ndarray:
    """Boolean mask of length m with True at the active node indices."""
    mask = np.zeros(m, dtype=bool)
    idx = list(active)
    if idx:
        arr = np.asarray(idx, dtype=int)
        if arr.min() < 0 or arr.max() >= m:
            raise ValueError("active index out of range")
        mask[arr] = True
    return mask
