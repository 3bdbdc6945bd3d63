"""Sampled channel/state/activation histories and rollout glue.

A rollout is a short window of slots used to warm up the aggregation buffer
before the policy is read out: channels, node states, and the active set are
redrawn every slot.  Histories are materialized so they can be replayed,
inspected, or permuted (the relabeling test needs to drive the identical
draws through a renamed network).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .aggregation import AggregationBuffer, run_aggregation
from .network import ChannelConfig, Topology, sample_channel


@dataclass
class Histories:
    """Recorded per-slot draws: H is (T, m, m), x is (T, m), active is a list of index tuples."""

    H: np.ndarray
    x: np.ndarray
    active: list

    @property
    def steps(self) -> int:
        return self.H.shape[0]

    @property
    def m(self) -> int:
        return self.H.shape[1]


def sample_histories(
    topology: Topology,
    chan_cfg: ChannelConfig,
    activation,
    steps: int,
    channel_rng: np.random.Generator,
    activation_rng: np.random.Generator,
) -> Histories:
    """Draw ``steps`` i.i.d. slots of (H, x, active set)."""
    if steps < 1:
        raise ValueError("steps must be at least 1")
    m = topology.m
    H = np.empty((steps, m, m))
    x = np.empty((steps, m))
    active = []
    for t in range(steps):
        sample = sample_channel(topology, chan_cfg, channel_rng)
        H[t] = sample.H
        x[t] = sample.x
        active.append(activation.sample(activation_rng))
    return Histories(H=H, x=x, active=active)


def aggregate_histories(
    histories: Histories, hops: int, h_eps: float, zero_diagonal: bool = True
) -> tuple[AggregationBuffer, int]:
    """Run the incremental aggregation protocol over recorded histories."""
    return run_aggregation(
        histories.H, histories.x, histories.active, hops, h_eps, zero_diagonal
    )


def permute_histories(histories: Histories, perm) -> Histories:
    """Relabel nodes by ``perm``: node i of the new history is node perm[i] of the old.

    Applies the conjugation H -> H[perm][:, perm], the signal permutation
    x -> x[perm], and renames the members of each active set consistently.
    """
    perm = np.asarray(perm, dtype=int)
    m = histories.m
    if sorted(perm.tolist()) != list(range(m)):
        raise ValueError("perm must be a permutation of 0..m-1")
    inverse = np.empty(m, dtype=int)
    inverse[perm] = np.arange(m)
    H = histories.H[:, perm][:, :, perm]
    x = histories.x[:, perm]
    active = [tuple(sorted(int(inverse[j]) for j in act)) for act in histories.active]
    return Histories(H=H, x=x, active=active)
