"""Per-link performance, power accounting, and Monte-Carlo policy evaluation."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .activation import ActivationPatternSet
from .network import ChannelConfig, Topology
from .policy import PolicyParameters, PolicyStack, forward_nodes, sample_allocations
from .rollout import aggregate_histories, sample_histories


def link_capacity(p, H, noise_power: float = 1.0) -> np.ndarray:
    """Shannon rate per link with interference treated as noise.

    f_i = log2(1 + p_i h_ii / (noise + sum_{j != i} p_j h_ij)); H follows the
    package convention that row i collects the gains seen at receiver i.
    """
    p = np.asarray(p, dtype=float)
    H = np.asarray(H, dtype=float)
    if np.any(p < 0):
        raise ValueError("powers must be nonnegative")
    direct = np.diag(H) * p
    interference = H @ p - direct
    return np.log2(1.0 + direct / (noise_power + interference))


def sum_capacity(p, H, noise_power: float = 1.0) -> float:
    return float(np.sum(link_capacity(p, H, noise_power)))


@dataclass
class PerformanceReport:
    """Monte-Carlo means (and standard errors) of link rates and power."""

    f_mean: np.ndarray  # per-link mean rates
    sum_capacity: float
    sum_capacity_stderr: float
    total_power: float
    total_power_stderr: float
    constraint_slack: float  # p_max minus estimated mean total power
    n_samples: int
    per_sample_capacity: np.ndarray
    per_sample_power: np.ndarray

    def summary(self) -> dict:
        return {
            "sum_capacity": self.sum_capacity,
            "sum_capacity_stderr": self.sum_capacity_stderr,
            "total_power": self.total_power,
            "total_power_stderr": self.total_power_stderr,
            "constraint_slack": self.constraint_slack,
            "n_samples": self.n_samples,
        }

    def to_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.summary(), fh, indent=2)


def _stderr(values: np.ndarray) -> float:
    if values.size < 2:
        return float("nan")
    return float(np.std(values, ddof=1) / np.sqrt(values.size))


def evaluate_policy(
    params: PolicyParameters,
    topology: Topology,
    chan_cfg: ChannelConfig,
    activation,
    p0: float,
    p_max: float,
    n_samples: int,
    rollout_len: int,
    seed,
) -> PerformanceReport:
    """Estimate mean link rates and power of the stochastic policy.

    Each sample draws a fresh rollout (buffer warm-up of ``rollout_len``
    slots), evaluates every node's sequence under the shared parameters,
    samples the binary allocations, and scores them on the final slot's
    channel.  Deterministic given ``seed``.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be at least 1")
    if rollout_len < params.input_len:
        raise ValueError("rollout_len must cover the aggregation depth")
    ss = np.random.SeedSequence(seed)
    channel_rng, act_rng, decision_rng = (
        np.random.default_rng(child) for child in ss.spawn(3)
    )
    m = topology.m
    stack = PolicyStack.from_shared(params, m)
    f_sum = np.zeros(m)
    caps = np.empty(n_samples)
    powers = np.empty(n_samples)
    for s in range(n_samples):
        hist = sample_histories(
            topology, chan_cfg, activation, rollout_len, channel_rng, act_rng
        )
        buffer, _ = aggregate_histories(hist, params.input_len, chan_cfg.h_eps)
        q, _ = forward_nodes(buffer.y, stack)
        p = sample_allocations(q, p0, decision_rng)
        f = link_capacity(p, hist.H[-1], chan_cfg.noise_power)
        f_sum += f
        caps[s] = f.sum()
        powers[s] = p.sum()
    mean_power = float(powers.mean())
    return PerformanceReport(
        f_mean=f_sum / n_samples,
        sum_capacity=float(caps.mean()),
        sum_capacity_stderr=_stderr(caps),
        total_power=mean_power,
        total_power_stderr=_stderr(powers),
        constraint_slack=float(p_max - mean_power),
        n_samples=n_samples,
        per_sample_capacity=caps,
        per_sample_power=powers,
    )
