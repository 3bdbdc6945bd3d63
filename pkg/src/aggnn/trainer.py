"""Offline model-free primal-dual training with asynchronously stale copies.

The centralized learner keeps one parameter iterate; every node holds a copy
that is refreshed only on iterations where the node is active, so gradients
are always taken through the possibly stale per-node versions.  The policy
gradient is a score-function estimate of the dual-weighted objective; the
ergodic averages and multipliers follow plain gradient steps with the power
multiplier projected to stay nonnegative.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .activation import active_mask
from .metrics import link_capacity
from .network import ChannelConfig, Topology
from .policy import (
    LayerCache,
    PolicyParameters,
    PolicyStack,
    forward_nodes,
    sample_allocations,
    score_sum_gradient,
)
from .rollout import aggregate_histories, sample_histories

MU_CONVENTIONS = ("enforcing", "literal")


class TrainingDiverged(RuntimeError):
    """Parameter magnitude blew past the configured bound."""


@dataclass
class DualVariables:
    """Multipliers: one per ergodic-rate equality, one scalar for the power budget."""

    lam: np.ndarray  # (m,), unconstrained sign
    mu: float  # >= 0 always

    def __post_init__(self):
        self.lam = np.asarray(self.lam, dtype=float)
        if self.mu < 0:
            raise ValueError("mu must be nonnegative")

    @classmethod
    def zeros(cls, m: int) -> "DualVariables":
        return cls(lam=np.zeros(m), mu=0.0)

    @classmethod
    def initial(cls, m: int) -> "DualVariables":
        # lam starts at its saddle value (the r-update fixed point) so the
        # policy gradient is informative from the first iteration
        return cls(lam=np.ones(m), mu=0.0)


class LocalCopyStore:
    """Central iterate plus the per-node stale copies, stored as stacked rows."""

    def __init__(self, central: PolicyParameters, m: int):
        self.central = central.copy()
        self.stack = PolicyStack.from_shared(central, m)

    @property
    def m(self) -> int:
        return self.stack.rows

    def copy_of(self, i: int) -> PolicyParameters:
        return self.stack.row(i)


def local_copy_update(store: LocalCopyStore, active) -> LocalCopyStore:
    """Refresh the copies of active nodes to the current central parameters;
    inactive nodes keep whatever they last fetched."""
    mask = active_mask(active, store.m)
    if mask.any():
        store.stack.assign(mask, store.central)
    return store


@dataclass
class PolicyRollout:
    """One training sample: warmed-up buffer, decisions under own copies, outcomes."""

    Y: np.ndarray  # (m, hops) final aggregation buffer
    H: np.ndarray  # (m, m) channel at the decision slot
    q: np.ndarray  # (m,) transmit probabilities
    p: np.ndarray  # (m,) realized allocations in {0, p0}
    f: np.ndarray  # (m,) realized link rates
    cache: LayerCache
    overhead: int = 0


def policy_rollout(
    topology: Topology,
    chan_cfg: ChannelConfig,
    activation,
    store: LocalCopyStore,
    p0: float,
    rollout_len: int,
    channel_rng: np.random.Generator,
    activation_rng: np.random.Generator,
    decision_rng: np.random.Generator,
) -> PolicyRollout:
    """Warm up the aggregation buffer, then let every node decide under its own copy."""
    hops = store.central.input_len
    if rollout_len < hops:
        raise ValueError("rollout_len must cover the aggregation depth")
    hist = sample_histories(
        topology, chan_cfg, activation, rollout_len, channel_rng, activation_rng
    )
    buffer, overhead = aggregate_histories(hist, hops, chan_cfg.h_eps)
    q, cache = forward_nodes(buffer.y, store.stack)
    p = sample_allocations(q, p0, decision_rng)
    f = link_capacity(p, hist.H[-1], chan_cfg.noise_power)
    return PolicyRollout(Y=buffer.y, H=hist.H[-1], q=q, p=p, f=f, cache=cache, overhead=overhead)


def _mu_sign(convention: str) -> float:
    # "enforcing": power spending is penalized, the multiplier grows on violation.
    # "literal": the printed update, which rewards spending; kept for replication.
    if convention == "enforcing":
        return -1.0
    if convention == "literal":
        return 1.0
    raise ValueError(f"mu_convention must be one of {MU_CONVENTIONS}")


def estimate_policy_gradient(
    store: LocalCopyStore,
    rollouts,
    duals: DualVariables,
    convention: str = "enforcing",
    baseline: float = 0.0,
) -> PolicyParameters:
    """Score-function estimate of the dual-weighted objective gradient.

    Per sample the scalar weight lam . f + mu_signed * total power multiplies
    the sum over nodes of each node's own-copy score gradient; samples are
    averaged.  All contributions land in central parameter coordinates.
    """
    if len(rollouts) == 0:
        raise ValueError("empty rollout batch")
    sign = _mu_sign(convention)
    grad = store.central.zeros_like()
    for r in rollouts:
        weight = float(duals.lam @ r.f) + sign * duals.mu * float(r.p.sum()) - baseline
        g = score_sum_gradient(r.cache, r.p > 0.0, store.stack)
        grad.filters += weight * g.filters
        grad.readout += weight * g.readout
    grad.filters /= len(rollouts)
    grad.readout /= len(rollouts)
    return grad


def primal_step(
    r: np.ndarray,
    params: PolicyParameters,
    gradient: PolicyParameters,
    duals: DualVariables,
    stepsize: float,
) -> tuple[np.ndarray, PolicyParameters]:
    """Gradient-ascent update of the ergodic averages and the parameters."""
    r_new = r + stepsize * (1.0 - duals.lam)
    params_new = PolicyParameters(
        params.filters + stepsize * gradient.filters,
        params.readout + stepsize * gradient.readout,
    )
    return r_new, params_new


def dual_step(
    duals: DualVariables,
    f_hat: np.ndarray,
    power_hat: float,
    r: np.ndarray,
    p_max: float,
    stepsize: float,
    convention: str = "enforcing",
) -> DualVariables:
    """Multiplier updates; mu is projected back to the nonnegative half-line."""
    lam = duals.lam - stepsize * (np.asarray(f_hat, dtype=float) - r)
    violation = power_hat - p_max
    if convention == "enforcing":
        mu = duals.mu + stepsize * violation
    elif convention == "literal":
        mu = duals.mu - stepsize * violation
    else:
        raise ValueError(f"mu_convention must be one of {MU_CONVENTIONS}")
    return DualVariables(lam=lam, mu=max(mu, 0.0))


@dataclass
class TrainConfig:
    """Optimizer knobs; the problem itself (network, budgets) is passed alongside."""

    stepsize: float = 0.02
    batch_size: int = 16
    iterations: int = 200
    rollout_len: int = 8
    seed: int = 0
    mu_convention: str = "enforcing"
    use_baseline: bool = False  # running-mean control variate on the sample weight
    baseline_decay: float = 0.9
    divergence_limit: float = 1e3

    def __post_init__(self):
        if self.stepsize < 0:
            raise ValueError("stepsize must be nonnegative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.iterations < 0:
            raise ValueError("iterations must be nonnegative")
        if self.mu_convention not in MU_CONVENTIONS:
            raise ValueError(f"mu_convention must be one of {MU_CONVENTIONS}")


@dataclass
class TrainRecord:
    iteration: int
    sum_capacity: float  # batch mean of realized sum rate
    total_power: float  # batch mean of realized total power
    lam_norm: float
    mu: float
    param_norm: float  # max-abs of the central parameters
    extras: dict = field(default_factory=dict)


@dataclass
class TrainTrace:
    records: list = field(default_factory=list)

    def append(self, record: TrainRecord) -> None:
        self.records.append(record)

    def to_csv(self, path) -> None:
        extra_keys = sorted({k for rec in self.records for k in rec.extras})
        header = ["iteration", "sum_capacity", "total_power", "lam_norm", "mu", "param_norm"]
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(header + extra_keys)
            for rec in self.records:
                row = [
                    rec.iteration,
                    repr(rec.sum_capacity),
                    repr(rec.total_power),
                    repr(rec.lam_norm),
                    repr(rec.mu),
                    repr(rec.param_norm),
                ]
                row += [repr(rec.extras[k]) if k in rec.extras else "" for k in extra_keys]
                writer.writerow(row)


def train_loop(
    cfg: TrainConfig,
    topology: Topology,
    chan_cfg: ChannelConfig,
    activation,
    init_policy: PolicyParameters,
    p0: float,
    p_max: float,
    hook=None,
) -> tuple[PolicyParameters, TrainTrace]:
    """Run the asynchronous primal-dual loop on one fixed topology.

    Per iteration: draw the active set and refresh those nodes' copies, roll
    out a batch of independent samples decided under the per-node copies,
    estimate the policy gradient, then take the primal and dual steps.
    ``hook(iteration, params, rollouts)`` may return extra columns for the
    trace (the harness uses it to score baselines on the same samples).
    """
    m = topology.m
    ss = np.random.SeedSequence(cfg.seed)
    channel_rng, act_rng, decision_rng = (np.random.default_rng(c) for c in ss.spawn(3))

    store = LocalCopyStore(init_policy, m)
    duals = DualVariables.initial(m)
    r = np.zeros(m)
    baseline = 0.0
    have_baseline = False
    trace = TrainTrace()

    for it in range(cfg.iterations):
        active = activation.sample(act_rng)
        local_copy_update(store, active)

        rollouts = [
            policy_rollout(
                topology, chan_cfg, activation, store, p0, cfg.rollout_len,
                channel_rng, act_rng, decision_rng,
            )
            for _ in range(cfg.batch_size)
        ]

        grad = estimate_policy_gradient(
            store, rollouts, duals, cfg.mu_convention,
            baseline if (cfg.use_baseline and have_baseline) else 0.0,
        )
        r, params_new = primal_step(r, store.central, grad, duals, cfg.stepsize)
        store.central = params_new

        f_hat = np.mean([ro.f for ro in rollouts], axis=0)
        power_hat = float(np.mean([ro.p.sum() for ro in rollouts]))
        duals = dual_step(duals, f_hat, power_hat, r, p_max, cfg.stepsize, cfg.mu_convention)

        if cfg.use_baseline:
            sign = _mu_sign(cfg.mu_convention)
            batch_w = float(
                np.mean([duals.lam @ ro.f + sign * duals.mu * ro.p.sum() for ro in rollouts])
            )
            baseline = (
                batch_w
                if not have_baseline
                else cfg.baseline_decay * baseline + (1.0 - cfg.baseline_decay) * batch_w
            )
            have_baseline = True

        record = TrainRecord(
            iteration=it,
            sum_capacity=float(np.mean([ro.f.sum() for ro in rollouts])),
            total_power=power_hat,
            lam_norm=float(np.linalg.norm(duals.lam)),
            mu=duals.mu,
            param_norm=store.central.max_abs(),
        )
        if hook is not None:
            extras = hook(it, store.central, rollouts)
            if extras:
                record.extras.update(extras)
        trace.append(record)

        if record.param_norm > cfg.divergence_limit:
            raise TrainingDiverged(
                f"parameter magnitude {record.param_norm:.3g} exceeded "
                f"{cfg.divergence_limit:.3g} at iteration {it}"
            )

    return store.central, trace
