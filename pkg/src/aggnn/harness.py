"""Run orchestration: training, evaluation, transfer, and the relabeling test.

Every run consumes one ExperimentConfig, writes an immutable manifest before
any result, and emits CSV/JSON artifacts only.  All randomness is derived
from the root seed through named streams, keyed additionally by network size
and redraw index so that, e.g., transfer redraw 0 at the training size is the
training network itself.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .activation import ActivationPatternSet, BernoulliActivation, build_pattern_sets
from .baselines import (
    equal_allocation,
    neighbor_mask_from_threshold,
    random_allocation,
    wmmse_k,
)
from .config import ExperimentConfig
from .metrics import link_capacity
from .network import ChannelConfig, Topology, generate_topology
from .policy import (
    PolicyParameters,
    PolicyStack,
    forward_nodes,
    init_params,
    load_params,
    sample_allocations,
    save_params,
)
from .rollout import aggregate_histories, permute_histories, sample_histories
from .trainer import TrainConfig, train_loop

METHODS = ("agg_gnn", "wmmse", "equal", "random")

# Named seed streams; extra key integers (size, redraw index, ...) keep
# draws independent across networks while staying replayable.
_TOPOLOGY, _PATTERNS, _INIT, _TRAIN, _EVAL, _PERM, _RAND_BASELINE = range(7)


class MissingArtifactError(FileNotFoundError):
    """A run artifact needed by this command does not exist."""


def derived_seed(root: int, *key: int) -> int:
    """Stable 64-bit seed for the named stream ``key`` under ``root``."""
    ss = np.random.SeedSequence(root, spawn_key=tuple(int(k) for k in key))
    return int(ss.generate_state(1, np.uint64)[0])


def channel_config(cfg: ExperimentConfig) -> ChannelConfig:
    net = cfg.network
    return ChannelConfig(
        pathloss_exponent=net.pathloss_exponent,
        fading_scale=net.fading_scale,
        h_eps=net.h_eps,
        noise_power=net.noise_power,
        node_state_law=net.node_state_law,
    )


def make_activation(cfg: ExperimentConfig, m: int, seed: int):
    act = cfg.activation
    if act.mode == "bernoulli":
        prob = act.bernoulli_prob if act.bernoulli_prob is not None else act.size_mean / m
        return BernoulliActivation(m=m, prob=min(prob, 1.0))
    return build_pattern_sets(m, act.n_act, act.size_mean, np.random.default_rng(seed))


def network_for(cfg: ExperimentConfig, size: int, redraw: int) -> tuple[Topology, object]:
    """Topology and activation process for one (size, redraw) cell."""
    topo = generate_topology(size, derived_seed(cfg.seed, _TOPOLOGY, size, redraw))
    activation = make_activation(cfg, size, derived_seed(cfg.seed, _PATTERNS, size, redraw))
    return topo, activation


# ---------------------------------------------------------------------------
# manifests


@dataclass
class RunManifest:
    command: str
    config_hash: str
    seed: int
    package_version: str
    created_utc: str
    artifacts: dict = field(default_factory=dict)

    def write(self, out_dir: Path) -> Path:
        path = out_dir / "manifest.json"
        if path.exists():
            raise FileExistsError(f"{path} already exists; manifests are immutable")
        with open(path, "w") as fh:
            json.dump(
                {
                    "command": self.command,
                    "config_hash": self.config_hash,
                    "seed": self.seed,
                    "package_version": self.package_version,
                    "created_utc": self.created_utc,
                    "artifacts": self.artifacts,
                },
                fh,
                indent=2,
            )
            fh.write("\n")
        return path


def _prepare_run_dir(out_dir, cfg: ExperimentConfig, command: str, artifacts: dict) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest(
        command=command,
        config_hash=cfg.hash(),
        seed=cfg.seed,
        package_version=__version__,
        created_utc=datetime.now(timezone.utc).isoformat(),
        artifacts=artifacts,
    )
    manifest.write(out)
    cfg.save(out / "config.json")
    return out


# ---------------------------------------------------------------------------
# shared evaluation: all methods scored on identical channel samples


@dataclass
class MethodStats:
    mean: float
    stderr: float
    power_mean: float
    per_sample: np.ndarray

    def row(self) -> dict:
        return {"mean": self.mean, "stderr": self.stderr, "power_mean": self.power_mean}


def evaluate_methods(
    params: PolicyParameters,
    topology: Topology,
    chan_cfg: ChannelConfig,
    activation,
    p0: float,
    p_max: float,
    n_samples: int,
    rollout_len: int,
    seed: int,
    wmmse_iterations: int,
    wmmse_neighborhood: bool = True,
) -> dict[str, MethodStats]:
    """Score the policy and the three reference allocators on shared samples.

    Per sample, every method sees the same final-slot channel; the policy
    additionally consumes the aggregation buffer warmed up over the rollout.
    """
    m = topology.m
    ss = np.random.SeedSequence(seed)
    channel_rng, act_rng, decision_rng, rand_rng = (
        np.random.default_rng(c) for c in ss.spawn(4)
    )
    stack = PolicyStack.from_shared(params, m)
    caps = {name: np.empty(n_samples) for name in METHODS}
    powers = {name: np.empty(n_samples) for name in METHODS}
    p_equal = equal_allocation(m, p_max)
    for s in range(n_samples):
        hist = sample_histories(
            topology, chan_cfg, activation, rollout_len, channel_rng, act_rng
        )
        H = hist.H[-1]
        buffer, _ = aggregate_histories(hist, params.input_len, chan_cfg.h_eps)
        q, _ = forward_nodes(buffer.y, stack)
        allocations = {
            "agg_gnn": sample_allocations(q, p0, decision_rng),
            "wmmse": wmmse_k(
                H,
                wmmse_iterations,
                p0,
                chan_cfg.noise_power,
                neighbor_mask_from_threshold(H, chan_cfg.h_eps)
                if wmmse_neighborhood
                else None,
            ),
            "equal": p_equal,
            "random": random_allocation(m, p0, p_max, rand_rng),
        }
        for name, p in allocations.items():
            caps[name][s] = link_capacity(p, H, chan_cfg.noise_power).sum()
            powers[name][s] = p.sum()
    out = {}
    for name in METHODS:
        c = caps[name]
        stderr = float(np.std(c, ddof=1) / np.sqrt(n_samples)) if n_samples > 1 else float("nan")
        out[name] = MethodStats(
            mean=float(c.mean()),
            stderr=stderr,
            power_mean=float(powers[name].mean()),
            per_sample=c,
        )
    return out


# ---------------------------------------------------------------------------
# training


def run_training(cfg: ExperimentConfig, out_dir) -> dict:
    """Train on one fixed network; trace includes baselines on the same samples."""
    artifacts = {
        "config": "config.json",
        "topology": "topology.json",
        "model": "model.json",
        "trace": "trace.csv",
        "eval_summary": "eval_summary.json",
    }
    out = _prepare_run_dir(out_dir, cfg, "train", artifacts)

    m = cfg.network.m
    p0 = cfg.network.p0
    p_max = cfg.network.resolved_p_max()
    chan = channel_config(cfg)
    topology, activation = network_for(cfg, m, 0)
    topology.save(out / "topology.json")

    policy0 = init_params(
        cfg.policy.n_layers,
        cfg.policy.filter_taps,
        cfg.policy.hops,
        np.random.default_rng(derived_seed(cfg.seed, _INIT)),
    )

    wmmse_iters = cfg.evaluation.wmmse_iterations or cfg.policy.hops
    rand_rng = np.random.default_rng(derived_seed(cfg.seed, _RAND_BASELINE))
    p_equal = equal_allocation(m, p_max)
    checkpoint_every = cfg.training.checkpoint_every

    def hook(iteration, params, rollouts):
        # score the reference allocators on this batch's channel draws
        caps = {"wmmse": 0.0, "equal": 0.0, "random": 0.0}
        for ro in rollouts:
            mask = (
                neighbor_mask_from_threshold(ro.H, chan.h_eps)
                if cfg.evaluation.wmmse_neighborhood
                else None
            )
            p_w = wmmse_k(ro.H, wmmse_iters, p0, chan.noise_power, mask)
            caps["wmmse"] += link_capacity(p_w, ro.H, chan.noise_power).sum()
            caps["equal"] += link_capacity(p_equal, ro.H, chan.noise_power).sum()
            p_r = random_allocation(m, p0, p_max, rand_rng)
            caps["random"] += link_capacity(p_r, ro.H, chan.noise_power).sum()
        extras = {k: v / len(rollouts) for k, v in caps.items()}
        if checkpoint_every and (iteration + 1) % checkpoint_every == 0:
            save_params(params, out / f"model_iter{iteration + 1:06d}.json")
        return extras

    tcfg = TrainConfig(
        stepsize=cfg.training.stepsize,
        batch_size=cfg.training.batch_size,
        iterations=cfg.training.iterations,
        rollout_len=cfg.training.rollout_len,
        seed=derived_seed(cfg.seed, _TRAIN),
        mu_convention=cfg.training.mu_convention,
        use_baseline=cfg.training.use_baseline,
        baseline_decay=cfg.training.baseline_decay,
        divergence_limit=cfg.training.divergence_limit,
    )
    trained, trace = train_loop(
        tcfg, topology, chan, activation, policy0, p0, p_max, hook=hook
    )

    trace.to_csv(out / "trace.csv")
    save_params(trained, out / "model.json")

    stats = evaluate_methods(
        trained, topology, chan, activation, p0, p_max,
        cfg.evaluation.n_samples, cfg.evaluation.rollout_len,
        derived_seed(cfg.seed, _EVAL, m, 0),
        wmmse_iters, cfg.evaluation.wmmse_neighborhood,
    )
    summary = {name: s.row() for name, s in stats.items()}
    summary["p_max"] = p_max
    with open(out / "eval_summary.json", "w") as fh:
        json.dump(summary, fh, indent=2)
        fh.write("\n")
    return {name: str(out / rel) for name, rel in artifacts.items()}


# ---------------------------------------------------------------------------
# evaluation / transfer


def run_evaluation(cfg: ExperimentConfig, model_path, out_dir) -> dict:
    """Evaluate a saved model on the configured network against the baselines."""
    params = _load_model(model_path, cfg)
    artifacts = {"config": "config.json", "eval_summary": "eval_summary.json"}
    out = _prepare_run_dir(out_dir, cfg, "eval", artifacts)
    m = cfg.network.m
    topology, activation = network_for(cfg, m, 0)
    stats = evaluate_methods(
        params, topology, channel_config(cfg), activation,
        cfg.network.p0, cfg.network.resolved_p_max(),
        cfg.evaluation.n_samples, cfg.evaluation.rollout_len,
        derived_seed(cfg.seed, _EVAL, m, 0),
        cfg.evaluation.wmmse_iterations or cfg.policy.hops,
        cfg.evaluation.wmmse_neighborhood,
    )
    summary = {name: s.row() for name, s in stats.items()}
    with open(out / "eval_summary.json", "w") as fh:
        json.dump(summary, fh, indent=2)
        fh.write("\n")
    return {name: str(out / rel) for name, rel in artifacts.items()}


def run_transfer(cfg: ExperimentConfig, model_path, out_dir) -> dict:
    """Evaluate trained parameters, unchanged, on fresh networks.

    Same-size redraws populate the histogram artifact; the configured larger
    sizes populate the capacity-versus-size artifact.  Redraw 0 at the
    training size is the training network itself, so the first histogram row
    reproduces a training run's final evaluation under the same config.
    """
    params = _load_model(model_path, cfg)
    artifacts = {
        "config": "config.json",
        "histogram": "transfer_histogram.csv",
        "sizes": "transfer_sizes.csv",
        "summary": "transfer_summary.json",
    }
    out = _prepare_run_dir(out_dir, cfg, "transfer", artifacts)

    ev = cfg.evaluation
    wmmse_iters = ev.wmmse_iterations or cfg.policy.hops
    sizes = [cfg.network.m] + [int(s) for s in ev.transfer_sizes]

    per_network_rows = []  # (size, redraw, method, mean, stderr, power)
    for size in sizes:
        for redraw in range(ev.n_redraws):
            topology, activation = network_for(cfg, size, redraw)
            stats = evaluate_methods(
                params, topology, channel_config(cfg), activation,
                cfg.network.p0, cfg.network.resolved_p_max(size),
                ev.n_samples, ev.rollout_len,
                derived_seed(cfg.seed, _EVAL, size, redraw),
                wmmse_iters, ev.wmmse_neighborhood,
            )
            for name in METHODS:
                per_network_rows.append(
                    (size, redraw, name, stats[name].mean, stats[name].stderr,
                     stats[name].power_mean)
                )

    with open(out / "transfer_histogram.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["size", "network", "method", "sum_capacity", "stderr", "power"])
        for size, redraw, name, mean, stderr, power in per_network_rows:
            if size == cfg.network.m:
                writer.writerow([size, redraw, name, repr(mean), repr(stderr), repr(power)])

    summary_rows = []
    for size in sizes:
        for name in METHODS:
            vals = np.array(
                [r[3] for r in per_network_rows if r[0] == size and r[2] == name]
            )
            stderr = float(np.std(vals, ddof=1) / np.sqrt(vals.size)) if vals.size > 1 else float("nan")
            summary_rows.append((size, name, float(vals.mean()), stderr))
    with open(out / "transfer_sizes.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["size", "method", "mean_sum_capacity", "stderr"])
        for size, name, mean, stderr in summary_rows:
            writer.writerow([size, name, repr(mean), repr(stderr)])

    summary = {
        f"{size}:{name}": {"mean": mean, "stderr": stderr}
        for size, name, mean, stderr in summary_rows
    }
    with open(out / "transfer_summary.json", "w") as fh:
        json.dump(summary, fh, indent=2)
        fh.write("\n")
    return {name: str(out / rel) for name, rel in artifacts.items()}


def _load_model(model_path, cfg: ExperimentConfig) -> PolicyParameters:
    path = Path(model_path)
    if not path.exists():
        raise MissingArtifactError(f"model file {path} not found")
    params = load_params(path)
    if params.input_len != cfg.policy.hops:
        raise ValueError(
            f"model hop depth {params.input_len} does not match config policy.hops "
            f"{cfg.policy.hops}"
        )
    return params


# ---------------------------------------------------------------------------
# the relabeling (permutation) check


def run_permutation_test(
    cfg: ExperimentConfig,
    model_path,
    trials: int,
    m: int | None = None,
    tolerance: float = 1e-9,
) -> dict:
    """Check that relabeling nodes relabels the transmit probabilities.

    For each trial a fresh network, rollout, and random permutation are drawn;
    the probabilities computed on the permuted draws must equal the permuted
    probabilities of the original run to within ``tolerance``.
    """
    if trials < 1:
        raise ValueError("trials must be at least 1")
    params = _load_model(model_path, cfg)
    size = int(m if m is not None else cfg.network.m)
    chan = channel_config(cfg)
    rollout_len = max(cfg.evaluation.rollout_len, params.input_len)

    max_delta = 0.0
    failures = []
    for trial in range(trials):
        seed = derived_seed(cfg.seed, _PERM, size, trial)
        ss = np.random.SeedSequence(seed)
        channel_rng, act_rng, perm_rng = (np.random.default_rng(c) for c in ss.spawn(3))
        topology, activation = network_for(cfg, size, trial)
        hist = sample_histories(topology, chan, activation, rollout_len, channel_rng, act_rng)
        perm = perm_rng.permutation(size)

        buffer, _ = aggregate_histories(hist, params.input_len, chan.h_eps)
        q, _ = forward_nodes(buffer.y, PolicyStack.from_shared(params, size))

        permuted = permute_histories(hist, perm)
        buffer_p, _ = aggregate_histories(permuted, params.input_len, chan.h_eps)
        q_p, _ = forward_nodes(buffer_p.y, PolicyStack.from_shared(params, size))

        delta = float(np.max(np.abs(q_p - q[perm])))
        max_delta = max(max_delta, delta)
        if delta > tolerance:
            failures.append({"trial": trial, "seed": seed, "perm": perm.tolist(),
                             "delta": delta})

    return {
        "trials": trials,
        "m": size,
        "tolerance": tolerance,
        "max_abs_delta": max_delta,
        "passed": not failures,
        "failures": failures,
    }


# ---------------------------------------------------------------------------
# plot data emission


def emit_plot_data(run_dir, out_dir=None) -> dict:
    """Reshape run artifacts into one CSV per figure panel.

    Emits whichever panels the run directory supports; an empty directory is
    an error and nothing is written until all inputs parse.
    """
    run = Path(run_dir)
    trace_path = run / "trace.csv"
    hist_path = run / "transfer_histogram.csv"
    sizes_path = run / "transfer_sizes.csv"
    if not trace_path.exists() and not hist_path.exists() and not sizes_path.exists():
        raise MissingArtifactError(
            f"{run} holds neither a training trace nor transfer results"
        )
    out = Path(out_dir) if out_dir is not None else run / "plots"

    pending = {}  # filename -> rows; written only after every input parses
    if trace_path.exists():
        with open(trace_path) as fh:
            reader = csv.DictReader(fh)
            needed = ["iteration", "sum_capacity", "wmmse", "equal", "random"]
            rows = [[row[k] for k in needed] for row in reader]
        pending["fig_training_curve.csv"] = (
            ["iteration", "agg_gnn", "wmmse", "equal", "random"],
            rows,
        )
    if hist_path.exists():
        with open(hist_path) as fh:
            reader = csv.DictReader(fh)
            rows = [
                [row["network"], row["method"], row["sum_capacity"]] for row in reader
            ]
        pending["fig_same_size_histogram.csv"] = (
            ["network", "method", "sum_capacity"],
            rows,
        )
    if sizes_path.exists():
        with open(sizes_path) as fh:
            reader = csv.DictReader(fh)
            rows = [
                [row["size"], row["method"], row["mean_sum_capacity"], row["stderr"]]
                for row in reader
            ]
        pending["fig_capacity_vs_size.csv"] = (
            ["size", "method", "mean_sum_capacity", "stderr"],
            rows,
        )

    out.mkdir(parents=True, exist_ok=True)
    written = {}
    for fname, (header, rows) in pending.items():
        path = out / fname
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(header)
            writer.writerows(rows)
        written[fname] = str(path)
    return written
