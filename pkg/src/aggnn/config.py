"""Experiment configuration: one self-describing file drives every run.

JSON on disk, nested dataclasses in memory.  Any subset of keys may appear in
the file; missing ones take the defaults below, unknown ones are rejected.
A run is reproducible from the config plus the package version, so the config
hash is recorded in every run manifest.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields

from .network import (
    DEFAULT_FADING_SCALE,
    DEFAULT_H_EPS,
    DEFAULT_NOISE_POWER,
    DEFAULT_PATHLOSS_EXPONENT,
    NODE_STATE_LAWS,
)
from .trainer import MU_CONVENTIONS

CONFIG_VERSION = 1


class ConfigError(ValueError):
    """Bad experiment configuration file or override."""


@dataclass
class NetworkSection:
    m: int = 25
    pathloss_exponent: float = DEFAULT_PATHLOSS_EXPONENT
    fading_scale: float = DEFAULT_FADING_SCALE
    h_eps: float = DEFAULT_H_EPS
    noise_power: float = DEFAULT_NOISE_POWER
    node_state_law: str = "exponential"
    p0: float = 2.0
    p_max: float | None = None  # None: budget equals the node count

    def resolved_p_max(self, m: int | None = None) -> float:
        return float(self.p_max) if self.p_max is not None else float(m or self.m)


@dataclass
class ActivationSection:
    mode: str = "patterns"  # "patterns" or "bernoulli"
    n_act: int = 5
    size_mean: float = 12.0
    bernoulli_prob: float | None = None  # None: size_mean / m


@dataclass
class PolicySection:
    n_layers: int = 10
    filter_taps: int = 5
    hops: int = 5


@dataclass
class TrainingSection:
    stepsize: float = 0.02
    batch_size: int = 16
    iterations: int = 200
    rollout_len: int = 8
    mu_convention: str = "enforcing"
    use_baseline: bool = False
    baseline_decay: float = 0.9
    divergence_limit: float = 1e3
    checkpoint_every: int = 0  # 0 disables intermediate checkpoints


@dataclass
class EvaluationSection:
    n_samples: int = 200
    rollout_len: int = 8
    transfer_sizes: list = field(default_factory=lambda: [50, 75])
    n_redraws: int = 50
    wmmse_iterations: int | None = None  # None: match the policy hop depth
    wmmse_neighborhood: bool = True  # limit WMMSE sums to threshold neighbors


@dataclass
class ExperimentConfig:
    config_version: int = CONFIG_VERSION
    seed: int = 0
    network: NetworkSection = field(default_factory=NetworkSection)
    activation: ActivationSection = field(default_factory=ActivationSection)
    policy: PolicySection = field(default_factory=PolicySection)
    training: TrainingSection = field(default_factory=TrainingSection)
    evaluation: EvaluationSection = field(default_factory=EvaluationSection)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.config_version != CONFIG_VERSION:
            raise ConfigError(f"unsupported config_version {self.config_version}")
        net, act, pol, tr, ev = (
            self.network, self.activation, self.policy, self.training, self.evaluation
        )
        if net.m < 1:
            raise ConfigError("network.m must be at least 1")
        if net.p0 <= 0:
            raise ConfigError("network.p0 must be positive")
        if net.node_state_law not in NODE_STATE_LAWS:
            raise ConfigError(f"network.node_state_law must be one of {NODE_STATE_LAWS}")
        if act.mode not in ("patterns", "bernoulli"):
            raise ConfigError("activation.mode must be 'patterns' or 'bernoulli'")
        if act.n_act < 1 or act.size_mean <= 0:
            raise ConfigError("activation.n_act and size_mean must be positive")
        if min(pol.n_layers, pol.filter_taps, pol.hops) < 1:
            raise ConfigError("policy dimensions must all be >= 1")
        if tr.mu_convention not in MU_CONVENTIONS:
            raise ConfigError(f"training.mu_convention must be one of {MU_CONVENTIONS}")
        if tr.rollout_len < pol.hops:
            raise ConfigError("training.rollout_len must be >= policy.hops")
        if ev.rollout_len < pol.hops:
            raise ConfigError("evaluation.rollout_len must be >= policy.hops")
        if ev.n_samples < 1 or ev.n_redraws < 1:
            raise ConfigError("evaluation.n_samples and n_redraws must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        sections = {
            "network": NetworkSection,
            "activation": ActivationSection,
            "policy": PolicySection,
            "training": TrainingSection,
            "evaluation": EvaluationSection,
        }
        kwargs = {}
        for key, value in data.items():
            if key in sections:
                kwargs[key] = _section_from_dict(sections[key], value, key)
            elif key in ("config_version", "seed"):
                kwargs[key] = value
            else:
                raise ConfigError(f"unknown config section {key!r}")
        try:
            return cls(**kwargs)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    def hash(self) -> str:
        canon = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)
            fh.write("\n")


def _section_from_dict(section_cls, value: dict, name: str):
    if not isinstance(value, dict):
        raise ConfigError(f"config section {name!r} must be an object")
    known = {f.name for f in fields(section_cls)}
    unknown = set(value) - known
    if unknown:
        raise ConfigError(f"unknown key(s) {sorted(unknown)} in section {name!r}")
    return section_cls(**value)


def load_config(path, overrides=()) -> ExperimentConfig:
    """Read a config file and apply ``section.key=value`` override strings."""
    try:
        with open(path) as fh:
            data = json.load(fh)
    except FileNotFoundError:
        raise
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    data = apply_overrides(data, overrides)
    return ExperimentConfig.from_dict(data)


def apply_overrides(data: dict, overrides) -> dict:
    """Apply ``a.b=value`` strings; values parse as JSON with a string fallback."""
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} must look like section.key=value")
        dotted, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        parts = dotted.strip().split(".")
        node = data
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {item!r}: {part!r} is not a section")
        node[parts[-1]] = value
    return data
