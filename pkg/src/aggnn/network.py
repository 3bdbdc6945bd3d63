"""Ad-hoc network geometry and time-varying interference channel sampling.

Conventions used throughout the package:
  * ``H[i, j]`` is the power gain from transmitter ``j`` to the receiver
    paired with transmitter ``i`` (so the diagonal carries the direct links).
  * Gains are pathloss times an independent Rayleigh fast-fading draw,
    redrawn at every time index.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

DEFAULT_PATHLOSS_EXPONENT = 2.2
DEFAULT_FADING_SCALE = 2.0
# Keeps roughly 5-10 in-neighbors per node on the default 25-node drop
# (see ChannelConfig.h_eps); tune per deployment, it is not a physical constant.
DEFAULT_H_EPS = 0.003
DEFAULT_NOISE_POWER = 1.0

NODE_STATE_LAWS = ("exponential", "uniform", "ones")


class DegenerateGeometryError(ValueError):
    """A transmitter and a receiver coincide, so the pathloss gain is undefined."""


@dataclass(frozen=True)
class Topology:
    """Planar transmitter/receiver drop with the tx -> rx pairing map.

    ``pairing[i]`` is the index into ``rx_pos`` of the receiver served by
    transmitter ``i``.  A receiver may serve several transmitters; with the
    default generator the pairing is the identity.
    """

    tx_pos: np.ndarray  # (m, 2)
    rx_pos: np.ndarray  # (n, 2), n <= m
    pairing: np.ndarray  # (m,) ints into rx_pos

    def __post_init__(self):
        tx = np.asarray(self.tx_pos, dtype=float)
        rx = np.asarray(self.rx_pos, dtype=float)
        pairing = np.asarray(self.pairing, dtype=int)
        object.__setattr__(self, "tx_pos", tx)
        object.__setattr__(self, "rx_pos", rx)
        object.__setattr__(self, "pairing", pairing)
        if tx.ndim != 2 or tx.shape[1] != 2:
            raise ValueError(f"tx_pos must be (m, 2), got {tx.shape}")
        if rx.ndim != 2 or rx.shape[1] != 2:
            raise ValueError(f"rx_pos must be (n, 2), got {rx.shape}")
        if rx.shape[0] > tx.shape[0]:
            raise ValueError("more receivers than transmitters")
        if pairing.shape != (tx.shape[0],):
            raise ValueError("pairing must assign one receiver per transmitter")
        if pairing.size and (pairing.min() < 0 or pairing.max() >= rx.shape[0]):
            raise ValueError("pairing index out of range")

    @property
    def m(self) -> int:
        return self.tx_pos.shape[0]

    @property
    def n(self) -> int:
        return self.rx_pos.shape[0]

    def paired_rx(self) -> np.ndarray:
        """Receiver position serving each transmitter, shape (m, 2)."""
        return self.rx_pos[self.pairing]

    def to_dict(self) -> dict:
        return {
            "tx_pos": self.tx_pos.tolist(),
            "rx_pos": self.rx_pos.tolist(),
            "pairing": self.pairing.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Topology":
        return cls(
            tx_pos=np.asarray(d["tx_pos"], dtype=float),
            rx_pos=np.asarray(d["rx_pos"], dtype=float),
            pairing=np.asarray(d["pairing"], dtype=int),
        )

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def load(cls, path) -> "Topology":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


@dataclass
class ChannelConfig:
    """Parameters of the fading channel and of the node-state law."""

    pathloss_exponent: float = DEFAULT_PATHLOSS_EXPONENT
    fading_scale: float = DEFAULT_FADING_SCALE  # Rayleigh scale parameter
    h_eps: float = DEFAULT_H_EPS  # neighborhood threshold on channel gain
    noise_power: float = DEFAULT_NOISE_POWER  # sigma^2
    node_state_law: str = "exponential"

    def __post_init__(self):
        if self.pathloss_exponent <= 0:
            raise ValueError("pathloss_exponent must be positive")
        if self.h_eps < 0:
            raise ValueError("h_eps must be nonnegative")
        if self.noise_power <= 0:
            raise ValueError("noise_power must be positive")
        if self.node_state_law not in NODE_STATE_LAWS:
            raise ValueError(
                f"unknown node_state_law {self.node_state_law!r}; "
                f"choose one of {NODE_STATE_LAWS}"
            )

    def to_dict(self) -> dict:
        return {
            "pathloss_exponent": self.pathloss_exponent,
            "fading_scale": self.fading_scale,
            "h_eps": self.h_eps,
            "noise_power": self.noise_power,
            "node_state_law": self.node_state_law,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ChannelConfig":
        return cls(**d)


@dataclass(frozen=True)
class ChannelSample:
    """One time slot: link-gain matrix H and node states x."""

    H: np.ndarray  # (m, m) nonnegative
    x: np.ndarray  # (m,)


def generate_topology(m: int, seed) -> Topology:
    """Drop ``m`` tx/rx pairs uniformly at random.

    Transmitters are uniform on [-m, m]^2; each receiver is placed uniformly
    within a square of half-width m/4 centered on its transmitter, and the
    pairing is the identity.  Deterministic given ``seed``.
    """
    if m < 1:
        raise ValueError("m must be at least 1")
    rng = np.random.default_rng(seed)
    tx = rng.uniform(-m, m, size=(m, 2))
    rx = tx + rng.uniform(-m / 4.0, m / 4.0, size=(m, 2))
    return Topology(tx_pos=tx, rx_pos=rx, pairing=np.arange(m))


def pathloss_gain(a, b, exponent: float = DEFAULT_PATHLOSS_EXPONENT) -> float:
    """Distance-law power gain ||a - b||^(-exponent)."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    dist = float(np.linalg.norm(a - b))
    if dist == 0.0:
        raise DegenerateGeometryError("coincident transmitter and receiver")
    return dist ** (-exponent)


def pathloss_matrix(topology: Topology, exponent: float) -> np.ndarray:
    """Large-scale gain matrix: entry (i, j) couples tx j to the receiver of pair i."""
    rx = topology.paired_rx()  # (m, 2)
    diff = rx[:, None, :] - topology.tx_pos[None, :, :]
    dist = np.linalg.norm(diff, axis=2)
    if np.any(dist == 0.0):
        raise DegenerateGeometryError("coincident transmitter and receiver")
    return dist ** (-exponent)


def _draw_node_states(law: str, m: int, rng: np.random.Generator) -> np.ndarray:
    if law == "exponential":
        return rng.exponential(1.0, size=m)  # unit mean
    if law == "uniform":
        return rng.uniform(0.0, 2.0, size=m)  # unit mean
    if law == "ones":
        return np.ones(m)
    raise ValueError(f"unknown node_state_law {law!r}")


def sample_channel(topology: Topology, cfg: ChannelConfig, rng: np.random.Generator) -> ChannelSample:
    """Draw one (H, x) slot: pathloss times fresh Rayleigh fading, fresh states.

    The fading matrix is drawn first (row-major), then the node states, so a
    fixed generator state reproduces the sample exactly.
    """
    m = topology.m
    pl = pathloss_matrix(topology, cfg.pathloss_exponent)
    fading = rng.rayleigh(cfg.fading_scale, size=(m, m))
    x = _draw_node_states(cfg.node_state_law, m, rng)
    return ChannelSample(H=pl * fading, x=x)


def channel_trace_csv(topology: Topology, cfg: ChannelConfig, seed, steps: int, path) -> None:
    """Write ``steps`` channel draws to CSV for debugging: row = t, columns = flattened H."""
    rng = np.random.default_rng(seed)
    m = topology.m
    header = ["t"] + [f"h_{i}_{j}" for i in range(m) for j in range(m)]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for t in range(steps):
            sample = sample_channel(topology, cfg, rng)
            writer.writerow([t] + [repr(v) for v in sample.H.ravel()])
