"""Shared convolutional allocation policy over per-node aggregation sequences.

A stack of single-feature tap filters with ReLU between layers, a linear
readout, and a sigmoid squashing to a transmit probability; the realized
allocation is the binary draw {0, p0}.  One parameter set drives every node
(and any network size), so the same arrays are also evaluated "stacked" with
one parameter row per node, which is what asynchronously stale per-node
copies need during training.

All forward/backward arithmetic runs through the same row-wise kernels in a
fixed operation order, so single-node and stacked evaluation agree bitwise.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

DEFAULT_LAYERS = 10
DEFAULT_FILTER_TAPS = 5


@dataclass
class PolicyParameters:
    """Filter bank plus readout; node count never appears in the shapes."""

    filters: np.ndarray  # (n_layers, filter_taps)
    readout: np.ndarray  # (input_len,)

    def __post_init__(self):
        self.filters = np.asarray(self.filters, dtype=float)
        self.readout = np.asarray(self.readout, dtype=float)
        if self.filters.ndim != 2:
            raise ValueError("filters must be (n_layers, filter_taps)")
        if self.readout.ndim != 1:
            raise ValueError("readout must be a vector")

    @property
    def n_layers(self) -> int:
        return self.filters.shape[0]

    @property
    def filter_taps(self) -> int:
        return self.filters.shape[1]

    @property
    def input_len(self) -> int:
        return self.readout.shape[0]

    @property
    def size(self) -> int:
        return self.filters.size + self.readout.size

    def copy(self) -> "PolicyParameters":
        return PolicyParameters(self.filters.copy(), self.readout.copy())

    def zeros_like(self) -> "PolicyParameters":
        return PolicyParameters(np.zeros_like(self.filters), np.zeros_like(self.readout))

    def max_abs(self) -> float:
        return max(float(np.max(np.abs(self.filters))), float(np.max(np.abs(self.readout))))

    # Flat views are only used by finite-difference checks and diagnostics.
    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.filters.ravel(), self.readout])

    def with_vector(self, vec) -> "PolicyParameters":
        vec = np.asarray(vec, dtype=float)
        if vec.shape != (self.size,):
            raise ValueError(f"expected {self.size} entries, got {vec.shape}")
        nf = self.filters.size
        return PolicyParameters(
            vec[:nf].reshape(self.filters.shape).copy(), vec[nf:].copy()
        )


def init_params(
    n_layers: int, filter_taps: int, input_len: int, rng: np.random.Generator
) -> PolicyParameters:
    """Uniform init in [-c, c] with c = 1/sqrt(fan-in) per tensor."""
    if min(n_layers, filter_taps, input_len) < 1:
        raise ValueError("n_layers, filter_taps, input_len must all be >= 1")
    c_f = filter_taps ** -0.5
    c_r = input_len ** -0.5
    filters = rng.uniform(-c_f, c_f, size=(n_layers, filter_taps))
    readout = rng.uniform(-c_r, c_r, size=input_len)
    return PolicyParameters(filters, readout)


@dataclass(frozen=True)
class AllocationDecision:
    """Transmit probability and the realized binary power level."""

    q: float
    p: float

    @property
    def transmitted(self) -> bool:
        return self.p > 0.0


@dataclass
class LayerCache:
    """Everything a forward pass must remember for backprop.

    Arrays carry a leading row axis (one row per node); single-node calls use
    one row.
    """

    inputs: list  # v_0 .. v_{L-1}, each (rows, K)
    preacts: list  # z_1 .. z_L, each (rows, K)
    features: np.ndarray  # v_L, (rows, K)
    presigmoid: np.ndarray  # (rows,)
    q: np.ndarray  # (rows,)


@dataclass
class PolicyStack:
    """One parameter row per node; rows may diverge under stale local copies."""

    filters: np.ndarray  # (rows, n_layers, filter_taps)
    readout: np.ndarray  # (rows, input_len)

    @classmethod
    def from_shared(cls, params: PolicyParameters, rows: int) -> "PolicyStack":
        return cls(
            filters=np.broadcast_to(params.filters, (rows,) + params.filters.shape).copy(),
            readout=np.broadcast_to(params.readout, (rows,) + params.readout.shape).copy(),
        )

    @property
    def rows(self) -> int:
        return self.filters.shape[0]

    def row(self, i: int) -> PolicyParameters:
        return PolicyParameters(self.filters[i].copy(), self.readout[i].copy())

    def assign(self, idx, params: PolicyParameters) -> None:
        self.filters[idx] = params.filters
        self.readout[idx] = params.readout


def _sigmoid(s: np.ndarray) -> np.ndarray:
    out = np.empty_like(s)
    pos = s >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-s[pos]))
    es = np.exp(s[~pos])
    out[~pos] = es / (1.0 + es)
    return out


def _pad_widths(n_taps: int) -> tuple[int, int]:
    left = (n_taps - 1) // 2
    return left, n_taps - 1 - left


def _correlate_rows(v: np.ndarray, taps: np.ndarray) -> np.ndarray:
    """Same-length sliding dot product of each row with its own tap vector.

    Rows are zero-padded so the output keeps the input length; taps slide as
    in a standard (cross-correlating) conv layer.
    """
    k = v.shape[1]
    n_taps = taps.shape[1]
    left, right = _pad_widths(n_taps)
    vpad = np.pad(v, [(0, 0), (left, right)])
    z = np.zeros_like(v)
    for u in range(n_taps):
        z += taps[:, u : u + 1] * vpad[:, u : u + k]
    return z


def _correlate_rows_backward(dz, v, taps):
    """Gradients of _correlate_rows w.r.t. taps and input, rowwise."""
    k = v.shape[1]
    n_taps = taps.shape[1]
    left, right = _pad_widths(n_taps)
    vpad = np.pad(v, [(0, 0), (left, right)])
    dvpad = np.zeros_like(vpad)
    dtaps = np.empty_like(taps)
    for u in range(n_taps):
        dtaps[:, u] = np.sum(dz * vpad[:, u : u + k], axis=1)
        dvpad[:, u : u + k] += taps[:, u : u + 1] * dz
    return dtaps, dvpad[:, left : left + k]


def _forward_rows(Y: np.ndarray, filters: np.ndarray, readout: np.ndarray) -> LayerCache:
    inputs = []
    preacts = []
    v = np.asarray(Y, dtype=float)
    for layer in range(filters.shape[1]):
        inputs.append(v)
        z = _correlate_rows(v, filters[:, layer, :])
        preacts.append(z)
        v = np.maximum(z, 0.0)
    s = np.sum(readout * v, axis=1)
    return LayerCache(inputs=inputs, preacts=preacts, features=v, presigmoid=s, q=_sigmoid(s))


def _backward_rows(cache: LayerCache, dpre: np.ndarray, filters: np.ndarray, readout: np.ndarray):
    """Backpropagate per-row presigmoid sensitivities; returns per-row grads."""
    dreadout = dpre[:, None] * cache.features
    dv = dpre[:, None] * readout
    dfilters = np.empty_like(filters)
    for layer in reversed(range(filters.shape[1])):
        dz = dv * (cache.preacts[layer] > 0.0)
        dtaps, dv = _correlate_rows_backward(dz, cache.inputs[layer], filters[:, layer, :])
        dfilters[:, layer, :] = dtaps
    return dfilters, dreadout


def forward(y, params: PolicyParameters) -> tuple[float, LayerCache]:
    """Map one node's length-K sequence to a transmit probability.

    Returns the probability and the cache needed by score_gradient.
    """
    y = np.asarray(y, dtype=float)
    if y.shape != (params.input_len,):
        raise ValueError(
            f"sequence length {y.shape} does not match policy input ({params.input_len})"
        )
    cache = _forward_rows(y[None, :], params.filters[None], params.readout[None])
    return float(cache.q[0]), cache


def forward_nodes(Y, stack: PolicyStack) -> tuple[np.ndarray, LayerCache]:
    """Evaluate every node's sequence under its own parameter row."""
    Y = np.asarray(Y, dtype=float)
    if Y.shape != (stack.rows, stack.readout.shape[1]):
        raise ValueError(
            f"buffer shape {Y.shape} does not match stack "
            f"({stack.rows} x {stack.readout.shape[1]})"
        )
    cache = _forward_rows(Y, stack.filters, stack.readout)
    return cache.q.copy(), cache


def sample_allocation(q: float, p0: float, rng: np.random.Generator) -> AllocationDecision:
    """Transmit at p0 with probability q, else stay silent."""
    if not 0.0 <= q <= 1.0:
        raise ValueError("q must lie in [0, 1]")
    if p0 <= 0:
        raise ValueError("p0 must be positive")
    transmit = rng.random() < q
    return AllocationDecision(q=q, p=p0 if transmit else 0.0)


def sample_allocations(q: np.ndarray, p0: float, rng: np.random.Generator) -> np.ndarray:
    """Vector version: one independent draw per node, fixed draw order."""
    q = np.asarray(q, dtype=float)
    if np.any(q < 0) or np.any(q > 1):
        raise ValueError("q entries must lie in [0, 1]")
    if p0 <= 0:
        raise ValueError("p0 must be positive")
    return np.where(rng.random(q.shape[0]) < q, p0, 0.0)


def score_gradient(
    cache: LayerCache, decision: AllocationDecision, params: PolicyParameters
) -> PolicyParameters:
    """Gradient of log-probability of the realized decision w.r.t. parameters.

    The Bernoulli score at the presigmoid output is (a - q) with a the
    transmit indicator; it is backpropagated through the cached layers.
    """
    if cache.q.shape != (1,):
        raise ValueError("cache does not come from a single-node forward pass")
    if decision.q != float(cache.q[0]):
        raise ValueError("decision does not match the supplied forward cache")
    a = 1.0 if decision.transmitted else 0.0
    dpre = np.array([a - decision.q])
    dfilters, dreadout = _backward_rows(cache, dpre, params.filters[None], params.readout[None])
    return PolicyParameters(dfilters[0], dreadout[0])


def score_sum_gradient(cache: LayerCache, actions, stack: PolicyStack) -> PolicyParameters:
    """Sum over nodes of each node's own score gradient, in central coordinates.

    ``actions`` is the per-node transmit indicator vector.  Rows are backprop'd
    under their own parameter row and summed in fixed node order.
    """
    actions = np.asarray(actions, dtype=float)
    if actions.shape != cache.q.shape:
        raise ValueError("actions shape does not match cache")
    dpre = actions - cache.q
    dfilters, dreadout = _backward_rows(cache, dpre, stack.filters, stack.readout)
    return PolicyParameters(dfilters.sum(axis=0), dreadout.sum(axis=0))


_MODEL_FORMAT = "aggnn-policy"
_MODEL_VERSION = 1


def save_params(params: PolicyParameters, path) -> None:
    """Write the policy to a versioned JSON file with a shape header."""
    payload = {
        "format": _MODEL_FORMAT,
        "version": _MODEL_VERSION,
        "n_layers": params.n_layers,
        "filter_taps": params.filter_taps,
        "input_len": params.input_len,
        "filters": params.filters.tolist(),
        "readout": params.readout.tolist(),
    }
    with open(path, "w") as fh:
        json.dump(payload, fh)


def load_params(path) -> PolicyParameters:
    with open(path) as fh:
        payload = json.load(fh)
    if payload.get("format") != _MODEL_FORMAT:
        raise ValueError(f"{path}: not a policy file")
    if payload.get("version") != _MODEL_VERSION:
        raise ValueError(f"{path}: unsupported policy file version {payload.get('version')}")
    params = PolicyParameters(
        np.asarray(payload["filters"], dtype=float),
        np.asarray(payload["readout"], dtype=float),
    )
    if params.n_layers != payload["n_layers"] or params.filter_taps != payload["filter_taps"]:
        raise ValueError(f"{path}: header does not match stored filters")
    if params.input_len != payload["input_len"]:
        raise ValueError(f"{path}: header does not match stored readout")
    return params
