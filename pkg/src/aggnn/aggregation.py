"""Local state aggregation over the time-varying interference graph.

Each slot, active nodes broadcast their stored multi-hop sequence; every node
(active or not) folds what it hears into a K-entry buffer whose k-th column
is the node states diffused k hops back through the effective adjacency of
each intervening slot.  The buffer is the only input the allocation policy
ever sees, so everything here is strictly local information.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .activation import active_mask


def effective_adjacency(H, active, h_eps: float, zero_diagonal: bool = True) -> np.ndarray:
    """Mask the gain matrix down to usable links.

    Entry (i, j) survives only when the gain clears the threshold ``h_eps``
    AND transmitter j is active.  Rows of inactive nodes are left alone:
    an asleep transmitter still listens.  The diagonal is zeroed by default
    because a node's own state already enters the buffer at hop zero.
    """
    H = np.asarray(H, dtype=float)
    m = H.shape[0]
    if H.shape != (m, m):
        raise ValueError(f"H must be square, got {H.shape}")
    cols = active_mask(active, m)
    H0 = np.where((H >= h_eps) & cols[None, :], H, 0.0)
    if zero_diagonal:
        np.fill_diagonal(H0, 0.0)
    return H0


@dataclass
class AggregationBuffer:
    """Per-node multi-hop aggregation sequences, rows = nodes, columns = hops.

    Column 0 always holds the current node states; column k holds states
    diffused through k successive effective adjacencies.
    """

    y: np.ndarray  # (m, hops)

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=float)
        if self.y.ndim != 2:
            raise ValueError("buffer must be a 2-D (nodes x hops) array")

    @property
    def m(self) -> int:
        return self.y.shape[0]

    @property
    def hops(self) -> int:
        return self.y.shape[1]

    def node_sequence(self, i: int) -> np.ndarray:
        """The length-K input sequence of node i."""
        return self.y[i]

    @classmethod
    def initial(cls, x0, hops: int) -> "AggregationBuffer":
        """Buffer at the first slot: no history yet, so only hop 0 is populated."""
        x0 = np.asarray(x0, dtype=float)
        if hops < 1:
            raise ValueError("hops must be at least 1")
        y = np.zeros((x0.shape[0], hops))
        y[:, 0] = x0
        return cls(y)


def aggregate_step(buffer: AggregationBuffer, H0, x) -> AggregationBuffer:
    """Advance the buffer one slot: shift every hop through the new adjacency.

    New column 0 is the fresh node states; new column k is H0 times the old
    column k-1, i.e. one more diffusion applied to last slot's sequence.
    """
    H0 = np.asarray(H0, dtype=float)
    x = np.asarray(x, dtype=float)
    m = buffer.m
    if H0.shape != (m, m):
        raise ValueError(f"adjacency shape {H0.shape} does not match buffer ({m} nodes)")
    if x.shape != (m,):
        raise ValueError(f"state shape {x.shape} does not match buffer ({m} nodes)")
    y_new = np.empty_like(buffer.y)
    y_new[:, 0] = x
    if buffer.hops > 1:
        y_new[:, 1:] = H0 @ buffer.y[:, :-1]
    return AggregationBuffer(y_new)


def run_aggregation(
    H_hist,
    x_hist,
    active_hist,
    hops: int,
    h_eps: float,
    zero_diagonal: bool = True,
) -> tuple[AggregationBuffer, int]:
    """Drive the incremental protocol over recorded histories.

    Starts from the no-history buffer at t=0 and applies one step per
    subsequent slot.  Returns the final buffer and the protocol overhead:
    each active node transmits hops-1 scalars per slot it is active in.
    """
    T = len(H_hist)
    if T < 1 or len(x_hist) != T or len(active_hist) != T:
        raise ValueError("histories must be nonempty and equally long")
    buffer = AggregationBuffer.initial(x_hist[0], hops)
    overhead = 0
    for t in range(1, T):
        H0 = effective_adjacency(H_hist[t], active_hist[t], h_eps, zero_diagonal)
        buffer = aggregate_step(buffer, H0, x_hist[t])
        overhead += len(active_hist[t]) * (hops - 1)
    return buffer, overhead


def aggregation_oracle(
    H_hist,
    x_hist,
    active_hist,
    hops: int,
    h_eps: float,
    zero_diagonal: bool = True,
) -> AggregationBuffer:
    """Reference evaluation of the final buffer by explicit matrix products.

    Column k at the final slot t is computed directly as
    H0(t) H0(t-1) ... H0(t-k+1) x(t-k), with the masking redone entry by
    entry.  Deliberately slow and independent of the incremental path; used
    to cross-check it in tests.
    """
    T = len(H_hist)
    if T < hops:
        raise ValueError(f"need at least {hops} recorded slots, got {T}")
    if len(x_hist) != T or len(active_hist) != T:
        raise ValueError("histories must be equally long")
    t = T - 1
    m = np.asarray(H_hist[0]).shape[0]
    y = np.zeros((m, hops))
    y[:, 0] = np.asarray(x_hist[t], dtype=float)
    for k in range(1, hops):
        prod = np.eye(m)
        for back in range(k):
            prod = prod @ _masked_entrywise(
                H_hist[t - back], active_hist[t - back], h_eps, zero_diagonal
            )
        y[:, k] = prod @ np.asarray(x_hist[t - k], dtype=float)
    return AggregationBuffer(y)


def _masked_entrywise(H, active, h_eps, zero_diagonal):
    # Scalar loop on purpose: keeps the oracle independent of the vectorized mask.
    H = np.asarray(H, dtype=float)
    m = H.shape[0]
    act = set(int(i) for i in active)
    out = np.zeros((m, m))
    for i in range(m):
        for j in range(m):
            if zero_diagonal and i == j:
                continue
            if j in act and H[i, j] >= h_eps:
                out[i, j] = H[i, j]
    return out


def buffer_trace_csv(buffers, path) -> None:
    """Dump buffer snapshots for protocol debugging: rows (t, node, hop, value)."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t", "node", "hop", "value"])
        for t, buf in enumerate(buffers):
            for i in range(buf.m):
                for k in range(buf.hops):
                    writer.writerow([t, i, k, repr(buf.y[i, k])])
