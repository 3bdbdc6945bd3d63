"""Reference allocators: iteration-capped WMMSE, equal split, random on/off."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

_DENOM_FLOOR = 1e-12


@dataclass
class WmmseRun:
    """Full record of a WMMSE solve for diagnostics and monotonicity checks."""

    powers: np.ndarray  # final p = v^2
    per_iteration: list = field(default_factory=list)  # power vector after each round
    floored_denominators: int = 0


def wmmse_k(
    H,
    iterations: int,
    p0: float,
    noise_power: float = 1.0,
    neighbor_mask=None,
    init_amplitude=None,
) -> np.ndarray:
    """Run ``iterations`` rounds of scalar WMMSE and return the power vector."""
    return wmmse_k_detailed(
        H, iterations, p0, noise_power, neighbor_mask, init_amplitude
    ).powers


def wmmse_k_detailed(
    H,
    iterations: int,
    p0: float,
    noise_power: float = 1.0,
    neighbor_mask=None,
    init_amplitude=None,
) -> WmmseRun:
    """Scalar-channel WMMSE with a per-node power cap and an iteration budget.

    ``H`` holds power gains; the iteration runs on amplitudes g = sqrt(H):

        u_i = g_ii v_i / (noise + sum_j M_ij h_ij v_j^2)
        w_i = 1 / (1 - u_i g_ii v_i)
        v_i = w_i u_i g_ii / sum_j M_ji w_j u_j^2 h_ji,   clipped to [0, sqrt(p0)]

    ``neighbor_mask`` (optional, boolean) limits the sums to links a node can
    actually learn about when information exchange is capped; the diagonal is
    always kept.  None means full sums, the textbook algorithm.  Denominators
    are floored at a tiny constant and the flooring events counted.
    """
    H = np.asarray(H, dtype=float)
    m = H.shape[0]
    if H.shape != (m, m):
        raise ValueError(f"H must be square, got {H.shape}")
    if np.any(H < 0):
        raise ValueError("H entries must be nonnegative")
    if iterations < 1:
        raise ValueError("iterations must be at least 1")
    if p0 <= 0:
        raise ValueError("p0 must be positive")

    if neighbor_mask is None:
        mask = np.ones((m, m), dtype=bool)
    else:
        mask = np.asarray(neighbor_mask, dtype=bool).copy()
        if mask.shape != (m, m):
            raise ValueError("neighbor_mask shape must match H")
        np.fill_diagonal(mask, True)  # a node always knows its own link

    Hm = np.where(mask, H, 0.0)
    g_direct = np.sqrt(np.diag(H))
    v_cap = np.sqrt(p0)
    v = np.full(m, v_cap / 2.0) if init_amplitude is None else np.asarray(init_amplitude, float).copy()

    run = WmmseRun(powers=v**2)
    for _ in range(iterations):
        denom_u = noise_power + Hm @ (v**2)
        floored = denom_u < _DENOM_FLOOR
        run.floored_denominators += int(floored.sum())
        u = g_direct * v / np.maximum(denom_u, _DENOM_FLOOR)

        denom_w = 1.0 - u * g_direct * v
        floored = denom_w < _DENOM_FLOOR
        run.floored_denominators += int(floored.sum())
        w = 1.0 / np.maximum(denom_w, _DENOM_FLOOR)

        denom_v = Hm.T @ (w * u**2)
        floored = denom_v < _DENOM_FLOOR
        run.floored_denominators += int(floored.sum())
        v = np.clip(w * u * g_direct / np.maximum(denom_v, _DENOM_FLOOR), 0.0, v_cap)

        run.per_iteration.append(v**2)

    run.powers = v**2
    return run


def neighbor_mask_from_threshold(H, h_eps: float) -> np.ndarray:
    """Links a node can coordinate over: gain at or above the threshold."""
    H = np.asarray(H, dtype=float)
    mask = H >= h_eps
    np.fill_diagonal(mask, True)
    return mask


def equal_allocation(m: int, p_max: float) -> np.ndarray:
    """Split the shared budget evenly: every node gets p_max / m."""
    if m < 1:
        raise ValueError("m must be at least 1")
    return np.full(m, p_max / m)


def random_allocation(m: int, p0: float, p_max: float, rng: np.random.Generator) -> np.ndarray:
    """Each node transmits at p0 with probability p_max / (p0 m).

    The probability is chosen so the expected total power meets the budget
    exactly.
    """
    if m < 1:
        raise ValueError("m must be at least 1")
    prob = p_max / (p0 * m)
    if not 0.0 <= prob <= 1.0:
        raise ValueError(f"p_max/(p0*m) = {prob} is not a probability")
    return np.where(rng.random(m) < prob, p0, 0.0)
