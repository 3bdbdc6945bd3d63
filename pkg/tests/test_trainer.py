import itertools

import numpy as np
import pytest

from aggnn.activation import ActivationPatternSet
from aggnn.metrics import link_capacity
from aggnn.network import ChannelConfig, generate_topology
from aggnn.policy import (
    AllocationDecision,
    PolicyParameters,
    PolicyStack,
    forward,
    forward_nodes,
    init_params,
    sample_allocations,
    score_gradient,
    score_sum_gradient,
)
from aggnn.rollout import aggregate_histories, sample_histories
from aggnn.trainer import (
    DualVariables,
    LocalCopyStore,
    PolicyRollout,
    TrainConfig,
    TrainingDiverged,
    TrainTrace,
    dual_step,
    estimate_policy_gradient,
    local_copy_update,
    primal_step,
    train_loop,
)
from oracle_utils import policy_gradient_jvp


def tiny_policy(seed=0, n_layers=2, taps=3, k=3):
    return init_params(n_layers, taps, k, np.random.default_rng(seed))


def all_active(m):
    return ActivationPatternSet(m=m, patterns=(tuple(range(m)),))


class TestLocalCopyStore:
    def test_active_nodes_fetch_central(self):
        params = tiny_policy()
        store = LocalCopyStore(params, m=3)
        newer = PolicyParameters(params.filters + 1.0, params.readout + 1.0)
        store.central = newer
        local_copy_update(store, (0, 2))
        np.testing.assert_array_equal(store.copy_of(0).filters, newer.filters)
        np.testing.assert_array_equal(store.copy_of(1).filters, params.filters)
        np.testing.assert_array_equal(store.copy_of(2).filters, newer.filters)

    def test_inactive_nodes_keep_older_copies(self):
        # node inactive for two rounds still holds the two-rounds-old copy
        params = tiny_policy()
        store = LocalCopyStore(params, m=2)
        v0 = store.copy_of(1).filters.copy()
        for shift in (1.0, 2.0):
            store.central = PolicyParameters(params.filters + shift, params.readout)
            local_copy_update(store, (0,))
        np.testing.assert_array_equal(store.copy_of(1).filters, v0)
        np.testing.assert_array_equal(store.copy_of(0).filters, params.filters + 2.0)

    def test_all_active_collapses_to_central(self):
        params = tiny_policy()
        store = LocalCopyStore(params, m=4)
        store.central = PolicyParameters(params.filters * 3.0, params.readout * 3.0)
        local_copy_update(store, range(4))
        for i in range(4):
            np.testing.assert_array_equal(store.copy_of(i).filters, store.central.filters)
            np.testing.assert_array_equal(store.copy_of(i).readout, store.central.readout)


class TestPrimalDualSteps:
    def test_r_fixed_point_at_unit_multiplier(self):
        r, _ = primal_step(
            np.zeros(2), tiny_policy(), tiny_policy().zeros_like(),
            DualVariables(lam=np.ones(2), mu=0.0), stepsize=0.1,
        )
        np.testing.assert_array_equal(r, np.zeros(2))

    def test_r_hand_value(self):
        r, _ = primal_step(
            np.array([0.5]), tiny_policy(), tiny_policy().zeros_like(),
            DualVariables(lam=np.array([0.8]), mu=0.0), stepsize=0.1,
        )
        assert r[0] == pytest.approx(0.52, abs=1e-15)

    def test_zero_gradient_leaves_params(self):
        params = tiny_policy()
        _, out = primal_step(
            np.zeros(1), params, params.zeros_like(),
            DualVariables(lam=np.zeros(1), mu=0.0), stepsize=0.3,
        )
        np.testing.assert_array_equal(out.filters, params.filters)
        np.testing.assert_array_equal(out.readout, params.readout)

    def test_mu_grows_on_violation(self):
        duals = dual_step(
            DualVariables(lam=np.zeros(1), mu=0.1), f_hat=np.zeros(1),
            power_hat=30.0, r=np.zeros(1), p_max=25.0, stepsize=0.01,
        )
        assert duals.mu == pytest.approx(0.15, abs=1e-15)

    def test_lambda_hand_value(self):
        duals = dual_step(
            DualVariables(lam=np.array([1.0]), mu=0.0), f_hat=np.array([2.0]),
            power_hat=0.0, r=np.array([1.0]), p_max=25.0, stepsize=0.1,
        )
        assert duals.lam[0] == pytest.approx(0.9, abs=1e-15)

    def test_mu_unchanged_at_exact_budget(self):
        duals = dual_step(
            DualVariables(lam=np.zeros(1), mu=0.2), f_hat=np.zeros(1),
            power_hat=25.0, r=np.zeros(1), p_max=25.0, stepsize=0.05,
        )
        assert duals.mu == 0.2

    def test_mu_projected_nonnegative(self):
        duals = dual_step(
            DualVariables(lam=np.zeros(1), mu=0.01), f_hat=np.zeros(1),
            power_hat=0.0, r=np.zeros(1), p_max=25.0, stepsize=0.1,
        )
        assert duals.mu == 0.0

    def test_literal_convention_flips_mu_direction(self):
        duals = dual_step(
            DualVariables(lam=np.zeros(1), mu=0.5), f_hat=np.zeros(1),
            power_hat=30.0, r=np.zeros(1), p_max=25.0, stepsize=0.01,
            convention="literal",
        )
        assert duals.mu == pytest.approx(0.45, abs=1e-15)


def manual_rollout(store, Y, H, actions, p0=2.0, noise=1.0):
    """Build a PolicyRollout for a forced outcome vector."""
    q, cache = forward_nodes(Y, store.stack)
    p = np.asarray(actions, dtype=float) * p0
    f = link_capacity(p, H, noise)
    return PolicyRollout(Y=Y, H=H, q=q, p=p, f=f, cache=cache)


class TestEstimatePolicyGradient:
    def test_zero_duals_zero_gradient(self):
        store = LocalCopyStore(tiny_policy(), m=2)
        Y = np.random.default_rng(0).normal(size=(2, 3))
        H = np.eye(2)
        ro = manual_rollout(store, Y, H, [1, 0])
        grad = estimate_policy_gradient(store, [ro], DualVariables.zeros(2))
        assert grad.max_abs() == 0.0

    def test_single_node_single_sample_hand_value(self):
        # weight reduces to lambda_1 * f_1; gradient is that times the score
        store = LocalCopyStore(tiny_policy(seed=5), m=1)
        Y = np.array([[0.4, 1.2, -0.3]])
        H = np.array([[1.0]])
        ro = manual_rollout(store, Y, H, [1])
        duals = DualVariables(lam=np.array([0.7]), mu=0.0)
        grad = estimate_policy_gradient(store, [ro], duals)

        q, cache = forward(Y[0], store.central)
        score = score_gradient(cache, AllocationDecision(q=q, p=2.0), store.central)
        w = 0.7 * ro.f[0]
        np.testing.assert_allclose(grad.filters, w * score.filters, atol=1e-14)
        np.testing.assert_allclose(grad.readout, w * score.readout, atol=1e-14)

    def test_empty_batch_rejected(self):
        store = LocalCopyStore(tiny_policy(), m=1)
        with pytest.raises(ValueError):
            estimate_policy_gradient(store, [], DualVariables.zeros(1))

    def test_expectation_equals_enumerated_gradient(self):
        # two nodes, four outcomes: the probability-weighted REINFORCE estimate
        # must equal the exact gradient of the expected weighted objective,
        # computed via independent forward-mode derivatives of q
        params = tiny_policy(seed=11)
        store = LocalCopyStore(params, m=2)
        rng = np.random.default_rng(3)
        Y = rng.normal(size=(2, 3))
        H = np.array([[0.9, 0.2], [0.3, 1.1]])
        duals = DualVariables(lam=np.array([0.8, 1.3]), mu=0.4)
        p0, noise = 2.0, 1.0

        q, _ = forward_nodes(Y, store.stack)

        est = params.zeros_like()
        exact_f = np.zeros_like(params.filters)
        exact_r = np.zeros_like(params.readout)
        dq = [policy_gradient_jvp(Y[i], params) for i in range(2)]

        for a in itertools.product((0, 1), repeat=2):
            prob = np.prod([q[i] if a[i] else 1.0 - q[i] for i in range(2)])
            ro = manual_rollout(store, Y, H, list(a), p0, noise)
            g = estimate_policy_gradient(store, [ro], duals, convention="enforcing")
            est.filters += prob * g.filters
            est.readout += prob * g.readout

            w = float(duals.lam @ ro.f) - duals.mu * float(ro.p.sum())
            for i in range(2):
                partner = q[1 - i] if a[1 - i] else 1.0 - q[1 - i]
                sign = 1.0 if a[i] else -1.0
                exact_f += w * sign * partner * dq[i][0]
                exact_r += w * sign * partner * dq[i][1]

        assert np.max(np.abs(est.filters - exact_f)) <= 1e-10
        assert np.max(np.abs(est.readout - exact_r)) <= 1e-10

    def test_gradients_follow_each_nodes_own_copy(self):
        # staleness matters: a node with a scaled copy contributes the score
        # of that copy, not of the central parameters
        params = tiny_policy(seed=2)
        store = LocalCopyStore(params, m=2)
        stale = PolicyParameters(params.filters * 0.3, params.readout * 1.7)
        store.stack.assign(1, stale)
        Y = np.random.default_rng(8).normal(size=(2, 3))
        ro = manual_rollout(store, Y, np.eye(2), [1, 1])
        duals = DualVariables(lam=np.ones(2), mu=0.0)
        grad = estimate_policy_gradient(store, [ro], duals)

        w = float(ro.f.sum())
        expect = params.zeros_like()
        for i, own in ((0, params), (1, stale)):
            qi, ci = forward(Y[i], own)
            gi = score_gradient(ci, AllocationDecision(q=qi, p=2.0), own)
            expect.filters += w * gi.filters
            expect.readout += w * gi.readout
        np.testing.assert_allclose(grad.filters, expect.filters, atol=1e-12)
        np.testing.assert_allclose(grad.readout, expect.readout, atol=1e-12)


def synchronous_reference_loop(cfg, topology, chan_cfg, activation, init_policy, p0, p_max):
    """Plain primal-dual loop with no local-copy machinery, same draw order."""
    m = topology.m
    ss = np.random.SeedSequence(cfg.seed)
    channel_rng, act_rng, decision_rng = (np.random.default_rng(c) for c in ss.spawn(3))
    central = init_policy.copy()
    duals = DualVariables.initial(m)
    r = np.zeros(m)
    capacities = []
    for _ in range(cfg.iterations):
        activation.sample(act_rng)  # consumed but unused: every node is synchronous
        stack = PolicyStack.from_shared(central, m)
        batch = []
        for _ in range(cfg.batch_size):
            hist = sample_histories(
                topology, chan_cfg, activation, cfg.rollout_len, channel_rng, act_rng
            )
            buffer, _ = aggregate_histories(hist, central.input_len, chan_cfg.h_eps)
            q, cache = forward_nodes(buffer.y, stack)
            p = sample_allocations(q, p0, decision_rng)
            f = link_capacity(p, hist.H[-1], chan_cfg.noise_power)
            batch.append((cache, p, f))
        grad = central.zeros_like()
        for cache, p, f in batch:
            w = float(duals.lam @ f) - duals.mu * float(p.sum())
            g = score_sum_gradient(cache, p > 0.0, stack)
            grad.filters += w * g.filters
            grad.readout += w * g.readout
        grad.filters /= cfg.batch_size
        grad.readout /= cfg.batch_size
        r, central = primal_step(r, central, grad, duals, cfg.stepsize)
        f_hat = np.mean([f for _, _, f in batch], axis=0)
        power_hat = float(np.mean([p.sum() for _, p, _ in batch]))
        duals = dual_step(duals, f_hat, power_hat, r, p_max, cfg.stepsize)
        capacities.append(float(np.mean([f.sum() for _, _, f in batch])))
    return central, capacities


class TestTrainLoop:
    def setup_method(self):
        self.topo = generate_topology(5, seed=1)
        self.chan = ChannelConfig()
        self.policy = tiny_policy(seed=4)

    def test_zero_stepsize_freezes_everything(self):
        cfg = TrainConfig(stepsize=0.0, batch_size=2, iterations=5, rollout_len=4, seed=0)
        final, trace = train_loop(
            cfg, self.topo, self.chan, all_active(5), self.policy, p0=2.0, p_max=5.0
        )
        np.testing.assert_array_equal(final.filters, self.policy.filters)
        np.testing.assert_array_equal(final.readout, self.policy.readout)
        assert all(rec.mu == 0.0 and rec.lam_norm == np.sqrt(5.0) for rec in trace.records)

    def test_all_active_patterns_match_synchronous_loop_bitwise(self):
        cfg = TrainConfig(stepsize=0.05, batch_size=3, iterations=6, rollout_len=4, seed=9)
        final, trace = train_loop(
            cfg, self.topo, self.chan, all_active(5), self.policy, p0=2.0, p_max=5.0
        )
        ref, ref_caps = synchronous_reference_loop(
            cfg, self.topo, self.chan, all_active(5), self.policy, p0=2.0, p_max=5.0
        )
        assert np.array_equal(final.filters, ref.filters)
        assert np.array_equal(final.readout, ref.readout)
        assert [rec.sum_capacity for rec in trace.records] == ref_caps

    def test_divergence_guard_trips(self):
        huge = PolicyParameters(
            np.full_like(self.policy.filters, 10.0), np.full_like(self.policy.readout, 10.0)
        )
        cfg = TrainConfig(
            stepsize=0.5, batch_size=2, iterations=50, rollout_len=4, seed=2,
            divergence_limit=5.0,
        )
        with pytest.raises(TrainingDiverged, match="iteration 0"):
            train_loop(cfg, self.topo, self.chan, all_active(5), huge, p0=2.0, p_max=5.0)

    def test_mu_nonnegative_throughout(self):
        cfg = TrainConfig(stepsize=0.05, batch_size=2, iterations=25, rollout_len=4, seed=5)
        _, trace = train_loop(
            cfg, self.topo, self.chan, all_active(5), self.policy, p0=2.0, p_max=3.0
        )
        assert all(rec.mu >= 0.0 for rec in trace.records)

    def test_deterministic_given_seed(self):
        cfg = TrainConfig(stepsize=0.03, batch_size=2, iterations=4, rollout_len=4, seed=12)
        args = (self.topo, self.chan, all_active(5), self.policy)
        a, _ = train_loop(cfg, *args, p0=2.0, p_max=5.0)
        b, _ = train_loop(cfg, *args, p0=2.0, p_max=5.0)
        assert np.array_equal(a.filters, b.filters)
        assert np.array_equal(a.readout, b.readout)

    def test_hook_extras_land_in_trace(self, tmp_path):
        cfg = TrainConfig(stepsize=0.0, batch_size=1, iterations=3, rollout_len=4, seed=0)
        _, trace = train_loop(
            cfg, self.topo, self.chan, all_active(5), self.policy, p0=2.0, p_max=5.0,
            hook=lambda it, params, rollouts: {"marker": float(it)},
        )
        assert [rec.extras["marker"] for rec in trace.records] == [0.0, 1.0, 2.0]
        path = tmp_path / "trace.csv"
        trace.to_csv(path)
        header = path.read_text().splitlines()[0]
        assert header == "iteration,sum_capacity,total_power,lam_norm,mu,param_norm,marker"

    def test_baseline_variant_runs_and_differs(self):
        base = TrainConfig(stepsize=0.05, batch_size=2, iterations=8, rollout_len=4, seed=3)
        with_bl = TrainConfig(
            stepsize=0.05, batch_size=2, iterations=8, rollout_len=4, seed=3,
            use_baseline=True,
        )
        args = (self.topo, self.chan, all_active(5), self.policy)
        a, _ = train_loop(base, *args, p0=2.0, p_max=5.0)
        b, _ = train_loop(with_bl, *args, p0=2.0, p_max=5.0)
        assert not np.array_equal(a.filters, b.filters)


class TestTrainConfig:
    def test_validation(self):
        with pytest.raises(ValueError):
            TrainConfig(stepsize=-0.1)
        with pytest.raises(ValueError):
            TrainConfig(batch_size=0)
        with pytest.raises(ValueError):
            TrainConfig(mu_convention="sideways")
