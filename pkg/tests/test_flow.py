"""Flow head: prior injection, vector-field trunk, Euler integration with
stubbed fields, OT path targets, and the episode policy."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from phaseflow.flow import (
    FlowParams,
    flow_target,
    inject_prior,
    integrate_flow,
    sigma_features,
    vector_field,
)
from phaseflow.tensor import Tensor, grad_check, linear, square, tsum

H, D, DA = 5, 16, 3


def make_flow(seed=0, horizon=H, d_model=D, n_blocks=2):
    return FlowParams(np.random.default_rng(seed), d_model=d_model,
                      horizon=horizon, d_act=DA, n_blocks=n_blocks)


class TestInjectPrior:
    def test_lambda_zero_is_plain_embedding(self):
        flow = make_flow()
        rng = np.random.default_rng(1)
        a = rng.standard_normal((H, DA))
        mu = rng.standard_normal((H, DA))
        out = inject_prior(flow, Tensor(a), Tensor(mu), 0.0)
        ref = linear(Tensor(a), flow.e_w, flow.e_b)
        assert np.array_equal(out.data, ref.data)

    def test_zeroed_embedding_leaves_projection(self):
        flow = make_flow()
        flow.e_w.data[:] = 0.0
        flow.e_b.data[:] = 0.0
        rng = np.random.default_rng(2)
        a = rng.standard_normal((H, DA))
        mu = rng.standard_normal((H, DA))
        out = inject_prior(flow, Tensor(a), Tensor(mu), 1.0)
        assert np.allclose(out.data, mu @ flow.proj_w.data, atol=1e-12)

    def test_affine_in_lambda(self):
        flow = make_flow()
        rng = np.random.default_rng(3)
        a = rng.standard_normal((H, DA))
        mu = rng.standard_normal((H, DA))
        e = linear(Tensor(a), flow.e_w, flow.e_b).data
        l1, l2 = 0.7, 1.9
        lhs = (inject_prior(flow, Tensor(a), Tensor(mu), l1).data
               + inject_prior(flow, Tensor(a), Tensor(mu), l2).data - e)
        rhs = inject_prior(flow, Tensor(a), Tensor(mu), l1 + l2).data
        assert np.allclose(lhs, rhs, atol=1e-10)


class TestVectorField:
    def test_zero_head_gives_zero_velocity(self):
        flow = make_flow()
        flow.head_w.data[:] = 0.0
        flow.head_b.data[:] = 0.0
        rng = np.random.default_rng(4)
        v = vector_field(flow, Tensor(rng.standard_normal((H, D))), 0.5,
                         Tensor(rng.standard_normal(D)),
                         Tensor(rng.standard_normal(D)))
        assert np.array_equal(v.data, np.zeros((H, DA)))

    @pytest.mark.parametrize("horizon", [1, 8, 16])
    def test_output_shape(self, horizon):
        flow = make_flow(horizon=horizon)
        rng = np.random.default_rng(5)
        v = vector_field(flow, Tensor(rng.standard_normal((horizon, D))), 0.1,
                         Tensor(rng.standard_normal(D)),
                         Tensor(rng.standard_normal(D)))
        assert v.shape == (horizon, DA)

    def test_gradient(self):
        flow = make_flow(n_blocks=1, horizon=3)
        rng = np.random.default_rng(6)
        e = Tensor(rng.standard_normal((3, D)), requires_grad=True)
        phi = Tensor(rng.standard_normal(D), requires_grad=True)
        zp = Tensor(rng.standard_normal(D), requires_grad=True)
        u = Tensor(rng.standard_normal((3, DA)))

        def f():
            v = vector_field(flow, e, 0.3, phi, zp)
            return tsum(square(v - u)) * 1e-2

        params = [e, phi, zp] + list(flow.parameters().values())
        err = grad_check(f, params, step=1e-5, max_coords=4)
        assert err < 1e-3

    def test_sigma_conditioning_matters(self):
        flow = make_flow()
        rng = np.random.default_rng(7)
        e = Tensor(rng.standard_normal((H, D)))
        phi = Tensor(rng.standard_normal(D))
        zp = Tensor(rng.standard_normal(D))
        v0 = vector_field(flow, e, 0.0, phi, zp).data
        v1 = vector_field(flow, e, 1.0, phi, zp).data
        assert not np.allclose(v0, v1)


class TestFlowTarget:
    def test_endpoints(self):
        rng = np.random.default_rng(8)
        a0 = rng.standard_normal((H, DA))
        a1 = rng.standard_normal((H, DA))
        at0, u = flow_target(a0, a1, 0.0)
        assert np.array_equal(at0, a0)
        at1, _ = flow_target(a0, a1, 1.0)
        assert np.array_equal(at1, a1)
        assert np.array_equal(u, a1 - a0)

    def test_midpoint(self):
        a_sigma, u = flow_target(np.array([0.0]), np.array([2.0]), 0.5)
        assert a_sigma.tolist() == [1.0]
        assert u.tolist() == [2.0]

    def test_sigma_domain_checked(self):
        with pytest.raises(ValueError):
            flow_target(np.zeros(2), np.ones(2), 1.5)

    @settings(max_examples=40, deadline=None)
    @given(st.floats(min_value=0.0, max_value=1.0),
           st.floats(min_value=0.0, max_value=1.0))
    def test_velocity_is_sigma_independent(self, s1, s2):
        rng = np.random.default_rng(9)
        a0 = rng.standard_normal(4)
        a1 = rng.standard_normal(4)
        _, u1 = flow_target(a0, a1, s1)
        _, u2 = flow_target(a0, a1, s2)
        assert np.array_equal(u1, u2)


class TestIntegrateFlow:
    def test_constant_field_exact_any_steps(self):
        rng = np.random.default_rng(10)
        c = rng.standard_normal((H, DA))
        a1 = rng.standard_normal((H, DA))
        for steps in (1, 3, 10, 37):
            out = integrate_flow(lambda a, s: c, a1, steps)
            assert np.allclose(out, a1 - c, atol=1e-12)

    def test_linear_field_first_order_convergence(self):
        rng = np.random.default_rng(11)
        a1 = rng.standard_normal((H, DA))
        exact = a1 * np.exp(-1.0)
        errors = []
        steps = 10
        for _ in range(4):
            out = integrate_flow(lambda a, s: a, a1, steps)
            errors.append(np.linalg.norm(out - exact))
            steps *= 2
        for i in range(3):
            ratio = errors[i] / errors[i + 1]
            assert 1.8 <= ratio <= 2.2

    def test_divergence_raises_with_step_index(self):
        def field(a, s):
            return a * 1e200

        with pytest.raises(Exception, match="step"):
            integrate_flow(field, np.ones((2, 2)), 8)

    def test_steps_validated(self):
        with pytest.raises(ValueError):
            integrate_flow(lambda a, s: a, np.zeros(3), 0)


class TestSigmaFeatures:
    def test_shape_and_distinctness(self):
        f0 = sigma_features(0.0, D)
        f1 = sigma_features(1.0, D)
        assert f0.shape == (1, D)
        assert not np.allclose(f0, f1)

    def test_batched(self):
        f = sigma_features(np.array([0.1, 0.9]), D)
        assert f.shape == (2, D)
        assert not np.allclose(f[0], f[1])


class TestFlowPolicy:
    def make_bundle(self, seed=0, d=16):
        from phaseflow import env
        from phaseflow.bank import MemoryBank, PrototypeEntry, QueryHead
        from phaseflow.decoder import PbdParams
        from phaseflow.encoder import BehaviorEncoder
        from phaseflow.flow import PolicyBundle
        from phaseflow.trajectory import TaskStats

        rng = np.random.default_rng(seed)
        enc = BehaviorEncoder(rng, d_obs=env.D_OBS, d_act=env.D_ACT,
                              num_tasks=8, d_model=d, n_blocks=1, d_state=4)
        entries = []
        for i in range(6):
            key = rng.standard_normal(d)
            entries.append(PrototypeEntry(
                key=(key / np.linalg.norm(key)).astype(np.float32),
                value=rng.standard_normal(d).astype(np.float32),
                task_id=i % 8, episode_id=f"e{i}"))
        bank = MemoryBank(entries=entries, kappa=0.1)
        stats = {t.task_id: TaskStats(
            action_mean=np.zeros(env.D_ACT), action_std=np.ones(env.D_ACT),
            obs_mean=np.zeros(env.D_OBS), obs_std=np.ones(env.D_OBS))
            for t in env.TASKS}
        return PolicyBundle(
            encoder=enc, query_head=QueryHead(rng, d),
            pbd=PbdParams(rng, d_model=d, horizon=4, d_act=env.D_ACT),
            flow=FlowParams(rng, d_model=d, horizon=4, d_act=env.D_ACT,
                            n_blocks=1),
            bank=bank, stats=stats)

    def rollout(self, policy, task_id=0, seed=3, steps=12):
        from phaseflow import env

        spec = env.TASKS[task_id]
        state = env.reset(spec, seed)
        policy.reset(task_id, seed)
        actions = []
        for _ in range(steps):
            a = policy.act(env.make_obs(state))
            actions.append(a.copy())
            state = env.step(state, a)
        return np.stack(actions)

    def test_identical_seeds_identical_actions(self):
        from phaseflow.flow import FlowPolicy

        bundle = self.make_bundle()
        p1 = FlowPolicy(bundle, flow_steps=4, k_retrieve=3)
        p2 = FlowPolicy(bundle, flow_steps=4, k_retrieve=3)
        assert np.array_equal(self.rollout(p1), self.rollout(p2))

    def test_bank_and_prototype_frozen_during_episode(self):
        from phaseflow.flow import FlowPolicy

        bundle = self.make_bundle()
        policy = FlowPolicy(bundle, flow_steps=4, k_retrieve=3, exec_horizon=2)
        fp_before = bundle.bank.fingerprint()
        self.rollout(policy, steps=6)
        proto_mid = policy._z_proto.copy()
        anchors_mid = policy._anchors.copy()
        # keep stepping: retrieval must not rerun
        from phaseflow import env

        spec = env.TASKS[0]
        state = env.reset(spec, 3)
        for _ in range(5):
            state = env.step(state, policy.act(env.make_obs(state)))
        assert bundle.bank.fingerprint() == fp_before
        assert np.array_equal(policy._z_proto, proto_mid)
        assert np.array_equal(policy._anchors, anchors_mid)

    def test_lambda_zero_makes_prior_path_inert(self):
        from phaseflow.flow import FlowPolicy

        bundle = self.make_bundle()
        base = FlowPolicy(bundle, lambda_guidance=0.0, flow_steps=4,
                          k_retrieve=3)
        seq1 = self.rollout(base)
        # scrambling the prior mean head must not change a single action
        bundle.pbd.mu_w.data[:] = 1234.5
        bundle.pbd.mu_b.data[:] = -7.0
        again = FlowPolicy(bundle, lambda_guidance=0.0, flow_steps=4,
                           k_retrieve=3)
        seq2 = self.rollout(again)
        assert np.array_equal(seq1, seq2)

    def test_act_requires_reset(self):
        from phaseflow.flow import FlowPolicy

        bundle = self.make_bundle()
        policy = FlowPolicy(bundle)
        with pytest.raises(RuntimeError, match="reset"):
            policy.act(np.zeros(17))

    def test_random_proto_mode_uses_bank_entry(self):
        from phaseflow.flow import FlowPolicy

        bundle = self.make_bundle()
        policy = FlowPolicy(bundle, flow_steps=4, k_retrieve=3,
                            proto_mode="random")
        self.rollout(policy, steps=2)
        assert policy.retrieval["mode"] == "random"
        idx = policy.retrieval["indices"][0]
        assert np.array_equal(policy._z_proto,
                              bundle.bank.entries[idx].value.astype(np.float64))
