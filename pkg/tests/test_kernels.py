"""Cross-checks of the compiled kernels against the plain NumPy reference path.

Every kernel has an independent twin: the ODE right-hand side and the
controller forward pass exist both here (vectorised NumPy) and in the
compiled module (scalar loops). These tests pin the two routes together
and check the hand-written adjoints against finite differences.
"""

from __future__ import annotations

import numpy as np
import pytest

from colflux import _kernels as k
from colflux.column import (
    N_MEAS,
    ColumnState,
    Controls,
    FeedConditions,
    apply_noise,
    derivatives,
    measure,
)
from colflux.diffsim import SimConfig, cost_vector, stage_cost
from colflux.policy import PolicyParams, PolicySpec, forward
from conftest import random_valid_states


def _rhs_np(z, controls, feed, params):
    d = derivatives(ColumnState.from_vector(z), controls, feed, params)
    return d.as_vector()


def _rhs_k(z, controls, feed, params):
    out = np.empty(z.size)
    status = k.rhs(
        z, controls.lt, controls.vb, feed.F, feed.zF, feed.qF,
        params.pack(), params.N_T, params.N_F - 1, out,
    )
    assert status == 0
    return out


class TestRhsKernel:
    def test_matches_reference_on_random_states(self, params):
        feed = FeedConditions(F=1.1, zF=0.55, qF=0.85)
        controls = Controls(lt=2.4, vb=3.1)
        for state in random_valid_states(params, 25, seed=42):
            z = state.as_vector()
            ref = _rhs_np(z, controls, feed, params)
            got = _rhs_k(z, controls, feed, params)
            assert got == pytest.approx(ref, rel=1e-13, abs=1e-13)

    def test_singular_holdup_status_is_stage_index(self, params, nominal_feed):
        z = ColumnState.equimolar(params).as_vector()
        z[6] = 1e-8
        out = np.empty(z.size)
        status = k.rhs(
            z, 2.5, 3.0, 1.0, 0.5, 1.0, params.pack(), params.N_T,
            params.N_F - 1, out,
        )
        assert status == 7


class TestRhsVjp:
    def test_state_cotangent_matches_finite_differences(self, params):
        feed = FeedConditions(F=0.95, zF=0.45, qF=0.9)
        controls = Controls(lt=2.6, vb=3.0)
        state = random_valid_states(params, 1, seed=5)[0]
        z = state.as_vector()
        rng = np.random.default_rng(1)
        wbar = rng.normal(0, 1, z.size)

        zbar = np.empty(z.size)
        ubar = np.empty(2)
        k.rhs_vjp(
            z, controls.lt, controls.vb, feed.F, feed.zF, feed.qF,
            params.pack(), params.N_T, params.N_F - 1, wbar, zbar, ubar,
        )

        eps = 1e-7
        for idx in rng.choice(z.size, size=20, replace=False):
            zp, zm = z.copy(), z.copy()
            zp[idx] += eps
            zm[idx] -= eps
            fd = (
                wbar @ _rhs_np(zp, controls, feed, params)
                - wbar @ _rhs_np(zm, controls, feed, params)
            ) / (2 * eps)
            assert abs(zbar[idx] - fd) / max(1.0, abs(fd)) < 1e-6

    def test_control_cotangent_matches_finite_differences(self, params):
        feed = FeedConditions(F=1.05, zF=0.5, qF=1.0)
        state = random_valid_states(params, 1, seed=6)[0]
        z = state.as_vector()
        rng = np.random.default_rng(2)
        wbar = rng.normal(0, 1, z.size)

        zbar = np.empty(z.size)
        ubar = np.empty(2)
        k.rhs_vjp(
            z, 2.5, 3.1, feed.F, feed.zF, feed.qF, params.pack(),
            params.N_T, params.N_F - 1, wbar, zbar, ubar,
        )
        eps = 1e-7
        fd_lt = (
            wbar @ _rhs_np(z, Controls(2.5 + eps, 3.1), feed, params)
            - wbar @ _rhs_np(z, Controls(2.5 - eps, 3.1), feed, params)
        ) / (2 * eps)
        fd_vb = (
            wbar @ _rhs_np(z, Controls(2.5, 3.1 + eps), feed, params)
            - wbar @ _rhs_np(z, Controls(2.5, 3.1 - eps), feed, params)
        ) / (2 * eps)
        assert ubar[0] == pytest.approx(fd_lt, rel=1e-6, abs=1e-8)
        assert ubar[1] == pytest.approx(fd_vb, rel=1e-6, abs=1e-8)


def _policy_setup(params, seed, slots=None, width=7):
    slots = tuple(range(N_MEAS)) if slots is None else slots
    spec = PolicySpec(input_slots=slots, hidden=(width,))
    pol = PolicyParams.init(spec, seed=seed)
    state = random_valid_states(params, 1, seed=seed + 100)[0]
    feed = FeedConditions(F=1.08, zF=0.52, qF=0.93)
    rng = np.random.default_rng(seed + 7)
    eta = rng.uniform(-0.05, 0.05, N_MEAS)
    return spec, pol, state, feed, eta


def _policy_eval_k(pol, state, feed, eta, params):
    spec = pol.spec
    ni, w = spec.n_inputs, spec.width
    zeta = np.empty(ni)
    g = np.empty(ni)
    hid = np.empty(w)
    u = np.empty(2)
    k._policy_eval(
        state.as_vector(), feed.F, feed.zF, feed.qF, eta, spec.slot_array(),
        pol.flatten(), ni, w, params.pack(), params.N_T, zeta, g, hid, u,
    )
    return u


class TestPolicyKernel:
    def test_matches_reference_forward(self, params, noise_spec):
        for seed in (0, 1, 2):
            _, pol, state, feed, eta = _policy_setup(params, seed)
            u_k = _policy_eval_k(pol, state, feed, eta, params)
            noisy = apply_noise(measure(state, feed, params), eta, noise_spec)
            u_ref = forward(pol, noisy, params)
            assert u_k[0] == pytest.approx(u_ref.lt, rel=1e-13)
            assert u_k[1] == pytest.approx(u_ref.vb, rel=1e-13)

    def test_matches_reference_on_reduced_slots(self, params, noise_spec):
        slots = (4, 9, 15, 20)
        _, pol, state, feed, eta = _policy_setup(params, 3, slots=slots, width=12)
        u_k = _policy_eval_k(pol, state, feed, eta, params)
        noisy = apply_noise(measure(state, feed, params), eta, noise_spec)
        u_ref = forward(pol, noisy, params)
        assert u_k[0] == pytest.approx(u_ref.lt, rel=1e-13)
        assert u_k[1] == pytest.approx(u_ref.vb, rel=1e-13)

    def test_vjp_theta_matches_finite_differences(self, params):
        spec, pol, state, feed, eta = _policy_setup(params, 9, width=5)
        ni, w = spec.n_inputs, spec.width
        theta = pol.flatten()
        rng = np.random.default_rng(11)
        ubar = rng.normal(0, 1, 2)

        gth = np.zeros(spec.theta_dim)
        zbar = np.zeros(2 * params.N_T)
        k._policy_vjp(
            state.as_vector(), feed.F, feed.zF, feed.qF, eta,
            spec.slot_array(), theta, ni, w, params.pack(), params.N_T,
            ubar, gth, zbar, np.empty(ni), np.empty(ni), np.empty(w),
            np.empty(ni), np.empty(2),
        )

        def scalar(t):
            u = _policy_eval_k(pol.with_theta(t), state, feed, eta, params)
            return float(ubar @ u)

        eps = 1e-6
        for idx in rng.choice(theta.size, size=25, replace=False):
            tp, tm = theta.copy(), theta.copy()
            tp[idx] += eps
            tm[idx] -= eps
            fd = (scalar(tp) - scalar(tm)) / (2 * eps)
            assert abs(gth[idx] - fd) / max(1.0, abs(fd)) < 1e-6

    def test_vjp_state_matches_finite_differences(self, params):
        spec, pol, state, feed, eta = _policy_setup(params, 14, width=6)
        ni, w = spec.n_inputs, spec.width
        z = state.as_vector()
        rng = np.random.default_rng(15)
        ubar = rng.normal(0, 1, 2)

        gth = np.zeros(spec.theta_dim)
        zbar = np.zeros(2 * params.N_T)
        k._policy_vjp(
            z, feed.F, feed.zF, feed.qF, eta, spec.slot_array(),
            pol.flatten(), ni, w, params.pack(), params.N_T, ubar, gth,
            zbar, np.empty(ni), np.empty(ni), np.empty(w), np.empty(ni),
            np.empty(2),
        )

        def scalar(zv):
            u = _policy_eval_k(pol, ColumnState.from_vector(zv), feed, eta, params)
            return float(ubar @ u)

        eps = 1e-6
        # compositions drive temperatures; the end holdups are measured too
        for idx in list(range(params.N_T, 2 * params.N_T, 3)) + [0, params.N_T - 1]:
            zp, zm = z.copy(), z.copy()
            zp[idx] += eps
            zm[idx] -= eps
            fd = (scalar(zp) - scalar(zm)) / (2 * eps)
            assert abs(zbar[idx] - fd) / max(1.0, abs(fd)) < 1e-6


class TestStageCostKernel:
    def test_matches_reference(self, params):
        config = SimConfig(h=0.005, t_f=1.0)
        cc = cost_vector(config, params)
        rng = np.random.default_rng(33)
        for state in random_valid_states(params, 10, seed=8):
            u = Controls(lt=rng.uniform(0, 2.75), vb=rng.uniform(0, 3.25))
            ref = stage_cost(state, u, config, params)
            got = k._stage_cost(state.as_vector(), u.lt, u.vb, cc, params.N_T)
            assert got == pytest.approx(ref, rel=1e-15, abs=1e-18)
