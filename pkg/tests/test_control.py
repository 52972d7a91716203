"""Wave control problem: field calculus, assembly audits, cost evaluation."""

import json

import numpy as np
import numpy.testing as npt
import pytest

from wavehjb.bsde import RegressionBasis
from wavehjb.control import (_XI, SIMPSON_POINTS, _simpson_weights,
                             assemble_wave_problem, closed_loop_simulate,
                             default_candidate_policies, displacement_field,
                             evaluate_cost, fundamental_relation_report,
                             integrate_field, project_field)
from wavehjb.hamiltonian import Driver, DriverGrowthParams, optimal_control
from wavehjb.kolmogorov import ValueField, picard_mild_solve
from wavehjb.semigroup import QuadratureScheme, apply_semigroup
from wavehjb.spectral import build_mode_basis


def wave_config():
    return {
        "problem": {
            "modes": 2, "horizon": 1.0, "steps": 8,
            "initial": {"position": {"1": 0.9}, "velocity": {"2": 0.3}},
            "forcing": "zero",
            "state_cost": {"name": "soft_square", "params": {"scale": 1.0}},
            "control_cost": {"scale": 1.0},
            "terminal": {"name": "soft_square", "params": {"scale": 3.0}},
        },
        "hamiltonian": {"q": 2.0},
        "growth": {"r": 0.0},
    }


@pytest.fixture(scope="module")
def wave_bundle():
    prob = assemble_wave_problem(wave_config())
    quad = QuadratureScheme(sample_count=512, seed=2)
    vf = picard_mild_solve(prob.phi, prob.hjb_driver(seed=5), prob.grid(0.0),
                           quad, tol=2e-3, modes=prob.modes,
                           basis=RegressionBasis(prob.modes), x0=prob.x0,
                           seed=9, cloud_size=96)
    return prob, vf


class TestFieldCalculus:
    def test_displacement_of_single_mode(self):
        modes = build_mode_basis(3)
        states = np.zeros((2, 3))
        states[0, 2] = 1.4
        field = displacement_field(states, modes)
        npt.assert_allclose(field, 1.4 * np.sqrt(2.0) * np.sin(3 * np.pi * _XI),
                            atol=1e-12)

    def test_projection_inverts_displacement(self):
        modes = build_mode_basis(8)
        gen = np.random.default_rng(3)
        states = gen.normal(size=(20, 2, 8))
        back = project_field(displacement_field(states, modes), modes)
        npt.assert_allclose(back, states[..., 0, :], atol=1e-10)

    def test_integrate_single_mode(self):
        # int_0^1 sqrt(2) sin(pi xi) dxi = 2 sqrt(2) / pi
        modes = build_mode_basis(1)
        states = np.array([[1.0], [0.0]])
        got = integrate_field(displacement_field(states, modes))
        npt.assert_allclose(got, 2.0 * np.sqrt(2.0) / np.pi, atol=1e-9)

    def test_squared_mode_integrates_exactly(self):
        # int (y1 e_1)^2 = y1^2: the integrand has frequency 2, far below
        # the 129-point grid's exactness range
        modes = build_mode_basis(2)
        states = np.zeros((5, 2, 2))
        states[:, 0, 0] = np.linspace(-2.0, 2.0, 5)
        got = integrate_field(displacement_field(states, modes) ** 2)
        npt.assert_allclose(got, states[:, 0, 0] ** 2, atol=1e-12)

    def test_simpson_needs_odd_count(self):
        with pytest.raises(ValueError, match="odd"):
            _simpson_weights(10)
        w = _simpson_weights(SIMPSON_POINTS)
        npt.assert_allclose(w.sum(), 1.0, rtol=1e-14)


class TestAssembly:
    def test_valid_config_builds(self):
        prob = assemble_wave_problem(wave_config())
        assert prob.modes.count == 2
        assert prob.steps == 8
        npt.assert_array_equal(prob.x0, np.array([[0.9, 0.0], [0.0, 0.3]]))
        assert len(prob.grid(0.0)) == 9
        assert prob.audits["hypotheses"]["accepted"]
        assert prob.audits["g_bound"] == 0.0
        # zero forcing projects to exactly zero drift
        gen = np.random.default_rng(0)
        npt.assert_array_equal(prob.drift_g(gen.normal(size=(6, 2, 2))),
                               np.zeros((6, 2)))

    def test_sin_forcing_audit_passes(self):
        cfg = wave_config()
        cfg["problem"]["forcing"] = {"name": "sin", "params": {"kappa": 0.4}}
        prob = assemble_wave_problem(cfg)
        npt.assert_allclose(prob.audits["g_bound"], np.sqrt(4.0) * 0.4, rtol=1e-14)
        assert prob.audits["g_sampled_sup"] <= prob.audits["g_bound"]
        assert prob.audits["g_sampled_lipschitz"] <= 0.4 * 1.05
        # projection against a pinned state: G_k = kappa int sin(y(xi)) e_k
        modes = prob.modes
        state = np.array([[0.8, -0.3], [0.1, 0.2]])
        y = displacement_field(state, modes)
        expect = project_field(0.4 * np.sin(y), modes)
        npt.assert_allclose(prob.drift_g(state), expect, rtol=1e-13)

    def test_driver_assembles_hamiltonian_plus_running_cost(self):
        prob = assemble_wave_problem(wave_config())
        driver = prob.hjb_driver()
        gen = np.random.default_rng(1)
        x = gen.normal(size=(10, 2, 2))
        z = gen.normal(size=(10, 2))
        expect = prob.gbar(0.0, x) - 0.25 * np.sum(z**2, axis=-1)
        npt.assert_allclose(driver(0.0, x, np.zeros(10), z), expect, rtol=1e-12)

    def test_forced_driver_adds_drift_term(self):
        cfg = wave_config()
        cfg["problem"]["forcing"] = {"name": "sin", "params": {"kappa": 0.4}}
        prob = assemble_wave_problem(cfg)
        driver = prob.hjb_driver(seed=3)
        gen = np.random.default_rng(2)
        x = gen.normal(size=(10, 2, 2))
        z = gen.normal(size=(10, 2))
        expect = (prob.gbar(0.0, x) - 0.25 * np.sum(z**2, axis=-1)
                  + np.sum(z * prob.drift_g(x), axis=-1))
        npt.assert_allclose(driver(0.0, x, np.zeros(10), z), expect, rtol=1e-12)

    def test_growth_hypotheses_rejection(self):
        cfg = wave_config()
        cfg["growth"]["r"] = 1.2
        with pytest.raises(ValueError, match="growth hypotheses rejected"):
            assemble_wave_problem(cfg)

    def test_quadratic_terminal_outside_certified_range(self):
        cfg = wave_config()
        cfg["hamiltonian"]["q"] = 1.5
        cfg["growth"]["r"] = 0.4
        cfg["problem"]["terminal"] = {"name": "quadratic"}
        with pytest.raises(ValueError, match="state growth exponent"):
            assemble_wave_problem(cfg)

    def test_unknown_functional_rejected(self):
        cfg = wave_config()
        cfg["problem"]["forcing"] = "soft_square"
        with pytest.raises(ValueError, match="unknown forcing"):
            assemble_wave_problem(cfg)

    def test_bad_horizon_rejected(self):
        cfg = wave_config()
        cfg["problem"]["horizon"] = -1.0
        with pytest.raises(ValueError, match="horizon"):
            assemble_wave_problem(cfg)


@pytest.fixture(scope="module")
def terminal_only():
    cfg = wave_config()
    cfg["problem"]["state_cost"] = "zero"
    cfg["problem"]["terminal"] = {"name": "soft_square", "params": {"scale": 1.0}}
    return assemble_wave_problem(cfg)


class TestCostEvaluation:
    def test_uncontrolled_cost_matches_semigroup(self, terminal_only):
        prob = terminal_only
        report = evaluate_cost(prob, lambda s, states: np.zeros(2),
                               n_paths=40_000, seed=5)
        mc = QuadratureScheme(sample_count=200_000, seed=31)
        ref, ref_se = apply_semigroup(prob.phi, prob.horizon, prob.x0,
                                      prob.modes, mc)
        assert report.state_cost == 0.0
        assert report.control_cost == 0.0
        gap = abs(report.mean - ref)
        assert gap <= 3.0 * np.hypot(report.se, ref_se) + 1e-3

    def test_constant_policy_control_cost_exact(self, terminal_only):
        prob = terminal_only
        u0 = np.array([0.3, -0.2])
        report = evaluate_cost(prob, lambda s, states: u0, n_paths=200, seed=1)
        expect = prob.horizon * prob.spec.control_cost(u0)
        npt.assert_allclose(report.control_cost, expect, rtol=1e-14)
        npt.assert_allclose(report.q_moment,
                            prob.horizon * np.sum(np.abs(u0) ** 2), rtol=1e-14)
        # identical per-path controls: any residual spread is mean roundoff
        assert report.q_moment_se <= 1e-15

    def test_mean_decomposes_exactly(self, terminal_only):
        prob = terminal_only
        pol = lambda s, states: 0.2 * np.tanh(states[..., 0, :])
        report = evaluate_cost(prob, pol, n_paths=500, seed=2)
        assert report.mean == (report.state_cost + report.control_cost
                               + report.terminal_cost)

    def test_unstable_q_moment_rejected(self, terminal_only):
        prob = terminal_only

        def lopsided(s, states):
            n_paths = states.shape[0]
            u = np.full((n_paths, 2), 0.01)
            u[n_paths // 2:] = 10.0
            return u

        with pytest.raises(ValueError, match="inadmissible"):
            evaluate_cost(prob, lopsided, n_paths=400, seed=3)

    def test_nonfinite_cost_rejected(self, terminal_only):
        prob = terminal_only
        with np.errstate(over="ignore", invalid="ignore"):
            with pytest.raises(ValueError, match="not admissible"):
                evaluate_cost(prob, lambda s, states: np.full(2, 1e200),
                              n_paths=64, seed=4)

    def test_start_time_outside_horizon(self, terminal_only):
        with pytest.raises(ValueError, match="outside"):
            evaluate_cost(terminal_only, lambda s, states: np.zeros(2), t=1.0,
                          n_paths=8, seed=0)


class TestClosedLoop:
    def test_deterministic_rollout(self, wave_bundle):
        prob, vf = wave_bundle
        paths1, rep1 = closed_loop_simulate(prob, vf, n_paths=500, seed=21)
        paths2, rep2 = closed_loop_simulate(prob, vf, n_paths=500, seed=21)
        npt.assert_array_equal(paths1.states, paths2.states)
        assert rep1 == rep2

    def test_grid_mismatch_rejected(self, wave_bundle):
        prob, vf = wave_bundle
        cfg = wave_config()
        cfg["problem"]["steps"] = 4
        other = assemble_wave_problem(cfg)
        with pytest.raises(ValueError, match="grid"):
            closed_loop_simulate(other, vf, n_paths=8, seed=0)

    def test_zero_field_reduces_to_uncontrolled(self, wave_bundle):
        prob, _ = wave_bundle
        zero_growth = DriverGrowthParams(l=1.0, r=0.0, gamma_z=1.0)
        zero_driver = Driver(fn=lambda t, x, y, z: np.zeros(np.shape(y)),
                             growth=zero_growth)
        null_field = picard_mild_solve(
            lambda s: np.zeros(s.shape[:-2]), zero_driver, prob.grid(0.0),
            QuadratureScheme(sample_count=256, seed=1), tol=1e-3,
            modes=prob.modes, x0=prob.x0, seed=13, cloud_size=64)
        paths, rep = closed_loop_simulate(prob, null_field, n_paths=400, seed=6)
        base = evaluate_cost(prob, lambda s, states: np.zeros(2),
                             n_paths=400, seed=6)
        assert rep == base

    def test_nonfinite_gradient_raises(self, wave_bundle):
        prob, vf = wave_bundle
        doc = json.loads(json.dumps(vf.to_json_dict()))
        doc["reps"][0]["grad"]["coeffs"][0][0] = float("inf")
        broken = ValueField.from_json_dict(doc)
        with pytest.raises(FloatingPointError, match="non-finite"):
            closed_loop_simulate(prob, broken, n_paths=8, seed=0)


class TestCandidatePolicies:
    def test_nine_named_candidates(self, wave_bundle):
        prob, vf = wave_bundle
        names = [name for name, _ in default_candidate_policies(prob, vf)]
        assert names == ["zero", "const_a", "const_b", "periodic", "random_1",
                         "random_2", "random_3", "feedback", "feedback_x2"]

    def test_policies_emit_control_coefficients(self, wave_bundle):
        prob, vf = wave_bundle
        states = np.random.default_rng(1).normal(size=(7, 2, 2))
        t0 = float(prob.grid(0.0)[0])
        for name, pol in default_candidate_policies(prob, vf):
            u = np.asarray(pol(t0, states))
            assert np.broadcast_shapes(u.shape, (7, 2)) == (7, 2), name
            assert np.all(np.isfinite(u)), name

    def test_random_tables_frozen_by_seed(self, wave_bundle):
        prob, vf = wave_bundle
        states = np.zeros((3, 2, 2))
        t0 = float(prob.grid(0.0)[0])
        a = dict(default_candidate_policies(prob, vf, seed=4))
        b = dict(default_candidate_policies(prob, vf, seed=4))
        c = dict(default_candidate_policies(prob, vf, seed=5))
        npt.assert_array_equal(a["random_2"](t0, states), b["random_2"](t0, states))
        assert not np.array_equal(a["random_2"](t0, states),
                                  c["random_2"](t0, states))
        assert not np.array_equal(a["random_1"](t0, states),
                                  a["random_3"](t0, states))

    def test_scaled_feedback_doubles_feedback(self, wave_bundle):
        prob, vf = wave_bundle
        states = np.random.default_rng(2).normal(size=(5, 2, 2))
        t0 = float(prob.grid(0.0)[0])
        pols = dict(default_candidate_policies(prob, vf))
        npt.assert_array_equal(pols["feedback_x2"](t0, states),
                               2.0 * pols["feedback"](t0, states))
        npt.assert_array_equal(
            pols["feedback"](t0, states),
            optimal_control(prob.spec, vf.bgrad_at(t0, states)))


class TestFundamentalRelation:
    def test_wave_benchmark_relation(self, wave_bundle):
        prob, vf = wave_bundle
        report = fundamental_relation_report(prob, vf, n_paths=8000, seed=11)
        assert report["value"] == vf.value_at_origin
        assert len(report["candidates"]) == 9
        for row in report["candidates"]:
            assert row["ok"], row
            assert row["margin"] >= -3.0 * row["margin_se"]
        assert report["assertions"]["lower_bound_ok"]
        assert report["assertions"]["feedback_smallest"]
        assert report["assertions"]["feedback_beats_scaled"]
        assert report["passed"]

    def test_open_loop_candidates_strictly_above(self, wave_bundle):
        prob, vf = wave_bundle
        report = fundamental_relation_report(prob, vf, n_paths=8000, seed=11)
        rows = {r["name"]: r for r in report["candidates"]}
        for name in ("const_a", "const_b", "periodic", "random_1", "random_2",
                     "random_3"):
            assert rows[name]["margin"] > 3.0 * rows[name]["margin_se"], name

    def test_custom_candidate_list(self, wave_bundle):
        prob, vf = wave_bundle
        report = fundamental_relation_report(
            prob, vf, candidate_policies=[("only", lambda s, st: np.zeros(2))],
            n_paths=400, seed=3)
        assert [r["name"] for r in report["candidates"]] == ["only"]
        assert report["assertions"]["feedback_smallest"] is None
        assert not report["passed"]
