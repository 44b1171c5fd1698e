import numpy as np
import pytest

from gcontrol.errors import DomainError, NumericalError
from gcontrol.gcore import ScenarioMeasure, brownian_increments, g_scalar
from gcontrol.hjb import worst_case_scenario
from gcontrol.problem import problem_from_config, riccati_closed, riccati_rhs
from gcontrol.simulate import (
    bsde_candidates,
    bsde_identity_residual,
    cost_estimate,
    fixed_order_mean,
    k_accumulate,
    ktilde_accumulate,
    mixed_derivative_check,
    relation_report,
    simulate_forward,
)

C = ScenarioMeasure.constant


def full(p, model, sc, t0, x0, n_steps=2000, n_paths=1, seed=0):
    b = simulate_forward(p, None, sc, t0, x0, n_steps, n_paths, seed=seed)
    b = ktilde_accumulate(bsde_candidates(b, model, p), model, p)
    return k_accumulate(b, p) if p.k_increment else b


class QuadModel:
    """``V = a + b x + c x^2 + d t x`` with exact derivatives."""

    def __init__(self, a, b, c, d=0.0):
        self.a, self.b, self.c, self.d = a, b, c, d

    def value(self, t, x):
        return self.a + self.b * x + self.c * x**2 + self.d * t * x

    def dx(self, t, x):
        return self.b + 2 * self.c * x + self.d * t

    def dxx(self, t, x):
        return 2 * self.c + 0 * x

    def dt(self, t, x):
        return self.d * x

    def dtx(self, t, x):
        return self.d + 0 * x

    def x_step(self, x):
        return 1e-4 * np.maximum(1, np.abs(x))


class TestForward:
    def test_example1_deterministic(self, ex1):
        p, _ = ex1
        b = simulate_forward(p, None, C(1.0), 0.0, -0.6, 100, 50)
        assert b.n_paths == 1
        assert b.X[0, -1] == pytest.approx(0.4, abs=1e-12)

    def test_example3_balanced_path(self, ex3):
        p, _ = ex3
        b = simulate_forward(p, None, C(0.8), 1.0, 0.0, 100, 1)
        np.testing.assert_allclose(b.X[0], b.times - 1.0, atol=1e-12)

    def test_zero_coefficients(self):
        p = problem_from_config({"T": 1.0})
        b = simulate_forward(p, lambda s, x: np.zeros_like(x), C(1.0), 0.0, 0.7, 10, 3)
        assert np.all(b.X == 0.7)

    def test_invariants(self, ex2):
        p, o = ex2
        b = full(p, o, ScenarioMeasure.piecewise_even([0.2, 1.0, 0.5], 0.0, 1.0), 0.0, 1.0, 300, 20)
        assert np.all(b.X[:, 0] == 1.0)
        assert np.all(np.diff(b.QV, axis=1) > 0)
        assert np.all(b.Ktilde[:, 0] == 0) and np.all(np.diff(b.Ktilde, axis=1) <= 1e-12)
        np.testing.assert_allclose(b.QV[:, -1], (0.2 + 1.0 + 0.5) / 3, rtol=1e-12)

    def test_feedback_leaves_control_set(self, ex3):
        p, _ = ex3
        with pytest.raises(DomainError):
            simulate_forward(p, lambda s, x: 3.0 + 0 * x, C(0.8), 1.0, 0.0, 10, 1)

    def test_scenario_out_of_bounds(self, ex3):
        p, _ = ex3
        with pytest.raises(DomainError):
            simulate_forward(p, None, ScenarioMeasure.feedback(lambda t, x: 2.0 + 0 * x), 1.0, 0.0, 10, 1)

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_overflow(self):
        p = problem_from_config({"T": 1.0, "h": {"x": 1e300}, "sigma": {"c": 1.0}, "control": {"finite": [0.0]}})
        with pytest.raises(NumericalError):
            simulate_forward(p, lambda s, x: 0 * x, C(1.0), 0.0, 1.0, 10, 2)

    def test_noise_shape(self, ex2):
        p, _ = ex2
        with pytest.raises(DomainError):
            simulate_forward(p, None, C(1.0), 0.0, 1.0, 10, 2, noise=np.zeros((2, 5)))

    @pytest.mark.parametrize("workers", [2, 4])
    def test_determinism_across_threads(self, ex2, workers):
        p, _ = ex2
        a = simulate_forward(p, None, C(1.0), 0.0, 1.0, 200, 64, seed=9)
        b = simulate_forward(p, None, C(1.0), 0.0, 1.0, 200, 64, seed=9, workers=workers)
        for k in ("X", "B", "QV", "u"):
            assert getattr(a, k).tobytes() == getattr(b, k).tobytes()

    def test_strong_error_ratio(self, ex2):
        p, _ = ex2
        n_paths, n_ref = 400, 1600
        dW = brownian_increments(3, n_paths, np.full(n_ref, 1.0 / n_ref))
        ref = simulate_forward(p, None, C(1.0), 0.0, 1.0, n_ref, n_paths, noise=dW).X[:, -1]
        errs = []
        for n in (80, 160):
            coarse = dW.reshape(n_paths, n, n_ref // n).sum(axis=2)
            x = simulate_forward(p, None, C(1.0), 0.0, 1.0, n, n_paths, noise=coarse).X[:, -1]
            errs.append(np.mean(np.abs(x - ref)))
        assert errs[0] / errs[1] >= 1.3


class TestCandidates:
    def test_example2_Y(self, ex2):
        p, o = ex2
        b = bsde_candidates(simulate_forward(p, None, C(1.0), 0.0, 1.0, 100, 5, seed=1), o, p)
        P = np.sqrt(16 / 5 * np.exp(10 * (1 - b.times)) + 4 / 5) - 1
        np.testing.assert_allclose(b.Y, 0.5 * P * b.X**2, rtol=1e-12)
        np.testing.assert_allclose(b.Z, (b.X + b.u) * P * b.X, rtol=1e-12)

    def test_example3_Y_zero_on_balanced_path(self, ex3):
        p, o = ex3
        b = bsde_candidates(simulate_forward(p, None, C(0.8), 1.0, 0.0, 100, 1), o, p)
        assert np.max(np.abs(b.Y)) < 1e-20 + 1e-12

    def test_example1_Y_start(self, ex1):
        p, o = ex1
        b = bsde_candidates(simulate_forward(p, None, C(1.0), 0.0, 0.3, 10, 1), o, p)
        assert b.Y[0, 0] == o.value(0.0, 0.3)


class TestKtilde:
    def test_nonpositive_random_draws(self, rng):
        worst = -np.inf
        for _ in range(100):
            cfg = {
                "T": 1.0,
                "sigma_lo_sq": float(rng.uniform(0.05, 0.5)),
                "sigma_hi_sq": float(rng.uniform(0.6, 2.0)),
                "control": {"interval": [-1.0, 1.0]},
                "h": {"c": float(rng.normal()), "x": float(rng.normal()), "u": float(rng.normal())},
                "sigma": {"c": float(rng.uniform(0.1, 1.0)), "u": float(rng.normal(scale=0.3))},
                "g": {"x": float(rng.normal()), "uu": float(rng.uniform(0, 1)), "z": float(rng.normal(scale=0.2))},
                "phi": {"xx": float(rng.normal())},
            }
            p = problem_from_config(cfg)
            model = QuadModel(*rng.normal(size=3), d=float(rng.normal()))
            lo, hi = p.bounds.extremes
            kind = rng.integers(3)
            if kind == 0:
                sc = C(float(rng.uniform(lo, hi)))
            elif kind == 1:
                sc = ScenarioMeasure.piecewise_even(rng.uniform(lo, hi, 3), 0.0, 1.0)
            else:
                a = float(rng.uniform(lo, hi))
                sc = ScenarioMeasure.feedback(lambda t, x, a=a: np.where(x > 0, a, hi))
            u0 = float(rng.uniform(-1, 1))
            b = simulate_forward(p, lambda s, x, u0=u0: np.full_like(x, u0), sc, 0.0, float(rng.normal()), 40, 8, seed=int(rng.integers(1 << 30)))
            b = ktilde_accumulate(b, model, p)
            worst = max(worst, float(np.max(np.diff(b.Ktilde, axis=1))))
        assert worst <= 1e-12

    def test_worst_case_scenario_vanishes(self, ex1, ex2):
        for (p, o), x0 in ((ex1, 0.5), (ex2, 1.0)):
            b = full(p, o, worst_case_scenario(o, p, o.u_bar), 0.0, x0, 500, 20, seed=2)
            assert np.max(np.abs(b.Ktilde[:, -1])) <= 1e-9

    def test_example3_balanced(self, ex3):
        p, o = ex3
        b = full(p, o, C(0.8), 1.0, 0.0)
        assert abs(b.Ktilde[0, -1]) <= 1e-6 and abs(b.K[0, -1]) <= 1e-6

    def test_example3_piecewise_against_quadrature(self, ex3):
        p, o = ex3
        # brute force: density gamma F / 2 - G(F) along the closed-form path
        s = np.linspace(1.0, 2.0, 200_001)
        gam = np.where(s <= 1.5, 0.6, 1.0)
        X = 1.25 * np.concatenate(([0.0], np.cumsum(0.5 * (gam[1:] + gam[:-1]) * np.diff(s))))
        w = X + 2.0 - s - 1.0
        F = 2 * 1.25 * (-2 * w)
        dens = 0.5 * gam * F - g_scalar(F, p.bounds)
        ref = np.sum(0.5 * (dens[1:] + dens[:-1]) * np.diff(s))
        assert ref == pytest.approx(-1 / 32, abs=1e-6)
        b = full(p, o, ScenarioMeasure.piecewise_even([0.6, 1.0], 1.0, 2.0), 1.0, 0.0)
        assert b.Ktilde[0, -1] == pytest.approx(ref, abs=1e-3)
        assert abs(b.K[0, -1]) <= 1e-6

    def test_trapezoid_rule(self, ex3):
        p, o = ex3
        b = simulate_forward(p, None, ScenarioMeasure.piecewise_even([0.6, 1.0], 1.0, 2.0), 1.0, 0.0, 2000, 1)
        kt = ktilde_accumulate(b, o, p, rule="trapezoid").Ktilde[0, -1]
        assert kt == pytest.approx(-1 / 32, abs=1e-3)
        with pytest.raises(DomainError):
            ktilde_accumulate(b, o, p, rule="simpson")


class TestK:
    def test_example2(self, ex2):
        p, o = ex2
        b1 = full(p, o, C(1.0), 0.0, 1.0, 500, 50)
        assert np.all(b1.K[:, -1] == 0.0)
        b2 = full(p, o, C(0.2), 0.0, 1.0, 500, 50)
        assert np.all(b2.K[:, -1] < -1e-4)

    def test_example3_off_balance(self, ex3):
        p, o = ex3
        b = full(p, o, C(0.9), 1.0, 0.0)
        # path leaves the flat region at s = 1.75: K_T = -(X_T - 1)^2 = -1/64
        assert b.K[0, -1] == pytest.approx(-1 / 64, abs=1e-3)

    def test_missing_integrand(self):
        p = problem_from_config({"T": 1.0})
        b = simulate_forward(p, lambda s, x: 0 * x, C(1.0), 0.0, 0.0, 5, 1)
        with pytest.raises(DomainError):
            k_accumulate(b, p)


class TestRelations:
    def test_example3_counterexample(self, ex3):
        p, o = ex3
        for sc, expect in ((C(0.8), 0.0), (ScenarioMeasure.piecewise_even([0.6, 1.0], 1.0, 2.0), 1 / 64)):
            b = full(p, o, sc, 1.0, 0.0)
            Y = o.Y(np.broadcast_to(b.times, b.X.shape), b.X)
            gap = relation_report(b, o, p, Y=Y)["y_vs_v"]["max"]
            assert gap == pytest.approx(expect, abs=1e-3)

    def test_example2_pde(self, ex2):
        p, o = ex2
        b = full(p, o, C(1.0), 0.0, 1.0, 200, 10)
        r = relation_report(b, o, p)
        assert r["y_vs_v"]["max"] == 0.0
        assert r["pde_feedback"]["max"] <= 1e-4 * (1 + np.max(np.abs(o.dt(b.times, b.X))))
        assert r["pde_min"]["max"] <= r["pde_feedback"]["max"] + 1e-9

    def test_bsde_identity(self, ex3):
        p, o = ex3
        b = full(p, o, ScenarioMeasure.piecewise_even([0.6, 1.0], 1.0, 2.0), 1.0, 0.0)
        assert bsde_identity_residual(b, p) <= 1e-3
        with pytest.raises(DomainError):
            bsde_identity_residual(simulate_forward(p, None, C(0.8), 1.0, 0.0, 5, 1), p)


class TestMixedDerivative:
    def test_example2_closed_forms_agree(self, rng):
        # V_sx = P' x versus -(1/2) dF/dx with dF/dx = P (18 x + 4 u) + 2 x at u = -2 P x / (1 + P)
        s = rng.uniform(0, 1, 20)
        x = rng.uniform(-2, 2, 20)
        P = riccati_closed(s, 1.0)
        u = -2 * P * x / (1 + P)
        np.testing.assert_allclose(riccati_rhs(P) * x, -0.5 * (P * (18 * x + 4 * u) + 2 * x), rtol=1e-10)

    def test_example2_along_path(self, ex2):
        p, o = ex2
        b = simulate_forward(p, None, C(1.0), 0.0, 1.0, 200, 10, seed=4)
        r = mixed_derivative_check(o, p, b)
        assert r["n_active"] > 0
        assert r["active_max_residual"] <= 1e-6 * (1 + r["active_scale"])

    def test_example3_implied_level(self, ex3):
        p, o = ex3
        b = simulate_forward(p, None, C(0.8), 1.0, 0.0, 200, 1)
        r = mixed_derivative_check(o, p, b)
        assert r["n_active"] == 0 and r["implied_in_bounds"]
        np.testing.assert_allclose(r["implied_v"], 0.8, rtol=1e-6)

    def test_time_independent_quadratic(self):
        p = problem_from_config({"T": 1.0, "h": {"c": 1.0}})
        m = QuadModel(0.0, 1.0, 1.0)
        b = simulate_forward(p, lambda s, x: 0 * x, C(1.0), 0.0, 0.5, 20, 1)
        r = mixed_derivative_check(m, p, b)
        # V_sx = 0 while F = 2 V_x != 0 with dF/dx = 4: residual is 2 gamma
        assert r["active_max_residual"] == pytest.approx(2.0, rel=1e-6)

    def test_kink_steps_masked(self, ex1):
        p, o = ex1
        b = simulate_forward(p, None, C(1.0), 0.0, -0.6, 100, 1)
        r = mixed_derivative_check(o, p, b)
        assert r["n_masked"] >= 1
        assert r["active_max_residual"] <= 1e-6 * (1 + r["active_scale"])


class TestCostAndExport:
    def test_E_hat_consistency_example1(self, ex1):
        p, o = ex1
        fam = [C(g) for g in (0.2, 0.6, 1.0)] + [worst_case_scenario(o, p, o.u_bar)]
        costs = [cost_estimate(simulate_forward(p, None, sc, 0.0, 0.5, 400, 1), p)[0] for sc in fam]
        v = o.value(0.0, 0.5)
        assert max(costs) <= v + 1e-9
        assert costs[-1] == pytest.approx(v, abs=1e-9)

    def test_E_hat_consistency_example2(self, ex2):
        p, o = ex2
        v = o.value(0.0, 0.5)
        out = []
        for g in (0.2, 0.6, 1.0):
            b = bsde_candidates(simulate_forward(p, None, C(g), 0.0, 0.5, 500, 4000, seed=5), o, p)
            out.append(cost_estimate(b, p))
        grid_tol = 0.02 * (1 + abs(v))
        assert all(m <= v + 3 * se + grid_tol for m, se in out)
        m, se = out[-1]
        assert abs(m - v) <= 3 * se + grid_tol

    def test_fixed_order_mean(self):
        a = np.arange(10.0)
        assert fixed_order_mean(a) == 4.5
        assert fixed_order_mean(a[::-1].copy()) == fixed_order_mean(a[::-1])

    def test_csv(self, ex3, tmp_path):
        p, o = ex3
        b = full(p, o, C(0.8), 1.0, 0.0, 10)
        b.to_csv(tmp_path / "b.csv")
        lines = (tmp_path / "b.csv").read_text().splitlines()
        assert lines[0] == "path,s,X,B,QV,gamma,Y,Z,K,Ktilde"
        assert len(lines) == 12
        assert b.summary()["K_T"]["max"] == 0.0
