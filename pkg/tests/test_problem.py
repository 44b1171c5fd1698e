import numpy as np
import pytest

from gcontrol.errors import DomainError, NumericalError
from gcontrol.gcore import ScenarioMeasure, VolBounds
from gcontrol.problem import (
    ControlSet,
    builtin_example,
    check_growth,
    driver_F,
    example3,
    hamiltonian,
    hamiltonian_u,
    min_driver,
    problem_from_config,
    riccati_closed,
    riccati_closed_dot,
    riccati_rhs,
    riccati_solve,
)


def P_ref(s, T):
    return np.sqrt(16 / 5 * np.exp(10 * (T - s)) + 4 / 5) - 1


class TestControlSet:
    def test_interval(self):
        u = ControlSet.interval(1, 2)
        assert u.contains([1.0, 1.5, 2.0])
        assert not u.contains(2.1)
        assert u.mesh(5).tolist() == [1.0, 1.25, 1.5, 1.75, 2.0]

    def test_finite(self):
        u = ControlSet.finite([3.0, 1.0])
        assert u.points == (1.0, 3.0)
        assert u.contains([1.0, 3.0]) and not u.contains(2.0)

    def test_unbounded_rejects_nan(self):
        u = ControlSet.unbounded(radius=2)
        assert u.contains(1e9)
        assert not u.contains(np.nan)

    @pytest.mark.parametrize("make", [lambda: ControlSet.interval(2, 1), lambda: ControlSet.finite([]), lambda: ControlSet("disc")])
    def test_invalid(self, make):
        with pytest.raises(DomainError):
            make()


class TestDriver:
    def test_F_example1(self, ex1):
        p, _ = ex1
        # F = 2 h a2 with h = 1
        assert driver_F(p, 0.0, 0.3, 9.0, 1.5, 7.0, 1.0) == pytest.approx(3.0)

    def test_F_rejects_control(self, ex1):
        p, _ = ex1
        with pytest.raises(DomainError):
            driver_F(p, 0.0, 0.0, 0.0, 1.0, 0.0, 2.0)

    def test_min_driver_tie_smallest(self, ex3):
        p, _ = ex3
        # a2 = 0 makes F independent of u
        best, u = min_driver(p, 1.0, 0.0, 0.0, 0.0, -2.0, p.control.mesh(9))
        assert best == 0.0 and u == 1.0

    def test_min_driver_sign(self, ex3):
        p, _ = ex3
        # F = 2 u a2: a2 > 0 prefers u = 1, a2 < 0 prefers u = 2
        _, u = min_driver(p, 1.0, np.array([0.0, 0.0]), 0.0, np.array([1.0, -1.0]), 0.0, p.control.mesh(9))
        np.testing.assert_array_equal(u, [1.0, 2.0])

    def test_argmin_matches_mesh(self, ex2, rng):
        p, _ = ex2
        x = rng.uniform(-1, 1, 50)
        a2, a3 = rng.normal(size=50), rng.uniform(0.1, 5, 50)
        best, _ = min_driver(p, 0.3, x, 0.0, a2, a3)
        mesh_best, _ = min_driver(p, 0.3, x, 0.0, a2, a3, np.linspace(-8, 8, 20001))
        assert np.all(best <= mesh_best + 1e-12)
        np.testing.assert_allclose(best, mesh_best, atol=1e-5)


class TestHamiltonian:
    def test_example2_gradient(self, ex2):
        p, _ = ex2
        x, u, pp, qq = 0.7, -0.4, 1.3, -0.2
        assert hamiltonian_u(p, x, 0.0, 0.0, u, pp, qq, 0.1) == pytest.approx(pp + qq + u)

    def test_fd_matches_analytic(self, ex2, rng):
        p, _ = ex2
        x, u, pp, qq = rng.normal(size=4)
        a = hamiltonian_u(p, x, 0.0, 0.0, u, pp, qq, 0.2, analytic=True)
        b = hamiltonian_u(p, x, 0.0, 0.0, u, pp, qq, 0.2, analytic=False)
        assert a == pytest.approx(b, rel=1e-6, abs=1e-8)

    def test_value(self, ex2):
        p, _ = ex2
        # h p + sigma q + g with g_z = 0
        x, u, pp, qq = 1.0, 2.0, 0.5, 0.25
        assert hamiltonian(p, x, 0.0, 0.0, u, u, pp, qq, 0.0) == pytest.approx(6 * 0.5 + 3 * 0.25 + 2.5)


class TestRiccati:
    def test_closed_form(self):
        s = np.linspace(0, 1, 11)
        np.testing.assert_allclose(riccati_closed(s, 1.0), P_ref(s, 1.0), rtol=1e-14)
        assert riccati_closed(1.0, 1.0) == 1.0

    def test_closed_form_solves_ode(self):
        s = np.linspace(0, 1, 21)
        np.testing.assert_allclose(riccati_closed_dot(s, 1.0), riccati_rhs(riccati_closed(s, 1.0)), rtol=1e-12)

    def test_rk4(self):
        tab = riccati_solve(1.0, 1e-3)
        assert tab.P[-1] == 1.0
        assert np.max(np.abs(tab.P - P_ref(tab.s, 1.0))) < 1e-5
        assert tab(0.5) == pytest.approx(P_ref(0.5, 1.0), rel=1e-6)

    def test_blowup_guard(self):
        with pytest.raises(NumericalError):
            riccati_solve(5.0, 1e-2, blowup=1e3)


class TestExamples:
    def test_example1_closed_form(self, ex1):
        _, o = ex1
        t, x = np.meshgrid(np.linspace(0, 0.9, 7), np.linspace(-2, 2, 41), indexing="ij")
        tau = 1 - t
        ref = np.maximum((x + tau) ** 2, (x + 0.2 * tau) ** 2)
        np.testing.assert_allclose(o.value(t, x), ref, rtol=1e-14)
        np.testing.assert_allclose(o.kinks(0.0), [-0.6])

    def test_example2_feedback(self, ex2):
        _, o = ex2
        P = P_ref(0.3, 1.0)
        assert o.u_bar(0.3, 0.5) == pytest.approx(-2 * P * 0.5 / (1 + P))

    def test_example3_phi(self, ex3):
        _, o = ex3
        phi = o.aux["phi"]
        # flat band: -y/v must lie in [0.5 tau, tau]
        assert phi(1.0, -1.0) == 0.0
        assert phi(1.0, -0.5) == pytest.approx(-((-0.5 + 0.625) ** 2))
        assert phi(1.0, -1.3) == pytest.approx(-((-1.3 + 1.25) ** 2))

    def test_example3_bad_v(self):
        with pytest.raises(DomainError):
            example3(v=2.5)

    def test_k_increment_example2_sign(self, ex2):
        p, _ = ex2
        inc = p.k_increment(0.0, 0.01, 1.0, 1.0, 0.0, np.array([1.0, 0.2]))
        assert inc[0] == 0.0 and inc[1] < 0

    def test_builtin_names(self):
        assert builtin_example("example2")[0].name == "example2"
        assert builtin_example(3, T=3.0)[0].T == 3.0
        with pytest.raises(DomainError):
            builtin_example(4)

    def test_reference_scenarios(self, ex1, ex3):
        assert ex1[1].reference == ScenarioMeasure.constant(1.0)
        assert ex3[1].reference.values == (0.8,)


class TestConfigProblem:
    CFG = {
        "T": 1.0,
        "sigma_lo_sq": 0.5,
        "sigma_hi_sq": 1.0,
        "control": {"unbounded": {"radius": 5}},
        "h": {"x": 1.0, "u": 1.0},
        "sigma": {"c": 0.2},
        "g": {"uu": 0.5, "xx": 0.5},
        "phi": {"xx": 1.0},
    }

    def test_argmin_quadratic(self):
        p = problem_from_config(self.CFG)
        # F(u) = 0.04 a3 + 2 (x + u) a2 + x^2 + u^2, minimiser u = -a2
        _, u = min_driver(p, 0.0, 0.3, 0.0, 0.7, 1.0)
        assert u == pytest.approx(-0.7)

    def test_derivatives(self):
        p = problem_from_config(self.CFG)
        assert p.deriv("h_x", 0.0, 1.0, 2.0) == pytest.approx(1.0)
        assert p.deriv("g_u", 0.0, 1.0, 0.0, 0.0, 2.0) == pytest.approx(2.0)
        assert p.deriv("phi_x", 1.5) == pytest.approx(3.0)

    def test_bad_keys(self):
        with pytest.raises(DomainError):
            problem_from_config({"T": 1.0, "h": {"w": 1.0}})
        with pytest.raises(DomainError):
            problem_from_config({"h": {}})

    def test_fd_fallback(self):
        cfg = dict(self.CFG)
        p = problem_from_config(cfg)
        p.derivatives.pop("g_x")
        assert p.deriv("g_x", 0.0, 0.4, 0.0, 0.0, 0.0) == pytest.approx(0.4, rel=1e-6)

    def test_growth_check(self):
        p = problem_from_config({"T": 1.0, "h": {"x": 10.0}, "control": {"finite": [0.0]}})
        assert check_growth(p, 5.0) == ["h_x"]
        with pytest.raises(DomainError):
            problem_from_config({"T": 1.0, "h": {"x": 10.0}, "control": {"finite": [0.0]}, "lipschitz": 5.0})

    def test_noise_free_flag(self):
        assert problem_from_config({"T": 1.0}).noise_free
        assert not problem_from_config(self.CFG).noise_free

    def test_bounds_validated(self):
        with pytest.raises(DomainError):
            problem_from_config({"T": 1.0, "sigma_lo_sq": 2.0, "sigma_hi_sq": 1.0})
        assert isinstance(problem_from_config({"T": 1.0}).bounds, VolBounds)
