"""Control problems, the HJB driver, the Hamiltonian and the three worked examples.

A :class:`ControlProblem` bundles the coefficients of the controlled forward
equation ``dX = h d<B> + sigma dB`` and the recursive cost
``dY = -g d<B> + Z dB + dK``, ``Y_T = Phi(X_T)``.  All coefficient callables
are vectorised numpy functions with signatures ``h(s, x, u)``,
``sigma(s, x, u)``, ``g(s, x, y, z, u)`` and ``Phi(x)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import DomainError, NumericalError
from .gcore import ScenarioMeasure, VolBounds, g_scalar

__all__ = [
    "ControlSet",
    "ControlProblem",
    "ClosedFormOracle",
    "RiccatiTable",
    "driver_F",
    "hamiltonian",
    "hamiltonian_u",
    "riccati_rhs",
    "riccati_closed",
    "riccati_solve",
    "example1",
    "example2",
    "example3",
    "builtin_example",
    "problem_from_config",
    "check_growth",
]

_U_TOL = 1e-10
DERIVATIVE_NAMES = ("h_x", "h_u", "sigma_x", "sigma_u", "g_x", "g_y", "g_z", "g_u", "phi_x")


@dataclass(frozen=True)
class ControlSet:
    """Admissible control values.

    ``kind`` is ``"interval"`` (``[lo, hi]``), ``"finite"`` (``points``) or
    ``"unbounded"``.  An unbounded set carries a pointwise minimiser
    ``argmin(t, x, a1, a2, a3)`` of the driver and a truncation ``radius``
    used wherever a finite mesh is unavoidable (grid solver, CFL bound, MP
    check); interior minimisers returned by ``argmin`` are not truncated.
    """

    kind: str
    lo: float = -math.inf
    hi: float = math.inf
    points: tuple[float, ...] = ()
    radius: float = 4.0
    argmin: Optional[Callable] = field(default=None, compare=False)

    def __post_init__(self):
        if self.kind == "interval":
            if not (np.isfinite(self.lo) and np.isfinite(self.hi) and self.lo <= self.hi):
                raise DomainError("interval control set needs finite lo <= hi")
        elif self.kind == "finite":
            if not self.points:
                raise DomainError("finite control set is empty")
            object.__setattr__(self, "points", tuple(sorted(float(p) for p in self.points)))
        elif self.kind == "unbounded":
            if self.radius <= 0:
                raise DomainError("truncation radius must be positive")
        else:
            raise DomainError(f"unknown control set kind {self.kind!r}")

    @classmethod
    def interval(cls, lo: float, hi: float) -> "ControlSet":
        return cls("interval", lo=float(lo), hi=float(hi))

    @classmethod
    def finite(cls, points) -> "ControlSet":
        return cls("finite", points=tuple(points))

    @classmethod
    def unbounded(cls, argmin: Optional[Callable] = None, radius: float = 4.0) -> "ControlSet":
        return cls("unbounded", radius=float(radius), argmin=argmin)

    def contains(self, u) -> bool:
        u = np.asarray(u, dtype=float)
        if not np.all(np.isfinite(u)):
            return False
        if self.kind == "interval":
            return bool(np.all((u >= self.lo - _U_TOL) & (u <= self.hi + _U_TOL)))
        if self.kind == "finite":
            pts = np.asarray(self.points)
            return bool(np.all(np.min(np.abs(u[..., None] - pts), axis=-1) <= _U_TOL))
        return True

    def check(self, u, what: str = "u"):
        if not self.contains(u):
            raise DomainError(f"{what} outside the control set")

    def mesh(self, n: int = 65) -> np.ndarray:
        """Sorted candidate controls: the points, or ``n`` equispaced values."""
        if self.kind == "finite":
            return np.asarray(self.points)
        if n < 1:
            raise DomainError("empty control mesh")
        if self.kind == "interval":
            return np.linspace(self.lo, self.hi, n) if n > 1 else np.array([self.lo])
        return np.linspace(-self.radius, self.radius, n)

    def bounds_for_sampling(self) -> tuple[float, float]:
        if self.kind == "interval":
            return self.lo, self.hi
        if self.kind == "finite":
            return self.points[0], self.points[-1]
        return -self.radius, self.radius


def _fd_step(v):
    return 1e-6 * np.maximum(1.0, np.abs(v))


@dataclass
class ControlProblem:
    """Coefficients, control set, volatility bounds and horizon of one problem.

    ``derivatives`` maps names from ``DERIVATIVE_NAMES`` to analytic
    callables (same arguments as the parent coefficient); missing entries fall
    back to central differences with relative step ``1e-6``.

    ``k_increment(s, ds, x0, x1, u, gamma)``, when supplied, returns the
    increment of the optimal-trajectory martingale ``K`` over one step.
    ``noise_free`` marks problems with ``sigma == 0`` whose paths are
    deterministic under open-loop and feedback scenarios.
    """

    name: str
    T: float
    bounds: VolBounds
    control: ControlSet
    h: Callable
    sigma: Callable
    g: Callable
    phi: Callable
    derivatives: dict = field(default_factory=dict)
    oracle: Optional["ClosedFormOracle"] = None
    k_increment: Optional[Callable] = None
    noise_free: bool = False
    lipschitz: Optional[float] = None
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.T > 0:
            raise DomainError("horizon must be positive")
        unknown = set(self.derivatives) - set(DERIVATIVE_NAMES)
        if unknown:
            raise DomainError(f"unknown derivative names {sorted(unknown)}")
        if self.lipschitz is not None:
            bad = check_growth(self, self.lipschitz)
            if bad:
                raise DomainError(f"growth/Lipschitz check failed for {bad}")

    def has_derivative(self, name: str) -> bool:
        return name in self.derivatives

    def deriv(self, name: str, *args):
        """Evaluate a coefficient derivative, analytically when available."""
        if name in self.derivatives:
            return np.asarray(self.derivatives[name](*args), dtype=float)
        base, var = name.split("_")
        if base == "phi":
            (x,) = args
            x = np.asarray(x, dtype=float)
            eps = _fd_step(x)
            return (self.phi(x + eps) - self.phi(x - eps)) / (2 * eps)
        f = {"h": self.h, "sigma": self.sigma, "g": self.g}[base]
        slots = {"h": "sxu", "sigma": "sxu", "g": "sxyzu"}[base]
        i = slots.index(var)
        args = [np.asarray(a, dtype=float) for a in args]
        eps = _fd_step(args[i])
        up = list(args)
        dn = list(args)
        up[i] = args[i] + eps
        dn[i] = args[i] - eps
        return (np.asarray(f(*up)) - np.asarray(f(*dn))) / (2 * eps)


class ClosedFormOracle:
    """Closed-form value function with the same accessors as a grid surface.

    Accessors ``value``, ``dx``, ``dxx``, ``dt``, ``dtx`` take ``(t, x)`` and are
    vectorised.  ``u_bar(s, x)`` is an optimal feedback, ``reference`` a
    scenario in the reference family (when one is known), ``Y`` a closed-form
    candidate for the cost process along the optimal trajectory, ``kinks(t)`` the
    locations where the value is not differentiable in ``x``.
    """

    def __init__(
        self,
        V,
        Vx,
        Vxx,
        Vt,
        Vtx,
        u_bar,
        reference_description: str = "",
        reference: Optional[ScenarioMeasure] = None,
        Y: Optional[Callable] = None,
        kinks: Optional[Callable] = None,
        aux: Optional[dict] = None,
    ):
        self._V, self._Vx, self._Vxx, self._Vt, self._Vtx = V, Vx, Vxx, Vt, Vtx
        self.u_bar = u_bar
        self.reference_description = reference_description
        self.reference = reference
        self.Y = Y if Y is not None else V
        self._kinks = kinks
        self.aux = aux or {}

    def value(self, t, x):
        return self._V(np.asarray(t, dtype=float), np.asarray(x, dtype=float))

    def dx(self, t, x):
        return self._Vx(np.asarray(t, dtype=float), np.asarray(x, dtype=float))

    def dxx(self, t, x):
        return self._Vxx(np.asarray(t, dtype=float), np.asarray(x, dtype=float))

    def dt(self, t, x):
        return self._Vt(np.asarray(t, dtype=float), np.asarray(x, dtype=float))

    def dtx(self, t, x):
        return self._Vtx(np.asarray(t, dtype=float), np.asarray(x, dtype=float))

    def kinks(self, t) -> np.ndarray:
        if self._kinks is None:
            return np.empty(0)
        return np.atleast_1d(np.asarray(self._kinks(t), dtype=float))

    def kink_distance(self, t, x):
        """Distance from ``x`` to the nearest kink at time ``t`` (inf if none)."""
        t = np.asarray(t, dtype=float)
        x = np.asarray(x, dtype=float)
        if self._kinks is None:
            return np.full(np.broadcast(t, x).shape, np.inf)
        k = np.asarray(self._kinks(t), dtype=float)
        return np.abs(x - k)

    def x_step(self, x):
        return 1e-4 * np.maximum(1.0, np.abs(x))


# --------------------------------------------------------------------- driver


def driver_F(p: ControlProblem, t, x, a1, a2, a3, u):
    """``F = sigma^2 a3 + 2 h a2 + 2 g(t, x, a1, sigma a2, u)``."""
    p.control.check(u)
    sig = np.asarray(p.sigma(t, x, u), dtype=float)
    return sig**2 * a3 + 2.0 * np.asarray(p.h(t, x, u)) * a2 + 2.0 * np.asarray(p.g(t, x, a1, sig * a2, u))


def min_driver(p: ControlProblem, t, x, a1, a2, a3, u_mesh=None):
    """Pointwise ``min_u G(F(u))`` and a minimiser (smallest ``u`` on ties).

    Uses the problem's argmin oracle when the control set is unbounded.
    """
    t, x, a1, a2, a3 = np.broadcast_arrays(*(np.asarray(v, dtype=float) for v in (t, x, a1, a2, a3)))
    if u_mesh is None and p.control.kind == "unbounded":
        if p.control.argmin is None:
            raise DomainError("unbounded control set without an argmin oracle needs a mesh")
        u = np.asarray(p.control.argmin(t, x, a1, a2, a3), dtype=float) * np.ones_like(x)
        return g_scalar(driver_F(p, t, x, a1, a2, a3, u), p.bounds) * np.ones_like(x), u
    mesh = p.control.mesh() if u_mesh is None else np.asarray(u_mesh, dtype=float)
    if mesh.size == 0:
        raise DomainError("empty control mesh")
    mesh = np.sort(mesh)
    shp = (mesh.size,) + (1,) * x.ndim
    um = mesh.reshape(shp)
    vals = np.asarray(g_scalar(driver_F(p, t, x, a1, a2, a3, um * np.ones_like(x)), p.bounds))
    best = vals.min(axis=0)
    tol = 1e-12 * (1.0 + np.abs(best))
    idx = np.argmax(vals <= best + tol, axis=0)
    return best, mesh[idx]


def hamiltonian(p: ControlProblem, x, y, z, u, v, pp, qq, s):
    """``H = h p + sigma q + g_z(v) sigma p + g``; ``g_z`` is read at control ``v``."""
    p.control.check(u, "u")
    p.control.check(v, "v")
    sig = np.asarray(p.sigma(s, x, u), dtype=float)
    gz = p.deriv("g_z", s, x, y, z, v)
    return np.asarray(p.h(s, x, u)) * pp + sig * qq + gz * sig * pp + np.asarray(p.g(s, x, y, z, u))


def hamiltonian_u(p: ControlProblem, x, y, z, u, pp, qq, s, analytic: Optional[bool] = None):
    """Gradient of ``H(x, y, z, u, v, p, q, s)`` in ``u`` at ``v = u``.

    Analytic when the problem supplies ``h_u``, ``sigma_u``, ``g_u`` (the
    default whenever it does); otherwise a central difference in the first
    control slot only.
    """
    p.control.check(u)
    have = all(p.has_derivative(n) for n in ("h_u", "sigma_u", "g_u"))
    if analytic is None:
        analytic = have
    u = np.asarray(u, dtype=float)
    gz = p.deriv("g_z", s, x, y, z, u)
    if analytic:
        return (
            p.deriv("h_u", s, x, u) * pp
            + p.deriv("sigma_u", s, x, u) * qq
            + gz * p.deriv("sigma_u", s, x, u) * pp
            + p.deriv("g_u", s, x, y, z, u)
        )
    eps = _fd_step(u)

    def H(uu):
        sig = np.asarray(p.sigma(s, x, uu), dtype=float)
        return np.asarray(p.h(s, x, uu)) * pp + sig * qq + gz * sig * pp + np.asarray(p.g(s, x, y, z, uu))

    return (H(u + eps) - H(u - eps)) / (2 * eps)


# ------------------------------------------------------------------- Riccati


def riccati_rhs(P):
    return -(5.0 * P**2 + 10.0 * P + 1.0) / (1.0 + P)


def riccati_closed(s, T: float):
    s = np.asarray(s, dtype=float)
    return np.sqrt(16.0 / 5.0 * np.exp(10.0 * (T - s)) + 4.0 / 5.0) - 1.0


def riccati_closed_dot(s, T: float):
    return riccati_rhs(riccati_closed(s, T))


@dataclass(frozen=True)
class RiccatiTable:
    s: np.ndarray
    P: np.ndarray

    def __call__(self, s):
        return np.interp(s, self.s, self.P)


def riccati_solve(T: float, dt: float, blowup: float = 1e6) -> RiccatiTable:
    """Integrate ``dP/ds = -(5P^2 + 10P + 1)/(1 + P)``, ``P(T) = 1``, backward with RK4.

    The step is ``T / ceil(T / dt)``; raises :class:`NumericalError` once
    ``|P|`` exceeds ``blowup``.
    """
    if not (dt > 0 and T > 0):
        raise DomainError("riccati_solve needs T > 0 and dt > 0")
    n = int(math.ceil(T / dt - 1e-9))
    h = -T / n
    P = np.empty(n + 1)
    P[n] = 1.0
    cur = 1.0
    for k in range(n, 0, -1):
        k1 = riccati_rhs(cur)
        k2 = riccati_rhs(cur + 0.5 * h * k1)
        k3 = riccati_rhs(cur + 0.5 * h * k2)
        k4 = riccati_rhs(cur + h * k3)
        cur = cur + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        if not math.isfinite(cur) or abs(cur) > blowup:
            raise NumericalError(f"Riccati integration diverged at step {k} (|P| > {blowup:g})")
        P[k - 1] = cur
    s = np.linspace(0.0, T, n + 1)
    return RiccatiTable(s, P)


# ------------------------------------------------------------------ examples

_ZERO3 = lambda s, x, u: np.zeros(np.broadcast(s, x, u).shape)  # noqa: E731
_ZERO5 = lambda s, x, y, z, u: np.zeros(np.broadcast(s, x, y, z, u).shape)  # noqa: E731


def _zero_derivs():
    return {
        "h_x": _ZERO3,
        "sigma_x": _ZERO3,
        "sigma_u": _ZERO3,
        "g_x": _ZERO5,
        "g_y": _ZERO5,
        "g_z": _ZERO5,
        "g_u": _ZERO5,
    }


def example1(T: float = 1.0, bounds: Optional[VolBounds] = None):
    """``dX = d<B>``, ``Y_T = X_T^2``, ``U = {1}``.

    The value is the larger of the two extreme-variance branches,
    ``V = max((x + sigma_hi^2 tau)^2, (x + sigma_lo^2 tau)^2)`` with
    ``tau = T - t``; it has a convex kink at
    ``x = -(sigma_lo^2 + sigma_hi^2) tau / 2`` (``-0.6 tau`` for the default bounds).
    """
    if not T > 0:
        raise DomainError("example1 needs T > 0")
    b = bounds or VolBounds(0.2, 1.0)
    lo, hi = b.sigma_lo_sq, b.sigma_hi_sq
    mid = 0.5 * (lo + hi)

    def level(t, x):
        return np.where(x >= -mid * (T - t), hi, lo)

    def V(t, x):
        return (x + level(t, x) * (T - t)) ** 2

    def Vx(t, x):
        return 2.0 * (x + level(t, x) * (T - t))

    def Vxx(t, x):
        return np.full(np.broadcast(t, x).shape, 2.0)

    def Vt(t, x):
        lv = level(t, x)
        return -2.0 * lv * (x + lv * (T - t))

    def Vtx(t, x):
        return -2.0 * level(t, x)

    oracle = ClosedFormOracle(
        V,
        Vx,
        Vxx,
        Vt,
        Vtx,
        u_bar=lambda s, x: np.ones(np.shape(x)),
        reference_description="extreme constant levels; both at the kink",
        reference=ScenarioMeasure.constant(hi),
        kinks=lambda t: -mid * (T - np.asarray(t, dtype=float)),
        aux={"kink_slope": mid},
    )

    def k_increment(s, ds, x0, x1, u, gamma):
        # Z = 0 and g = 0, so K is the increment of V along the path
        return V(s + ds, x1) - V(s, x0)

    derivs = _zero_derivs()
    derivs["h_u"] = lambda s, x, u: np.ones(np.broadcast(s, x, u).shape)
    derivs["phi_x"] = lambda x: 2.0 * np.asarray(x)
    p = ControlProblem(
        name="example1",
        T=T,
        bounds=b,
        control=ControlSet.finite([1.0]),
        h=lambda s, x, u: u * np.ones(np.broadcast(s, x).shape),
        sigma=_ZERO3,
        g=_ZERO5,
        phi=lambda x: np.asarray(x) ** 2,
        derivatives=derivs,
        oracle=oracle,
        k_increment=k_increment,
        noise_free=True,
        lipschitz=5.0,
        params={"T": T},
    )
    _check_oracle(p, smooth_only=True)
    return p, oracle


def example2(T: float = 1.0, bounds: Optional[VolBounds] = None, radius: float = 8.0):
    """Linear-quadratic problem with ``h = 4x + u``, ``sigma = x + u``,
    ``g = (x^2 + u^2)/2``, ``Phi = x^2/2``, ``U = R``.

    ``V = P_t x^2 / 2`` with the Riccati solution ``P`` and the optimal
    feedback ``u = -2 P x / (1 + P)``; the reference measure has
    ``gamma == sigma_hi^2 = 1``.
    """
    if not T > 0:
        raise DomainError("example2 needs T > 0")
    b = bounds or VolBounds(0.2, 1.0)
    if b.sigma_hi_sq != 1.0:
        raise DomainError("example2's closed form requires sigma_hi_sq = 1")

    def P(t):
        return riccati_closed(t, T)

    def Pdot(t):
        return riccati_closed_dot(t, T)

    def u_bar(s, x):
        Ps = P(s)
        return -2.0 * Ps * np.asarray(x) / (1.0 + Ps)

    def argmin(t, x, a1, a2, a3):
        # F(u) = (x+u)^2 a3 + 2(4x+u) a2 + x^2 + u^2, quadratic in u
        curv = a3 + 1.0
        with np.errstate(divide="ignore", invalid="ignore"):
            u = np.where(curv > 0, -(x * a3 + a2) / np.where(curv > 0, curv, 1.0), np.nan)
        r = radius
        # concave or flat: pick the better truncation endpoint
        Fp = (x + r) ** 2 * a3 + 2 * (4 * x + r) * a2 + x**2 + r**2
        Fm = (x - r) ** 2 * a3 + 2 * (4 * x - r) * a2 + x**2 + r**2
        return np.where(np.isnan(u), np.where(Fm <= Fp, -r, r), u)

    oracle = ClosedFormOracle(
        V=lambda t, x: 0.5 * P(t) * x**2,
        Vx=lambda t, x: P(t) * x,
        Vxx=lambda t, x: P(t) * np.ones_like(x),
        Vt=lambda t, x: 0.5 * Pdot(t) * x**2,
        Vtx=lambda t, x: Pdot(t) * x,
        u_bar=u_bar,
        reference_description="gamma == sigma_hi^2 = 1 (unique reference measure)",
        reference=ScenarioMeasure.constant(b.sigma_hi_sq),
        Y=lambda s, x: 0.5 * P(s) * x**2,
        aux={"P": P, "Pdot": Pdot, "Z": lambda s, x: P(s) * x**2 + P(s) * x * u_bar(s, x)},
    )

    def k_increment(s, ds, x0, x1, u, gamma):
        Ps = P(s)
        return (5 * Ps**2 + 10 * Ps + 1) / (2 * (1 + Ps)) * x0**2 * (gamma - 1.0) * ds

    ones3 = lambda s, x, u: np.ones(np.broadcast(s, x, u).shape)  # noqa: E731
    derivs = {
        "h_x": lambda s, x, u: 4.0 * np.ones(np.broadcast(s, x, u).shape),
        "h_u": ones3,
        "sigma_x": ones3,
        "sigma_u": ones3,
        "g_x": lambda s, x, y, z, u: x * np.ones(np.broadcast(s, y, z, u).shape),
        "g_y": _ZERO5,
        "g_z": _ZERO5,
        "g_u": lambda s, x, y, z, u: u * np.ones(np.broadcast(s, x, y, z).shape),
        "phi_x": lambda x: np.asarray(x, dtype=float),
    }
    p = ControlProblem(
        name="example2",
        T=T,
        bounds=b,
        control=ControlSet.unbounded(argmin=argmin, radius=radius),
        h=lambda s, x, u: 4.0 * x + u + 0.0 * s,
        sigma=lambda s, x, u: x + u + 0.0 * s,
        g=lambda s, x, y, z, u: 0.5 * (x**2 + u**2) + 0.0 * (s + y + z),
        phi=lambda x: 0.5 * np.asarray(x) ** 2,
        derivatives=derivs,
        oracle=oracle,
        k_increment=k_increment,
        lipschitz=5.0,
        params={"T": T},
    )
    _check_oracle(p, x_box=(-2.0, 2.0))
    return p, oracle


def example3(T: float = 2.0, v: float = 1.25, bounds: Optional[VolBounds] = None):
    """``dX = u d<B>``, ``Y_T = -(X_T - 1)^2``, ``U = [1, 2]``, bounds ``(0.5, 1)``.

    ``V = -(x + T - t - 1)^2`` and every constant control is optimal at
    ``(T - 1, 0)``; ``v`` is the constant control kept.  ``phi(s, y)`` is the
    conditional cost along the trajectory with ``y = X_s - 1``: zero while
    ``-y / v`` lies in ``[sigma_lo^2 (T-s), sigma_hi^2 (T-s)]``, a negative square
    outside.
    """
    if not T > 1:
        raise DomainError("example3 needs T > 1")
    if not 1.0 < v < 2.0:
        raise DomainError("example3 needs v in (1, 2)")
    b = bounds or VolBounds(0.5, 1.0)
    lo, hi = b.sigma_lo_sq, b.sigma_hi_sq

    def w(t, x):
        return x + (T - t) - 1.0

    def phi_branches(s, y):
        tau = T - np.asarray(s, dtype=float)
        upper = -v * lo * tau
        lower = -v * hi * tau
        y = np.asarray(y, dtype=float)
        val = np.where(y > upper, -((y - upper) ** 2), np.where(y < lower, -((y - lower) ** 2), 0.0))
        dy = np.where(y > upper, -2.0 * (y - upper), np.where(y < lower, -2.0 * (y - lower), 0.0))
        # d/ds of the boundaries: d(upper)/ds = v lo, d(lower)/ds = v hi
        ds = np.where(y > upper, 2.0 * (y - upper) * v * lo, np.where(y < lower, 2.0 * (y - lower) * v * hi, 0.0))
        return val, dy, ds

    def phi(s, y):
        return phi_branches(s, y)[0]

    oracle = ClosedFormOracle(
        V=lambda t, x: -w(t, x) ** 2,
        Vx=lambda t, x: -2.0 * w(t, x),
        Vxx=lambda t, x: np.full(np.broadcast(t, x).shape, -2.0),
        Vt=lambda t, x: 2.0 * w(t, x),
        Vtx=lambda t, x: np.full(np.broadcast(t, x).shape, 2.0),
        u_bar=lambda s, x: np.full(np.shape(x), v),
        reference_description="gamma == 1/v (unique member with vanishing K-tilde)",
        reference=ScenarioMeasure.constant(1.0 / v) if lo <= 1.0 / v <= hi else None,
        Y=lambda s, x: phi(s, np.asarray(x) - 1.0),
        aux={"phi": phi, "phi_branches": phi_branches, "v": v},
    )

    def k_increment(s, ds, x0, x1, u, gamma):
        _, dy, dsd = phi_branches(s, np.asarray(x0) - 1.0)
        return (dy * v * gamma + dsd) * ds

    derivs = _zero_derivs()
    derivs["h_u"] = lambda s, x, u: np.ones(np.broadcast(s, x, u).shape)
    derivs["phi_x"] = lambda x: -2.0 * (np.asarray(x) - 1.0)
    p = ControlProblem(
        name="example3",
        T=T,
        bounds=b,
        control=ControlSet.interval(1.0, 2.0),
        h=lambda s, x, u: u * np.ones(np.broadcast(s, x).shape),
        sigma=_ZERO3,
        g=_ZERO5,
        phi=lambda x: -((np.asarray(x) - 1.0) ** 2),
        derivatives=derivs,
        oracle=oracle,
        k_increment=k_increment,
        noise_free=True,
        lipschitz=5.0,
        params={"T": T, "v": v},
    )
    _check_oracle(p)
    _check_phi_c1(phi_branches, T, v, lo, hi)
    return p, oracle


def _check_phi_c1(phi_branches, T, v, lo, hi, tol=1e-6):
    for s in np.linspace(0.0, T, 7)[:-1]:
        tau = T - s
        for join in (-v * lo * tau, -v * hi * tau):
            e = 1e-7
            a = phi_branches(s, join - e)
            c = phi_branches(s, join + e)
            if max(abs(a[0] - c[0]), abs(a[1] - c[1]), abs(a[2] - c[2])) > tol:
                raise NumericalError("phi is not C1 at a branch join")


def _check_oracle(p: ControlProblem, smooth_only: bool = False, x_box=(-3.0, 3.0), tol=1e-8):
    o = p.oracle
    t = np.linspace(0.0, p.T, 9)[:-1]
    x = np.linspace(*x_box, 41)
    tt, xx = np.meshgrid(t, x, indexing="ij")
    if smooth_only:
        ok = o.kink_distance(tt, xx) > 1e-3
        tt, xx = tt[ok], xx[ok]
    mesh = None if p.control.kind == "unbounded" else p.control.mesh()
    best, _ = min_driver(p, tt, xx, o.value(tt, xx), o.dx(tt, xx), o.dxx(tt, xx), mesh)
    res = np.abs(o.dt(tt, xx) + best) / (1.0 + np.abs(o.dt(tt, xx)))
    if res.max() > tol:
        raise NumericalError(f"closed form of {p.name} fails its HJB equation (residual {res.max():.2e})")


def builtin_example(name, **kw):
    """``builtin_example(1 | 2 | 3 | "example1" | ..., **params) -> (problem, oracle)``."""
    key = str(name).lower().removeprefix("example").removeprefix("ex")
    makers = {"1": example1, "2": example2, "3": example3}
    if key not in makers:
        raise DomainError(f"unknown built-in example {name!r}")
    return makers[key](**{k: v for k, v in kw.items() if v is not None})


# ------------------------------------------------------------ config problems


def problem_from_config(cfg: dict) -> ControlProblem:
    """Build a problem from affine/quadratic coefficient families.

    Schema (all coefficient keys optional, default 0)::

        T: 1.0
        sigma_lo_sq: 0.2
        sigma_hi_sq: 1.0
        control: {interval: [lo, hi]} | {finite: [u1, u2, ...]} | {unbounded: {radius: R}}
        h:     {c, x, u}                  # c + x*X + u*U
        sigma: {c, x, u}
        g:     {c, x, u, y, z, xx, uu, xu}
        phi:   {c, x, xx}
        lipschitz: L                      # optional sampled growth check

    For an unbounded control set the pointwise minimiser of the driver is
    computed from its exact quadratic dependence on ``u``.
    """
    try:
        T = float(cfg["T"])
        bounds = VolBounds(float(cfg.get("sigma_lo_sq", 1.0)), float(cfg.get("sigma_hi_sq", 1.0)))
    except KeyError as exc:
        raise DomainError(f"problem config missing key {exc}") from None
    h = {k: float(v) for k, v in (cfg.get("h") or {}).items()}
    sg = {k: float(v) for k, v in (cfg.get("sigma") or {}).items()}
    gq = {k: float(v) for k, v in (cfg.get("g") or {}).items()}
    ph = {k: float(v) for k, v in (cfg.get("phi") or {}).items()}
    for fam, allowed in ((h, "cxu"), (sg, "cxu")):
        if set(fam) - set(allowed):
            raise DomainError(f"unknown affine coefficient keys {sorted(set(fam) - set(allowed))}")
    if set(gq) - {"c", "x", "u", "y", "z", "xx", "uu", "xu"}:
        raise DomainError("unknown g coefficient keys")
    if set(ph) - {"c", "x", "xx"}:
        raise DomainError("unknown phi coefficient keys")

    def aff(c, s, x, u):
        return c.get("c", 0.0) + c.get("x", 0.0) * x + c.get("u", 0.0) * u + 0.0 * s

    def gfun(s, x, y, z, u):
        G = gq.get
        return (
            G("c", 0.0) + G("x", 0.0) * x + G("u", 0.0) * u + G("y", 0.0) * y + G("z", 0.0) * z
            + G("xx", 0.0) * x**2 + G("uu", 0.0) * u**2 + G("xu", 0.0) * x * u + 0.0 * s
        )

    def const(c):
        return lambda *a: c * np.ones(np.broadcast(*a).shape)

    derivs = {
        "h_x": const(h.get("x", 0.0)),
        "h_u": const(h.get("u", 0.0)),
        "sigma_x": const(sg.get("x", 0.0)),
        "sigma_u": const(sg.get("u", 0.0)),
        "g_x": lambda s, x, y, z, u: gq.get("x", 0.0) + 2 * gq.get("xx", 0.0) * x + gq.get("xu", 0.0) * u + 0.0 * (s + y + z),
        "g_y": const(gq.get("y", 0.0)),
        "g_z": const(gq.get("z", 0.0)),
        "g_u": lambda s, x, y, z, u: gq.get("u", 0.0) + 2 * gq.get("uu", 0.0) * u + gq.get("xu", 0.0) * x + 0.0 * (s + y + z),
        "phi_x": lambda x: ph.get("x", 0.0) + 2 * ph.get("xx", 0.0) * np.asarray(x),
    }
    ctl = cfg.get("control") or {"finite": [0.0]}
    if "interval" in ctl:
        control = ControlSet.interval(*ctl["interval"])
    elif "finite" in ctl:
        control = ControlSet.finite(ctl["finite"])
    elif "unbounded" in ctl:
        radius = float((ctl["unbounded"] or {}).get("radius", 4.0))
        control = ControlSet.unbounded(radius=radius)
    else:
        raise DomainError("control must be one of interval / finite / unbounded")

    hf = lambda s, x, u: aff(h, s, x, u)  # noqa: E731
    sf = lambda s, x, u: aff(sg, s, x, u)  # noqa: E731
    p = ControlProblem(
        name=str(cfg.get("name", "config")),
        T=T,
        bounds=bounds,
        control=control,
        h=hf,
        sigma=sf,
        g=gfun,
        phi=lambda x: ph.get("c", 0.0) + ph.get("x", 0.0) * np.asarray(x) + ph.get("xx", 0.0) * np.asarray(x) ** 2,
        derivatives=derivs,
        noise_free=not any(sg.values()),
        lipschitz=cfg.get("lipschitz"),
        params=dict(cfg),
    )
    if control.kind == "unbounded":
        object.__setattr__(control, "argmin", _quadratic_argmin(p))
    return p


def _quadratic_argmin(p: ControlProblem):
    """Exact minimiser of a driver that is quadratic in ``u``."""
    R = p.control.radius

    def F(t, x, a1, a2, a3, u):
        sig = p.sigma(t, x, u)
        return sig**2 * a3 + 2 * p.h(t, x, u) * a2 + 2 * p.g(t, x, a1, sig * a2, u)

    def argmin(t, x, a1, a2, a3):
        f0 = F(t, x, a1, a2, a3, 0.0)
        fp = F(t, x, a1, a2, a3, 1.0)
        fm = F(t, x, a1, a2, a3, -1.0)
        curv = 0.5 * (fp + fm) - f0
        slope = 0.5 * (fp - fm)
        with np.errstate(divide="ignore", invalid="ignore"):
            u = np.where(curv > 0, -slope / np.where(curv > 0, 2 * curv, 1.0), np.nan)
        fR, fmR = F(t, x, a1, a2, a3, R), F(t, x, a1, a2, a3, -R)
        return np.where(np.isnan(u), np.where(fmR <= fR, -R, R), u)

    return argmin


def check_growth(p: ControlProblem, L: float, n: int = 10, x_range=(-5.0, 5.0)) -> list[str]:
    """Sampled check of the Lipschitz / linear-growth bounds on an ``n^3`` lattice.

    Returns the names of the derivatives that violate their bound.
    """
    lo, hi = p.control.bounds_for_sampling()
    s, x, u = np.meshgrid(np.linspace(0, p.T, n), np.linspace(*x_range, n), np.linspace(lo, hi, n), indexing="ij")
    y = np.zeros_like(x)
    z = np.zeros_like(x)
    bad = []
    for name in ("h_x", "h_u", "sigma_x", "sigma_u"):
        if np.max(np.abs(p.deriv(name, s, x, u))) > L:
            bad.append(name)
    for name in ("g_y", "g_z"):
        if np.max(np.abs(p.deriv(name, s, x, y, z, u))) > L:
            bad.append(name)
    growth = L * (1 + np.abs(x) + np.abs(u))
    for name in ("g_x", "g_u"):
        if np.any(np.abs(p.deriv(name, s, x, y, z, u)) > growth + 1e-9):
            bad.append(name)
    if np.any(np.abs(p.deriv("phi_x", x)) > L * (1 + np.abs(x)) + 1e-9):
        bad.append("phi_x")
    return bad
