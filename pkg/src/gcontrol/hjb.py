"""Explicit monotone finite differences for the G-HJB and G-heat equations.

The value is stepped backward from ``V(T, .) = Phi``::

    V(t_n) = V(t_{n+1}) + dt * min_u max_{gamma in {lo, hi}} gamma/2 * F_h(u)

where ``F_h`` uses the three-point second difference, an upwind first
difference (forward where ``h > 0``, backward where ``h < 0``) and a central
first difference inside ``g``.  ``F_h`` is linear in the grid values, so the
max over the two extreme variances equals ``G(F_h)`` and each candidate
operator is monotone under the CFL bound

    dt <= dx^2 / (sigma_hi^2 * (max sigma^2 + dx * max|h| + dx^2 * max|g_y|)).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import CFLError, DomainError, NumericalError
from .gcore import ScenarioMeasure, VolBounds, g_maximizer, g_scalar
from .problem import ControlProblem, driver_F, min_driver

__all__ = [
    "Grid",
    "ValueSurface",
    "ResidualReport",
    "GHeatResult",
    "cfl_bound",
    "cfl_steps",
    "hjb_solve",
    "gheat_solve",
    "hjb_residual",
    "detect_kinks",
    "kink_band_mask",
    "kink_centres",
    "optimal_feedback",
    "feedback_at",
    "feedback_function",
    "worst_case_feedback",
    "worst_case_scenario",
]

BOUNDARY_MODES = ("dirichlet", "linear")


@dataclass(frozen=True)
class Grid:
    x_lo: float
    x_hi: float
    nx: int
    t0: float
    T: float
    nt: int
    boundary_mode: str = "linear"

    def __post_init__(self):
        if not self.x_lo < self.x_hi:
            raise DomainError("need x_lo < x_hi")
        if self.nx < 3:
            raise DomainError("need at least 3 spatial nodes")
        if self.nt < 1:
            raise DomainError("need at least one time step")
        if not self.t0 < self.T:
            raise DomainError("need t0 < T")
        if self.boundary_mode not in BOUNDARY_MODES:
            raise DomainError(f"boundary_mode must be one of {BOUNDARY_MODES}")

    @property
    def x(self) -> np.ndarray:
        return np.linspace(self.x_lo, self.x_hi, self.nx)

    @property
    def t(self) -> np.ndarray:
        return np.linspace(self.t0, self.T, self.nt + 1)

    @property
    def dx(self) -> float:
        return (self.x_hi - self.x_lo) / (self.nx - 1)

    @property
    def dt(self) -> float:
        return (self.T - self.t0) / self.nt

    def refined(self, factor: int = 2) -> "Grid":
        """Same domain with ``dx`` and ``dt`` both divided by ``factor``.

        Callers needing the parabolic scaling ``dt ~ dx^2`` should recompute
        ``nt`` with :func:`cfl_steps`.
        """
        return Grid(self.x_lo, self.x_hi, (self.nx - 1) * factor + 1, self.t0, self.T, self.nt * factor, self.boundary_mode)


def _control_candidates(p: ControlProblem, u_mesh):
    if u_mesh is not None:
        mesh = np.sort(np.asarray(u_mesh, dtype=float))
        if mesh.size == 0:
            raise DomainError("empty control mesh")
        return mesh
    return p.control.mesh()


def cfl_bound(p: ControlProblem, x, t0: float, T: float, u_mesh=None, dx: Optional[float] = None) -> float:
    """Largest monotone time step over sampled nodes and candidate controls."""
    x = np.asarray(x, dtype=float)
    dx = float(dx if dx is not None else x[1] - x[0])
    mesh = _control_candidates(p, u_mesh)
    s, xx, uu = np.meshgrid(np.linspace(t0, T, 5), x, mesh, indexing="ij")
    sig2 = float(np.max(np.asarray(p.sigma(s, xx, uu)) ** 2))
    hmax = float(np.max(np.abs(p.h(s, xx, uu))))
    gy = float(np.max(np.abs(p.deriv("g_y", s, xx, np.zeros_like(xx), np.zeros_like(xx), uu))))
    denom = p.bounds.sigma_hi_sq * (sig2 + dx * hmax + dx * dx * gy)
    return math.inf if denom == 0 else dx * dx / denom


def cfl_steps(p: ControlProblem, x_lo, x_hi, nx, t0, T, u_mesh=None, safety: float = 0.9) -> int:
    x = np.linspace(x_lo, x_hi, nx)
    bound = cfl_bound(p, x, t0, T, u_mesh)
    if math.isinf(bound):
        return 1
    return max(1, int(math.ceil((T - t0) / (safety * bound))))


class ValueSurface:
    """Grid solution ``values[n, i] = V(t_n, x_i)`` with derivative accessors.

    Node derivatives: ``Vx`` central (second-order one-sided at the edges),
    ``Vxx`` three-point (four-point one-sided at the edges), ``Vt`` and ``Vtx``
    central in time with second-order one-sided rows at ``t0`` and ``T``.
    Off-node accessors interpolate the node arrays bilinearly.
    """

    def __init__(self, grid: Grid, values: np.ndarray, oracle=None):
        values = np.asarray(values, dtype=float)
        if values.shape != (grid.nt + 1, grid.nx):
            raise DomainError(f"values must have shape {(grid.nt + 1, grid.nx)}")
        if not np.all(np.isfinite(values)):
            raise NumericalError("surface contains non-finite values")
        self.grid = grid
        self.values = values
        self.oracle = oracle
        self._cache: dict = {}

    @classmethod
    def from_oracle(cls, oracle, grid: Grid) -> "ValueSurface":
        tt, xx = np.meshgrid(grid.t, grid.x, indexing="ij")
        return cls(grid, oracle.value(tt, xx), oracle=oracle)

    # node arrays
    @staticmethod
    def _d1(a, h, axis):
        a = np.moveaxis(a, axis, -1)
        out = np.empty_like(a)
        out[..., 1:-1] = (a[..., 2:] - a[..., :-2]) / (2 * h)
        if a.shape[-1] >= 3:
            out[..., 0] = (-3 * a[..., 0] + 4 * a[..., 1] - a[..., 2]) / (2 * h)
            out[..., -1] = (3 * a[..., -1] - 4 * a[..., -2] + a[..., -3]) / (2 * h)
        else:
            out[..., 0] = out[..., -1] = (a[..., -1] - a[..., 0]) / h
        return np.moveaxis(out, -1, axis)

    @property
    def node_dx(self):
        if "dx" not in self._cache:
            self._cache["dx"] = self._d1(self.values, self.grid.dx, 1)
        return self._cache["dx"]

    @property
    def node_dxx(self):
        if "dxx" not in self._cache:
            v = self.values
            h2 = self.grid.dx**2
            out = np.empty_like(v)
            out[:, 1:-1] = (v[:, 2:] - 2 * v[:, 1:-1] + v[:, :-2]) / h2
            if v.shape[1] >= 4:
                out[:, 0] = (2 * v[:, 0] - 5 * v[:, 1] + 4 * v[:, 2] - v[:, 3]) / h2
                out[:, -1] = (2 * v[:, -1] - 5 * v[:, -2] + 4 * v[:, -3] - v[:, -4]) / h2
            else:
                out[:, 0] = out[:, 1]
                out[:, -1] = out[:, -2]
            self._cache["dxx"] = out
        return self._cache["dxx"]

    @property
    def node_dt(self):
        if "dt" not in self._cache:
            self._cache["dt"] = self._d1(self.values, self.grid.dt, 0)
        return self._cache["dt"]

    @property
    def node_dtx(self):
        if "dtx" not in self._cache:
            self._cache["dtx"] = self._d1(self.node_dx, self.grid.dt, 0)
        return self._cache["dtx"]

    # interpolating accessors
    def _interp(self, arr, t, x):
        g = self.grid
        t, x = np.broadcast_arrays(np.asarray(t, dtype=float), np.asarray(x, dtype=float))
        tol_x = 1e-9 * max(1.0, abs(g.x_lo), abs(g.x_hi))
        tol_t = 1e-9 * max(1.0, abs(g.T))
        if np.any(x < g.x_lo - tol_x) or np.any(x > g.x_hi + tol_x):
            raise DomainError("point outside the surface's spatial domain")
        if np.any(t < g.t0 - tol_t) or np.any(t > g.T + tol_t):
            raise DomainError("point outside the surface's time range")
        ft = np.clip((t - g.t0) / g.dt, 0, g.nt)
        fx = np.clip((x - g.x_lo) / g.dx, 0, g.nx - 1)
        it = np.minimum(np.floor(ft).astype(int), g.nt - 1)
        ix = np.minimum(np.floor(fx).astype(int), g.nx - 2)
        wt = ft - it
        wx = fx - ix
        a = arr[it, ix]
        b = arr[it, ix + 1]
        c = arr[it + 1, ix]
        d = arr[it + 1, ix + 1]
        out = (1 - wt) * ((1 - wx) * a + wx * b) + wt * ((1 - wx) * c + wx * d)
        return out if out.ndim else float(out)

    def value(self, t, x):
        return self._interp(self.values, t, x)

    def dx(self, t, x):
        return self._interp(self.node_dx, t, x)

    def dxx(self, t, x):
        return self._interp(self.node_dxx, t, x)

    def dt(self, t, x):
        return self._interp(self.node_dt, t, x)

    def dtx(self, t, x):
        return self._interp(self.node_dtx, t, x)

    def x_step(self, x):
        return self.grid.dx

    def kink_distance(self, t, x):
        """Distance to the nearest kink known from an attached oracle (inf otherwise)."""
        if self.oracle is not None and hasattr(self.oracle, "kink_distance"):
            return self.oracle.kink_distance(t, x)
        return np.full(np.broadcast(np.asarray(t), np.asarray(x)).shape, np.inf)

    # export
    def to_csv(self, path, max_rows: Optional[int] = None) -> None:
        """Long-format export, time outermost.

        ``max_rows`` thins the time axis to at most that many evenly spaced
        rows, always keeping ``t0`` and ``T``.
        """
        g = self.grid
        idx = np.arange(g.nt + 1)
        if max_rows is not None and idx.size > max_rows:
            idx = np.unique(np.linspace(0, g.nt, max(2, max_rows)).round().astype(int))
        tt, xx = np.meshgrid(g.t[idx], g.x, indexing="ij")
        cols = (tt, xx, self.values[idx], self.node_dx[idx], self.node_dxx[idx])
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["t", "x", "V", "Vx", "Vxx"])
            for row in zip(*(c.ravel() for c in cols)):
                w.writerow([repr(float(v)) for v in row])

    def save_npz(self, path) -> None:
        g = self.grid
        np.savez(
            path,
            values=self.values,
            grid=np.array([g.x_lo, g.x_hi, g.nx, g.t0, g.T, g.nt], dtype=float),
            boundary_mode=np.array(g.boundary_mode),
        )

    @classmethod
    def load_npz(cls, path) -> "ValueSurface":
        with np.load(path) as d:
            x_lo, x_hi, nx, t0, T, nt = d["grid"]
            grid = Grid(float(x_lo), float(x_hi), int(nx), float(t0), float(T), int(nt), str(d["boundary_mode"]))
            return cls(grid, d["values"])


def _apply_boundary(row, grid: Grid, t, boundary):
    if grid.boundary_mode == "dirichlet":
        row[0] = boundary(t, grid.x_lo)
        row[-1] = boundary(t, grid.x_hi)
    else:
        row[0] = 2 * row[1] - row[2]
        row[-1] = 2 * row[-2] - row[-3]


def _resolve_boundary(p: ControlProblem, grid: Grid, boundary):
    if grid.boundary_mode != "dirichlet":
        return None
    if boundary is not None:
        return boundary
    if p.oracle is not None:
        return lambda t, x: float(p.oracle.value(t, x))
    raise DomainError("dirichlet boundary needs an oracle or a boundary function")


def hjb_solve(
    p: ControlProblem,
    grid: Grid,
    u_mesh=None,
    boundary: Optional[Callable] = None,
    terminal: Optional[Callable] = None,
) -> ValueSurface:
    """Solve ``dV/dt + min_u G(F(t, x, V, V_x, V_xx, u)) = 0``, ``V(T) = Phi``.

    ``u_mesh`` overrides the control candidates (default: the finite set, 65
    points on an interval, or the argmin oracle for an unbounded set).
    ``terminal`` overrides ``Phi`` (used by comparison checks).
    """
    bnd = _resolve_boundary(p, grid, boundary)
    use_argmin = u_mesh is None and p.control.kind == "unbounded"
    if use_argmin and p.control.argmin is None:
        raise DomainError("unbounded control set needs an argmin oracle or a mesh")
    mesh = None if use_argmin else _control_candidates(p, u_mesh)
    x = grid.x
    dt, dx = grid.dt, grid.dx
    bound = cfl_bound(p, x, grid.t0, grid.T, mesh)
    if dt > bound * (1 + 1e-9):
        raise CFLError(f"dt = {dt:.3e} exceeds the CFL bound {bound:.3e}")
    times = grid.t
    V = np.empty((grid.nt + 1, grid.nx))
    V[-1] = (terminal or p.phi)(x)
    xi = x[1:-1]
    G = p.bounds
    for n in range(grid.nt - 1, -1, -1):
        s = times[n + 1]
        v = V[n + 1]
        vi = v[1:-1]
        d2 = (v[2:] - 2 * vi + v[:-2]) / (dx * dx)
        dp = (v[2:] - vi) / dx
        dm = (vi - v[:-2]) / dx
        dc = (v[2:] - v[:-2]) / (2 * dx)
        if use_argmin:
            u = np.clip(np.asarray(p.control.argmin(s, xi, vi, dc, d2), dtype=float), -p.control.radius, p.control.radius)
        else:
            u = mesh[:, None]
        hv = np.asarray(p.h(s, xi, u), dtype=float)
        sig = np.asarray(p.sigma(s, xi, u), dtype=float)
        gv = np.asarray(p.g(s, xi, vi, sig * dc, u), dtype=float)
        Fh = sig * sig * d2 + 2 * (np.maximum(hv, 0) * dp + np.minimum(hv, 0) * dm) + 2 * gv
        Gv = g_scalar(Fh, G)
        best = Gv if use_argmin else np.min(Gv, axis=0)
        row = np.empty(grid.nx)
        row[1:-1] = vi + dt * best
        _apply_boundary(row, grid, times[n], bnd)
        if not np.all(np.isfinite(row)):
            raise NumericalError(f"non-finite values at time step {n}")
        V[n] = row
    return ValueSurface(grid, V, oracle=p.oracle)


@dataclass
class GHeatResult:
    x: np.ndarray
    u: np.ndarray
    tau: float
    nt: int

    def __call__(self, x):
        return np.interp(x, self.x, self.u)


def gheat_solve(
    phi: Callable,
    tau: float,
    bounds: VolBounds,
    grid: Optional[Grid] = None,
    dx: float = 0.01,
    half_width: float = 6.0,
    safety: float = 0.9,
) -> GHeatResult:
    """``u(tau, .)`` for ``du/dt = G(u_xx)``, ``u(0, .) = phi``, i.e. ``E[phi(x + B_tau)]``.

    Without an explicit ``grid`` the domain is ``[-half_width, half_width]``
    with linear extrapolation at both ends and the largest CFL-safe step.
    """
    if not tau > 0:
        raise DomainError("tau must be positive")
    if grid is None:
        nx = int(round(2 * half_width / dx)) + 1
        nt = max(1, int(math.ceil(tau * bounds.sigma_hi_sq / (safety * dx * dx))))
        grid = Grid(-half_width, half_width, nx, 0.0, tau, nt, "linear")
    h = grid.dx
    k = grid.dt
    if k > h * h / bounds.sigma_hi_sq * (1 + 1e-9):
        raise CFLError(f"dt = {k:.3e} exceeds the CFL bound {h * h / bounds.sigma_hi_sq:.3e}")
    x = grid.x
    u = np.asarray(phi(x), dtype=float).copy()
    bnd = None
    if grid.boundary_mode == "dirichlet":
        raise DomainError("gheat_solve supports linear extrapolation only")
    for n in range(grid.nt):
        lap = (u[2:] - 2 * u[1:-1] + u[:-2]) / (h * h)
        u[1:-1] = u[1:-1] + k * g_scalar(lap, bounds)
        _apply_boundary(u, grid, None, bnd)
        if not np.all(np.isfinite(u)):
            raise NumericalError(f"non-finite values at step {n}")
    return GHeatResult(x, u, grid.T - grid.t0, grid.nt)


# -------------------------------------------------------------- diagnostics


def detect_kinks(surface: ValueSurface, factor: float = 10.0, floor: float = 1e-8) -> np.ndarray:
    """Nodes where ``|V_xx|`` jumps by more than ``factor`` between neighbours
    or exceeds ``factor`` times its row median, widened by one cell.

    The median test catches kinks that numerical diffusion has spread over a
    few cells.  Returns a boolean mask with the shape of ``surface.values``.
    """
    a = np.abs(surface.node_dxx)
    hi = np.maximum(a[:, 1:], a[:, :-1])
    lo = np.minimum(a[:, 1:], a[:, :-1])
    scale = floor * (1.0 + a.max(axis=1, keepdims=True))
    jump = (hi > factor * lo) & (hi > scale)
    flag = np.zeros_like(a, dtype=bool)
    flag[:, 1:] |= jump
    flag[:, :-1] |= jump
    flag |= a > factor * (np.median(a, axis=1, keepdims=True) + scale)
    # one-sided edge stencils are not evidence of a kink
    flag[:, :2] = flag[:, -2:] = False
    band = flag.copy()
    band[:, 1:] |= flag[:, :-1]
    band[:, :-1] |= flag[:, 1:]
    return band


def kink_band_mask(grid: Grid, kinks: Callable) -> np.ndarray:
    """Nodes whose ``(t +- dt) x (x +- dx)`` stencil touches a known kink line."""
    t, x = grid.t, grid.x
    mask = np.zeros((grid.nt + 1, grid.nx), dtype=bool)
    straddle = np.zeros_like(mask)
    for n, tn in enumerate(t):
        for k in np.atleast_1d(kinks(tn)):
            straddle[n] |= np.abs(x - k) <= grid.dx * (1 + 1e-9)
    mask |= straddle
    mask[1:] |= straddle[:-1]
    mask[:-1] |= straddle[1:]
    return mask


def kink_centres(surface: ValueSurface, factor: float = 10.0) -> list[list[float]]:
    """Per time row, the x-positions of detected ``|V_xx|`` spikes."""
    a = np.abs(surface.node_dxx)
    band = detect_kinks(surface, factor)
    x = surface.grid.x
    out = []
    for n in range(a.shape[0]):
        row = []
        idx = np.flatnonzero(band[n, 1:-1]) + 1
        if idx.size:
            groups = np.split(idx, np.flatnonzero(np.diff(idx) > 1) + 1)
            for grp in groups:
                row.append(float(x[grp[np.argmax(a[n, grp])]]))
        out.append(row)
    return out


@dataclass
class ResidualReport:
    residual: np.ndarray
    mask: np.ndarray = field(repr=False)
    max_abs: float = 0.0
    mean_abs: float = 0.0
    n_nodes: int = 0

    def as_dict(self) -> dict:
        return {"max_abs": self.max_abs, "mean_abs": self.mean_abs, "n_nodes": self.n_nodes}


def hjb_residual(
    surface: ValueSurface,
    p: ControlProblem,
    u_mesh=None,
    exclude_kinks: bool = True,
    kinks: Optional[Callable] = None,
    rows: Optional[slice] = None,
) -> ResidualReport:
    """``R = V_t + min_u G(F)`` at interior nodes from the surface's node derivatives.

    Nodes in a detected kink band (and near ``kinks(t)`` lines, when given)
    are excluded; excluded and boundary nodes carry NaN.
    """
    g = surface.grid
    tt, xx = np.meshgrid(g.t, g.x, indexing="ij")
    mesh = None if (u_mesh is None and p.control.kind == "unbounded") else _control_candidates(p, u_mesh)
    best, _ = min_driver(p, tt, xx, surface.values, surface.node_dx, surface.node_dxx, mesh)
    R = surface.node_dt + best
    keep = np.ones_like(R, dtype=bool)
    # central stencils at the first interior node reach the boundary data
    keep[:, :2] = keep[:, -2:] = False
    if exclude_kinks:
        keep &= ~detect_kinks(surface)
        if kinks is not None:
            keep &= ~kink_band_mask(g, kinks)
    if rows is not None:
        sel = np.zeros(g.nt + 1, dtype=bool)
        sel[rows] = True
        keep &= sel[:, None]
    R = np.where(keep, R, np.nan)
    vals = np.abs(R[keep])
    return ResidualReport(
        R,
        keep,
        float(vals.max()) if vals.size else 0.0,
        float(vals.mean()) if vals.size else 0.0,
        int(vals.size),
    )


# ----------------------------------------------------------------- feedback


def feedback_at(model, p: ControlProblem, t, x, u_mesh=None):
    """Minimiser of ``G(F)`` at arbitrary points of a value model (smallest on ties)."""
    t, x = np.broadcast_arrays(np.asarray(t, dtype=float), np.asarray(x, dtype=float))
    mesh = None if (u_mesh is None and p.control.kind == "unbounded") else _control_candidates(p, u_mesh)
    _, u = min_driver(p, t, x, model.value(t, x), model.dx(t, x), model.dxx(t, x), mesh)
    return u


def feedback_function(model, p: ControlProblem, u_mesh=None) -> Callable:
    return lambda s, x: feedback_at(model, p, s, x, u_mesh)


def optimal_feedback(surface: ValueSurface, p: ControlProblem, u_mesh=None) -> np.ndarray:
    """Node table ``u_bar[n, i]`` of minimisers of ``G(F)`` on the surface."""
    g = surface.grid
    tt, xx = np.meshgrid(g.t, g.x, indexing="ij")
    mesh = None if (u_mesh is None and p.control.kind == "unbounded") else _control_candidates(p, u_mesh)
    _, u = min_driver(p, tt, xx, surface.values, surface.node_dx, surface.node_dxx, mesh)
    return u


def worst_case_feedback(model, p: ControlProblem, u_feedback: Callable, t=None, x=None):
    """Variance level ``g_maximizer(F(t, x, ., u_bar(t, x)))``.

    With ``t``/``x`` omitted the model must be a :class:`ValueSurface` and a
    node table is returned.
    """
    if t is None or x is None:
        g = model.grid
        t, x = np.meshgrid(g.t, g.x, indexing="ij")
        V, Vx, Vxx = model.values, model.node_dx, model.node_dxx
    else:
        t, x = np.broadcast_arrays(np.asarray(t, dtype=float), np.asarray(x, dtype=float))
        V, Vx, Vxx = model.value(t, x), model.dx(t, x), model.dxx(t, x)
    u = np.asarray(u_feedback(t, x), dtype=float) * np.ones_like(x)
    return g_maximizer(driver_F(p, t, x, V, Vx, Vxx, u), p.bounds)


def worst_case_scenario(model, p: ControlProblem, u_feedback: Callable) -> ScenarioMeasure:
    """Feedback scenario attaining the sup inside ``G`` along any path."""
    return ScenarioMeasure.feedback(
        lambda t, x: worst_case_feedback(model, p, u_feedback, t, x), label="worst-case-feedback"
    )
