"""Forward Euler paths under one scenario measure and the martingale diagnostics.

Under ``P^gamma`` the canonical process is ``dB = sqrt(gamma) dW`` with
``d<B> = gamma ds``, so one Euler step reads::

    X += h * gamma * ds + sigma * sqrt(gamma) * dW

Along such paths the module accumulates the value-function martingale
``K~ = int F d<B> / 2 - int G(F) ds`` and the optimal-trajectory martingale
``K`` (from the problem's closed-form increment), and evaluates the residuals
of ``Y = V(s, X)``, ``Z = sigma V_x`` and ``-V_s = G(F) = min_u G(F)``.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from .errors import DomainError, NumericalError
from .gcore import ScenarioMeasure, brownian_increments, g_scalar
from .problem import ControlProblem, driver_F, min_driver

__all__ = [
    "PathBundle",
    "simulate_forward",
    "bsde_candidates",
    "ktilde_accumulate",
    "k_accumulate",
    "relation_report",
    "mixed_derivative_check",
    "bsde_identity_residual",
    "cost_estimate",
    "driver_along",
    "kink_band",
    "fixed_order_mean",
]


@dataclass
class PathBundle:
    """Simulated trajectories; arrays are ``(n_paths, n_steps + 1)`` except
    ``gamma`` and ``dB`` which are per step, ``(n_paths, n_steps)``."""

    times: np.ndarray
    X: np.ndarray
    B: np.ndarray
    QV: np.ndarray
    gamma: np.ndarray
    u: np.ndarray
    seed: int
    scenario: str
    Y: Optional[np.ndarray] = None
    Z: Optional[np.ndarray] = None
    K: Optional[np.ndarray] = None
    Ktilde: Optional[np.ndarray] = None
    meta: dict = field(default_factory=dict)

    @property
    def n_paths(self) -> int:
        return self.X.shape[0]

    @property
    def n_steps(self) -> int:
        return self.times.size - 1

    @property
    def ds(self) -> np.ndarray:
        return np.diff(self.times)

    @property
    def dB(self) -> np.ndarray:
        return np.diff(self.B, axis=1)

    def to_csv(self, path) -> None:
        """Long format: one row per ``(path, step)``; missing columns are empty."""
        cols = ("X", "B", "QV", "gamma", "Y", "Z", "K", "Ktilde")
        n = self.n_steps
        gam = np.concatenate([self.gamma, self.gamma[:, -1:]], axis=1)
        data = {
            "X": self.X, "B": self.B, "QV": self.QV, "gamma": gam,
            "Y": self.Y, "Z": self.Z, "K": self.K, "Ktilde": self.Ktilde,
        }
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["path", "s", *cols])
            for i in range(self.n_paths):
                for k in range(n + 1):
                    row = [i, repr(float(self.times[k]))]
                    for c in cols:
                        a = data[c]
                        row.append("" if a is None else repr(float(a[i, k])))
                    w.writerow(row)

    def summary(self) -> dict:
        out = {"scenario": self.scenario, "seed": self.seed, "n_paths": self.n_paths, "n_steps": self.n_steps}
        if self.K is not None:
            out["K_T"] = _stats(self.K[:, -1])
        if self.Ktilde is not None:
            out["Ktilde_T"] = _stats(self.Ktilde[:, -1])
        return out


def _stats(a) -> dict:
    a = np.asarray(a, dtype=float)
    return {"mean": fixed_order_mean(a), "min": float(a.min()), "max": float(a.max())}


def fixed_order_mean(a) -> float:
    """Mean by numpy's pairwise summation over a contiguous copy (order fixed by index)."""
    a = np.ascontiguousarray(np.asarray(a, dtype=float).ravel())
    return float(np.sum(a) / a.size)


def simulate_forward(
    p: ControlProblem,
    u_feedback: Optional[Callable],
    scenario: ScenarioMeasure,
    t0: float,
    x0: float,
    n_steps: int,
    n_paths: int,
    seed: int = 0,
    T: Optional[float] = None,
    workers: int = 1,
    noise: Optional[np.ndarray] = None,
    first_path: int = 0,
) -> PathBundle:
    """Euler scheme for ``dX = h d<B> + sigma dB`` under ``P^gamma``.

    ``u_feedback(s, x)`` defaults to the oracle's optimal feedback.  ``noise``
    (shape ``(n_paths, n_steps)``) replaces the generated ``dW`` increments,
    e.g. to compare step sizes on one Brownian path.  ``first_path`` offsets
    the noise keys so a large run can be split into batches.  Problems flagged
    ``noise_free`` are simulated with a single path.
    """
    T = p.T if T is None else float(T)
    if not t0 < T:
        raise DomainError("need t0 < T")
    if n_steps < 1 or n_paths < 1:
        raise DomainError("need n_steps >= 1 and n_paths >= 1")
    if u_feedback is None:
        if p.oracle is None:
            raise DomainError("no feedback given and the problem has no oracle")
        u_feedback = p.oracle.u_bar
    if p.noise_free and noise is None:
        n_paths = 1
    scenario.validate(p.bounds, t0, T)
    times = np.linspace(t0, T, n_steps + 1)
    ds = np.diff(times)
    if noise is None:
        dW = brownian_increments(seed, n_paths, ds, workers=workers, first_path=first_path)
    else:
        dW = np.asarray(noise, dtype=float)
        if dW.shape != (n_paths, n_steps):
            raise DomainError(f"noise must have shape {(n_paths, n_steps)}")
    open_loop = None if scenario.kind == "feedback" else scenario.step_gammas(times)

    X = np.empty((n_paths, n_steps + 1))
    B = np.zeros_like(X)
    QV = np.zeros_like(X)
    U = np.empty_like(X)
    gam = np.empty((n_paths, n_steps))
    X[:, 0] = x0
    for k in range(n_steps):
        s = times[k]
        x = X[:, k]
        u = np.asarray(u_feedback(s, x), dtype=float) * np.ones(n_paths)
        if not p.control.contains(u):
            raise DomainError(f"feedback leaves the control set at step {k}")
        U[:, k] = u
        gk = open_loop[k] * np.ones(n_paths) if open_loop is not None else scenario.gamma_at(s, x)
        if not p.bounds.contains(gk):
            raise DomainError(f"scenario leaves the variance bounds at step {k}")
        gam[:, k] = gk
        dB = np.sqrt(gk) * dW[:, k]
        X[:, k + 1] = x + np.asarray(p.h(s, x, u)) * gk * ds[k] + np.asarray(p.sigma(s, x, u)) * dB
        B[:, k + 1] = B[:, k] + dB
        QV[:, k + 1] = QV[:, k] + gk * ds[k]
        if not np.all(np.isfinite(X[:, k + 1])):
            raise NumericalError(f"non-finite state at step {k + 1}")
    uT = np.asarray(u_feedback(times[-1], X[:, -1]), dtype=float) * np.ones(n_paths)
    if not p.control.contains(uT):
        raise DomainError("feedback leaves the control set at the horizon")
    U[:, -1] = uT
    return PathBundle(times, X, B, QV, gam, U, seed, scenario.label or scenario.kind, meta={"x0": x0, "t0": t0, "T": T})


def kink_band(model) -> float:
    """Half-width of the band around known kinks where ``F`` is not evaluated:
    ``1.5 dx`` on a grid surface, ``1e-9`` on a closed form."""
    grid = getattr(model, "grid", None)
    return 1.5 * grid.dx if grid is not None else 1e-9


def _in_band(model, s, X, band):
    if not hasattr(model, "kink_distance"):
        return np.zeros(np.shape(X), dtype=bool)
    return np.asarray(model.kink_distance(s, X), dtype=float) * np.ones(np.shape(X)) <= band


def driver_along(bundle: PathBundle, model, p: ControlProblem, u=None):
    """``F(s, X_s, V, V_x, V_xx, u_s)`` at every node of every path."""
    s = np.broadcast_to(bundle.times, bundle.X.shape)
    uu = bundle.u if u is None else u
    return driver_F(p, s, bundle.X, model.value(s, bundle.X), model.dx(s, bundle.X), model.dxx(s, bundle.X), uu)


def bsde_candidates(bundle: PathBundle, model, p: ControlProblem) -> PathBundle:
    """``Y_s = V(s, X_s)`` and ``Z_s = sigma(s, X_s, u_s) V_x(s, X_s)``."""
    s = np.broadcast_to(bundle.times, bundle.X.shape)
    Y = model.value(s, bundle.X)
    Z = np.asarray(p.sigma(s, bundle.X, bundle.u)) * model.dx(s, bundle.X)
    return replace(bundle, Y=np.asarray(Y, dtype=float), Z=np.asarray(Z, dtype=float) * np.ones_like(bundle.X))


def ktilde_accumulate(
    bundle: PathBundle, model, p: ControlProblem, rule: str = "left", band: Optional[float] = None
) -> PathBundle:
    """``K~_s = sum (F gamma / 2 - G(F)) ds`` along each path, ``K~_t = 0``.

    Each left-endpoint increment is non-positive because ``gamma F / 2 <= G(F)``
    for every admissible ``gamma``.  Steps starting within ``band`` of a known
    kink (default :func:`kink_band`) contribute nothing: ``F`` is undefined
    there.  Their count is stored in ``meta["ktilde_masked"]``.
    """
    band = kink_band(model) if band is None else band
    s_all = np.broadcast_to(bundle.times, bundle.X.shape)
    skip = _in_band(model, s_all, bundle.X, band)[:, :-1]
    F = driver_along(bundle, model, p)
    dens = 0.5 * F[:, :-1] * bundle.gamma - g_scalar(F[:, :-1], p.bounds)
    if rule == "trapezoid":
        right = 0.5 * F[:, 1:] * bundle.gamma - g_scalar(F[:, 1:], p.bounds)
        dens = 0.5 * (dens + right)
    elif rule != "left":
        raise DomainError("rule must be 'left' or 'trapezoid'")
    dens = np.where(skip, 0.0, dens)
    Kt = np.zeros_like(bundle.X)
    Kt[:, 1:] = np.cumsum(dens * bundle.ds, axis=1)
    return replace(bundle, Ktilde=Kt, meta={**bundle.meta, "ktilde_masked": int(skip.sum())})


def k_accumulate(bundle: PathBundle, p: ControlProblem, k_increment: Optional[Callable] = None) -> PathBundle:
    """Optimal-trajectory martingale ``K`` from a closed-form per-step increment."""
    inc = k_increment or p.k_increment
    if inc is None:
        raise DomainError(f"problem {p.name!r} provides no K increment")
    s = bundle.times[:-1]
    d = inc(s, bundle.ds, bundle.X[:, :-1], bundle.X[:, 1:], bundle.u[:, :-1], bundle.gamma)
    K = np.zeros_like(bundle.X)
    K[:, 1:] = np.cumsum(np.asarray(d, dtype=float) * np.ones_like(bundle.gamma), axis=1)
    return replace(bundle, K=K)


def relation_report(bundle: PathBundle, model, p: ControlProblem, Y=None, u_mesh=None) -> dict:
    """Residual statistics of the smooth-case relations along the paths.

    ``y_vs_v``: ``|Y - V(s, X_s)|``, with ``Y`` taken from the argument, else
    the bundle, else ``V`` itself (then zero by construction).
    ``pde_feedback``: ``|V_s + G(F(u_s))|``.  ``pde_min``: ``|V_s + min_u G(F)|``.
    """
    s = np.broadcast_to(bundle.times, bundle.X.shape)
    X = bundle.X
    V = np.asarray(model.value(s, X), dtype=float)
    if Y is None:
        Y = bundle.Y if bundle.Y is not None else V
    Y = np.asarray(Y, dtype=float) * np.ones_like(X)
    Vt = model.dt(s, X)
    F = driver_F(p, s, X, V, model.dx(s, X), model.dxx(s, X), bundle.u)
    mesh = None if (u_mesh is None and p.control.kind == "unbounded") else (
        p.control.mesh() if u_mesh is None else np.asarray(u_mesh, dtype=float)
    )
    best, _ = min_driver(p, s, X, V, model.dx(s, X), model.dxx(s, X), mesh)
    out = {}
    for key, r in (
        ("y_vs_v", np.abs(Y - V)),
        ("pde_feedback", np.abs(Vt + g_scalar(F, p.bounds))),
        ("pde_min", np.abs(Vt + best)),
    ):
        out[key] = {"max": float(np.max(r)), "mean": fixed_order_mean(r)}
    return out


def _dFdx(model, p: ControlProblem, s, x, u):
    delta = np.asarray(model.x_step(x), dtype=float) * np.ones_like(x)

    def F(xx):
        return driver_F(p, s, xx, model.value(s, xx), model.dx(s, xx), model.dxx(s, xx), u)

    return (F(x + delta) - F(x - delta)) / (2 * delta)


def mixed_derivative_check(model, p: ControlProblem, bundle: PathBundle, threshold: Optional[float] = None) -> dict:
    """Compare ``V_sx(s, X_s)`` with ``-gamma_s dF/dx / 2`` along the paths.

    ``dF/dx`` is the total x-derivative of ``x -> F(s, x, V, V_x, V_xx, u_s)``
    at fixed control, by central differences of the value model.  Steps with
    ``|F| > threshold`` give the residual; the others report the implied level
    ``v_s = -2 V_sx / (dF/dx)`` (NaN, "undetermined", when ``dF/dx`` is also
    below threshold).  Steps whose difference stencil reaches a known kink are
    left out and counted in ``n_masked``.
    """
    s = np.broadcast_to(bundle.times[:-1], bundle.gamma.shape)
    X = bundle.X[:, :-1]
    u = bundle.u[:, :-1]
    reach = np.maximum(2.0 * np.asarray(model.x_step(X), dtype=float), kink_band(model))
    masked = _in_band(model, s, X, reach)
    F = driver_F(p, s, X, model.value(s, X), model.dx(s, X), model.dxx(s, X), u)
    dF = _dFdx(model, p, s, X, u)
    Vsx = np.asarray(model.dtx(s, X), dtype=float) * np.ones_like(X)
    if threshold is None:
        threshold = 1e-6 * (1.0 + float(np.max(np.abs(F))))
    active = (np.abs(F) > threshold) & ~masked
    resid = np.abs(Vsx + 0.5 * bundle.gamma * dF)
    with np.errstate(divide="ignore", invalid="ignore"):
        implied = np.where(np.abs(dF) > threshold, -2.0 * Vsx / dF, np.nan)
    flat = (np.abs(F) <= threshold) & ~masked
    imp = implied[flat]
    determined = imp[np.isfinite(imp)]
    lo, hi = p.bounds.extremes
    return {
        "threshold": threshold,
        "n_active": int(active.sum()),
        "n_flat": int(flat.sum()),
        "n_masked": int(masked.sum()),
        "active_max_residual": float(resid[active].max()) if active.any() else 0.0,
        "active_scale": float(np.max(np.abs(Vsx[active]))) if active.any() else 0.0,
        "implied_v": determined,
        "n_undetermined": int(imp.size - determined.size),
        "implied_in_bounds": bool(np.all((determined >= lo - 1e-9) & (determined <= hi + 1e-9))),
    }


def bsde_identity_residual(bundle: PathBundle, p: ControlProblem) -> float:
    """``max |Y_T - Y_t + sum g d<B> - sum Z dB - (K_T - K_t)|`` over paths.

    Needs ``Y`` and ``Z`` (``K`` taken as zero when absent); the residual is the
    Euler discretisation error of the backward equation along the path.
    """
    if bundle.Y is None or bundle.Z is None:
        raise DomainError("bundle has no Y/Z candidates")
    s = bundle.times[:-1]
    Y, Z = bundle.Y, bundle.Z
    gv = np.asarray(p.g(s, bundle.X[:, :-1], Y[:, :-1], Z[:, :-1], bundle.u[:, :-1])) * np.ones_like(bundle.gamma)
    K = bundle.K if bundle.K is not None else np.zeros_like(Y)
    r = (Y[:, -1] - Y[:, 0]) + np.sum(gv * bundle.gamma * bundle.ds, axis=1) - np.sum(Z[:, :-1] * bundle.dB, axis=1) - (K[:, -1] - K[:, 0])
    return float(np.max(np.abs(r)))


def cost_estimate(bundle: PathBundle, p: ControlProblem) -> tuple[float, float]:
    """Monte Carlo mean and standard error of ``Phi(X_T) + int g d<B>``.

    ``g`` is read at the bundle's ``Y``/``Z`` when present, else at zero.
    """
    s = bundle.times[:-1]
    X = bundle.X[:, :-1]
    Y = bundle.Y[:, :-1] if bundle.Y is not None else np.zeros_like(X)
    Z = bundle.Z[:, :-1] if bundle.Z is not None else np.zeros_like(X)
    gv = np.asarray(p.g(s, X, Y, Z, bundle.u[:, :-1])) * np.ones_like(X)
    cost = np.asarray(p.phi(bundle.X[:, -1])) + np.sum(gv * bundle.gamma * bundle.ds, axis=1)
    n = cost.size
    se = float(np.std(cost, ddof=1) / np.sqrt(n)) if n > 1 else 0.0
    return fixed_order_mean(cost), se


def write_summary(path, payload: dict) -> None:
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True, default=_json_default)
        fh.write("\n")


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.bool_):
        return bool(o)
    raise TypeError(f"not JSON serialisable: {type(o).__name__}")
