"""Adjoint process under a fixed scenario, maximum-principle check and jets.

Under one classical measure the linear adjoint equation

    dp = -(alpha p + beta q + g_x) d<B> + q dB + dN,   p_T = Phi'(X_T),

with ``alpha = h_x + g_y + g_z sigma_x`` and ``beta = g_z + sigma_x`` has the
representation ``p_t = E[lambda_T Phi'(X_T) + int lambda g_x d<B>]`` where
``lambda = exp(int beta dB + int (alpha - beta^2/2) d<B>)``.  When the value
function is smooth along the optimal path the solution is also available in
feedback form, ``p = V_x``, ``q = sigma V_xx``, ``N = 0``.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import DomainError, MembershipError, NumericalError
from .gcore import ScenarioMeasure
from .problem import ControlProblem, hamiltonian_u
from .simulate import (
    PathBundle,
    bsde_candidates,
    fixed_order_mean,
    k_accumulate,
    kink_band,
    simulate_forward,
)

__all__ = [
    "AdjointSolution",
    "MCEstimate",
    "JetReport",
    "adjoint_weights",
    "adjoint_p_mc",
    "adjoint_feedback",
    "adjoint_consistency",
    "mp_check",
    "one_sided_dx",
    "jet_intervals",
    "p_bounds",
    "membership",
    "reference_candidates",
    "jet_report",
]

_LOG_MAX = 700.0
_BATCH = 2000


@dataclass
class AdjointSolution:
    """Adjoint triple ``(p, q, N)`` along a bundle; ``mask`` flags kink-band steps."""

    times: np.ndarray
    p: np.ndarray
    q: np.ndarray
    N: np.ndarray
    lam: np.ndarray
    mask: np.ndarray
    scenario: str
    stderr: float = 0.0
    identity_residual: float = 0.0

    @property
    def p_t(self) -> float:
        """Mean over paths of the first unmasked ``p``; NaN when every step is masked."""
        vals = []
        for i in range(self.p.shape[0]):
            ok = np.flatnonzero(~self.mask[i])
            if ok.size:
                vals.append(self.p[i, ok[0]])
        return fixed_order_mean(vals) if vals else math.nan


@dataclass(frozen=True)
class MCEstimate:
    mean: float
    stderr: float
    n_paths: int
    scenario: str


@dataclass
class JetReport:
    """One-sided derivatives and first-order jets of ``V(t, .)`` at ``x``.

    Intervals are ``[lo, hi]`` lists; an empty jet is ``None``.
    """

    d_minus: float
    d_plus: float
    D1_minus: Optional[list]
    D1_plus: Optional[list]
    p_tilde: Optional[float] = None
    p_bar: Optional[float] = None
    containment: Optional[bool] = None
    extra: dict = field(default_factory=dict)


# ------------------------------------------------------------- weights / MC


def _coeffs(bundle: PathBundle, p: ControlProblem):
    s = np.broadcast_to(bundle.times[:-1], bundle.gamma.shape)
    X = bundle.X[:, :-1]
    u = bundle.u[:, :-1]
    Y = bundle.Y[:, :-1] if bundle.Y is not None else np.zeros_like(X)
    Z = bundle.Z[:, :-1] if bundle.Z is not None else np.zeros_like(X)
    hx = p.deriv("h_x", s, X, u)
    sx = p.deriv("sigma_x", s, X, u)
    gx = p.deriv("g_x", s, X, Y, Z, u)
    gy = p.deriv("g_y", s, X, Y, Z, u)
    gz = p.deriv("g_z", s, X, Y, Z, u)
    alpha = (hx + gy + gz * sx) * np.ones_like(X)
    beta = (gz + sx) * np.ones_like(X)
    return alpha, beta, gx * np.ones_like(X)


def adjoint_weights(bundle: PathBundle, p: ControlProblem) -> np.ndarray:
    """``lambda`` on every node of every path, accumulated in log space; ``lambda_t = 1``.

    Coefficients are read at ``(s, X, Y, Z, u)`` with ``Y = Z = 0`` when the
    bundle carries no candidates.
    """
    alpha, beta, _ = _coeffs(bundle, p)
    dlog = beta * bundle.dB + (alpha - 0.5 * beta**2) * bundle.gamma * bundle.ds
    logl = np.zeros_like(bundle.X)
    logl[:, 1:] = np.cumsum(dlog, axis=1)
    if np.any(logl > _LOG_MAX) or not np.all(np.isfinite(logl)):
        raise NumericalError("adjoint weight overflows")
    return np.exp(logl)


def _mc_samples(bundle: PathBundle, p: ControlProblem) -> np.ndarray:
    lam = adjoint_weights(bundle, p)
    _, _, gx = _coeffs(bundle, p)
    term = lam[:, -1] * p.deriv("phi_x", bundle.X[:, -1])
    run = np.sum(lam[:, :-1] * gx * bundle.gamma * bundle.ds, axis=1)
    return term + run


def adjoint_p_mc(
    p: ControlProblem,
    scenario: ScenarioMeasure,
    t: float,
    x: float,
    n_paths: int,
    n_steps: int,
    seed: int = 0,
    u_feedback: Optional[Callable] = None,
    model=None,
    workers: int = 1,
) -> MCEstimate:
    """Monte Carlo estimate of ``p_t`` under ``scenario`` along the optimal path.

    ``model`` (default: the problem's oracle) supplies ``Y``/``Z`` for the
    coefficient derivatives.  Deterministic problems use one path and report
    a zero standard error.  Paths are processed in fixed-size batches and
    reduced in path order.
    """
    if n_paths < 2:
        raise DomainError("adjoint_p_mc needs n_paths >= 2")
    model = p.oracle if model is None else model
    if p.noise_free:
        n_paths = 1
    chunks = []
    for start in range(0, n_paths, _BATCH):
        m = min(_BATCH, n_paths - start)
        b = simulate_forward(p, u_feedback, scenario, t, x, n_steps, m, seed=seed, workers=workers, first_path=start)
        if model is not None:
            b = bsde_candidates(b, model, p)
        chunks.append(_mc_samples(b, p))
    vals = np.concatenate(chunks)
    se = float(np.std(vals, ddof=1) / math.sqrt(vals.size)) if vals.size > 1 else 0.0
    return MCEstimate(fixed_order_mean(vals), se, int(vals.size), scenario.label or scenario.kind)


# ----------------------------------------------------------------- feedback


def adjoint_feedback(model, p: ControlProblem, bundle: PathBundle, band: Optional[float] = None) -> AdjointSolution:
    """``p = V_x(s, X_s)``, ``q = sigma V_xx(s, X_s)``, ``N = 0`` along the bundle.

    Nodes closer than ``band`` to a known kink (default ``1.5 dx`` on a grid
    surface, ``1e-9`` on a closed form) are masked.  ``identity_residual`` is
    the largest accumulated defect of the discrete adjoint equation over
    unmasked steps, the part a nonzero ``N`` would have to absorb.
    """
    s = np.broadcast_to(bundle.times, bundle.X.shape)
    X = bundle.X
    band = kink_band(model) if band is None else band
    dist = np.asarray(model.kink_distance(s, X), dtype=float) * np.ones_like(X)
    mask = dist <= band
    pp = np.asarray(model.dx(s, X), dtype=float) * np.ones_like(X)
    qq = np.asarray(p.sigma(s, X, bundle.u), dtype=float) * np.asarray(model.dxx(s, X), dtype=float)
    if bundle.Y is None:
        bundle = bsde_candidates(bundle, model, p)
    lam = adjoint_weights(bundle, p)
    alpha, beta, gx = _coeffs(bundle, p)
    defect = (
        pp[:, 1:] - pp[:, :-1]
        + (alpha * pp[:, :-1] + beta * qq[:, :-1] + gx) * bundle.gamma * bundle.ds
        - qq[:, :-1] * bundle.dB
    )
    step_ok = ~(mask[:, 1:] | mask[:, :-1])
    cum = np.cumsum(np.where(step_ok, defect, 0.0), axis=1)
    resid = float(np.max(np.abs(cum))) if cum.size else 0.0
    return AdjointSolution(
        bundle.times, pp, qq, np.zeros_like(pp), lam, mask, bundle.scenario, identity_residual=resid
    )


def adjoint_consistency(p_feedback, p_mc: MCEstimate, grid_tol: float = 1e-3) -> dict:
    """``|p_t^feedback - p_t^mc|`` against ``grid_tol + 3 stderr``."""
    pf = p_feedback.p_t if isinstance(p_feedback, AdjointSolution) else float(p_feedback)
    disc = abs(pf - p_mc.mean)
    tol = grid_tol + 3.0 * p_mc.stderr
    return {"p_feedback": pf, "p_mc": p_mc.mean, "stderr": p_mc.stderr, "discrepancy": disc, "tolerance": tol, "pass": bool(disc <= tol)}


def mp_check(
    p: ControlProblem,
    bundle: PathBundle,
    adjoint: AdjointSolution,
    u_mesh=None,
    tol: Optional[float] = None,
) -> dict:
    """Minimum over mesh controls and unmasked steps of ``H_u (u - u_bar)``.

    ``H_u`` is read at ``(X, Y, Z, u_bar, p, q, s)``.  For unbounded control
    sets the default mesh is the truncation mesh.  PASS iff the minimum is at
    least ``-tol`` (default ``1e-6 (1 + max |H_u| R)`` with ``R`` the mesh span).
    """
    mesh = p.control.mesh() if u_mesh is None else np.asarray(u_mesh, dtype=float)
    if mesh.size == 0:
        raise DomainError("empty control mesh")
    if bundle.Y is None or bundle.Z is None:
        raise DomainError("mp_check needs Y/Z candidates on the bundle")
    s = np.broadcast_to(bundle.times, bundle.X.shape)
    Hu = hamiltonian_u(p, bundle.X, bundle.Y, bundle.Z, bundle.u, adjoint.p, adjoint.q, s)
    Hu = np.asarray(Hu, dtype=float) * np.ones_like(bundle.X)
    keep = ~adjoint.mask
    if not keep.any():
        raise DomainError("every step is masked")
    du = mesh[:, None] - bundle.u[keep][None, :]
    prod = Hu[keep][None, :] * du
    mn = float(prod.min())
    span = float(np.max(np.abs(du)))
    if tol is None:
        tol = 1e-6 * (1.0 + float(np.max(np.abs(Hu[keep]))) * span)
    return {"mp_min": mn, "max_abs_Hu": float(np.max(np.abs(Hu[keep]))), "tolerance": tol, "pass": bool(mn >= -tol)}


# --------------------------------------------------------------------- jets


def _evaluator(f):
    if callable(f) and not hasattr(f, "value"):
        return f
    return f.value


def one_sided_dx(value_function, t: float, x: float, h0: float = 1e-2) -> tuple[float, float]:
    """Left and right x-derivatives by Richardson extrapolation.

    One-sided quotients at ``h0, h0/2, h0/4`` are combined twice, cancelling
    the ``O(h)`` and ``O(h^2)`` terms.  ``value_function`` is ``f(t, x)`` or an
    object with ``.value``.
    """
    f = _evaluator(value_function)
    try:
        f0 = float(f(t, x))
        hs = (h0, h0 / 2, h0 / 4)
        right = [(float(f(t, x + h)) - f0) / h for h in hs]
        left = [(f0 - float(f(t, x - h))) / h for h in hs]
    except (DomainError, ValueError) as exc:
        raise DomainError(f"evaluator failed near x={x}: {exc}") from exc

    def rich(d):
        r1 = [2 * d[1] - d[0], 2 * d[2] - d[1]]
        return (4 * r1[1] - r1[0]) / 3

    return rich(left), rich(right)


def jet_intervals(d_minus: float, d_plus: float, tol: Optional[float] = None) -> JetReport:
    """First-order sub-jet ``D1_minus`` and super-jet ``D1_plus`` in one dimension.

    One-sided derivatives closer than ``tol`` (default ``1e-6 (1 + |d|)``) are
    treated as equal, giving two singletons.
    """
    if tol is None:
        tol = 1e-6 * (1.0 + max(abs(d_minus), abs(d_plus)))
    if abs(d_plus - d_minus) <= tol:
        d = 0.5 * (d_minus + d_plus)
        return JetReport(d_minus, d_plus, [d, d], [d, d])
    if d_minus < d_plus:
        return JetReport(d_minus, d_plus, [d_minus, d_plus], None)
    return JetReport(d_minus, d_plus, None, [d_plus, d_minus])


# ------------------------------------------------------------ bounds on p_t


def membership(
    p: ControlProblem,
    scenario: ScenarioMeasure,
    t: float,
    x: float,
    n_steps: int = 2000,
    n_paths: int = 200,
    seed: int = 0,
    tol: float = 1e-6,
) -> dict:
    """Numerical membership test of the optimal-path family: ``max |K_T| <= tol``.

    Since ``K_T <= 0``, a vanishing expectation forces ``K_T = 0`` pathwise,
    so the maximum over simulated paths is the statistic.
    """
    b = simulate_forward(p, None, scenario, t, x, n_steps, n_paths, seed=seed)
    b = k_accumulate(b, p)
    kt = np.abs(b.K[:, -1])
    return {"scenario": b.scenario, "max_abs_K_T": float(kt.max()), "mean_K_T": fixed_order_mean(b.K[:, -1]), "member": bool(kt.max() <= tol)}


def p_bounds(
    p: ControlProblem,
    candidates: Sequence[ScenarioMeasure],
    t: float,
    x: float,
    n_paths: int = 2,
    n_steps: int = 2000,
    seed: int = 0,
    tol: float = 1e-6,
    jets: Optional[JetReport] = None,
    jet_tol: float = 1e-6,
) -> tuple[float, float, dict]:
    """Inside approximation ``(p_tilde, p_bar)`` over certified candidates.

    Every candidate must pass :func:`membership`; otherwise
    :class:`MembershipError` is raised.  With ``jets`` given, the returned
    details include whether ``D1_minus`` lies in ``[p_tilde - tol', p_bar + tol']``
    with ``tol' = jet_tol + 3 max stderr`` (``jet_tol`` alone for
    deterministic paths).
    """
    if not candidates:
        raise DomainError("empty candidate list")
    ests, members = [], []
    for sc in candidates:
        m = membership(p, sc, t, x, n_steps=n_steps, n_paths=max(n_paths, 2), seed=seed, tol=tol)
        members.append(m)
        if not m["member"]:
            raise MembershipError(f"scenario {m['scenario']} fails the membership test (|K_T| = {m['max_abs_K_T']:.3e})")
        ests.append(adjoint_p_mc(p, sc, t, x, max(n_paths, 2), n_steps, seed=seed))
    vals = [e.mean for e in ests]
    lo, hi = min(vals), max(vals)
    ctol = jet_tol + 3.0 * max(e.stderr for e in ests)
    details = {"candidates": members, "estimates": [asdict(e) for e in ests], "containment_tol": ctol}
    if jets is not None:
        if jets.D1_minus is None:
            details["containment"] = True
        else:
            a, b = jets.D1_minus
            details["containment"] = bool(a >= lo - ctol and b <= hi + ctol)
    return lo, hi, details


def reference_candidates(p: ControlProblem, t: float, n_levels: int = 5) -> list[ScenarioMeasure]:
    """Candidate scenarios for the membership test.

    Constant levels on an even mesh of the variance bounds, plus, for a
    problem with parameter ``v`` (the example with a flat cost region),
    two-piece scenarios on ``[t, T]`` whose mean level equals ``1/v``.
    """
    lo, hi = p.bounds.extremes
    out = [ScenarioMeasure.constant(g) for g in np.linspace(lo, hi, n_levels)]
    v = p.params.get("v")
    if v is not None:
        target = 1.0 / v
        mid = 0.5 * (t + p.T)
        for a in np.linspace(lo, hi, n_levels):
            b = 2 * target - a
            if lo <= b <= hi and abs(a - b) > 1e-12:
                out.append(ScenarioMeasure.piecewise([a, b], [mid]))
    return out


def jet_report(model, t: float, x: float, h0: float = 1e-2, **extra) -> JetReport:
    dm, dp = one_sided_dx(model, t, x, h0)
    r = jet_intervals(dm, dp)
    r.extra.update(extra)
    return r


def report_json(payload: dict) -> str:
    """Stable JSON (sorted keys, NaN written as null)."""
    return json.dumps(_clean(payload), indent=2, sort_keys=True) + "\n"


def _clean(o):
    if isinstance(o, dict):
        return {str(k): _clean(v) for k, v in o.items()}
    if isinstance(o, (list, tuple)):
        return [_clean(v) for v in o]
    if isinstance(o, np.ndarray):
        return _clean(o.tolist())
    if isinstance(o, (np.floating, float)):
        f = float(o)
        return f if math.isfinite(f) else None
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, np.bool_):
        return bool(o)
    return o
