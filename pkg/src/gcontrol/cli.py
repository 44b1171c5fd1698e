"""Command-line front end: ``gcontrol <subcommand> [options]``.

Every option can also be set in a YAML file passed with ``--config``; flags
given on the command line win.  Outputs go to ``--out``, else the config's
``out``, else ``$GCONTROL_OUT``, else ``./gcontrol-out``.

Exit codes: 0 success, 1 verification failure, 2 configuration error,
3 numerical failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np
import yaml

from . import __version__
from .adjoint import (
    adjoint_consistency,
    adjoint_feedback,
    adjoint_p_mc,
    jet_intervals,
    membership,
    mp_check,
    one_sided_dx,
    p_bounds,
    reference_candidates,
    report_json,
)
from .errors import DomainError, GControlError, MembershipError, NumericalError
from .gcore import ScenarioMeasure, VolBounds
from .hjb import (
    Grid,
    cfl_steps,
    detect_kinks,
    feedback_function,
    gheat_solve,
    hjb_residual,
    hjb_solve,
    kink_band_mask,
    kink_centres,
    worst_case_scenario,
)
from .problem import builtin_example, problem_from_config, riccati_closed, riccati_solve
from .simulate import (
    bsde_candidates,
    k_accumulate,
    ktilde_accumulate,
    mixed_derivative_check,
    relation_report,
    simulate_forward,
)

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2, 3
ENV_OUT = "GCONTROL_OUT"

# per-example defaults: horizon, grid box, spacing, boundary mode
EXAMPLE_DEFAULTS = {
    1: {"T": 1.0, "x_lo": -2.0, "x_hi": 2.0, "dx": 0.01, "boundary": "dirichlet"},
    2: {"T": 1.0, "x_lo": -1.0, "x_hi": 1.0, "dx": 0.05, "boundary": "dirichlet"},
    3: {"T": 2.0, "x_lo": -2.0, "x_hi": 2.0, "dx": 0.005, "boundary": "dirichlet"},
}


class ConfigError(GControlError):
    """Invalid or inconsistent run configuration."""


@dataclass
class RunConfig:
    """Resolved options of one run; ``None`` means "use the command's default"."""

    example: Optional[int] = None
    problem: Optional[dict] = None
    T: Optional[float] = None
    v: Optional[float] = None
    t0: Optional[float] = None
    x0: Optional[float] = None
    x_lo: Optional[float] = None
    x_hi: Optional[float] = None
    dx: Optional[float] = None
    nx: Optional[int] = None
    nt: Optional[int] = None
    boundary: Optional[str] = None
    scenario: list = field(default_factory=list)
    gamma: Optional[float] = None
    seed: int = 0
    paths: Optional[int] = None
    steps: Optional[int] = None
    workers: int = 1
    tol: Optional[float] = None
    csv_paths: int = 100
    csv_rows: int = 1001
    # g-heat / riccati / jets specifics
    phi: str = "xsq"
    tau: float = 1.0
    sigma_lo_sq: float = 0.2
    sigma_hi_sq: float = 1.0
    dt: float = 1e-4
    tstar: Optional[float] = None
    point: Optional[str] = None
    out: Optional[str] = None

    def validate(self):
        if self.example is None and self.problem is None:
            self.example = 1
        if self.example is not None and self.example not in EXAMPLE_DEFAULTS:
            raise ConfigError(f"unknown example {self.example}")
        if self.tol is not None and not self.tol > 0:
            raise ConfigError("tolerances must be positive")
        for name in ("paths", "steps", "nx", "nt"):
            val = getattr(self, name)
            if val is not None and val < 1:
                raise ConfigError(f"{name} must be positive")
        if self.dx is not None and not self.dx > 0:
            raise ConfigError("dx must be positive")
        if self.boundary not in (None, "dirichlet", "linear"):
            raise ConfigError("boundary must be 'dirichlet' or 'linear'")
        if self.workers < 1:
            raise ConfigError("workers must be at least 1")
        return self

    def hash(self) -> str:
        d = {k: v for k, v in asdict(self).items() if k != "out"}
        return hashlib.sha256(json.dumps(d, sort_keys=True, default=str).encode()).hexdigest()[:16]


_CFG_FIELDS = {f.name for f in fields(RunConfig)}


def load_config(path: Optional[str]) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file {path} does not exist")
    try:
        data = yaml.safe_load(p.read_text()) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigError("config must be a mapping")
    unknown = set(data) - _CFG_FIELDS
    if unknown:
        raise ConfigError(f"unknown config keys {sorted(unknown)}")
    if "scenario" in data and isinstance(data["scenario"], str):
        data["scenario"] = [data["scenario"]]
    return data


def resolve_config(args: argparse.Namespace) -> RunConfig:
    merged = load_config(getattr(args, "config", None))
    for name in _CFG_FIELDS:
        val = getattr(args, name, None)
        if val is not None and val != []:
            merged[name] = val
    try:
        cfg = RunConfig(**merged)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None
    return cfg.validate()


def out_dir(cfg: RunConfig) -> Path:
    d = Path(cfg.out or os.environ.get(ENV_OUT) or "gcontrol-out")
    d.mkdir(parents=True, exist_ok=True)
    return d


# ------------------------------------------------------------------ helpers


def make_problem(cfg: RunConfig):
    """``(problem, oracle_or_None, defaults)`` from the config."""
    if cfg.problem is not None:
        try:
            p = problem_from_config(cfg.problem)
        except (DomainError, TypeError, ValueError) as exc:
            raise ConfigError(f"bad problem definition: {exc}") from None
        return p, None, {"T": p.T, "x_lo": -2.0, "x_hi": 2.0, "dx": 0.02, "boundary": "linear"}
    kw = {"T": cfg.T}
    if cfg.example == 3:
        kw["v"] = cfg.v
    try:
        p, o = builtin_example(cfg.example, **kw)
    except DomainError as exc:
        raise ConfigError(str(exc)) from None
    return p, o, dict(EXAMPLE_DEFAULTS[cfg.example], T=p.T)


def default_point(cfg: RunConfig, p, oracle) -> tuple[float, float]:
    """Default evaluation point: the kink of example 1 at ``t*``, ``(0, 1)``
    for example 2, ``(T - 1, 0)`` for example 3, ``(0, 0)`` otherwise."""
    t0 = cfg.t0 if cfg.t0 is not None else cfg.tstar
    if cfg.example == 1:
        t0 = 0.0 if t0 is None else t0
        x0 = -oracle.aux["kink_slope"] * (p.T - t0)
    elif cfg.example == 2:
        t0, x0 = (0.0 if t0 is None else t0), 1.0
    elif cfg.example == 3:
        t0, x0 = (p.T - 1.0 if t0 is None else t0), 0.0
    else:
        t0, x0 = (0.0 if t0 is None else t0), 0.0
    if cfg.x0 is not None:
        x0 = cfg.x0
    if not 0.0 <= t0 < p.T:
        raise ConfigError("evaluation time must lie in [0, T)")
    return float(t0), float(x0)


def make_grid(cfg: RunConfig, p, defaults: dict, t0: float = 0.0) -> Grid:
    x_lo = cfg.x_lo if cfg.x_lo is not None else defaults["x_lo"]
    x_hi = cfg.x_hi if cfg.x_hi is not None else defaults["x_hi"]
    if not x_lo < x_hi:
        raise ConfigError("need x_lo < x_hi")
    if cfg.nx is not None:
        nx = cfg.nx
    else:
        dx = cfg.dx if cfg.dx is not None else defaults["dx"]
        nx = int(round((x_hi - x_lo) / dx)) + 1
    mode = cfg.boundary or defaults["boundary"]
    nt = cfg.nt if cfg.nt is not None else cfl_steps(p, x_lo, x_hi, nx, t0, p.T)
    try:
        return Grid(x_lo, x_hi, nx, t0, p.T, nt, boundary_mode=mode)
    except DomainError as exc:
        raise ConfigError(str(exc)) from None


def parse_scenario(spec: str, p, oracle, t0: float) -> ScenarioMeasure:
    """``constant:G`` | ``piecewise:G1,G2,...[@b1,b2,...]`` | ``reference`` | ``worst-case``.

    Piecewise levels without breakpoints split ``[t0, T]`` evenly.
    """
    spec = spec.strip()
    try:
        if spec == "reference":
            if oracle is None or oracle.reference is None:
                raise ConfigError("no reference scenario known for this problem")
            return oracle.reference
        if spec == "worst-case":
            if oracle is None:
                raise ConfigError("worst-case scenario needs a value model")
            return worst_case_scenario(oracle, p, oracle.u_bar)
        kind, _, rest = spec.partition(":")
        if kind == "constant":
            sc = ScenarioMeasure.constant(float(rest))
        elif kind == "piecewise":
            lv, _, bp = rest.partition("@")
            vals = [float(a) for a in lv.split(",")]
            if bp:
                sc = ScenarioMeasure.piecewise(vals, [float(b) for b in bp.split(",")])
            else:
                sc = ScenarioMeasure.piecewise_even(vals, t0, p.T)
        else:
            raise ConfigError(f"unknown scenario {spec!r}")
        sc.validate(p.bounds, t0, p.T)
        return sc
    except (ValueError, DomainError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"bad scenario {spec!r}: {exc}") from None


def _scenarios(cfg: RunConfig, p, oracle, t0: float) -> list[ScenarioMeasure]:
    specs = list(cfg.scenario)
    if cfg.gamma is not None:
        specs.insert(0, f"constant:{cfg.gamma!r}")
    if not specs:
        specs = ["reference"]
    return [parse_scenario(s, p, oracle, t0) for s in specs]


def _header(cfg: RunConfig, command: str) -> dict:
    return {"command": command, "version": __version__, "config_hash": cfg.hash()}


def _write(path: Path, payload: dict) -> None:
    path.write_text(report_json(payload))


def _rel_err(surface, oracle, p, grid) -> dict:
    tt, xx = np.meshgrid(grid.t, grid.x, indexing="ij")
    exact = oracle.value(tt, xx)
    mask = kink_band_mask(grid, oracle.kinks) if oracle._kinks is not None else np.zeros_like(exact, dtype=bool)
    err = np.abs(surface.values - exact)[~mask]
    scale = 1.0 + float(np.max(np.abs(exact)))
    return {"max_abs_error": float(err.max()), "relative_error": float(err.max()) / scale}


# ----------------------------------------------------------------- commands


def cmd_solve_hjb(cfg: RunConfig) -> int:
    p, oracle, defaults = make_problem(cfg)
    grid = make_grid(cfg, p, defaults)
    surface = hjb_solve(p, grid)
    out = out_dir(cfg)
    surface.to_csv(out / "surface.csv", max_rows=cfg.csv_rows)
    known = oracle.kinks if (oracle is not None and oracle._kinks is not None) else None
    res = hjb_residual(surface, p, kinks=known)
    scale = 1.0 + float(np.max(np.abs(surface.node_dt)))
    tol = cfg.tol if cfg.tol is not None else 5e-2
    rel = res.max_abs / scale
    payload = _header(cfg, "solve-hjb")
    payload.update(
        grid={"x_lo": grid.x_lo, "x_hi": grid.x_hi, "nx": grid.nx, "nt": grid.nt, "dx": grid.dx, "dt": grid.dt, "boundary": grid.boundary_mode},
        residual=res.as_dict(),
        relative_residual=rel,
        tolerance=tol,
        kinks=_kink_rows(surface),
    )
    t0 = grid.t0 if cfg.t0 is None else cfg.t0
    x0 = 0.0 if cfg.x0 is None else cfg.x0
    payload["point"] = {"t": t0, "x": x0, "V": float(surface.value(t0, x0))}
    if oracle is not None:
        payload["point"]["V_exact"] = float(oracle.value(t0, x0))
        payload["oracle"] = _rel_err(surface, oracle, p, grid)
    payload["pass"] = bool(rel <= tol)
    _write(out / "residual.json", payload)
    print(f"V({t0:g}, {x0:g}) = {payload['point']['V']:.6f}")
    if oracle is not None:
        print(f"closed form {payload['point']['V_exact']:.6f}, max error off kinks {payload['oracle']['max_abs_error']:.3e}")
    print(f"relative HJB residual {rel:.3e} (tol {tol:g}): {'PASS' if payload['pass'] else 'FAIL'}")
    return EXIT_OK if payload["pass"] else EXIT_FAIL


def _kink_rows(surface, n_rows: int = 11) -> list:
    """Detected kink centres on at most ``n_rows`` evenly spaced time rows."""
    centres = kink_centres(surface)
    idx = np.unique(np.linspace(0, len(centres) - 1, n_rows).round().astype(int))
    return [{"t": float(surface.grid.t[i]), "x": centres[i]} for i in idx]


_PHI = {
    "xsq": (lambda x: x**2, lambda b, tau, x: x**2 + b.sigma_hi_sq * tau),
    "negxsq": (lambda x: -(x**2), lambda b, tau, x: -(x**2) - b.sigma_lo_sq * tau),
    "abs": (np.abs, None),
}


def cmd_gheat(cfg: RunConfig) -> int:
    if cfg.phi not in _PHI:
        raise ConfigError(f"phi must be one of {sorted(_PHI)}")
    try:
        bounds = VolBounds(cfg.sigma_lo_sq, cfg.sigma_hi_sq)
    except DomainError as exc:
        raise ConfigError(str(exc)) from None
    if not cfg.tau > 0:
        raise ConfigError("tau must be positive")
    phi, exact = _PHI[cfg.phi]
    res = gheat_solve(phi, cfg.tau, bounds, dx=cfg.dx or 0.01)
    x0 = 0.0 if cfg.x0 is None else cfg.x0
    val = float(res(x0))
    out = out_dir(cfg)
    with open(out / "gheat.csv", "w") as fh:
        fh.write("x,u\n")
        for a, b in zip(res.x, res.u):
            fh.write(f"{a!r},{b!r}\n")
    payload = _header(cfg, "gheat")
    payload.update(phi=cfg.phi, tau=cfg.tau, x=x0, u=val, nt=res.nt)
    tol = cfg.tol if cfg.tol is not None else 1e-3
    ok = True
    if exact is not None:
        ref = float(exact(bounds, cfg.tau, x0))
        ok = abs(val - ref) <= tol
        payload.update(expected=ref, error=abs(val - ref), tolerance=tol)
    payload["pass"] = bool(ok)
    _write(out / "gheat.json", payload)
    print(f"u({cfg.tau:g}, {x0:g}) = {val:.6f}" + (f" (expected {payload['expected']:.6f})" if exact else ""))
    return EXIT_OK if ok else EXIT_FAIL


def cmd_riccati(cfg: RunConfig) -> int:
    T = cfg.T if cfg.T is not None else 1.0
    if not (T > 0 and cfg.dt > 0):
        raise ConfigError("need T > 0 and dt > 0")
    tab = riccati_solve(T, cfg.dt)
    closed = riccati_closed(tab.s, T)
    dev = float(np.max(np.abs(tab.P - closed)))
    out = out_dir(cfg)
    with open(out / "riccati.csv", "w") as fh:
        fh.write("s,P,P_closed\n")
        stride = max(1, tab.s.size // 1000)
        for i in range(0, tab.s.size, stride):
            fh.write(f"{tab.s[i]!r},{tab.P[i]!r},{closed[i]!r}\n")
    tol = cfg.tol if cfg.tol is not None else 1e-8
    payload = _header(cfg, "riccati")
    payload.update(T=T, dt=cfg.dt, max_deviation=dev, P_T=float(tab.P[-1]), P_0=float(tab.P[0]), tolerance=tol)
    payload["pass"] = bool(dev <= tol and tab.P[-1] == 1.0)
    _write(out / "riccati.json", payload)
    print(f"max |P - closed form| = {dev:.3e}, P(T) = {float(tab.P[-1])!r}")
    return EXIT_OK if payload["pass"] else EXIT_FAIL


def _value_model(p, oracle, cfg, defaults, t0):
    if oracle is not None:
        return oracle
    grid = make_grid(cfg, p, defaults, t0=t0)
    return hjb_solve(p, grid)


def cmd_simulate(cfg: RunConfig) -> int:
    p, oracle, defaults = make_problem(cfg)
    t0, x0 = default_point(cfg, p, oracle)
    model = _value_model(p, oracle, cfg, defaults, t0)
    u_fb = oracle.u_bar if oracle is not None else feedback_function(model, p)
    n_paths = cfg.paths or 1000
    n_steps = cfg.steps or 200
    out = out_dir(cfg)
    summaries = []
    for k, sc in enumerate(_scenarios(cfg, p, oracle, t0)):
        b = simulate_forward(p, u_fb, sc, t0, x0, n_steps, n_paths, seed=cfg.seed, workers=cfg.workers)
        b = ktilde_accumulate(bsde_candidates(b, model, p), model, p)
        if p.k_increment is not None:
            b = k_accumulate(b, p)
        sub = b if b.n_paths <= cfg.csv_paths else _head(b, cfg.csv_paths)
        name = "paths.csv" if k == 0 else f"paths_{k}.csv"
        sub.to_csv(out / name)
        s = b.summary()
        s["relations"] = relation_report(b, model, p, Y=_independent_Y(oracle, b))
        s["csv"] = name
        summaries.append(s)
        print(f"{b.scenario}: n_paths={b.n_paths}, mean K~_T={s['Ktilde_T']['mean']:.6g}" + (f", mean K_T={s['K_T']['mean']:.6g}" if "K_T" in s else ""))
    payload = _header(cfg, "simulate")
    payload.update(t0=t0, x0=x0, n_steps=n_steps, seed=cfg.seed, scenarios=summaries)
    _write(out / "simulate.json", payload)
    return EXIT_OK


def _head(b, n):
    from dataclasses import replace

    cut = {k: (getattr(b, k)[:n] if getattr(b, k) is not None else None) for k in ("X", "B", "QV", "gamma", "u", "Y", "Z", "K", "Ktilde")}
    return replace(b, **cut)


def _independent_Y(oracle, b):
    if oracle is None:
        return None
    return oracle.Y(np.broadcast_to(b.times, b.X.shape), b.X)


def _adjoint_payload(cfg, p, oracle, model, sc, t0, x0):
    n_paths = cfg.paths or 10_000
    n_steps = cfg.steps or 1000
    u_fb = oracle.u_bar if oracle is not None else feedback_function(model, p)
    b = simulate_forward(p, u_fb, sc, t0, x0, n_steps, min(n_paths, 20), seed=cfg.seed, workers=cfg.workers)
    b = bsde_candidates(b, model, p)
    adj = adjoint_feedback(model, p, b)
    mc = adjoint_p_mc(p, sc, t0, x0, max(n_paths, 2), n_steps, seed=cfg.seed, u_feedback=u_fb, model=model, workers=cfg.workers)
    grid_tol = cfg.tol if cfg.tol is not None else 1e-3
    cons = adjoint_consistency(adj, mc, grid_tol=grid_tol)
    mp = mp_check(p, b, adj)
    dm, dp = one_sided_dx(model, t0, x0)
    jets = jet_intervals(dm, dp)
    keep = ~adj.mask
    hu = np.abs(adj.p + adj.q + b.u)[keep] if p.name == "example2" else None
    return {
        "scenario": sc.label or sc.kind,
        "p_feedback": cons["p_feedback"],
        "p_mc": mc.mean,
        "stderr": mc.stderr,
        "consistency": cons,
        "mp_min": mp["mp_min"],
        "mp": mp,
        "adjoint_identity_residual": adj.identity_residual,
        "d_minus": dm,
        "d_plus": dp,
        "D1_minus": jets.D1_minus,
        "D1_plus": jets.D1_plus,
        "max_abs_p_plus_q_plus_u": None if hu is None else float(hu.max()),
        "pass": bool(cons["pass"] and mp["pass"]),
    }


def cmd_adjoint(cfg: RunConfig) -> int:
    p, oracle, defaults = make_problem(cfg)
    t0, x0 = default_point(cfg, p, oracle)
    model = _value_model(p, oracle, cfg, defaults, t0)
    sc = _scenarios(cfg, p, oracle, t0)[0]
    payload = _header(cfg, "adjoint")
    payload.update(t0=t0, x0=x0, **_adjoint_payload(cfg, p, oracle, model, sc, t0, x0))
    _write(out_dir(cfg) / "adjoint.json", payload)
    print(f"p_feedback = {payload['p_feedback']:.6g}, p_mc = {payload['p_mc']:.6g} +- {payload['stderr']:.2g}, mp_min = {payload['mp_min']:.3g}")
    return EXIT_OK if payload["pass"] else EXIT_FAIL


def _certified(p, cands, t0, x0, seed):
    out = []
    for sc in cands:
        if membership(p, sc, t0, x0, seed=seed)["member"]:
            out.append(sc)
    return out


def jets_payload(cfg, p, oracle, model, t0, x0, cands=None) -> dict:
    """Jets at ``(t0, x0)`` and ``[p_tilde, p_bar]`` over ``cands``.

    Without explicit candidates, example 1 uses the two extreme constants and
    other problems the reference candidates that pass the membership test.
    """
    dm, dp = one_sided_dx(model, t0, x0)
    jets = jet_intervals(dm, dp)
    if cands is None and cfg.example == 1:
        cands = [ScenarioMeasure.constant(g) for g in reversed(p.bounds.extremes)]
    elif cands is None:
        cands = _certified(p, reference_candidates(p, t0), t0, x0, cfg.seed)
    out = {"t": t0, "x": x0, "d_minus": dm, "d_plus": dp, "D1_minus": jets.D1_minus, "D1_plus": jets.D1_plus}
    if cands:
        lo, hi, det = p_bounds(p, cands, t0, x0, n_paths=cfg.paths or 2000, n_steps=cfg.steps or 1000, seed=cfg.seed, jets=jets, jet_tol=1e-6)
        ctol = det["containment_tol"]
        out.update(p_tilde=lo, p_bar=hi, containment=det["containment"], containment_tol=ctol, candidates=[c["scenario"] for c in det["candidates"]])
        if jets.D1_plus is not None:
            a, b = jets.D1_plus
            out["p_bar_in_D1_plus"] = bool(a - ctol <= hi <= b + ctol)
    else:
        out.update(p_tilde=None, p_bar=None, containment=None, candidates=[])
    return out


def cmd_jets(cfg: RunConfig) -> int:
    p, oracle, defaults = make_problem(cfg)
    t0, x0 = default_point(cfg, p, oracle)
    model = _value_model(p, oracle, cfg, defaults, t0)
    payload = _header(cfg, "jets")
    explicit = _scenarios(cfg, p, oracle, t0) if (cfg.scenario or cfg.gamma is not None) else None
    payload.update(jets_payload(cfg, p, oracle, model, t0, x0, explicit))
    payload["pass"] = bool(payload.get("containment") is not False)
    _write(out_dir(cfg) / "jets.json", payload)
    d1p = "empty" if payload["D1_plus"] is None else payload["D1_plus"]
    print(f"(d_minus, d_plus) = ({payload['d_minus']:.6f}, {payload['d_plus']:.6f}); D1+ {d1p}")
    if payload.get("p_tilde") is not None:
        print(f"[p_tilde, p_bar] = [{payload['p_tilde']:.6f}, {payload['p_bar']:.6f}], containment {payload['containment']}")
    return EXIT_OK if payload["pass"] else EXIT_FAIL


# ------------------------------------------------------------------- verify


def _check(name, relation, observed_holds, value, tol, expected="holds"):
    status = "PASS" if observed_holds == (expected == "holds") else "FAIL"
    return {"name": name, "relation": relation, "expected": expected, "observed": "holds" if observed_holds else "fails", "value": value, "tolerance": tol, "status": status}


def _scenario_suite(p, oracle, sc, t0, x0, n_paths, n_steps, seed, tag):
    """Relations along the optimal path under one scenario.

    ``Y = V(s, X_s)`` is predicted to hold exactly when ``K~_T`` vanishes;
    a failure under a scenario with ``K~_T < 0`` is an expected negative.
    """
    b = simulate_forward(p, None, sc, t0, x0, n_steps, n_paths, seed=seed)
    b = k_accumulate(ktilde_accumulate(bsde_candidates(b, oracle, p), oracle, p), p)
    kt = float(np.max(np.abs(b.Ktilde[:, -1])))
    k = float(np.max(np.abs(b.K[:, -1])))
    rel = relation_report(b, oracle, p, Y=_independent_Y(oracle, b))
    y_gap = rel["y_vs_v"]["max"]
    member = k <= 1e-6
    in_tilde = kt <= 1e-6
    checks = [
        {"name": f"{tag}:K_T", "relation": "K_T = 0", "expected": "info", "observed": "holds" if member else "fails", "value": k, "tolerance": 1e-6, "status": "PASS"},
        {"name": f"{tag}:Ktilde_T", "relation": "Ktilde_T = 0", "expected": "info", "observed": "holds" if in_tilde else "fails", "value": kt, "tolerance": 1e-6, "status": "PASS"},
        _check(f"{tag}:Ktilde_nonincreasing", "dKtilde <= 0", bool(np.all(np.diff(b.Ktilde, axis=1) <= 1e-12)), float(np.max(np.diff(b.Ktilde, axis=1))), 1e-12),
    ]
    if member:
        expected = "holds" if in_tilde else "fails"
        thr = 1e-6 if in_tilde else 1e-2
        holds = y_gap <= 1e-6 if in_tilde else not (y_gap >= thr)
        checks.append(_check(f"{tag}:Y_equals_V", "Y_s = V(s, X_s)", holds, y_gap, thr, expected))
    return b, checks


def cmd_verify(cfg: RunConfig) -> int:
    p, oracle, defaults = make_problem(cfg)
    if oracle is None:
        raise ConfigError("verify needs a built-in example")
    if cfg.point == "tstar" and cfg.example != 1:
        raise ConfigError("--point tstar refers to the kink point of example 1")
    t0, x0 = default_point(cfg, p, oracle)
    seed = cfg.seed
    checks = []

    # value surface
    grid = make_grid(cfg, p, defaults)
    surface = hjb_solve(p, grid)
    err = _rel_err(surface, oracle, p, grid)
    checks.append(_check("hjb_value", "grid V = closed form (off kinks)", err["relative_error"] <= 2e-2, err["relative_error"], 2e-2))
    if cfg.example == 1:
        kinks = detect_kinks(surface)
        hits = []
        # the slope jump shrinks like T - t; rows close to T are too flat to resolve
        late = np.searchsorted(grid.t, p.T - 0.25 * (p.T - grid.t0))
        for n in range(0, late, max(1, late // 10)):
            row = np.flatnonzero(kinks[n])
            k = oracle.kinks(grid.t[n])[0]
            hits.append(bool(row.size and np.min(np.abs(grid.x[row] - k)) <= 2 * grid.dx))
        checks.append(_check("kink_detected", "kink line at x = -(lo + hi)(T - t)/2", all(hits), float(np.mean(hits)), 2 * grid.dx))

    # reference scenario relations
    ref = oracle.reference
    n_paths = cfg.paths or 200
    n_steps = cfg.steps or 1000
    b, cs = _scenario_suite(p, oracle, ref, t0, x0, n_paths, n_steps, seed, "reference")
    checks += cs
    rel = relation_report(b, oracle, p)
    scale = 1.0 + float(np.max(np.abs(oracle.dt(np.broadcast_to(b.times, b.X.shape), b.X))))
    checks.append(_check("reference:pde_G", "-V_s = G(F)", rel["pde_feedback"]["max"] / scale <= 1e-8, rel["pde_feedback"]["max"], 1e-8 * scale))
    checks.append(_check("reference:pde_min", "-V_s = min_u G(F)", rel["pde_min"]["max"] / scale <= 1e-8, rel["pde_min"]["max"], 1e-8 * scale))
    mix = mixed_derivative_check(oracle, p, b)
    if mix["n_active"]:
        tolm = 1e-6 * (1.0 + mix["active_scale"])
        checks.append(_check("reference:mixed_derivative", "V_sx = -gamma dF/dx / 2 where F != 0", mix["active_max_residual"] <= tolm, mix["active_max_residual"], tolm))
    if mix["n_flat"] and mix["implied_v"].size:
        checks.append(_check("reference:implied_v", "implied v in variance bounds where F = 0", mix["implied_in_bounds"], float(np.mean(mix["implied_v"])), 0.0))

    adj = _adjoint_payload(cfg, p, oracle, oracle, ref, t0, x0)
    checks.append(_check("adjoint_consistency", "p_feedback = p_mc", adj["consistency"]["pass"], adj["consistency"]["discrepancy"], adj["consistency"]["tolerance"]))
    checks.append(_check("mp", "<H_u, u - u_bar> >= 0", adj["mp"]["pass"], adj["mp_min"], adj["mp"]["tolerance"]))
    if adj["max_abs_p_plus_q_plus_u"] is not None:
        checks.append(_check("p+q+u=0", "p_s + q_s + u_s = 0", adj["max_abs_p_plus_q_plus_u"] <= 1e-3, adj["max_abs_p_plus_q_plus_u"], 1e-3))

    # perturbed scenarios
    lo, hi = p.bounds.extremes
    extra = []
    if cfg.example == 1:
        extra = [ScenarioMeasure.constant(lo)]
    elif cfg.example == 2:
        extra = [ScenarioMeasure.constant(lo)]
    elif cfg.example == 3:
        v = p.params["v"]
        extra = [ScenarioMeasure.piecewise_even([0.6, 1.0], t0, p.T), ScenarioMeasure.constant(0.9)] if abs(v - 1.25) < 1e-12 else []
    extra += [parse_scenario(s, p, oracle, t0) for s in cfg.scenario]
    for k, sc in enumerate(extra):
        _, cs = _scenario_suite(p, oracle, sc, t0, x0, n_paths, n_steps, seed, f"scenario{k}[{sc.label}]")
        checks += cs

    if cfg.example == 2:
        b2 = k_accumulate(simulate_forward(p, None, ScenarioMeasure.constant(lo), t0, x0, n_steps, n_paths, seed=seed), p)
        kmax = float(np.max(b2.K[:, -1]))
        checks.append(_check("uniqueness_signal", "K_T < 0 off the reference measure", kmax < -1e-4, kmax, -1e-4))

    # jets and bounds
    jp = jets_payload(cfg, p, oracle, oracle, t0, x0)
    if jp.get("containment") is not None:
        checks.append(_check("containment", "D1- in [p_tilde, p_bar]", jp["containment"], [jp["p_tilde"], jp["p_bar"]], jp["containment_tol"]))
    if cfg.example == 1:
        checks.append(_check("D1_plus_empty", "D1+ V(t*, x*) is empty", jp["D1_plus"] is None, jp["D1_plus"], 0.0))
    if jp.get("p_bar_in_D1_plus") is not None:
        checks.append(_check("p_bar_in_D1_plus", "p_bar in D1+", jp["p_bar_in_D1_plus"], jp["p_bar"], jp["containment_tol"]))

    ok = all(c["status"] == "PASS" for c in checks)
    payload = _header(cfg, "verify")
    payload.update(example=cfg.example, t0=t0, x0=x0, checks=checks, jets=jp)
    payload["pass"] = ok
    _write(out_dir(cfg) / f"verify_example{cfg.example}.json", payload)
    for c in checks:
        tag = " (expected negative)" if c["expected"] == "fails" else ""
        print(f"{c['status']}  {c['name']}{tag}")
    print("ALL PASS" if ok else "FAILURES PRESENT")
    return EXIT_OK if ok else EXIT_FAIL


def cmd_report(cfg: RunConfig) -> int:
    d = out_dir(cfg)
    entries = {}
    for f in sorted(d.glob("*.json")):
        if f.name == "report.json":
            continue
        try:
            data = json.loads(f.read_text())
        except json.JSONDecodeError:
            raise ConfigError(f"{f} is not valid JSON") from None
        entries[f.name] = {"command": data.get("command"), "pass": data.get("pass"), "config_hash": data.get("config_hash")}
    if not entries:
        raise ConfigError(f"no reports found in {d}")
    ok = all(e["pass"] is not False for e in entries.values())
    payload = {"command": "report", "version": __version__, "reports": entries, "pass": ok}
    _write(d / "report.json", payload)
    for name, e in entries.items():
        print(f"{'PASS' if e['pass'] is not False else 'FAIL'}  {name}")
    return EXIT_OK if ok else EXIT_FAIL


COMMANDS = {
    "solve-hjb": cmd_solve_hjb,
    "gheat": cmd_gheat,
    "riccati": cmd_riccati,
    "simulate": cmd_simulate,
    "adjoint": cmd_adjoint,
    "jets": cmd_jets,
    "verify": cmd_verify,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    a = common.add_argument
    a("--config", help="YAML file with option values")
    a("--out", help=f"output directory (default ${ENV_OUT} or ./gcontrol-out)")
    a("--example", type=int, choices=(1, 2, 3))
    a("--T", type=float)
    a("--v", type=float, help="kept constant control of example 3")
    a("--t0", type=float)
    a("--x0", type=float)
    a("--x-lo", dest="x_lo", type=float)
    a("--x-hi", dest="x_hi", type=float)
    a("--dx", type=float)
    a("--nx", type=int)
    a("--nt", type=int)
    a("--boundary", choices=("dirichlet", "linear"))
    a("--scenario", action="append", default=None, help="constant:G | piecewise:G1,G2[@b1] | reference | worst-case")
    a("--gamma", type=float, help="shorthand for --scenario constant:G")
    a("--seed", type=int)
    a("--paths", type=int)
    a("--steps", type=int)
    a("--workers", type=int)
    a("--tol", type=float)
    a("--csv-paths", dest="csv_paths", type=int, help="paths written to CSV (default 100)")
    a("--csv-rows", dest="csv_rows", type=int, help="time rows written to the surface CSV (default 1001)")

    parser = argparse.ArgumentParser(prog="gcontrol", description="Recursive control under volatility uncertainty.")
    parser.add_argument("--version", action="version", version=f"gcontrol {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name, parents=[common])
        if name == "gheat":
            sp.add_argument("--phi", choices=sorted(_PHI))
            sp.add_argument("--tau", type=float)
            sp.add_argument("--sigma-lo-sq", dest="sigma_lo_sq", type=float)
            sp.add_argument("--sigma-hi-sq", dest="sigma_hi_sq", type=float)
        if name == "riccati":
            sp.add_argument("--dt", type=float)
        if name in ("jets", "verify"):
            sp.add_argument("--tstar", type=float)
        if name == "verify":
            sp.add_argument("--point", choices=("tstar", "default"))
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = resolve_config(args)
        return COMMANDS[args.command](cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except MembershipError as exc:
        print(f"verification failure: {exc}", file=sys.stderr)
        return EXIT_FAIL
    except (NumericalError, DomainError, FloatingPointError, OverflowError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
