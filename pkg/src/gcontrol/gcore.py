"""Scalar G operator, volatility scenarios and reproducible Gaussian noise.

In one dimension the sublinear generator is

.. math::
    G(a) = \\tfrac12(\\bar\\sigma^2 a^+ - \\underline\\sigma^2 a^-)
         = \\tfrac12 \\sup_{\\gamma \\in [\\underline\\sigma^2, \\bar\\sigma^2]} \\gamma a ,

and every measure in the representing family is identified here by an explicit
density ``gamma`` of the quadratic variation, ``d<B>_s = gamma_s ds``.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import DomainError

__all__ = [
    "VolBounds",
    "ScenarioMeasure",
    "NoiseStream",
    "g_scalar",
    "g_maximizer",
    "quadratic_variation",
    "brownian_increments",
]

_GAMMA_TOL = 1e-12


@dataclass(frozen=True)
class VolBounds:
    """Variance bounds ``sigma_lo_sq <= gamma <= sigma_hi_sq``."""

    sigma_lo_sq: float
    sigma_hi_sq: float

    def __post_init__(self):
        lo, hi = float(self.sigma_lo_sq), float(self.sigma_hi_sq)
        if not (np.isfinite(lo) and np.isfinite(hi)):
            raise DomainError("volatility bounds must be finite")
        if not 0.0 < lo <= hi:
            raise DomainError(f"need 0 < sigma_lo_sq <= sigma_hi_sq, got ({lo}, {hi})")
        object.__setattr__(self, "sigma_lo_sq", lo)
        object.__setattr__(self, "sigma_hi_sq", hi)

    @property
    def extremes(self) -> tuple[float, float]:
        return (self.sigma_lo_sq, self.sigma_hi_sq)

    def contains(self, gamma, tol: float = _GAMMA_TOL) -> bool:
        g = np.asarray(gamma, dtype=float)
        return bool(np.all((g >= self.sigma_lo_sq - tol) & (g <= self.sigma_hi_sq + tol)))


def g_scalar(a, bounds: VolBounds):
    """Evaluate ``G(a)``; vectorised over ``a``."""
    a = np.asarray(a, dtype=float)
    out = 0.5 * (bounds.sigma_hi_sq * np.maximum(a, 0.0) - bounds.sigma_lo_sq * np.maximum(-a, 0.0))
    return out if out.ndim else float(out)


def g_maximizer(a, bounds: VolBounds):
    """Return the variance level attaining ``G(a) = gamma * a / 2``.

    ``sigma_hi_sq`` for ``a >= 0`` (the tie at zero is broken upward),
    ``sigma_lo_sq`` for ``a < 0``.
    """
    a = np.asarray(a, dtype=float)
    out = np.where(a < 0.0, bounds.sigma_lo_sq, bounds.sigma_hi_sq)
    return out if out.ndim else float(out)


@dataclass(frozen=True)
class ScenarioMeasure:
    """One classical measure ``P^gamma``, described by its variance process.

    Use the constructors :meth:`constant`, :meth:`piecewise` and
    :meth:`feedback` instead of calling the class directly.

    For ``kind == "piecewise"`` the level ``values[i]`` applies on
    ``(breakpoints[i-1], breakpoints[i]]`` with the first interval closed on the
    left and the last one open-ended; ``len(values) == len(breakpoints) + 1``.
    """

    kind: str
    values: tuple[float, ...] = ()
    breakpoints: tuple[float, ...] = ()
    func: Optional[Callable] = field(default=None, compare=False)
    label: str = ""

    def __post_init__(self):
        if self.kind not in ("constant", "piecewise", "feedback"):
            raise DomainError(f"unknown scenario kind {self.kind!r}")
        if self.kind == "constant" and len(self.values) != 1:
            raise DomainError("constant scenario needs exactly one level")
        if self.kind == "piecewise":
            if len(self.values) != len(self.breakpoints) + 1:
                raise DomainError("piecewise scenario needs len(values) == len(breakpoints) + 1")
            if np.any(np.diff(self.breakpoints) <= 0):
                raise DomainError("piecewise breakpoints must be strictly increasing")
        if self.kind == "feedback" and self.func is None:
            raise DomainError("feedback scenario needs a callable gamma(t, x)")

    @classmethod
    def constant(cls, gamma: float, bounds: Optional[VolBounds] = None) -> "ScenarioMeasure":
        s = cls("constant", (float(gamma),), label=f"constant:{gamma:g}")
        if bounds is not None:
            s.validate(bounds)
        return s

    @classmethod
    def piecewise(
        cls,
        values: Sequence[float],
        breakpoints: Sequence[float],
        bounds: Optional[VolBounds] = None,
    ) -> "ScenarioMeasure":
        vals = tuple(float(v) for v in values)
        bps = tuple(float(b) for b in breakpoints)
        s = cls("piecewise", vals, bps, label="piecewise:" + ",".join(f"{v:g}" for v in vals))
        if bounds is not None:
            s.validate(bounds)
        return s

    @classmethod
    def piecewise_even(
        cls, values: Sequence[float], t0: float, T: float, bounds: Optional[VolBounds] = None
    ) -> "ScenarioMeasure":
        """Levels on equal-length consecutive sub-intervals of ``[t0, T]``."""
        n = len(values)
        bps = [t0 + (T - t0) * k / n for k in range(1, n)]
        return cls.piecewise(values, bps, bounds)

    @classmethod
    def feedback(cls, func: Callable, label: str = "feedback") -> "ScenarioMeasure":
        """Markov scenario ``gamma = func(t, x)``; range is checked when evaluated."""
        return cls("feedback", func=func, label=label)

    def validate(self, bounds: VolBounds, t0: Optional[float] = None, T: Optional[float] = None):
        if self.kind != "feedback" and not bounds.contains(self.values):
            raise DomainError(f"scenario levels {self.values} outside {bounds.extremes}")
        if self.kind == "piecewise" and t0 is not None and T is not None:
            if self.breakpoints and (self.breakpoints[0] < t0 or self.breakpoints[-1] > T):
                raise DomainError("piecewise breakpoints must lie within [t0, T]")

    def gamma_at(self, t, x=None):
        """Instantaneous variance level at ``(t, x)``."""
        if self.kind == "constant":
            return np.full(np.shape(x) if x is not None else np.shape(t), self.values[0])
        if self.kind == "piecewise":
            idx = np.searchsorted(np.asarray(self.breakpoints), t, side="left")
            return np.asarray(self.values)[idx] * np.ones(np.shape(x) if x is not None else ())
        if x is None:
            raise DomainError("feedback scenario needs state samples")
        return np.asarray(self.func(t, x), dtype=float) * np.ones(np.shape(x))

    def step_gammas(self, times) -> np.ndarray:
        """Average level over each step of a time grid (exact for open-loop kinds)."""
        times = np.asarray(times, dtype=float)
        if self.kind == "constant":
            return np.full(times.size - 1, self.values[0])
        if self.kind == "piecewise":
            cum = self._cumulative(times)
            return np.diff(cum) / np.diff(times)
        raise DomainError("feedback scenario needs state samples; use quadratic_variation with x_path")

    def _cumulative(self, times: np.ndarray) -> np.ndarray:
        # exact integral of the step function from times[0]
        edges = np.concatenate(([-np.inf], self.breakpoints, [np.inf]))
        vals = np.asarray(self.values)
        t0 = times[0]
        out = np.zeros_like(times)
        for v, a, b in zip(vals, edges[:-1], edges[1:]):
            lo = np.maximum(a, t0)
            out += v * np.clip(np.minimum(times, b) - lo, 0.0, None)
        return out


def quadratic_variation(scenario: ScenarioMeasure, times, x_path=None, bounds: Optional[VolBounds] = None):
    """Quadratic-variation samples ``<B>`` on ``times``, starting from 0.

    ``x_path`` (shape ``(..., len(times))``) is required for feedback
    scenarios, whose level on each step is read at the left endpoint.
    """
    times = np.asarray(times, dtype=float)
    if np.any(np.diff(times) <= 0):
        raise DomainError("time grid must be strictly increasing")
    dt = np.diff(times)
    if scenario.kind == "feedback":
        if x_path is None:
            raise DomainError("feedback scenario needs x_path")
        x_path = np.asarray(x_path, dtype=float)
        gam = scenario.gamma_at(times[:-1], x_path[..., :-1])
    else:
        gam = scenario.step_gammas(times)
        if x_path is not None:
            gam = np.broadcast_to(gam, np.shape(x_path)[:-1] + gam.shape)
    if bounds is not None and not bounds.contains(gam):
        raise DomainError("scenario leaves the variance bounds")
    inc = gam * dt
    qv = np.zeros(inc.shape[:-1] + (times.size,))
    qv[..., 1:] = np.cumsum(inc, axis=-1)
    return qv


@dataclass(frozen=True)
class NoiseStream:
    """Standard normal draws for one path, keyed by ``(seed, path_index)``.

    Built on the Philox counter-based bit generator with the 128-bit key
    ``(seed, path_index)``; draw ``k`` of the stream is the noise of step ``k``
    and does not depend on how many draws are requested.
    """

    seed: int
    path_index: int

    def __post_init__(self):
        if not 0 <= self.seed < 2**64 or not 0 <= self.path_index < 2**64:
            raise DomainError("seed and path_index must fit in 64 unsigned bits")

    def normals(self, n: int) -> np.ndarray:
        bitgen = np.random.Philox(key=np.array([self.seed, self.path_index], dtype=np.uint64))
        return np.random.Generator(bitgen).standard_normal(n)

    def increments(self, dt) -> np.ndarray:
        """Brownian increments ``sqrt(dt_k) * Z_k`` for a vector of step sizes."""
        dt = np.asarray(dt, dtype=float)
        return np.sqrt(dt) * self.normals(dt.size)


def brownian_increments(seed: int, n_paths: int, dt, workers: int = 1, first_path: int = 0) -> np.ndarray:
    """Stack of per-path increments, shape ``(n_paths, len(dt))``.

    Rows are generated independently, so the result is bitwise identical for
    any ``workers``.
    """
    dt = np.asarray(dt, dtype=float)
    out = np.empty((n_paths, dt.size))

    def fill(rows):
        for i in rows:
            out[i] = NoiseStream(seed, first_path + i).increments(dt)

    if workers <= 1 or n_paths < 2:
        fill(range(n_paths))
    else:
        chunks = np.array_split(np.arange(n_paths), workers)
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(fill, chunks))
    return out
