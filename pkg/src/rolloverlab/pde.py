"""Backward finite-difference solver for the linear pricing PDEs (n = 1).

All three problems (benchmarked ZCB, spot spread, forward spread) share the
canonical form

    du/dt + b(t,x) u_x + a(t,x) u_xx + c(t,x) u = 0,   u(t_end, x) = h(x),

integrated backward in time with a theta-scheme (Crank-Nicolson at
theta = 1/2, implicit Euler at theta = 1).  Tridiagonal systems are solved
with the Thomas algorithm.  The boundary rule sets the second spatial
derivative to zero at both ends (linear extrapolation), which preserves
constants exactly and keeps boundary pollution negligible on domains of
+/- 6 stationary standard deviations.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .model import FactorModelSpec

__all__ = [
    "Grid1D",
    "ParabolicProblem",
    "GridFunction",
    "solve_parabolic",
    "grid_gradient",
    "log_gradient",
    "zcb_problem",
    "spot_spread_problem",
    "forward_spread_problem",
]


@dataclass(frozen=True)
class Grid1D:
    """Uniform space-time grid on [x_min, x_max] x [t_start, t_end]."""

    x_min: float
    x_max: float
    n_x: int
    t_start: float
    t_end: float
    n_t: int

    def __post_init__(self):
        if not self.x_min < self.x_max:
            raise ValueError("need x_min < x_max")
        if self.n_x < 3:
            raise ValueError("need at least 3 space nodes")
        if self.n_t < 2:
            raise ValueError("need at least 2 time levels")
        if not self.t_start < self.t_end:
            raise ValueError("need t_start < t_end")

    @property
    def xs(self) -> np.ndarray:
        return np.linspace(self.x_min, self.x_max, self.n_x)

    @property
    def ts(self) -> np.ndarray:
        return np.linspace(self.t_start, self.t_end, self.n_t)

    @property
    def dx(self) -> float:
        return (self.x_max - self.x_min) / (self.n_x - 1)

    @property
    def dt(self) -> float:
        return (self.t_end - self.t_start) / (self.n_t - 1)


@dataclass(frozen=True)
class ParabolicProblem:
    """Coefficients of the canonical backward PDE.

    drift, diffusion and potential are callables (t, xs) -> array over the
    space nodes; terminal maps xs -> array.  diffusion is a(t,x), already
    including the factor 1/2 relative to g^2.
    """

    drift: Callable
    diffusion: Callable
    potential: Callable
    terminal: Callable
    problem_id: str = "generic"


@dataclass(frozen=True)
class GridFunction:
    """Tabulated solution u(t_i, x_j) on a Grid1D, row i = time level i."""

    grid: Grid1D
    values: np.ndarray
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.shape != (self.grid.n_t, self.grid.n_x):
            raise ValueError("values must have shape (n_t, n_x)")
        if not np.all(np.isfinite(v)):
            raise ValueError("grid function contains non-finite values")
        object.__setattr__(self, "values", v)

    def row_at(self, t: float) -> np.ndarray:
        """Values at time t, linearly blended between the two nearest rows."""
        ts = self.grid.ts
        if t < ts[0] - 1e-9 or t > ts[-1] + 1e-9:
            raise ValueError(f"time {t} outside grid range [{ts[0]}, {ts[-1]}]")
        t = min(max(t, ts[0]), ts[-1])
        j = int(np.searchsorted(ts, t, side="right") - 1)
        j = min(j, ts.size - 2)
        w = (t - ts[j]) / (ts[j + 1] - ts[j])
        return (1.0 - w) * self.values[j] + w * self.values[j + 1]

    def value_at(self, t: float, x) -> np.ndarray | float:
        """Bilinear interpolation at scalar time t and point(s) x."""
        xs = self.grid.xs
        xq = np.atleast_1d(np.asarray(x, dtype=float))
        if np.any(xq < xs[0] - 1e-9) or np.any(xq > xs[-1] + 1e-9):
            raise ValueError("space query outside grid range")
        row = self.row_at(t)
        out = np.interp(np.clip(xq, xs[0], xs[-1]), xs, row)
        return float(out[0]) if np.ndim(x) == 0 else out

    def to_csv(self, path: str) -> None:
        g = self.grid
        meta = {"x_min": g.x_min, "x_max": g.x_max, "n_x": g.n_x,
                "t_start": g.t_start, "t_end": g.t_end, "n_t": g.n_t,
                **self.metadata}
        with open(path, "w") as fh:
            fh.write("# " + " ".join(f"{k}={v}" for k, v in meta.items())
                     + "\n")
            fh.write("t," + ",".join(repr(float(x)) for x in g.xs) + "\n")
            for i, t in enumerate(g.ts):
                fh.write(repr(float(t)) + ","
                         + ",".join(repr(float(v)) for v in self.values[i])
                         + "\n")
        with open(path + ".json", "w") as fh:
            json.dump(meta, fh, indent=2, sort_keys=True)


def _thomas(lower: np.ndarray, diag: np.ndarray, upper: np.ndarray,
            rhs: np.ndarray) -> np.ndarray:
    """Thomas algorithm for a tridiagonal system (no pivoting).

    lower[0] and upper[-1] are ignored.  Raises on a vanishing pivot; the
    theta-scheme matrices here are diagonally dominant, so this does not
    occur in normal use.
    """
    n = diag.size
    lo, di, up, d = (lower.tolist(), diag.tolist(), upper.tolist(),
                     rhs.tolist())
    cp = [0.0] * n
    dp = [0.0] * n
    beta = di[0]
    if beta == 0.0 or not np.isfinite(beta):
        raise RuntimeError("singular tridiagonal system")
    cp[0] = up[0] / beta
    dp[0] = d[0] / beta
    for i in range(1, n):
        beta = di[i] - lo[i] * cp[i - 1]
        if beta == 0.0 or not np.isfinite(beta):
            raise RuntimeError("singular tridiagonal system")
        cp[i] = up[i] / beta
        dp[i] = (d[i] - lo[i] * dp[i - 1]) / beta
    out = [0.0] * n
    out[-1] = dp[-1]
    for i in range(n - 2, -1, -1):
        out[i] = dp[i] - cp[i] * out[i + 1]
    return np.asarray(out)


def solve_parabolic(problem: ParabolicProblem, grid: Grid1D,
                    theta: float = 0.5,
                    boundary_rule: str = "zero_curvature") -> GridFunction:
    """Solve the canonical backward PDE on the grid with the theta-scheme.

    theta weights the implicit (earlier-time) level: 1/2 is Crank-Nicolson,
    1 is implicit Euler, 0 explicit.  For theta < 1/2 a CFL-type diffusion
    ratio is recorded in the metadata (values above 1 indicate instability).
    The boundary rows impose zero second spatial derivative at the new time
    level, eliminated algebraically into the tridiagonal interior system.
    """
    if not 0.0 <= theta <= 1.0:
        raise ValueError("theta must lie in [0, 1]")
    if boundary_rule != "zero_curvature":
        raise ValueError(f"unknown boundary rule {boundary_rule!r}")
    xs = grid.xs
    ts = grid.ts
    dx = grid.dx
    n_x = grid.n_x

    u = np.empty((grid.n_t, n_x))
    u[-1] = np.asarray(problem.terminal(xs), dtype=float)
    if not np.all(np.isfinite(u[-1])):
        raise RuntimeError("terminal condition is not finite on the grid")

    def coeffs(t: float):
        b = np.asarray(problem.drift(t, xs), dtype=float)
        a = np.asarray(problem.diffusion(t, xs), dtype=float)
        c = np.asarray(problem.potential(t, xs), dtype=float)
        if not (np.all(np.isfinite(b)) and np.all(np.isfinite(a))
                and np.all(np.isfinite(c))):
            raise RuntimeError("non-finite PDE coefficients on the grid")
        if np.any(a < 0):
            raise RuntimeError("diffusion coefficient must be nonnegative")
        return b, a, c

    cfl = 0.0
    b_old, a_old, c_old = coeffs(ts[-1])
    for m in range(grid.n_t - 2, -1, -1):
        dt = ts[m + 1] - ts[m]
        b_new, a_new, c_new = coeffs(ts[m])
        if theta < 0.5:
            cfl = max(cfl, (1 - 2 * theta) * dt * 2 * float(a_new.max())
                      / dx ** 2)

        uo = u[m + 1]
        rhs = uo[1:-1].copy()
        if theta < 1.0:
            lu = (a_old[1:-1] * (uo[2:] - 2 * uo[1:-1] + uo[:-2]) / dx ** 2
                  + b_old[1:-1] * (uo[2:] - uo[:-2]) / (2 * dx)
                  + c_old[1:-1] * uo[1:-1])
            rhs += (1.0 - theta) * dt * lu

        if theta > 0.0:
            lo = -theta * dt * (a_new[1:-1] / dx ** 2 - b_new[1:-1] / (2 * dx))
            di = 1.0 + theta * dt * (2 * a_new[1:-1] / dx ** 2 - c_new[1:-1])
            up = -theta * dt * (a_new[1:-1] / dx ** 2 + b_new[1:-1] / (2 * dx))
            # fold u_0 = 2 u_1 - u_2 and u_{N-1} = 2 u_{N-2} - u_{N-3}
            # into the first and last interior rows
            di = di.copy(); up = up.copy(); lo = lo.copy()
            di[0] += 2.0 * lo[0]
            up[0] -= lo[0]
            di[-1] += 2.0 * up[-1]
            lo[-1] -= up[-1]
            interior = _thomas(lo, di, up, rhs)
        else:
            interior = rhs
        u[m, 1:-1] = interior
        u[m, 0] = 2.0 * interior[0] - interior[1]
        u[m, -1] = 2.0 * interior[-1] - interior[-2]
        b_old, a_old, c_old = b_new, a_new, c_new

    meta = {"problem": problem.problem_id, "scheme_theta": theta,
            "boundary": boundary_rule}
    if theta < 0.5:
        meta["cfl_ratio"] = cfl
    return GridFunction(grid=grid, values=u, metadata=meta)


def grid_gradient(u: GridFunction) -> GridFunction:
    """Spatial derivative du/dx: central interior, one-sided at the edges."""
    if u.grid.n_x < 3:
        raise ValueError("need at least 3 space nodes for a gradient")
    vals = np.gradient(u.values, u.grid.xs, axis=1)
    return GridFunction(grid=u.grid, values=vals,
                        metadata={**u.metadata, "derived": "x_gradient"})


def log_gradient(u: GridFunction) -> GridFunction:
    """d(log u)/dx = u_x / u; requires u strictly positive on the grid."""
    if np.any(u.values <= 0):
        raise ValueError("log gradient requires a strictly positive grid "
                         "function")
    vals = np.gradient(u.values, u.grid.xs, axis=1) / u.values
    return GridFunction(grid=u.grid, values=vals,
                        metadata={**u.metadata, "derived": "log_gradient"})


def _check_1d(model: FactorModelSpec):
    if model.n != 1:
        raise ValueError("PDE problems are limited to one-factor models; "
                         "use the Monte-Carlo estimators for n > 1")


def _drift_fn(model: FactorModelSpec) -> Callable:
    return lambda t, xs: model.f(t, xs[:, None])[:, 0]


def _diffusion_fn(model: FactorModelSpec) -> Callable:
    def a(t, xs):
        g = model.g(t, xs[:, None])[:, 0, :]        # (n_x, d)
        return 0.5 * np.einsum("xd,xd->x", g, g)
    return a


def zcb_problem(model: FactorModelSpec, T: float) -> ParabolicProblem:
    """Benchmarked ZCB PDE: drift f, no potential, terminal 1 / v*(T, x)."""
    _check_1d(model)
    if model.v_star is None:
        raise ValueError("ZCB problem requires v_star")
    return ParabolicProblem(
        drift=_drift_fn(model),
        diffusion=_diffusion_fn(model),
        potential=lambda t, xs: np.zeros_like(xs),
        terminal=lambda xs: 1.0 / model.v_star(T, xs[:, None]),
        problem_id=f"zcb_T={T}")


def spot_spread_problem(model: FactorModelSpec, T: float) -> ParabolicProblem:
    """Spot-spread PDE: drift f - g theta, potential phi, terminal 1."""
    _check_1d(model)

    def b(t, xs):
        x2 = xs[:, None]
        gth = np.einsum("xnd,xd->xn", model.g(t, x2), model.theta(t, x2))
        return model.f(t, x2)[:, 0] - gth[:, 0]

    return ParabolicProblem(
        drift=b,
        diffusion=_diffusion_fn(model),
        potential=lambda t, xs: model.phi(t, xs[:, None]),
        terminal=lambda xs: np.ones_like(xs),
        problem_id=f"spot_spread_T={T}")


def forward_spread_problem(model: FactorModelSpec, T: float, delta: float,
                           p_hat: GridFunction, s_long: GridFunction
                           ) -> ParabolicProblem:
    """Forward-spread PDE on [t, T].

    Drift is f + g^2 (d_x p / p) with the log-gradient taken by central
    differences on the p_hat grid; the terminal condition is the maturity-
    (T + delta) spot spread evaluated at time T.  p_hat must be strictly
    positive and share its spatial axis with s_long.
    """
    _check_1d(model)
    if np.any(p_hat.values <= 0):
        raise ValueError("benchmarked ZCB grid touches zero or is negative")
    if (p_hat.grid.n_x != s_long.grid.n_x
            or not np.allclose(p_hat.grid.xs, s_long.grid.xs)):
        raise ValueError("p_hat and s_long must share the spatial grid")
    if not (s_long.grid.t_start - 1e-9 <= T <= s_long.grid.t_end + 1e-9):
        raise ValueError("s_long does not cover the terminal time T")
    lg = log_gradient(p_hat)

    def b(t, xs):
        x2 = xs[:, None]
        g = model.g(t, x2)[:, 0, :]
        g2 = np.einsum("xd,xd->x", g, g)
        return model.f(t, x2)[:, 0] + g2 * lg.value_at(t, xs)

    return ParabolicProblem(
        drift=b,
        diffusion=_diffusion_fn(model),
        potential=lambda t, xs: np.zeros_like(xs),
        terminal=lambda xs: s_long.value_at(T, xs),
        problem_id=f"fwd_spread_T={T}_delta={delta}")
