"""Euler-Maruyama simulation of the joint factor/GOP/account system.

The factor X follows dX = f dt + g dW (Euler).  The GOP value V* is
integrated in log space with drift r + ||theta||^2 / 2 and diffusion theta,
which keeps it structurally positive; the savings account S0 = exp(int r)
and the roll-over-adjusted borrowing account S~0 = exp(int (r + phi)) use
left-endpoint quadrature, matching the weak order of the Euler scheme.
Y = S0 / V* is the local martingale deflator.

Determinism contract: paths are generated in fixed chunks of 4096, each
chunk drawing from a counter-based Philox stream keyed by (seed, first path
index of the chunk).  Results are bit-identical for any worker count, and
antithetic mode negates the Gaussian increments of every odd path within
its (even, odd) pair.

Monte-Carlo estimators implement the fair-pricing conditional expectations
for spot spreads, benchmarked ZCB prices, forward spreads and generic
terminal payoffs; they serve as the independent oracle for the PDE solvers.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import Callable, Sequence

import numpy as np

from .model import FactorModelSpec

__all__ = [
    "SimConfig",
    "PathBundle",
    "Estimate",
    "DriftTest",
    "simulate",
    "mc_spot_spread",
    "mc_benchmarked_zcb",
    "mc_forward_spread",
    "real_world_price",
    "empirical_drift_test",
]

CHUNK = 4096   # fixed chunk width; part of the reproducibility contract


@dataclass(frozen=True)
class SimConfig:
    """Monte-Carlo window and sampling parameters (times in years)."""

    t0: float
    T: float
    dt: float
    n_paths: int
    seed: int = 42
    antithetic: bool = False

    def __post_init__(self):
        if not (0.0 <= self.t0 < self.T):
            raise ValueError("need 0 <= t0 < T")
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if self.dt >= self.T - self.t0:
            raise ValueError("dt must be smaller than the window T - t0")
        if self.n_paths < 1:
            raise ValueError("n_paths must be at least 1")
        if self.antithetic and self.n_paths % 2:
            raise ValueError("antithetic mode needs an even n_paths")

    def time_grid(self) -> np.ndarray:
        """Uniform grid on [t0, T] with step as close to dt as divides evenly."""
        n_steps = max(1, int(round((self.T - self.t0) / self.dt)))
        return np.linspace(self.t0, self.T, n_steps + 1)


@dataclass(frozen=True)
class Estimate:
    """Monte-Carlo mean with its standard error."""

    mean: float
    stderr: float
    n_paths: int
    seed: int

    def to_json(self) -> str:
        return json.dumps({"mean": self.mean, "stderr": self.stderr,
                           "n_paths": self.n_paths, "seed": self.seed})


@dataclass(frozen=True)
class DriftTest:
    """Pooled per-step increment statistics of a benchmarked series."""

    increment_mean: float
    stderr: float
    z: float
    n_increments: int


@dataclass(frozen=True)
class PathBundle:
    """Jointly simulated trajectories; arrays have shape (n_paths, n_t).

    x additionally carries the factor dimension, (n_paths, n_t, n).
    reflected_fraction is the share of path-steps that hit the domain
    boundary and were mirrored back in; runs above 1% are unreliable.
    """

    times: np.ndarray
    x: np.ndarray
    gop: np.ndarray
    savings: np.ndarray
    rollover: np.ndarray
    deflator: np.ndarray
    reflected_fraction: float
    config: SimConfig

    def series(self, name: str) -> np.ndarray:
        """Named benchmarked series for drift testing."""
        if name in ("Y", "deflator", "savings_over_gop"):
            return self.deflator
        if name in ("rollover_over_gop", "S~0/V*"):
            return self.rollover / self.gop
        raise KeyError(f"unknown series {name!r}")

    def to_csv(self, path: str) -> None:
        """One row per (path, time): t, x_1..x_n, gop, savings, rollover, deflator."""
        n_paths, n_t, n = self.x.shape
        cols = ["path", "t"] + [f"x{i+1}" for i in range(n)] + \
            ["gop", "savings", "rollover", "deflator"]
        with open(path, "w") as fh:
            fh.write(",".join(cols) + "\n")
            for p in range(n_paths):
                for k in range(n_t):
                    row = [str(p), repr(float(self.times[k]))]
                    row += [repr(float(v)) for v in self.x[p, k]]
                    row += [repr(float(self.gop[p, k])),
                            repr(float(self.savings[p, k])),
                            repr(float(self.rollover[p, k])),
                            repr(float(self.deflator[p, k]))]
                    fh.write(",".join(row) + "\n")

    def to_npz(self, path: str) -> None:
        """Binary columnar dump for large runs."""
        np.savez(path, times=self.times, x=self.x, gop=self.gop,
                 savings=self.savings, rollover=self.rollover,
                 deflator=self.deflator)


# ---------------------------------------------------------------------------
# chunked path engine
# ---------------------------------------------------------------------------

def chunk_starts(n_paths: int) -> list[int]:
    return list(range(0, n_paths, CHUNK))


def chunk_rng(seed: int, start: int) -> np.random.Generator:
    """Counter-based stream for the chunk whose first path index is start."""
    key = np.array([seed & 0xFFFFFFFFFFFFFFFF, start], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def draw_increments(seed: int, start: int, size: int, n_steps: int, d: int,
                    antithetic: bool) -> np.ndarray:
    """Standard normal increments of shape (n_steps, size, d)."""
    z = chunk_rng(seed, start).standard_normal((n_steps, size, d))
    if antithetic:
        z[:, 1::2, :] = -z[:, 0::2, :]
    return z


def map_chunks(fn: Callable, n_paths: int, workers: int = 1) -> list:
    """Apply fn(start, size) over path chunks, preserving chunk order."""
    starts = chunk_starts(n_paths)
    sizes = [min(CHUNK, n_paths - s) for s in starts]
    if workers <= 1:
        return [fn(s, m) for s, m in zip(starts, sizes)]
    with ThreadPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, starts, sizes))


def reflect_into_box(x: np.ndarray, lo: np.ndarray, hi: np.ndarray
                     ) -> tuple[np.ndarray, np.ndarray]:
    """Mirror points back into the box; returns (points, per-path hit flags)."""
    flagged = np.zeros(x.shape[0], dtype=bool)
    for _ in range(64):
        below = x < lo
        above = x > hi
        if not (below.any() or above.any()):
            return x, flagged
        flagged |= below.any(axis=1) | above.any(axis=1)
        x = np.where(below, 2.0 * lo - x, x)
        x = np.where(above, 2.0 * hi - x, x)
    raise RuntimeError("boundary reflection did not terminate")


def _chunk_terminals(model: FactorModelSpec, times: np.ndarray,
                     x_start: np.ndarray, v_start: float, seed: int,
                     antithetic: bool, start: int, size: int,
                     t_mark: float | None = None) -> dict:
    """Evolve one chunk, returning terminal state and pathwise integrals.

    When t_mark is given (a grid node), the state at that time and the
    integral of r + phi accumulated after it are returned as well.
    """
    n_steps = times.size - 1
    lo = np.asarray(model.domain.lo)
    hi = np.asarray(model.domain.hi)
    z = draw_increments(seed, start, size, n_steps, model.d, antithetic)
    x = np.tile(x_start, (size, 1))
    log_v = np.full(size, np.log(v_start))
    int_r = np.zeros(size)
    int_rphi = np.zeros(size)
    hits = 0
    out: dict = {}
    for k in range(n_steps):
        t = times[k]
        dt = times[k + 1] - times[k]
        if t_mark is not None and abs(t - t_mark) < 1e-12:
            out["x_mark"] = x.copy()
            out["int_rphi_mark"] = int_rphi.copy()
        fx = model.f(t, x)
        gx = model.g(t, x)
        rx = model.r(t, x)
        th = model.theta(t, x)
        ph = model.phi(t, x)
        dw = np.sqrt(dt) * z[k]
        log_v = log_v + (rx + 0.5 * np.einsum("md,md->m", th, th)) * dt \
            + np.einsum("md,md->m", th, dw)
        int_r = int_r + rx * dt
        int_rphi = int_rphi + (rx + ph) * dt
        x = x + fx * dt + np.einsum("mnd,md->mn", gx, dw)
        x, flagged = reflect_into_box(x, lo, hi)
        hits += int(flagged.sum())
    out.update(x_T=x, log_v=log_v, int_r=int_r, int_rphi=int_rphi, hits=hits)
    return out


def _terminal_run(model: FactorModelSpec, config: SimConfig,
                  x_start: np.ndarray, v_start: float, workers: int = 1,
                  t_mark: float | None = None) -> dict:
    times = config.time_grid()
    parts = map_chunks(
        lambda s, m: _chunk_terminals(model, times, x_start, v_start,
                                      config.seed, config.antithetic, s, m,
                                      t_mark=t_mark),
        config.n_paths, workers)
    keys = [k for k in parts[0] if k != "hits"]
    out = {k: np.concatenate([p[k] for p in parts]) for k in keys}
    n_steps = times.size - 1
    out["reflected_fraction"] = sum(p["hits"] for p in parts) / (
        config.n_paths * n_steps)
    out["times"] = times
    return out


def simulate(model: FactorModelSpec, config: SimConfig,
             x_start=None, v_start: float | None = None,
             workers: int = 1) -> PathBundle:
    """Simulate the joint (X, V*, S0, S~0, Y) system on config's window.

    x_start defaults to the model's initial point, v_start to v*(t0, x_start)
    when the model carries a GOP value function (else 1.0).  Paths leaving
    the domain box are mirrored back in and counted in reflected_fraction.
    """
    if config.T > model.horizon:
        raise ValueError("simulation window exceeds the model horizon")
    x_start = np.asarray(model.x0 if x_start is None else x_start, dtype=float)
    if not model.domain.contains(x_start):
        raise ValueError("x_start must lie inside the domain")
    if v_start is None:
        v_start = (model.v_star.at(config.t0, x_start)
                   if model.v_star is not None else 1.0)
    if v_start <= 0:
        raise ValueError("v_start must be positive")

    times = config.time_grid()
    n_t = times.size
    n_paths = config.n_paths
    x = np.empty((n_paths, n_t, model.n))
    log_v = np.empty((n_paths, n_t))
    int_r = np.empty((n_paths, n_t))
    int_rphi = np.empty((n_paths, n_t))
    hits_total = 0

    def run(start: int, size: int) -> tuple:
        n_steps = n_t - 1
        lo = np.asarray(model.domain.lo)
        hi = np.asarray(model.domain.hi)
        z = draw_increments(config.seed, start, size, n_steps, model.d,
                            config.antithetic)
        cx = np.tile(x_start, (size, 1))
        clv = np.full(size, np.log(v_start))
        cir = np.zeros(size)
        cirp = np.zeros(size)
        traj_x = np.empty((size, n_t, model.n))
        traj_lv = np.empty((size, n_t))
        traj_ir = np.empty((size, n_t))
        traj_irp = np.empty((size, n_t))
        traj_x[:, 0] = cx
        traj_lv[:, 0] = clv
        traj_ir[:, 0] = 0.0
        traj_irp[:, 0] = 0.0
        hits = 0
        for k in range(n_steps):
            t = times[k]
            dt = times[k + 1] - times[k]
            fx = model.f(t, cx)
            gx = model.g(t, cx)
            rx = model.r(t, cx)
            th = model.theta(t, cx)
            ph = model.phi(t, cx)
            dw = np.sqrt(dt) * z[k]
            clv = clv + (rx + 0.5 * np.einsum("md,md->m", th, th)) * dt \
                + np.einsum("md,md->m", th, dw)
            cir = cir + rx * dt
            cirp = cirp + (rx + ph) * dt
            cx = cx + fx * dt + np.einsum("mnd,md->mn", gx, dw)
            cx, flagged = reflect_into_box(cx, lo, hi)
            hits += int(flagged.sum())
            traj_x[:, k + 1] = cx
            traj_lv[:, k + 1] = clv
            traj_ir[:, k + 1] = cir
            traj_irp[:, k + 1] = cirp
        return start, size, traj_x, traj_lv, traj_ir, traj_irp, hits

    for start, size, tx, tlv, tir, tirp, hits in map_chunks(
            run, n_paths, workers):
        sl = slice(start, start + size)
        x[sl] = tx
        log_v[sl] = tlv
        int_r[sl] = tir
        int_rphi[sl] = tirp
        hits_total += hits

    gop = np.exp(log_v)
    savings = np.exp(int_r)
    rollover = np.exp(int_rphi)
    return PathBundle(
        times=times, x=x, gop=gop, savings=savings, rollover=rollover,
        deflator=savings / gop,
        reflected_fraction=hits_total / (n_paths * (n_t - 1)),
        config=config)


# ---------------------------------------------------------------------------
# Feynman-Kac estimators
# ---------------------------------------------------------------------------

def _window(config: SimConfig, t: float, T: float) -> SimConfig:
    return replace(config, t0=t, T=T)


def _estimate(samples: np.ndarray, config: SimConfig) -> Estimate:
    n = samples.size
    se = float(samples.std(ddof=1) / np.sqrt(n)) if n > 1 else float("inf")
    return Estimate(mean=float(samples.mean()), stderr=se,
                    n_paths=n, seed=config.seed)


def _require_interior(model: FactorModelSpec, x) -> np.ndarray:
    x = np.atleast_1d(np.asarray(x, dtype=float))
    lo = np.asarray(model.domain.lo)
    hi = np.asarray(model.domain.hi)
    if np.any(x <= lo) or np.any(x >= hi):
        raise ValueError("start point must be interior to the domain")
    return x


def mc_spot_spread(model: FactorModelSpec, T: float, t: float, x,
                   config: SimConfig, workers: int = 1) -> Estimate:
    """Spot spread S(t, T) = v*(t,x) E[exp(int_t^T (r+phi)) / v*(T, X_T)]."""
    if model.v_star is None:
        raise ValueError("spot-spread estimation requires v_star")
    x = _require_interior(model, x)
    cfg = _window(config, t, T)
    run = _terminal_run(model, cfg, x, 1.0, workers)
    v_t = model.v_star.at(t, x)
    samples = v_t * np.exp(run["int_rphi"]) / model.v_star(T, run["x_T"])
    return _estimate(samples, cfg)


def mc_benchmarked_zcb(model: FactorModelSpec, T: float, t: float, x,
                       config: SimConfig, workers: int = 1) -> Estimate:
    """Benchmarked ZCB price p^T(t,x) = E[1 / v*(T, X_T)]."""
    if model.v_star is None:
        raise ValueError("benchmarked ZCB estimation requires v_star")
    x = _require_interior(model, x)
    cfg = _window(config, t, T)
    run = _terminal_run(model, cfg, x, 1.0, workers)
    samples = 1.0 / model.v_star(T, run["x_T"])
    return _estimate(samples, cfg)


def mc_forward_spread(model: FactorModelSpec, T: float, delta: float,
                      t: float, x, config: SimConfig,
                      workers: int = 1) -> Estimate:
    """Forward spread S_t(T, T+delta) by the tower representation.

    S_t(T,T+delta) p^T(t,x) equals E[exp(int_T^{T+delta}(r+phi)) /
    v*(T+delta, X_{T+delta})], so the spread is a ratio of two Monte-Carlo
    means over the same paths; the standard error uses the delta method
    with the sample covariance of numerator and denominator.
    """
    if model.v_star is None:
        raise ValueError("forward-spread estimation requires v_star")
    x = _require_interior(model, x)
    # choose a grid that contains T as a node
    n1 = max(1, int(round((T - t) / config.dt)))
    n2 = max(1, int(round(delta / config.dt)))
    times = np.concatenate([np.linspace(t, T, n1 + 1),
                            np.linspace(T, T + delta, n2 + 1)[1:]])
    cfg = replace(config, t0=t, T=T + delta)
    parts = map_chunks(
        lambda s, m: _chunk_terminals(model, times, x, 1.0, cfg.seed,
                                      cfg.antithetic, s, m, t_mark=T),
        cfg.n_paths, workers)
    x_mark = np.concatenate([p["x_mark"] for p in parts])
    irp_mark = np.concatenate([p["int_rphi_mark"] for p in parts])
    x_end = np.concatenate([p["x_T"] for p in parts])
    irp_end = np.concatenate([p["int_rphi"] for p in parts])
    num = np.exp(irp_end - irp_mark) / model.v_star(T + delta, x_end)
    den = 1.0 / model.v_star(T, x_mark)
    n = num.size
    nbar, dbar = num.mean(), den.mean()
    ratio = nbar / dbar
    cov = np.cov(num, den, ddof=1)
    var = (cov[0, 0] + ratio ** 2 * cov[1, 1] - 2 * ratio * cov[0, 1]) \
        / (dbar ** 2 * n)
    return Estimate(mean=float(ratio), stderr=float(np.sqrt(max(var, 0.0))),
                    n_paths=n, seed=cfg.seed)


def real_world_price(model: FactorModelSpec, payoff: Callable,
                     t: float, x, T: float, config: SimConfig,
                     workers: int = 1) -> Estimate:
    """Real-world price pi_t(H) = V*_t E[H / V*_T] of a terminal payoff.

    payoff(x_T, gop_T, savings_T, rollover_T) must accept per-path arrays
    (x_T has shape (n_paths, n)) and return one value per path.  Accounts
    are normalized to 1 at t; V* starts at v*(t, x).
    """
    if model.v_star is None:
        raise ValueError("real-world pricing requires v_star")
    x = _require_interior(model, x)
    cfg = _window(config, t, T)
    v_t = model.v_star.at(t, x)
    run = _terminal_run(model, cfg, x, v_t, workers)
    gop_T = np.exp(run["log_v"])
    h = np.asarray(payoff(run["x_T"], gop_T, np.exp(run["int_r"]),
                          np.exp(run["int_rphi"])), dtype=float)
    if h.shape != gop_T.shape:
        raise ValueError("payoff must return one value per path")
    if not np.all(np.isfinite(h)):
        raise ValueError("payoff evaluated to non-finite values")
    samples = v_t * h / gop_T
    return _estimate(samples, cfg)


def empirical_drift_test(bundle: PathBundle, series) -> DriftTest:
    """z-statistic for zero mean of the pooled per-step increments.

    Under the (local) martingale null the increments have mean zero and are
    uncorrelated, so |z| <= 3 at the usual Monte-Carlo confidence; a
    sub/supermartingale shows up as a signed pooled mean.
    """
    m = bundle.series(series) if isinstance(series, str) else np.asarray(series)
    if m.ndim != 2 or m.shape[1] < 2:
        raise ValueError("series needs at least two time levels")
    inc = np.diff(m, axis=1)
    n = inc.size
    mean = float(inc.mean())
    sd = float(inc.std(ddof=1)) if n > 1 else 0.0
    se = sd / np.sqrt(n)
    z = 0.0 if se == 0.0 else mean / se
    return DriftTest(increment_mean=mean, stderr=se, z=z, n_increments=n)
