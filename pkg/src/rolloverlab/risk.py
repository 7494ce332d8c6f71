"""Risk-sensitive representative investor and the endogenous funding spread.

A power investor minimizing E[(V_T)^gamma] with gamma < 0 holds the
risk-sensitive strategy

    pi = (1/(1-gamma)) (sigma sigma^T)^{-1} sigma (theta + gamma g^T Xi)

(GOP fund plus intertemporal hedging fund, Xi being the gradient of the
auxiliary Bellman solution, an input here that defaults to 0 and is exact
for constant-coefficient markets).  Requiring the marginal-utility process
Y = (V^pi)^(gamma-1) to price the roll-over-adjusted borrowing account
(i.e. Y S~0 a local martingale) pins the funding-liquidity spread to

    phi = -gamma r + theta^T (theta + gamma g^T Xi)
          - (2-gamma) / (2 (1-gamma)) ||theta + gamma g^T Xi||^2,

which is null at gamma = 0 (log preferences see no roll-over risk).  The
pipeline feeds this phi back into a factor model, closing the loop that the
term-structure and control modules consume; the martingale property of
Y S~0 is then verified by a drift test on simulated paths.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .fields import CoefficientField, constant, derived
from .model import FactorModelSpec
from .sim import (DriftTest, Estimate, SimConfig, draw_increments,
                  map_chunks, reflect_into_box)

__all__ = [
    "AssetMarketSpec",
    "RiskParams",
    "StrategyField",
    "constant_strategy",
    "StrategyDecomposition",
    "market_price_of_risk",
    "rs_strategy",
    "simulate_wealth",
    "WealthBundle",
    "rs_objective",
    "funding_liquidity_spread",
    "rs_spread_pipeline",
    "verify_rs_martingale",
    "RsMartingaleReport",
    "market_to_json",
    "market_from_json",
]

_MIN_SINGULAR = 1e-10


@dataclass(frozen=True)
class AssetMarketSpec:
    """m tradable assets with drift mu (m,) and volatility sigma (m, d)."""

    m: int
    mu: CoefficientField
    sigma: CoefficientField
    s0: tuple

    def __post_init__(self):
        s0 = np.asarray(self.s0, dtype=float)
        if s0.shape != (self.m,) or np.any(s0 <= 0):
            raise ValueError("s0 must be a positive vector of length m")
        object.__setattr__(self, "s0", tuple(float(v) for v in s0))
        if self.mu.shape != (self.m,):
            raise ValueError(f"mu must have shape ({self.m},)")
        if len(self.sigma.shape) != 2 or self.sigma.shape[0] != self.m:
            raise ValueError("sigma must be an (m, d) matrix field")

    @property
    def d(self) -> int:
        return self.sigma.shape[1]

    def validate_on(self, model: FactorModelSpec) -> None:
        """Check sigma keeps full rank on a lattice of the model domain."""
        pts = model.domain.lattice(per_axis=5)
        for t in np.linspace(0.0, model.horizon, 3):
            sig = self.sigma(t, pts)
            smin = np.linalg.svd(sig, compute_uv=False)[..., -1]
            if np.any(smin <= _MIN_SINGULAR):
                raise ValueError("sigma is rank-deficient on the domain")


@dataclass(frozen=True)
class RiskParams:
    """Risk aversion gamma < 0 and the Bellman-gradient field Xi (n,).

    gamma = 0 is admitted only as the logarithmic-preference limit (null
    spread, growth-optimal strategy); the operating regime is gamma < 0.
    """

    gamma: float
    Xi: CoefficientField | None = None

    def __post_init__(self):
        if not np.isfinite(self.gamma) or self.gamma > 0:
            raise ValueError("gamma must be nonpositive")

    def xi_field(self, n: int) -> CoefficientField:
        return self.Xi if self.Xi is not None else constant(np.zeros(n))


@dataclass(frozen=True)
class StrategyField:
    """Grid-sampled m-vector proportion field pi(t, x) (one-factor state)."""

    t_nodes: np.ndarray
    x_nodes: np.ndarray
    values: np.ndarray   # (n_t, n_x, m)

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim != 3 or v.shape[:2] != (len(self.t_nodes),
                                          len(self.x_nodes)):
            raise ValueError("values must have shape (n_t, n_x, m)")
        if not np.all(np.isfinite(v)):
            raise ValueError("strategy contains non-finite values")
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "t_nodes",
                           np.asarray(self.t_nodes, dtype=float))
        object.__setattr__(self, "x_nodes",
                           np.asarray(self.x_nodes, dtype=float))

    @property
    def m(self) -> int:
        return self.values.shape[2]

    def at(self, t: float, x: np.ndarray) -> np.ndarray:
        ts, xs = self.t_nodes, self.x_nodes
        if t < ts[0] - 1e-9 or t > ts[-1] + 1e-9:
            raise ValueError("strategy evaluated outside its time grid")
        x = np.asarray(x, dtype=float)
        if np.any(x < xs[0] - 1e-9) or np.any(x > xs[-1] + 1e-9):
            raise ValueError("strategy evaluated outside its space grid")
        if ts.size == 1:
            row = self.values[0]
        else:
            tc = min(max(t, ts[0]), ts[-1])
            j = min(int(np.searchsorted(ts, tc, side="right") - 1),
                    ts.size - 2)
            w = (tc - ts[j]) / (ts[j + 1] - ts[j])
            row = (1.0 - w) * self.values[j] + w * self.values[j + 1]
        if xs.size == 1:
            return np.broadcast_to(row[0], (x.size, self.m)).copy()
        out = np.empty((x.size, self.m))
        xc = np.clip(x, xs[0], xs[-1])
        for c in range(self.m):
            out[:, c] = np.interp(xc, xs, row[:, c])
        return out


def constant_strategy(pi, t_span: tuple = (0.0, 1e9),
                      x_span: tuple = (-1e12, 1e12)) -> StrategyField:
    """State-independent proportions, valid on an effectively whole axis."""
    pi = np.atleast_1d(np.asarray(pi, dtype=float))
    vals = np.broadcast_to(pi, (2, 2, pi.size)).copy()
    return StrategyField(t_nodes=np.asarray(t_span, dtype=float),
                         x_nodes=np.asarray(x_span, dtype=float),
                         values=vals)


def market_price_of_risk(mu_val, sigma_val, r_val: float) -> np.ndarray:
    """theta = sigma^+ (mu - r 1) via the Moore-Penrose pseudoinverse."""
    mu = np.atleast_1d(np.asarray(mu_val, dtype=float))
    sig = np.atleast_2d(np.asarray(sigma_val, dtype=float))
    if sig.shape[0] != mu.size:
        raise ValueError("mu and sigma row counts disagree")
    smin = np.linalg.svd(sig, compute_uv=False)[-1]
    if smin <= _MIN_SINGULAR:
        raise ValueError("sigma is rank-deficient")
    theta = np.linalg.pinv(sig) @ (mu - r_val)
    if not np.all(np.isfinite(theta)):
        raise ValueError("market price of risk is not finite")
    return theta


@dataclass(frozen=True)
class StrategyDecomposition:
    """Two-fund split of the risk-sensitive strategy.

    total = gop_component + hedging_component, with gop_component equal to
    the growth-optimal proportions scaled by 1/(1-gamma).
    """

    total: np.ndarray
    gop_component: np.ndarray
    hedging_component: np.ndarray


def rs_strategy(theta_val, sigma_val, g_val, Xi_val,
                gamma: float) -> StrategyDecomposition:
    """Risk-sensitive proportions pi = (ss^T)^{-1} s (theta + gamma g^T Xi)/(1-gamma).

    gamma = 0 is accepted for the limit check and returns the growth-optimal
    strategy (ss^T)^{-1} s theta.
    """
    if gamma > 0:
        raise ValueError("gamma must be nonpositive")
    theta = np.atleast_1d(np.asarray(theta_val, dtype=float))
    sig = np.atleast_2d(np.asarray(sigma_val, dtype=float))
    g = np.atleast_2d(np.asarray(g_val, dtype=float))
    xi = np.atleast_1d(np.asarray(Xi_val, dtype=float))
    ss = sig @ sig.T
    try:
        ss_inv_sig = np.linalg.solve(ss, sig)
    except np.linalg.LinAlgError as exc:
        raise ValueError("sigma sigma^T is singular") from exc
    pi_gop = ss_inv_sig @ theta
    hedge = (gamma / (1.0 - gamma)) * (ss_inv_sig @ (g.T @ xi))
    total = pi_gop / (1.0 - gamma) + hedge
    return StrategyDecomposition(total=total,
                                 gop_component=pi_gop / (1.0 - gamma),
                                 hedging_component=hedge)


@dataclass(frozen=True)
class WealthBundle:
    """Factor and wealth trajectories of a self-financing strategy."""

    times: np.ndarray
    x: np.ndarray        # (n_paths, n_t, n)
    wealth: np.ndarray   # (n_paths, n_t)
    config: SimConfig


def simulate_wealth(model: FactorModelSpec, market: AssetMarketSpec,
                    strategy: StrategyField, config: SimConfig,
                    workers: int = 1) -> WealthBundle:
    """Wealth paths of dV/V = r dt + pi^T (mu - r 1) dt + pi^T sigma dW.

    The factor is evolved with the same scheme and Brownian increments as
    the plain simulation engine (one shared d-dimensional driver); wealth
    integrates in log space, so positivity is structural.  V_0 = 1.
    """
    if config.T > model.horizon:
        raise ValueError("simulation window exceeds the model horizon")
    times = config.time_grid()
    n_t = times.size
    x_start = np.asarray(model.x0, dtype=float)
    x_out = np.empty((config.n_paths, n_t, model.n))
    w_out = np.empty((config.n_paths, n_t))

    def run(start: int, size: int):
        lo = np.asarray(model.domain.lo)
        hi = np.asarray(model.domain.hi)
        z = draw_increments(config.seed, start, size, n_t - 1, model.d,
                            config.antithetic)
        x = np.tile(x_start, (size, 1))
        logv = np.zeros(size)
        tx = np.empty((size, n_t, model.n))
        tw = np.empty((size, n_t))
        tx[:, 0] = x
        tw[:, 0] = 1.0
        for k in range(n_t - 1):
            t = times[k]
            dt = times[k + 1] - times[k]
            pi = strategy.at(t, x[:, 0])                      # (m0, m)
            mu = market.mu(t, x)                              # (m0, m)
            sig = market.sigma(t, x)                          # (m0, m, d)
            rx = model.r(t, x)
            excess = np.einsum("pm,pm->p", pi, mu - rx[:, None])
            vol = np.einsum("pm,pmd->pd", pi, sig)            # pi^T sigma
            dw = np.sqrt(dt) * z[k]
            logv = logv + (rx + excess
                           - 0.5 * np.einsum("pd,pd->p", vol, vol)) * dt \
                + np.einsum("pd,pd->p", vol, dw)
            x = x + model.f(t, x) * dt \
                + np.einsum("pnd,pd->pn", model.g(t, x), dw)
            x, _ = reflect_into_box(x, lo, hi)
            tx[:, k + 1] = x
            tw[:, k + 1] = np.exp(logv)
        return start, size, tx, tw

    for start, size, tx, tw in map_chunks(run, config.n_paths, workers):
        sl = slice(start, start + size)
        x_out[sl] = tx
        w_out[sl] = tw
    return WealthBundle(times=times, x=x_out, wealth=w_out, config=config)


def rs_objective(wealth_terminal, gamma: float) -> Estimate:
    """Monte-Carlo estimate of E[(V_T)^gamma] for gamma < 0."""
    v = np.asarray(wealth_terminal, dtype=float)
    if np.any(v <= 0):
        raise ValueError("terminal wealth must be positive")
    if gamma >= 0:
        raise ValueError("gamma must be negative")
    samples = v ** gamma
    se = float(samples.std(ddof=1) / np.sqrt(samples.size)) \
        if samples.size > 1 else float("inf")
    return Estimate(mean=float(samples.mean()), stderr=se,
                    n_paths=samples.size, seed=-1)


def funding_liquidity_spread(r_val: float, theta_val, gXi_val,
                             gamma: float) -> float:
    """Endogenous spread of the risk-sensitive investor.

    phi = -gamma r + theta^T h - (2-gamma)/(2(1-gamma)) ||h||^2 with
    h = theta + gamma gXi; gamma = 0 gives exactly 0.
    """
    theta = np.atleast_1d(np.asarray(theta_val, dtype=float))
    gxi = np.atleast_1d(np.asarray(gXi_val, dtype=float))
    if gxi.size == 1 and theta.size > 1:
        gxi = np.full_like(theta, gxi[0])
    if not (np.isfinite(r_val) and np.isfinite(gamma)
            and np.all(np.isfinite(theta)) and np.all(np.isfinite(gxi))):
        raise ValueError("inputs must be finite")
    h = theta + gamma * gxi
    return float(-gamma * r_val + theta @ h
                 - (2.0 - gamma) / (2.0 * (1.0 - gamma)) * (h @ h))


def _theta_mismatch(model: FactorModelSpec, market: AssetMarketSpec) -> float:
    pts = model.domain.lattice(per_axis=5)
    worst = 0.0
    for t in np.linspace(0.0, model.horizon, 3):
        th_model = model.theta(t, pts)
        mu = market.mu(t, pts)
        sig = market.sigma(t, pts)
        rx = model.r(t, pts)
        th_mkt = np.einsum("pdm,pm->pd", np.linalg.pinv(sig),
                           mu - rx[:, None])
        worst = max(worst, float(np.max(np.abs(th_model - th_mkt))))
    return worst


def rs_spread_pipeline(model_without_phi: FactorModelSpec,
                       market: AssetMarketSpec, params: RiskParams,
                       theta_tol: float = 1e-8) -> FactorModelSpec:
    """Replace the model's phi with the risk-sensitive endogenous spread.

    The market must be consistent with the model's theta field (pseudo-
    inverse market price of risk within theta_tol on a sampled lattice).
    The returned model is identical except for phi; when the composed
    spread is constant on the sampling lattice it is emitted as a constant
    field (exact and serializable), otherwise as a derived field.
    """
    model = model_without_phi
    market.validate_on(model)
    mismatch = _theta_mismatch(model, market)
    if mismatch > theta_tol:
        raise ValueError(
            f"market-implied theta deviates from the model theta by "
            f"{mismatch:.3e} > {theta_tol:.0e}")
    gamma = params.gamma
    xi = params.xi_field(model.n)

    def phi_fn(t, x):
        th = model.theta(t, x)                       # (b, d)
        g = model.g(t, x)                            # (b, n, d)
        xiv = xi(t, x)                               # (b, n)
        gxi = np.einsum("bnd,bn->bd", g, xiv)
        h = th + gamma * gxi
        return (-gamma * model.r(t, x)
                + np.einsum("bd,bd->b", th, h)
                - (2.0 - gamma) / (2.0 * (1.0 - gamma))
                * np.einsum("bd,bd->b", h, h))

    pts = model.domain.lattice(per_axis=7)
    sample = np.concatenate([phi_fn(t, pts)
                             for t in np.linspace(0, model.horizon, 3)])
    if float(sample.max() - sample.min()) <= 1e-14:
        phi = constant(float(sample[0]))
    else:
        phi = derived("rs_spread", (), phi_fn)
    return model.with_phi(phi)


@dataclass(frozen=True)
class RsMartingaleReport:
    """Drift test of Y S~0 with Y = (V^pi)^(gamma-1)."""

    drift: DriftTest
    gamma: float
    n_paths: int
    seed: int
    passed: bool

    def to_json(self) -> str:
        return json.dumps({
            "gamma": self.gamma, "n_paths": self.n_paths, "seed": self.seed,
            "z": self.drift.z, "increment_mean": self.drift.increment_mean,
            "stderr": self.drift.stderr,
            "n_increments": self.drift.n_increments,
            "passed": self.passed}, indent=2, sort_keys=True)


def verify_rs_martingale(model: FactorModelSpec, market: AssetMarketSpec,
                         params: RiskParams | None, config: SimConfig,
                         gamma: float | None = None,
                         workers: int = 1) -> RsMartingaleReport:
    """Drift z-test of Y S~0 along the optimal risk-sensitive portfolio.

    The portfolio dynamics use drift r + theta^T h / (1-gamma) and
    diffusion (theta + gamma P g^T Xi) / (1-gamma) with h = theta +
    gamma g^T Xi and P the projection sigma^+ sigma; Y = (V)^(gamma-1) and
    S~0 accrues at r + phi with the model's phi.  Passing gamma = 0
    (params may then be None) degenerates to the deflator test Y = 1/V*.
    Passes when |z| <= 3.
    """
    if gamma is None:
        if params is None:
            raise ValueError("provide RiskParams or an explicit gamma")
        gamma = params.gamma
    xi = (params.xi_field(model.n) if params is not None
          else constant(np.zeros(model.n)))
    xi_is_zero = all(
        not np.any(xi(t, model.domain.lattice(3)))
        for t in np.linspace(0, model.horizon, 3))
    market.validate_on(model)
    times = config.time_grid()
    n_steps = times.size - 1

    def run(start: int, size: int):
        lo = np.asarray(model.domain.lo)
        hi = np.asarray(model.domain.hi)
        z = draw_increments(config.seed, start, size, n_steps, model.d,
                            config.antithetic)
        x = np.tile(np.asarray(model.x0), (size, 1))
        a = np.zeros(size)           # (gamma-1) log V + int (r + phi)
        m_prev = np.ones(size)
        cnt, s1, s2 = 0, 0.0, 0.0
        for k in range(n_steps):
            t = times[k]
            dt = times[k + 1] - times[k]
            th = model.theta(t, x)
            g = model.g(t, x)
            rx = model.r(t, x)
            ph = model.phi(t, x)
            xiv = xi(t, x)
            gxi = np.einsum("bnd,bn->bd", g, xiv)
            h = th + gamma * gxi
            if xi_is_zero:
                diff = th / (1.0 - gamma)
            else:
                sig = market.sigma(t, x)
                proj = np.einsum("bdm,bme->bde", np.linalg.pinv(sig), sig)
                diff = (th + gamma * np.einsum("bde,be->bd", proj, gxi)) \
                    / (1.0 - gamma)
            drift_v = rx + np.einsum("bd,bd->b", th, h) / (1.0 - gamma)
            dw = np.sqrt(dt) * z[k]
            dlogv = (drift_v - 0.5 * np.einsum("bd,bd->b", diff, diff)) * dt \
                + np.einsum("bd,bd->b", diff, dw)
            a = a + (gamma - 1.0) * dlogv + (rx + ph) * dt
            x = x + model.f(t, x) * dt + np.einsum("bnd,bd->bn", g, dw)
            x, _ = reflect_into_box(x, lo, hi)
            m_new = np.exp(a)
            inc = m_new - m_prev
            cnt += inc.size
            s1 += float(np.sum(inc))
            s2 += float(np.sum(inc * inc))
            m_prev = m_new
        return cnt, s1, s2

    cnt, s1, s2 = 0, 0.0, 0.0
    for c, a1, a2 in map_chunks(run, config.n_paths, workers):
        cnt += c
        s1 += a1
        s2 += a2
    mean = s1 / cnt
    var = max(s2 / cnt - mean ** 2, 0.0) * cnt / (cnt - 1)
    se = float(np.sqrt(var / cnt))
    zstat = 0.0 if se == 0.0 else mean / se
    drift = DriftTest(increment_mean=mean, stderr=se, z=zstat,
                      n_increments=cnt)
    return RsMartingaleReport(drift=drift, gamma=gamma,
                              n_paths=config.n_paths, seed=config.seed,
                              passed=bool(abs(zstat) <= 3.0))


def market_to_json(market: AssetMarketSpec) -> str:
    from .fields import field_to_dict
    return json.dumps({"m": market.m,
                       "mu": field_to_dict(market.mu),
                       "sigma": field_to_dict(market.sigma),
                       "s0": list(market.s0)}, indent=2, sort_keys=True)


def market_from_json(text: str) -> AssetMarketSpec:
    from .fields import field_from_dict
    doc = json.loads(text)
    return AssetMarketSpec(m=int(doc["m"]),
                           mu=field_from_dict(doc["mu"]),
                           sigma=field_from_dict(doc["sigma"]),
                           s0=tuple(doc["s0"]))
