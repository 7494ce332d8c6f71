"""Term-structure assembly: ZCB prices, term rates, spreads, swap values.

Rates use simple compounding with exact year fractions.  The multiplicative
spot spread S(t,T) equals the value A(t,T) of the rolled-over loan
repayment under fair pricing; the forward spread S_t(T,T+delta) relates the
forward term rate to the simple forward rate through

    S = (1 + delta L) / (1 + delta F).

Reports can be assembled from the PDE solvers (one-factor models) or from
the Monte-Carlo estimators; the two routes cross-check each other.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .model import FactorModelSpec
from .pde import (Grid1D, forward_spread_problem, solve_parabolic,
                  spot_spread_problem, zcb_problem)
from .sim import (SimConfig, mc_benchmarked_zcb, mc_forward_spread,
                  mc_spot_spread)

__all__ = [
    "term_rate",
    "simple_forward",
    "forward_term_rate",
    "sps_value",
    "TermStructureReport",
    "term_structure_report",
]


def term_rate(A: float, P: float, tau: float) -> float:
    """Spot term rate L with accrual tau: L = (A / P - 1) / tau.

    A is the present value of the rolled-over repayment (the spot spread),
    P the ZCB price to the same maturity.
    """
    if P <= 0:
        raise ValueError("ZCB price must be positive")
    if tau <= 0:
        raise ValueError("accrual must be positive")
    return (A / P - 1.0) / tau


def simple_forward(P_T: float, P_Td: float, delta: float) -> float:
    """Simple forward rate F = (P_T / P_Td - 1) / delta."""
    if P_T <= 0 or P_Td <= 0:
        raise ValueError("ZCB prices must be positive")
    if delta <= 0:
        raise ValueError("tenor must be positive")
    return (P_T / P_Td - 1.0) / delta


def forward_term_rate(spread: float, F: float, delta: float) -> float:
    """Forward term rate from the multiplicative spread: L = ((1+dF)S - 1)/d."""
    if delta <= 0:
        raise ValueError("tenor must be positive")
    if spread <= 0:
        raise ValueError("spread must be positive")
    return ((1.0 + delta * F) * spread - 1.0) / delta


def sps_value(L: float, R: float, delta: float, P_Td: float) -> float:
    """Single-period swap value delta (L - R) P(t, T+delta); affine in R."""
    if delta <= 0:
        raise ValueError("tenor must be positive")
    if P_Td <= 0:
        raise ValueError("ZCB price must be positive")
    return delta * (L - R) * P_Td


@dataclass(frozen=True)
class TermStructureReport:
    """Curves at a valuation date (t, x).

    maturity_rows: per T dict with keys T, p_hat, P, F, S, L (+ *_se for mc).
    pair_rows: per (T, delta) dict with keys T, delta, P_long, F_fwd, S_fwd,
    L_fwd, sps_par_rate, sps_value_at_par.  warnings lists soft violations
    such as spreads below 1 on a model that declares phi >= 0.
    """

    t: float
    x: float
    method: str
    maturity_rows: tuple
    pair_rows: tuple
    warnings: tuple = ()
    metadata: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(
            {"t": self.t, "x": self.x, "method": self.method,
             "maturity_rows": list(self.maturity_rows),
             "pair_rows": list(self.pair_rows),
             "warnings": list(self.warnings),
             "metadata": self.metadata},
            indent=2, sort_keys=True)

    def to_csv(self, path: str) -> None:
        """One row per (T, delta); maturity-level values repeat per tenor."""
        mat = {row["T"]: row for row in self.maturity_rows}
        cols = ["T", "delta", "P", "p_hat", "F", "S", "L",
                "P_long", "F_fwd", "S_fwd", "L_fwd",
                "sps_par_rate", "sps_value_at_par"]
        se_cols = ["p_hat_se", "S_se", "S_fwd_se"] if self.method == "mc" else []
        rows = self.pair_rows if self.pair_rows else tuple(
            {"T": r["T"], "delta": None} for r in self.maturity_rows)
        with open(path, "w") as fh:
            fh.write(",".join(cols + se_cols) + "\n")
            for pr in rows:
                mr = mat[pr["T"]]
                rec = {**mr, **pr}
                vals = [_csv_cell(rec.get(c)) for c in cols + se_cols]
                fh.write(",".join(vals) + "\n")


def _csv_cell(v) -> str:
    if v is None:
        return ""
    return repr(float(v))


def _spot_grid(model: FactorModelSpec, t: float, T: float, n_x: int,
               nt_per_year: float) -> Grid1D:
    n_t = max(2, int(round((T - t) * nt_per_year)) + 1)
    return Grid1D(x_min=model.domain.lo[0], x_max=model.domain.hi[0],
                  n_x=n_x, t_start=t, t_end=T, n_t=n_t)


def term_structure_report(model: FactorModelSpec, t: float, x,
                          maturities: Sequence[float],
                          tenors: Sequence[float] = (0.25, 0.5, 1.0),
                          method: str = "pde",
                          config: SimConfig | None = None,
                          n_x: int = 401, nt_per_year: float = 200.0,
                          scheme_theta: float = 0.5,
                          workers: int = 1) -> TermStructureReport:
    """Assemble the multi-curve report at valuation (t, x).

    method "pde" solves the three pricing PDEs on the model domain (n = 1
    only); method "mc" uses the Feynman-Kac estimators with config's dt,
    n_paths and seed.  Maturities must be sorted, with t <= T <= horizon;
    a maturity equal to t contributes rows through the definitional
    identities P(t,t) = 1 and S_t(t, t+delta) = S(t, t+delta).
    """
    if model.v_star is None:
        raise ValueError("term-structure assembly requires v_star")
    xq = float(np.atleast_1d(np.asarray(x, dtype=float))[0])
    mats = [float(T) for T in maturities]
    if sorted(mats) != mats:
        raise ValueError("maturities must be sorted")
    if mats and mats[-1] > model.horizon:
        raise ValueError("maturities exceed the model horizon")
    if any(T < t for T in mats):
        raise ValueError("maturities must not precede the valuation time")
    if method not in ("pde", "mc"):
        raise ValueError("method must be 'pde' or 'mc'")
    if method == "mc" and config is None:
        raise ValueError("method 'mc' requires a SimConfig")
    if method == "pde" and model.n != 1:
        raise ValueError("method 'pde' requires a one-factor model")

    v_t = model.v_star.at(t, (xq,))
    phi_nonneg = model.phi_nonnegative()
    warnings: list[str] = []

    spot_cache: dict = {}
    phat_cache: dict = {}

    def spot_solution(T: float):
        key = round(T, 12)
        if key not in spot_cache:
            grid = _spot_grid(model, t, T, n_x, nt_per_year)
            spot_cache[key] = solve_parabolic(
                spot_spread_problem(model, T), grid, theta=scheme_theta)
        return spot_cache[key]

    def phat_solution(T: float):
        key = round(T, 12)
        if key not in phat_cache:
            grid = _spot_grid(model, t, T, n_x, nt_per_year)
            phat_cache[key] = solve_parabolic(
                zcb_problem(model, T), grid, theta=scheme_theta)
        return phat_cache[key]

    def zcb_and_spread(T: float) -> tuple[float, float, float, float]:
        """(p_hat, P, S, and their se) at (t, xq) for maturity T > t."""
        if method == "pde":
            ph = phat_solution(T).value_at(t, xq)
            s = spot_solution(T).value_at(t, xq)
            return ph, s, 0.0, 0.0
        e_ph = mc_benchmarked_zcb(model, T, t, (xq,), config, workers)
        e_s = mc_spot_spread(model, T, t, (xq,), config, workers)
        return e_ph.mean, e_s.mean, e_ph.stderr, e_s.stderr

    results: dict = {}
    for T in sorted(set(mats) | {T + d for T in mats for d in tenors}):
        if T <= t + 1e-12:
            results[round(T, 12)] = (1.0 / v_t, 1.0, 0.0, 0.0)
        else:
            results[round(T, 12)] = zcb_and_spread(T)

    maturity_rows = []
    for T in mats:
        ph, s, ph_se, s_se = results[round(T, 12)]
        P = v_t * ph
        if P <= 0:
            raise RuntimeError(f"non-positive ZCB price at T={T}")
        if s <= 0:
            raise RuntimeError(f"non-positive spot spread at T={T}")
        if phi_nonneg and s < 1.0 - 1e-8 - 3.0 * s_se:
            warnings.append(f"S(t,{T}) = {s} < 1 although phi >= 0")
        tau = T - t
        row = {"T": T, "p_hat": ph, "P": P,
               "F": None if tau <= 1e-12 else (1.0 / P - 1.0) / tau,
               "S": s,
               "L": None if tau <= 1e-12 else term_rate(s, P, tau)}
        if method == "mc":
            row["p_hat_se"] = ph_se
            row["S_se"] = s_se
        maturity_rows.append(row)

    pair_rows = []
    for T in mats:
        ph_T, s_T, _, _ = results[round(T, 12)]
        P_T = v_t * ph_T
        for d in tenors:
            Td = T + d
            ph_long, s_long_val, _, s_long_se = results[round(Td, 12)]
            P_long = v_t * ph_long
            if T <= t + 1e-12:
                # S_t(t, t+delta) = S(t, t+delta) by definition
                s_fwd, s_fwd_se = s_long_val, s_long_se
            elif method == "pde":
                p_hat = phat_solution(T)
                s_long = spot_solution(Td)
                fwd = solve_parabolic(
                    forward_spread_problem(model, T, d, p_hat, s_long),
                    p_hat.grid, theta=scheme_theta)
                s_fwd, s_fwd_se = fwd.value_at(t, xq), 0.0
            else:
                e = mc_forward_spread(model, T, d, t, (xq,), config, workers)
                s_fwd, s_fwd_se = e.mean, e.stderr
            if s_fwd <= 0:
                raise RuntimeError(f"non-positive forward spread at ({T},{d})")
            if phi_nonneg and s_fwd < 1.0 - 1e-8 - 3.0 * s_fwd_se:
                warnings.append(
                    f"S_t({T},{T}+{d}) = {s_fwd} < 1 although phi >= 0")
            F_fwd = simple_forward(P_T, P_long, d)
            L_fwd = forward_term_rate(s_fwd, F_fwd, d)
            row = {"T": T, "delta": d, "P_long": P_long, "F_fwd": F_fwd,
                   "S_fwd": s_fwd, "L_fwd": L_fwd,
                   "sps_par_rate": L_fwd,
                   "sps_value_at_par": sps_value(L_fwd, L_fwd, d, P_long)}
            if method == "mc":
                row["S_fwd_se"] = s_fwd_se
            pair_rows.append(row)

    meta = {"method": method, "n_x": n_x, "nt_per_year": nt_per_year,
            "scheme_theta": scheme_theta}
    if config is not None:
        meta.update(dt=config.dt, n_paths=config.n_paths, seed=config.seed)
    return TermStructureReport(
        t=t, x=xq, method=method,
        maturity_rows=tuple(maturity_rows), pair_rows=tuple(pair_rows),
        warnings=tuple(warnings), metadata=meta)
