"""Markovian factor-market specifications.

A market is described by the factor SDE dX = f dt + g dW on a box domain,
the short rate r(t,x), the market price of risk theta(t,x), the
funding-liquidity spread phi(t,x) and (optionally) the growth-optimal
portfolio value function v*(t,x).  When v* is supplied it must satisfy the
two GOP consistency conditions

    (C1)  g^T grad_x v* = v* theta
    (C2)  dv*/dt + grad_x v*^T (f - g theta) + 1/2 tr(g^T Hess(v*) g) - v* r = 0

which together with v*(0, x0) = 1 pin v*(t, X_t) to the GOP value process.
`build_consistent_vasicek` constructs a one-factor family satisfying both
conditions exactly; `gop_consistency_residuals` checks them numerically for
any model via central finite differences.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .fields import (CoefficientField, affine, constant, exp_affine,
                     field_from_dict, field_to_dict, mean_reversion)

__all__ = [
    "Box",
    "FactorModelSpec",
    "build_consistent_vasicek",
    "GopResiduals",
    "gop_consistency_residuals",
    "model_to_json",
    "model_from_json",
]


@dataclass(frozen=True)
class Box:
    """Axis-aligned box domain in R^n."""

    lo: tuple
    hi: tuple

    def __post_init__(self):
        lo = np.asarray(self.lo, dtype=float)
        hi = np.asarray(self.hi, dtype=float)
        if lo.shape != hi.shape or lo.ndim != 1:
            raise ValueError("box bounds must be 1-d arrays of equal length")
        if not np.all(lo < hi):
            raise ValueError("box must satisfy lo < hi in every coordinate")
        object.__setattr__(self, "lo", tuple(float(v) for v in lo))
        object.__setattr__(self, "hi", tuple(float(v) for v in hi))

    @property
    def n(self) -> int:
        return len(self.lo)

    def contains(self, x) -> bool:
        x = np.asarray(x, dtype=float)
        return bool(np.all(x >= self.lo) and np.all(x <= self.hi))

    def lattice(self, per_axis: int = 5) -> np.ndarray:
        """Small deterministic lattice of interior/edge points, (m, n)."""
        axes = [np.linspace(lo, hi, per_axis) for lo, hi in zip(self.lo, self.hi)]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=-1)


@dataclass(frozen=True)
class FactorModelSpec:
    """Complete Markovian market specification.

    Immutable after construction; evaluating its fields is thread-safe.
    All rates are annualized, volatilities are per sqrt(year).
    """

    n: int
    d: int
    f: CoefficientField          # (n,) drift
    g: CoefficientField          # (n, d) diffusion
    r: CoefficientField          # scalar short rate
    theta: CoefficientField      # (d,) market price of risk
    phi: CoefficientField        # scalar funding-liquidity spread
    x0: tuple
    domain: Box
    horizon: float
    v_star: CoefficientField | None = None   # scalar GOP value function

    def __post_init__(self):
        x0 = np.asarray(self.x0, dtype=float)
        if x0.shape != (self.n,):
            raise ValueError(f"x0 must have shape ({self.n},)")
        object.__setattr__(self, "x0", tuple(float(v) for v in x0))
        if self.domain.n != self.n:
            raise ValueError("domain dimension does not match n")
        if not self.domain.contains(x0):
            raise ValueError("x0 must lie inside the domain box")
        if not (np.isfinite(self.horizon) and self.horizon > 0):
            raise ValueError("horizon must be positive and finite")
        self._validate_fields()

    def _validate_fields(self):
        """Spot-check arity and finiteness on a coarse (t, x) lattice."""
        pts = self.domain.lattice(per_axis=3)
        pts = np.vstack([pts, np.asarray(self.x0)[None, :]])
        shapes = {"f": (self.n,), "g": (self.n, self.d), "r": (),
                  "theta": (self.d,), "phi": ()}
        for t in np.linspace(0.0, self.horizon, 3):
            for name, shape in shapes.items():
                fld: CoefficientField = getattr(self, name)
                if fld.shape != shape:
                    raise ValueError(
                        f"field {name} declares shape {fld.shape}, "
                        f"expected {shape}")
                out = fld(t, pts)
                if out.shape != (pts.shape[0],) + shape:
                    raise ValueError(f"field {name} returned wrong arity")
                if not np.all(np.isfinite(out)):
                    raise ValueError(f"field {name} is not finite on the domain")
            if self.v_star is not None:
                v = self.v_star(t, pts)
                if not np.all(np.isfinite(v)) or np.any(v <= 0):
                    raise ValueError("v_star must be finite and positive")
        if self.v_star is not None:
            v0 = self.v_star.at(0.0, self.x0)
            if abs(v0 - 1.0) > 1e-9:
                raise ValueError(f"v_star(0, x0) must equal 1, got {v0}")

    def with_phi(self, phi: CoefficientField) -> "FactorModelSpec":
        """Copy of the model with the funding-liquidity spread replaced."""
        return replace(self, phi=phi)

    def phi_nonnegative(self, per_axis: int = 9) -> bool:
        """Sampled check that phi >= 0 on a (t, x) lattice."""
        pts = self.domain.lattice(per_axis=per_axis)
        for t in np.linspace(0.0, self.horizon, 5):
            if np.any(self.phi(t, pts) < 0):
                return False
        return True


def build_consistent_vasicek(kappa: float, mu_bar: float, sigma_x: float,
                             lam: float, phi: CoefficientField | None = None,
                             x0: float | None = None,
                             horizon: float = 10.0,
                             domain_halfwidth_stds: float = 6.0,
                             ) -> FactorModelSpec:
    """One-factor mean-reverting model with exact GOP consistency.

    The factor follows dX = kappa (mu_bar - X) dt + sigma_x dW and the GOP
    value function is the exponential v*(t,x) = exp(lam (x - x0)).  With
    constant diffusion, condition (C1) forces theta = sigma_x * lam and
    condition (C2) then pins the short rate to the affine function

        r(x) = lam kappa (mu_bar - x) - lam^2 sigma_x^2 / 2,

    so both consistency residuals vanish identically.  lam = 0 degenerates
    to theta = 0, r = 0, v* = 1.

    The domain defaults to mu_bar +/- 6 stationary standard deviations
    sigma_x / sqrt(2 kappa) (falling back to a horizon-scaled width when
    kappa = 0).
    """
    for name, val in [("kappa", kappa), ("mu_bar", mu_bar),
                      ("sigma_x", sigma_x), ("lam", lam)]:
        if not np.isfinite(val):
            raise ValueError(f"{name} must be finite")
    if sigma_x <= 0:
        raise ValueError("sigma_x must be positive")
    if kappa < 0:
        raise ValueError("kappa must be nonnegative")
    if x0 is None:
        x0 = mu_bar
    if phi is None:
        phi = constant(0.0)

    theta_val = sigma_x * lam
    # r(x) = lam*kappa*mu_bar - lam^2 sigma_x^2/2  - lam*kappa * x
    r_field = affine(lam * kappa * mu_bar - 0.5 * lam ** 2 * sigma_x ** 2,
                     -lam * kappa)
    v_star = exp_affine(-lam * x0, lam)

    if kappa > 0:
        half = domain_halfwidth_stds * sigma_x / np.sqrt(2.0 * kappa)
    else:
        half = domain_halfwidth_stds * sigma_x * np.sqrt(max(horizon, 1.0))
    lo = min(mu_bar, x0) - half
    hi = max(mu_bar, x0) + half

    return FactorModelSpec(
        n=1, d=1,
        f=mean_reversion(kappa, mu_bar, n=1),
        g=constant([[sigma_x]]),
        r=r_field,
        theta=constant([theta_val]),
        phi=phi,
        x0=(float(x0),),
        domain=Box(lo=(lo,), hi=(hi,)),
        horizon=horizon,
        v_star=v_star,
    )


@dataclass(frozen=True)
class GopResiduals:
    """Pointwise residuals of the two GOP consistency conditions.

    grad_condition holds g^T grad v* - v* theta per point (shape (m, d));
    drift_condition holds the scalar residual of (C2).  Relative residuals
    are divided by v* at the same point, making them invariant under a
    positive rescaling of v*.
    """

    points: tuple
    step: float
    grad_condition: np.ndarray
    drift_condition: np.ndarray
    grad_relative: np.ndarray
    drift_relative: np.ndarray

    @property
    def max_abs_relative(self) -> float:
        return max(float(np.max(np.abs(self.grad_relative), initial=0.0)),
                   float(np.max(np.abs(self.drift_relative), initial=0.0)))


def _scalar_at(fld: CoefficientField, t: float, x: np.ndarray) -> float:
    return float(fld(t, x[None, :])[0])


def _grad_hess(fld: CoefficientField, t: float, x: np.ndarray,
               h: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Central-difference gradient and Hessian of a scalar field in x."""
    n = x.size
    grad = np.zeros(n)
    hess = np.zeros((n, n))
    v0 = _scalar_at(fld, t, x)
    for i in range(n):
        ei = np.zeros(n); ei[i] = h[i]
        vp = _scalar_at(fld, t, x + ei)
        vm = _scalar_at(fld, t, x - ei)
        grad[i] = (vp - vm) / (2.0 * h[i])
        hess[i, i] = (vp - 2.0 * v0 + vm) / h[i] ** 2
    for i in range(n):
        for j in range(i + 1, n):
            ei = np.zeros(n); ei[i] = h[i]
            ej = np.zeros(n); ej[j] = h[j]
            vpp = _scalar_at(fld, t, x + ei + ej)
            vpm = _scalar_at(fld, t, x + ei - ej)
            vmp = _scalar_at(fld, t, x - ei + ej)
            vmm = _scalar_at(fld, t, x - ei - ej)
            hess[i, j] = hess[j, i] = (vpp - vpm - vmp + vmm) / (4 * h[i] * h[j])
    return grad, hess


def _time_derivative(fld: CoefficientField, t: float, x: np.ndarray,
                     ht: float, horizon: float) -> float:
    if ht <= t and t + ht <= horizon:
        return (_scalar_at(fld, t + ht, x) - _scalar_at(fld, t - ht, x)) / (2 * ht)
    if t + 2 * ht <= horizon:   # one-sided second order at the left edge
        return (-3 * _scalar_at(fld, t, x) + 4 * _scalar_at(fld, t + ht, x)
                - _scalar_at(fld, t + 2 * ht, x)) / (2 * ht)
    return (3 * _scalar_at(fld, t, x) - 4 * _scalar_at(fld, t - ht, x)
            + _scalar_at(fld, t - 2 * ht, x)) / (2 * ht)


def gop_consistency_residuals(model: FactorModelSpec,
                              points: Sequence[tuple],
                              step: float = 1e-5) -> GopResiduals:
    """Residuals of the GOP conditions (C1), (C2) at the given (t, x) points.

    Derivatives of v* use central differences with per-coordinate step
    step * max(1, |coordinate|).  Points must stay at least one step away
    from the spatial boundary.
    """
    if model.v_star is None:
        raise ValueError("model has no v_star; GOP conditions are unchecked")
    lo = np.asarray(model.domain.lo)
    hi = np.asarray(model.domain.hi)
    grad_res = np.zeros((len(points), model.d))
    drift_res = np.zeros(len(points))
    vstars = np.zeros(len(points))
    for k, (t, xp) in enumerate(points):
        x = np.atleast_1d(np.asarray(xp, dtype=float))
        h = step * np.maximum(1.0, np.abs(x))
        if np.any(x - h < lo) or np.any(x + h > hi):
            raise ValueError(
                f"point {k} lies within one finite-difference step of the "
                "domain boundary")
        v = _scalar_at(model.v_star, t, x)
        grad, hess = _grad_hess(model.v_star, t, x, h)
        dv_dt = _time_derivative(model.v_star, t, x, step * max(1.0, abs(t)),
                                 model.horizon)
        gv = model.g(t, x[None, :])[0]           # (n, d)
        th = model.theta(t, x[None, :])[0]       # (d,)
        fv = model.f(t, x[None, :])[0]           # (n,)
        rv = float(model.r(t, x[None, :])[0])
        grad_res[k] = gv.T @ grad - v * th
        drift_res[k] = (dv_dt + grad @ (fv - gv @ th)
                        + 0.5 * np.trace(gv.T @ hess @ gv) - v * rv)
        vstars[k] = v
    return GopResiduals(
        points=tuple(points), step=step,
        grad_condition=grad_res, drift_condition=drift_res,
        grad_relative=grad_res / vstars[:, None],
        drift_relative=drift_res / vstars,
    )


def model_to_json(model: FactorModelSpec) -> str:
    """Serialize a model whose fields are all builtin or tabulated."""
    doc = {
        "n": model.n, "d": model.d,
        "f": field_to_dict(model.f),
        "g": field_to_dict(model.g),
        "r": field_to_dict(model.r),
        "theta": field_to_dict(model.theta),
        "phi": field_to_dict(model.phi),
        "v_star": None if model.v_star is None else field_to_dict(model.v_star),
        "x0": list(model.x0),
        "domain": {"lo": list(model.domain.lo), "hi": list(model.domain.hi)},
        "horizon": model.horizon,
    }
    return json.dumps(doc, indent=2, sort_keys=True)


def model_from_json(text: str) -> FactorModelSpec:
    doc = json.loads(text)
    return FactorModelSpec(
        n=int(doc["n"]), d=int(doc["d"]),
        f=field_from_dict(doc["f"]),
        g=field_from_dict(doc["g"]),
        r=field_from_dict(doc["r"]),
        theta=field_from_dict(doc["theta"]),
        phi=field_from_dict(doc["phi"]),
        v_star=(None if doc.get("v_star") is None
                else field_from_dict(doc["v_star"])),
        x0=tuple(doc["x0"]),
        domain=Box(lo=tuple(doc["domain"]["lo"]), hi=tuple(doc["domain"]["hi"])),
        horizon=float(doc["horizon"]),
    )
