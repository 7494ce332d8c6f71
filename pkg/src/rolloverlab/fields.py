"""Coefficient fields: the (t, x) -> value building blocks of a factor market.

A field evaluates at a scalar time t and a batch of factor points x of shape
(batch, n), returning an array of shape (batch,) + field.shape.  Built-in
parametric families cover everything the canonical models need and serialize
to JSON as name + parameter map; tabulated fields interpolate a stored grid;
derived fields wrap an arbitrary callable and do not serialize.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

__all__ = [
    "CoefficientField",
    "constant",
    "mean_reversion",
    "affine",
    "exp_affine",
    "exp_time",
    "quadratic",
    "tabulated",
    "derived",
    "field_to_dict",
    "field_from_dict",
]


@dataclass(frozen=True)
class CoefficientField:
    """A (t, x) -> value map with declared output shape.

    kind is one of "builtin", "tabulated", "derived".  shape is () for a
    scalar field, (n,) for a vector field, (n, d) for a matrix field.
    """

    kind: str
    name: str
    shape: tuple
    params: dict = field(default_factory=dict)
    fn: Callable = None

    def __call__(self, t: float, x: np.ndarray) -> np.ndarray:
        """Evaluate at scalar time t and points x of shape (batch, n)."""
        return self.fn(t, np.asarray(x, dtype=float))

    def at(self, t: float, x_point) -> np.ndarray | float:
        """Evaluate at a single factor point; returns value of self.shape."""
        x = np.atleast_1d(np.asarray(x_point, dtype=float))
        out = self.fn(t, x[None, :])[0]
        return float(out) if self.shape == () else out

    def plus_constant(self, c: float) -> "CoefficientField":
        """Field shifted by a constant (same shape)."""
        if self.kind == "builtin" and self.name == "constant":
            return constant(np.asarray(self.params["value"], dtype=float) + c,
                            self.shape)
        base = self.fn
        return CoefficientField(
            kind="derived", name=f"{self.name}+const", shape=self.shape,
            fn=lambda t, x: base(t, x) + c)


def _bcast(value: np.ndarray, batch: int, shape: tuple) -> np.ndarray:
    return np.broadcast_to(value, (batch,) + shape)


def constant(value, shape: tuple | None = None) -> CoefficientField:
    """Constant field.  shape defaults to the shape of value."""
    arr = np.asarray(value, dtype=float)
    if shape is None:
        shape = arr.shape
    arr = np.broadcast_to(arr, shape).copy()
    if not np.all(np.isfinite(arr)):
        raise ValueError("constant field value must be finite")
    return CoefficientField(
        kind="builtin", name="constant", shape=shape,
        params={"value": arr.tolist() if shape else float(arr)},
        fn=lambda t, x, a=arr, s=shape: _bcast(a, x.shape[0], s))


def mean_reversion(kappa, mu_bar, n: int = 1) -> CoefficientField:
    """Vector drift kappa * (mu_bar - x), elementwise in each coordinate."""
    k = np.broadcast_to(np.asarray(kappa, dtype=float), (n,)).copy()
    m = np.broadcast_to(np.asarray(mu_bar, dtype=float), (n,)).copy()
    if not (np.all(np.isfinite(k)) and np.all(np.isfinite(m))):
        raise ValueError("mean_reversion parameters must be finite")
    return CoefficientField(
        kind="builtin", name="mean_reversion", shape=(n,),
        params={"kappa": k.tolist(), "mu_bar": m.tolist()},
        fn=lambda t, x: k * (m - x))


def affine(intercept: float, slope: float) -> CoefficientField:
    """Scalar field intercept + slope * x on a one-factor model."""
    c0, c1 = float(intercept), float(slope)
    return CoefficientField(
        kind="builtin", name="affine", shape=(),
        params={"intercept": c0, "slope": c1},
        fn=lambda t, x: c0 + c1 * x[:, 0])


def exp_affine(intercept: float, slope: float) -> CoefficientField:
    """Scalar field exp(intercept + slope * x) on a one-factor model."""
    a, b = float(intercept), float(slope)
    return CoefficientField(
        kind="builtin", name="exp_affine", shape=(),
        params={"intercept": a, "slope": b},
        fn=lambda t, x: np.exp(a + b * x[:, 0]))


def exp_time(rate: float) -> CoefficientField:
    """Scalar field exp(rate * t), constant in space."""
    r0 = float(rate)
    return CoefficientField(
        kind="builtin", name="exp_time", shape=(),
        params={"rate": r0},
        fn=lambda t, x: np.full(x.shape[0], np.exp(r0 * t)))


def quadratic(coeff: float, center: float, offset: float) -> CoefficientField:
    """Scalar field coeff * (x - center)^2 + offset on a one-factor model."""
    a, c, b = float(coeff), float(center), float(offset)
    return CoefficientField(
        kind="builtin", name="quadratic", shape=(),
        params={"coeff": a, "center": c, "offset": b},
        fn=lambda t, x: a * (x[:, 0] - c) ** 2 + b)


def tabulated(t_nodes, x_nodes, values) -> CoefficientField:
    """Scalar field bilinearly interpolated from a (time, space) table.

    values has shape (len(t_nodes), len(x_nodes)); queries outside the
    table range are clamped to the edges.
    """
    ts = np.asarray(t_nodes, dtype=float)
    xs = np.asarray(x_nodes, dtype=float)
    vals = np.asarray(values, dtype=float)
    if vals.shape != (ts.size, xs.size):
        raise ValueError("tabulated values must have shape (n_t, n_x)")
    if not np.all(np.isfinite(vals)):
        raise ValueError("tabulated values must be finite")

    def fn(t, x):
        row = _blend_rows(ts, vals, t)
        return np.interp(x[:, 0], xs, row)

    return CoefficientField(
        kind="tabulated", name="tabulated", shape=(),
        params={"t_nodes": ts.tolist(), "x_nodes": xs.tolist(),
                "values": vals.tolist()},
        fn=fn)


def _blend_rows(ts: np.ndarray, vals: np.ndarray, t: float) -> np.ndarray:
    """Linear-in-time blend of table rows, clamped at the ends."""
    if t <= ts[0]:
        return vals[0]
    if t >= ts[-1]:
        return vals[-1]
    j = int(np.searchsorted(ts, t, side="right") - 1)
    w = (t - ts[j]) / (ts[j + 1] - ts[j])
    return (1.0 - w) * vals[j] + w * vals[j + 1]


def derived(name: str, shape: tuple, fn: Callable) -> CoefficientField:
    """Wrap an arbitrary vectorized callable (t, x) -> (batch,)+shape.

    Derived fields evaluate like any other but cannot be serialized; convert
    to a tabulated field first if the model must round-trip through JSON.
    """
    return CoefficientField(kind="derived", name=name, shape=shape, fn=fn)


def field_to_dict(f: CoefficientField) -> dict:
    """JSON-serializable description of a builtin or tabulated field."""
    if f.kind == "derived":
        raise ValueError(
            f"field '{f.name}' is derived and cannot be serialized; "
            "tabulate it on a grid first")
    return {"kind": f.kind, "name": f.name, "shape": list(f.shape),
            "params": f.params}


_BUILTINS = {
    "constant": lambda p, shape: constant(p["value"], tuple(shape)),
    "mean_reversion": lambda p, shape: mean_reversion(
        p["kappa"], p["mu_bar"], n=shape[0]),
    "affine": lambda p, shape: affine(p["intercept"], p["slope"]),
    "exp_affine": lambda p, shape: exp_affine(p["intercept"], p["slope"]),
    "exp_time": lambda p, shape: exp_time(p["rate"]),
    "quadratic": lambda p, shape: quadratic(
        p["coeff"], p["center"], p["offset"]),
}


def field_from_dict(d: dict) -> CoefficientField:
    """Inverse of field_to_dict."""
    kind, name = d["kind"], d["name"]
    if kind == "tabulated":
        p = d["params"]
        return tabulated(p["t_nodes"], p["x_nodes"], p["values"])
    if kind != "builtin" or name not in _BUILTINS:
        raise ValueError(f"unknown field spec: kind={kind!r} name={name!r}")
    return _BUILTINS[name](d["params"], d.get("shape", []))
