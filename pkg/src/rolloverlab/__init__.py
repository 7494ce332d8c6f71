"""Multi-curve interest-rate term structures under roll-over risk.

The library computes zero-coupon bond prices, term rates and multiplicative
spot/forward spreads for Markovian factor markets priced with the
growth-optimal portfolio as numeraire, and numerically verifies the
stochastic-control representations of those quantities together with the
risk-sensitive characterization of the funding-liquidity spread.

Modules: `model` (factor-market specifications), `sim` (path engine and
Feynman-Kac estimators), `pde` (theta-scheme solvers), `curves`
(term-structure assembly), `control` (representation checks), `risk`
(risk-sensitive investor layer), `cli` (command-line interface).
"""

__version__ = "0.1.0"

from . import control, curves, fields, model, pde, risk, sim  # noqa: F401
