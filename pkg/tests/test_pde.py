"""Theta-scheme solver checks against closed forms and the MC oracle."""

import numpy as np
import pytest

from rolloverlab import fields
from rolloverlab.model import build_consistent_vasicek
from rolloverlab.pde import (Grid1D, GridFunction, ParabolicProblem,
                             forward_spread_problem, grid_gradient,
                             solve_parabolic, spot_spread_problem,
                             zcb_problem)
from rolloverlab.sim import SimConfig, mc_spot_spread


def canonical(phi=None, lam=2.0):
    return build_consistent_vasicek(kappa=1.0, mu_bar=0.05, sigma_x=0.1,
                                    lam=lam, phi=phi)


def model_grid(model, T, n=201, t0=0.0):
    return Grid1D(model.domain.lo[0], model.domain.hi[0], n, t0, T, n)


def generic(b=0.0, a=0.5, c=0.0, h=lambda xs: np.ones_like(xs)):
    return ParabolicProblem(
        drift=lambda t, xs: np.full_like(xs, b),
        diffusion=lambda t, xs: np.full_like(xs, a),
        potential=lambda t, xs: np.full_like(xs, c),
        terminal=h)


def gauss_pdf(x, var):
    return np.exp(-x ** 2 / (2 * var)) / np.sqrt(2 * np.pi * var)


class TestSolveParabolic:
    def test_constant_preservation(self):
        grid = Grid1D(-1.0, 2.0, 401, 0.0, 1.0, 401)
        sol = solve_parabolic(generic(b=0.3, a=0.2), grid)
        assert np.max(np.abs(sol.values - 1.0)) <= 1e-12

    def test_constant_potential_exponential(self):
        grid = Grid1D(-1.0, 2.0, 201, 0.0, 1.0, 201)
        sol = solve_parabolic(generic(b=-0.5, a=0.1, c=0.02), grid)
        expected = np.exp(0.02 * (1.0 - grid.ts))[:, None]
        assert np.max(np.abs(sol.values - expected)) <= 1e-10

    def test_heat_kernel(self):
        # b = 0, a = 1/2, h = N(0,1) density: u(t, x) is the N(0, 1 + T - t)
        # density by the heat semigroup
        grid = Grid1D(-8.0, 8.0, 400, 0.0, 1.0, 400)
        sol = solve_parabolic(generic(h=lambda xs: gauss_pdf(xs, 1.0)), grid)
        err = 0.0
        for i, t in enumerate(grid.ts):
            exact = gauss_pdf(grid.xs, 1.0 + (1.0 - t))
            err = max(err, np.max(np.abs(sol.values[i] - exact)))
        assert err <= 1e-4

    def test_second_order_convergence(self):
        errs = []
        for n in (100, 200):
            grid = Grid1D(-8.0, 8.0, n, 0.0, 1.0, n)
            sol = solve_parabolic(generic(h=lambda xs: gauss_pdf(xs, 1.0)),
                                  grid)
            exact = gauss_pdf(grid.xs, 2.0)
            errs.append(np.max(np.abs(sol.values[0] - exact)))
        ratio = errs[0] / errs[1]
        assert 3.5 <= ratio <= 4.5

    def test_discrete_maximum_principle_implicit(self):
        grid = Grid1D(-1.0, 1.0, 101, 0.0, 1.0, 101)
        h = lambda xs: np.where(np.abs(xs) < 0.2, 2.0, 0.5)
        sol = solve_parabolic(generic(b=0.1, a=0.05, h=h), grid, theta=1.0)
        assert np.all(sol.values >= 0.5 - 1e-12)
        assert np.all(sol.values <= 2.0 + 1e-12)

    def test_spread_positivity_implicit(self):
        m = canonical(phi=fields.quadratic(0.01, 0.05, 0.001))
        sol = solve_parabolic(spot_spread_problem(m, 1.0), model_grid(m, 1.0),
                              theta=1.0)
        assert sol.values.min() >= 1.0 - 1e-8

    def test_cfl_diagnostic_recorded(self):
        grid = Grid1D(-1.0, 1.0, 201, 0.0, 1.0, 11)
        sol = solve_parabolic(generic(a=0.5), grid, theta=0.0)
        assert sol.metadata["cfl_ratio"] > 1.0   # deliberately unstable setup

    def test_non_finite_coefficients_rejected(self):
        grid = Grid1D(-1.0, 1.0, 11, 0.0, 1.0, 11)
        bad = ParabolicProblem(
            drift=lambda t, xs: np.full_like(xs, np.nan),
            diffusion=lambda t, xs: np.full_like(xs, 0.1),
            potential=lambda t, xs: np.zeros_like(xs),
            terminal=lambda xs: np.ones_like(xs))
        with pytest.raises(RuntimeError, match="finite"):
            solve_parabolic(bad, grid)

    def test_negative_diffusion_rejected(self):
        grid = Grid1D(-1.0, 1.0, 11, 0.0, 1.0, 11)
        with pytest.raises(RuntimeError, match="nonnegative"):
            solve_parabolic(generic(a=-0.1), grid)


class TestProblemBuilders:
    def test_zcb_unit_v_star(self):
        m = canonical(lam=0.0)   # v* = 1
        sol = solve_parabolic(zcb_problem(m, 1.0), model_grid(m, 1.0))
        assert np.max(np.abs(sol.values - 1.0)) <= 1e-12

    def test_zcb_terminal_is_reciprocal_v_star(self):
        m = canonical()
        prob = zcb_problem(m, 1.0)
        xs = np.linspace(-0.2, 0.3, 11)
        assert np.allclose(prob.terminal(xs), np.exp(-2.0 * (xs - 0.05)))

    def test_zcb_deterministic_discounting(self):
        # theta = 0, r = r0: P(t, T) = v* p_hat = exp(-r0 (T - t))
        from rolloverlab.model import Box, FactorModelSpec
        r0 = 0.03
        m = FactorModelSpec(
            n=1, d=1, f=fields.constant(np.zeros(1)),
            g=fields.constant([[0.1]]), r=fields.constant(r0),
            theta=fields.constant([0.0]), phi=fields.constant(0.0),
            v_star=fields.exp_time(r0), x0=(0.0,),
            domain=Box((-3.0,), (3.0,)), horizon=10.0)
        sol = solve_parabolic(zcb_problem(m, 2.0), model_grid(m, 2.0))
        for i, t in enumerate(sol.grid.ts):
            p = m.v_star.at(t, (0.0,)) * sol.values[i]
            assert np.allclose(p, np.exp(-r0 * (2.0 - t)), atol=1e-9)

    def test_spot_spread_zero_phi(self):
        m = canonical()
        sol = solve_parabolic(spot_spread_problem(m, 1.0), model_grid(m, 1.0))
        assert np.max(np.abs(sol.values - 1.0)) <= 1e-12

    def test_spot_spread_constant_phi(self):
        m = canonical(phi=fields.constant(0.02))
        sol = solve_parabolic(spot_spread_problem(m, 1.0), model_grid(m, 1.0))
        expected = np.exp(0.02 * (1.0 - sol.grid.ts))[:, None]
        assert np.max(np.abs(sol.values - expected)) <= 1e-10

    def test_spot_spread_matches_monte_carlo(self):
        m = canonical(phi=fields.quadratic(0.01, 0.05, 0.001))
        sol = solve_parabolic(spot_spread_problem(m, 1.0),
                              model_grid(m, 1.0, n=401))
        cfg = SimConfig(0.0, 1.0, 2e-3, 20_000, seed=31)
        for x in (0.02, 0.05, 0.09):
            est = mc_spot_spread(m, 1.0, 0.0, (x,), cfg)
            assert abs(sol.value_at(0.0, x) - est.mean) <= 3 * est.stderr

    def test_pde_rejects_multifactor(self):
        from rolloverlab.model import Box, FactorModelSpec
        m = FactorModelSpec(
            n=2, d=2, f=fields.constant(np.zeros(2)),
            g=fields.constant(np.eye(2)), r=fields.constant(0.0),
            theta=fields.constant(np.zeros(2)), phi=fields.constant(0.0),
            v_star=fields.constant(1.0), x0=(0.0, 0.0),
            domain=Box((-1.0, -1.0), (1.0, 1.0)), horizon=5.0)
        with pytest.raises(ValueError, match="one-factor"):
            zcb_problem(m, 1.0)


class TestForwardSpread:
    def build(self, phi, T=1.0, delta=0.5, n=201):
        m = canonical(phi=phi)
        short = model_grid(m, T, n=n)
        long_grid = Grid1D(short.x_min, short.x_max, n, 0.0, T + delta,
                           int(round((n - 1) * (T + delta) / T)) + 1)
        p_hat = solve_parabolic(zcb_problem(m, T), short)
        s_long = solve_parabolic(spot_spread_problem(m, T + delta), long_grid)
        fwd = solve_parabolic(
            forward_spread_problem(m, T, delta, p_hat, s_long), short)
        return m, p_hat, s_long, fwd

    def test_unit_when_phi_zero(self):
        _, _, _, fwd = self.build(None)
        assert np.max(np.abs(fwd.values - 1.0)) <= 1e-12

    def test_constant_phi_propagates_constant(self):
        _, _, _, fwd = self.build(fields.constant(0.02))
        assert np.max(np.abs(fwd.values - np.exp(0.01))) <= 1e-9

    def test_terminal_condition_matches_long_spread(self):
        _, _, s_long, fwd = self.build(fields.quadratic(0.01, 0.05, 0.001))
        gap = np.max(np.abs(fwd.values[-1] - s_long.row_at(1.0)))
        assert gap <= 1e-10

    def test_martingale_oracle(self):
        # S_t(T, T+d) p^T(t, x) = E[s^{T+d}(T, X_T) / v*(T, X_T) | X_t = x]
        # with the expectation estimated by simulating the factor to T
        from rolloverlab.sim import simulate
        m, p_hat, s_long, fwd = self.build(
            fields.quadratic(0.01, 0.05, 0.001), n=301)
        x = 0.05
        b = simulate(m, SimConfig(0.0, 1.0, 2e-3, 20_000, seed=32),
                     x_start=(x,))
        xT = b.x[:, -1, 0]
        samples = s_long.value_at(1.0, xT) / m.v_star(1.0, xT[:, None])
        se = samples.std(ddof=1) / np.sqrt(samples.size)
        lhs = fwd.value_at(0.0, x) * p_hat.value_at(0.0, x)
        assert abs(lhs - samples.mean()) <= 3 * se

    def test_rejects_nonpositive_p_hat(self):
        m, p_hat, s_long, _ = self.build(None)
        broken = GridFunction(grid=p_hat.grid,
                              values=p_hat.values - p_hat.values.min() - 1.0)
        with pytest.raises(ValueError, match="zero or is negative"):
            forward_spread_problem(m, 1.0, 0.5, broken, s_long)

    def test_rejects_grid_mismatch(self):
        m, p_hat, s_long, _ = self.build(None)
        other = Grid1D(p_hat.grid.x_min, p_hat.grid.x_max, 77, 0.0, 1.5, 77)
        s_bad = GridFunction(grid=other, values=np.ones((77, 77)))
        with pytest.raises(ValueError, match="spatial grid"):
            forward_spread_problem(m, 1.0, 0.5, p_hat, s_bad)


class TestGridGradient:
    def grid_fn(self, f):
        grid = Grid1D(-1.0, 1.0, 201, 0.0, 1.0, 3)
        vals = np.tile(f(grid.xs), (3, 1))
        return GridFunction(grid=grid, values=vals)

    def test_linear_exact(self):
        g = grid_gradient(self.grid_fn(lambda xs: xs))
        assert np.allclose(g.values, 1.0, atol=1e-13)

    def test_quadratic_exact_interior(self):
        g = grid_gradient(self.grid_fn(lambda xs: xs ** 2))
        xs = g.grid.xs
        assert np.allclose(g.values[:, 1:-1], 2 * xs[1:-1], atol=1e-12)

    def test_exponential_second_order(self):
        grid = Grid1D(0.0, 1.0, 101, 0.0, 1.0, 2)    # dx = 0.01
        vals = np.tile(np.exp(2 * grid.xs), (2, 1))
        g = grid_gradient(GridFunction(grid=grid, values=vals))
        rel = np.abs(g.values[0, 1:-1] / (2 * np.exp(2 * grid.xs[1:-1])) - 1)
        assert np.max(rel) <= 1e-4


class TestGridFunction:
    def test_csv_round_end_to_end(self, tmp_path):
        grid = Grid1D(-1.0, 1.0, 5, 0.0, 1.0, 3)
        gf = GridFunction(grid=grid, values=np.arange(15.0).reshape(3, 5),
                          metadata={"problem": "demo"})
        path = tmp_path / "grid.csv"
        gf.to_csv(str(path))
        text = path.read_text().splitlines()
        assert text[0].startswith("# ")
        assert "problem=demo" in text[0]
        assert len(text) == 2 + 3
        assert (tmp_path / "grid.csv.json").exists()

    def test_value_at_interpolates(self):
        grid = Grid1D(0.0, 1.0, 11, 0.0, 1.0, 11)
        vals = grid.ts[:, None] + grid.xs[None, :]
        gf = GridFunction(grid=grid, values=vals)
        assert gf.value_at(0.35, 0.75) == pytest.approx(1.1, abs=1e-12)
        with pytest.raises(ValueError):
            gf.value_at(2.0, 0.5)
        with pytest.raises(ValueError):
            gf.value_at(0.5, 7.0)

    def test_rejects_non_finite(self):
        grid = Grid1D(0.0, 1.0, 3, 0.0, 1.0, 2)
        with pytest.raises(ValueError, match="finite"):
            GridFunction(grid=grid, values=np.full((2, 3), np.nan))
