"""Path engine and Feynman-Kac estimator checks."""

import numpy as np
import pytest

from rolloverlab import fields
from rolloverlab.model import Box, FactorModelSpec, build_consistent_vasicek
from rolloverlab.sim import (SimConfig, empirical_drift_test,
                             mc_benchmarked_zcb, mc_forward_spread,
                             mc_spot_spread, real_world_price, simulate)


def canonical(phi=None, lam=2.0):
    return build_consistent_vasicek(kappa=1.0, mu_bar=0.05, sigma_x=0.1,
                                    lam=lam, phi=phi)


def frozen_model(r=0.0, theta=0.0, sigma=0.1, phi=0.0, v_star=None):
    """One-factor model with constant fields (no GOP consistency implied)."""
    return FactorModelSpec(
        n=1, d=1,
        f=fields.constant(np.zeros(1)),
        g=fields.constant([[sigma]]),
        r=fields.constant(r),
        theta=fields.constant([theta]),
        phi=fields.constant(phi),
        v_star=v_star,
        x0=(0.0,), domain=Box((-3.0,), (3.0,)), horizon=10.0)


class TestSimulate:
    def test_zero_dynamics_keeps_factor_constant(self):
        m = frozen_model(sigma=0.0)
        cfg = SimConfig(0.0, 1.0, 0.05, 16, seed=1)
        b = simulate(m, cfg)
        assert np.all(b.x == 0.0)

    def test_zero_theta_gop_equals_savings(self):
        m = canonical(lam=0.0)
        b = simulate(m, SimConfig(0.0, 1.0, 0.01, 32, seed=2))
        assert np.array_equal(b.gop, b.savings)
        assert np.array_equal(b.deflator, np.ones_like(b.deflator))

    def test_constant_rate_left_rule_exact(self):
        m = frozen_model(r=0.02)
        b = simulate(m, SimConfig(0.0, 1.0, 1e-3, 8, seed=3))
        assert np.allclose(b.savings[:, -1], np.exp(0.02), atol=1e-12)

    def test_positivity_and_rollover_ordering(self):
        m = canonical(phi=fields.quadratic(0.01, 0.05, 0.001))
        b = simulate(m, SimConfig(0.0, 2.0, 0.01, 128, seed=4))
        for arr in (b.gop, b.savings, b.rollover, b.deflator):
            assert np.all(arr > 0)
        assert np.all(b.rollover >= b.savings)

    def test_gop_start_matches_v_star(self):
        m = canonical()
        b = simulate(m, SimConfig(0.5, 1.0, 0.01, 8, seed=5),
                     x_start=(0.07,))
        assert b.gop[:, 0] == pytest.approx(m.v_star.at(0.5, (0.07,)))

    def test_bit_identical_across_workers(self):
        m = canonical(phi=fields.constant(0.01))
        cfg = SimConfig(0.0, 1.0, 0.01, 10_000, seed=6)
        b1 = simulate(m, cfg, workers=1)
        b4 = simulate(m, cfg, workers=4)
        for name in ("x", "gop", "savings", "rollover", "deflator"):
            assert np.array_equal(getattr(b1, name), getattr(b4, name)), name

    def test_antithetic_pairs(self):
        m = frozen_model(sigma=0.2)
        cfg = SimConfig(0.0, 0.5, 0.05, 64, seed=7, antithetic=True)
        b = simulate(m, cfg)
        # with f = 0 the Euler update is x + sigma dW: paired increments negate
        inc = np.diff(b.x[:, :, 0], axis=1)
        assert np.allclose(inc[0::2], -inc[1::2], atol=1e-15)
        # with g = 0 the two paths of a pair coincide
        m0 = frozen_model(sigma=0.0, r=0.03)
        b0 = simulate(m0, SimConfig(0.0, 0.5, 0.05, 8, seed=7,
                                    antithetic=True))
        assert np.array_equal(b0.x[0::2], b0.x[1::2])
        with pytest.raises(ValueError, match="even"):
            SimConfig(0.0, 1.0, 0.1, 31, seed=1, antithetic=True)

    def test_reflection_flags(self):
        m = FactorModelSpec(
            n=1, d=1, f=fields.constant(np.zeros(1)),
            g=fields.constant([[1.0]]), r=fields.constant(0.0),
            theta=fields.constant([0.0]), phi=fields.constant(0.0),
            x0=(0.0,), domain=Box((-0.05,), (0.05,)), horizon=5.0)
        b = simulate(m, SimConfig(0.0, 0.5, 0.01, 64, seed=8))
        assert b.reflected_fraction > 0.5
        assert np.all(b.x >= -0.05) and np.all(b.x <= 0.05)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            SimConfig(0.0, 1.0, 1.5, 10)      # dt >= window
        with pytest.raises(ValueError):
            SimConfig(1.0, 1.0, 0.1, 10)      # empty window
        with pytest.raises(ValueError):
            SimConfig(0.0, 1.0, -0.1, 10)
        with pytest.raises(ValueError):
            SimConfig(0.0, 1.0, 0.1, 0)
        with pytest.raises(ValueError):
            simulate(canonical(), SimConfig(0.0, 1.0, 0.01, 4, seed=1),
                     v_start=-1.0)

    def test_csv_and_npz_export(self, tmp_path):
        m = canonical()
        b = simulate(m, SimConfig(0.0, 0.1, 0.05, 4, seed=9))
        path = tmp_path / "paths.csv"
        b.to_csv(str(path))
        lines = path.read_text().splitlines()
        assert lines[0] == "path,t,x1,gop,savings,rollover,deflator"
        assert len(lines) == 1 + 4 * 3
        b.to_npz(str(tmp_path / "paths.npz"))
        loaded = np.load(tmp_path / "paths.npz")
        assert np.array_equal(loaded["gop"], b.gop)


class TestEstimators:
    def test_spot_spread_no_rollover_risk(self):
        m = canonical()
        est = mc_spot_spread(m, 1.0, 0.0, (0.05,),
                             SimConfig(0.0, 1.0, 5e-3, 20_000, seed=10))
        assert abs(est.mean - 1.0) <= 3 * est.stderr

    def test_spot_spread_constant_phi(self):
        m = canonical(phi=fields.constant(0.02))
        est = mc_spot_spread(m, 1.0, 0.0, (0.05,),
                             SimConfig(0.0, 1.0, 5e-3, 20_000, seed=11))
        assert abs(est.mean - np.exp(0.02)) <= 3 * est.stderr

    def test_benchmarked_zcb_unit_v_star(self):
        m = frozen_model(sigma=0.1, v_star=fields.constant(1.0))
        est = mc_benchmarked_zcb(m, 1.0, 0.0, (0.0,),
                                 SimConfig(0.0, 1.0, 0.01, 256, seed=12))
        assert est.mean == 1.0
        assert est.stderr == 0.0

    def test_benchmarked_zcb_deterministic_gop(self):
        # theta = 0 and r = 0.02 make v*(t, x) = exp(0.02 t) consistent
        m = frozen_model(r=0.02, sigma=0.1, v_star=fields.exp_time(0.02))
        est = mc_benchmarked_zcb(m, 2.0, 0.0, (0.0,),
                                 SimConfig(0.0, 2.0, 0.01, 256, seed=13))
        assert est.mean == pytest.approx(np.exp(-0.04), abs=1e-14)
        assert est.stderr <= 1e-15

    def test_forward_spread_constant_phi(self):
        m = canonical(phi=fields.constant(0.02))
        est = mc_forward_spread(m, 1.0, 0.5, 0.0, (0.05,),
                                SimConfig(0.0, 1.0, 5e-3, 20_000, seed=14))
        assert abs(est.mean - np.exp(0.01)) <= 3 * est.stderr

    def test_stderr_scales_with_paths(self):
        m = canonical(phi=fields.constant(0.02))
        e1 = mc_spot_spread(m, 1.0, 0.0, (0.05,),
                            SimConfig(0.0, 1.0, 0.01, 10_000, seed=15))
        e2 = mc_spot_spread(m, 1.0, 0.0, (0.05,),
                            SimConfig(0.0, 1.0, 0.01, 20_000, seed=15))
        ratio = e2.stderr / e1.stderr
        assert 0.8 / np.sqrt(2) <= ratio <= 1.2 / np.sqrt(2)

    def test_requires_v_star(self):
        m = frozen_model()
        cfg = SimConfig(0.0, 1.0, 0.01, 16, seed=16)
        with pytest.raises(ValueError, match="v_star"):
            mc_spot_spread(m, 1.0, 0.0, (0.0,), cfg)


class TestRealWorldPrice:
    def test_gop_payoff_prices_to_v_star(self):
        m = canonical()
        cfg = SimConfig(0.0, 1.0, 0.01, 512, seed=17)
        est = real_world_price(m, lambda x, v, s0, s0t: v, 0.0, (0.05,),
                               1.0, cfg)
        assert est.mean == pytest.approx(1.0, abs=1e-13)
        assert est.stderr <= 1e-13

    def test_unit_payoff_prices_the_zcb(self):
        # H = 1 gives P(t,T) = v* p_hat; the simulated GOP coincides with
        # v*(t, X_t) pathwise for the consistent construction
        m = canonical()
        cfg = SimConfig(0.0, 1.0, 0.01, 4096, seed=18)
        est = real_world_price(m, lambda x, v, s0, s0t: np.ones_like(v),
                               0.0, (0.05,), 1.0, cfg)
        zcb = mc_benchmarked_zcb(m, 1.0, 0.0, (0.05,), cfg)
        assert est.mean == pytest.approx(zcb.mean, abs=1e-10)

    def test_rollover_payoff_recovers_spot_spread(self):
        m = canonical(phi=fields.constant(0.02))
        cfg = SimConfig(0.0, 1.0, 0.01, 4096, seed=19)
        est = real_world_price(m, lambda x, v, s0, s0t: s0t,
                               0.0, (0.05,), 1.0, cfg)
        spot = mc_spot_spread(m, 1.0, 0.0, (0.05,), cfg)
        assert est.mean == pytest.approx(spot.mean, abs=1e-10)

    def test_non_finite_payoff_rejected(self):
        m = canonical()
        cfg = SimConfig(0.0, 0.5, 0.01, 64, seed=20)
        with pytest.raises(ValueError, match="finite"):
            real_world_price(m, lambda x, v, s0, s0t: np.full_like(v, np.inf),
                             0.0, (0.05,), 0.5, cfg)


class TestDriftTest:
    def test_degenerate_deflator_is_exactly_flat(self):
        m = frozen_model(sigma=0.1)   # theta = 0, r = 0 -> Y = 1
        b = simulate(m, SimConfig(0.0, 1.0, 0.05, 64, seed=21))
        res = empirical_drift_test(b, "Y")
        assert res.increment_mean == 0.0
        assert res.z == 0.0

    def test_martingale_when_phi_zero(self):
        m = canonical()
        b = simulate(m, SimConfig(0.0, 1.0, 0.01, 30_000, seed=22))
        res = empirical_drift_test(b, "rollover_over_gop")
        assert abs(res.z) <= 3.0

    def test_submartingale_when_phi_positive(self):
        m = canonical(phi=fields.constant(0.02))
        b = simulate(m, SimConfig(0.0, 1.0, 0.01, 30_000, seed=23))
        res = empirical_drift_test(b, "rollover_over_gop")
        assert res.increment_mean > 0
        assert res.z > 3.0

    def test_needs_two_levels(self):
        m = canonical()
        b = simulate(m, SimConfig(0.0, 1.0, 0.01, 16, seed=24))
        with pytest.raises(ValueError):
            empirical_drift_test(b, b.deflator[:, :1])

    def test_estimate_json(self):
        m = canonical()
        est = mc_benchmarked_zcb(m, 0.5, 0.0, (0.05,),
                                 SimConfig(0.0, 0.5, 0.01, 128, seed=25))
        import json
        doc = json.loads(est.to_json())
        assert set(doc) == {"mean", "stderr", "n_paths", "seed"}
        assert doc["n_paths"] == 128
