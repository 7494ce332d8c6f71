"""Model construction and GOP consistency checks."""

import numpy as np
import pytest

from rolloverlab import fields
from rolloverlab.model import (Box, FactorModelSpec, build_consistent_vasicek,
                               gop_consistency_residuals, model_from_json,
                               model_to_json)


def canonical(**kw):
    base = dict(kappa=1.0, mu_bar=0.05, sigma_x=0.1, lam=2.0)
    base.update(kw)
    return build_consistent_vasicek(**base)


def interior_points(model, n_pts, seed=0):
    rng = np.random.default_rng(seed)
    lo, hi = model.domain.lo[0], model.domain.hi[0]
    margin = 0.02 * (hi - lo)
    xs = rng.uniform(lo + margin, hi - margin, n_pts)
    ts = rng.uniform(0.0, model.horizon, n_pts)
    return [(float(t), (float(x),)) for t, x in zip(ts, xs)]


class TestBuildConsistentVasicek:
    def test_degenerate_slope(self):
        m = canonical(lam=0.0)
        pts = np.array([[0.02], [0.05], [0.08]])
        assert np.all(m.theta(0.3, pts) == 0.0)
        assert np.all(m.r(0.3, pts) == 0.0)
        assert np.all(m.v_star(0.3, pts) == 1.0)

    def test_hand_derived_rate(self):
        # v* = exp(2(x - 0.05)) forces theta = 0.2 and
        # r(x) = 2*1*(0.05 - x) - 0.5*4*0.01 = 0.08 - 2x
        m = canonical()
        assert m.theta.at(0.0, (0.05,)) == pytest.approx([0.2], abs=1e-15)
        for x in (0.0, 0.03, 0.05, 0.1):
            assert m.r.at(0.7, (x,)) == pytest.approx(0.08 - 2 * x, abs=1e-15)

    def test_residuals_near_machine_floor(self):
        # second-derivative differencing at step 1e-5 has a roundoff floor
        # around 1e-8; the construction is exact, so nothing above that
        m = canonical()
        res = gop_consistency_residuals(m, interior_points(m, 100))
        assert res.max_abs_relative <= 1e-6

    def test_rejects_bad_parameters(self):
        with pytest.raises(ValueError):
            canonical(sigma_x=0.0)
        with pytest.raises(ValueError):
            canonical(sigma_x=-0.1)
        with pytest.raises(ValueError):
            canonical(mu_bar=float("nan"))
        with pytest.raises(ValueError):
            canonical(kappa=-1.0)

    def test_deterministic_construction(self):
        a, b = canonical(), canonical()
        pts = np.linspace(-0.3, 0.4, 7)[:, None]
        for name in ("f", "r", "theta", "phi", "v_star"):
            va = getattr(a, name)(0.25, pts)
            vb = getattr(b, name)(0.25, pts)
            assert np.array_equal(va, vb)

    def test_domain_is_six_stationary_stds(self):
        m = canonical()
        half = 6 * 0.1 / np.sqrt(2.0)
        assert m.domain.lo[0] == pytest.approx(0.05 - half)
        assert m.domain.hi[0] == pytest.approx(0.05 + half)


class TestGopResiduals:
    def test_shifted_rate_breaks_drift_condition(self):
        m = canonical()
        shifted = FactorModelSpec(
            n=1, d=1, f=m.f, g=m.g, r=m.r.plus_constant(0.01),
            theta=m.theta, phi=m.phi, v_star=m.v_star, x0=m.x0,
            domain=m.domain, horizon=m.horizon)
        res = gop_consistency_residuals(shifted, interior_points(m, 25))
        # residual picks up exactly -0.01 * v*, so the relative residual
        # is -0.01 at every point
        assert np.allclose(res.drift_relative, -0.01, atol=1e-6)
        assert np.max(np.abs(res.grad_relative)) <= 1e-8

    def test_constant_two_factor_model(self):
        m = FactorModelSpec(
            n=2, d=2,
            f=fields.constant(np.zeros(2)),
            g=fields.constant(np.eye(2)),
            r=fields.constant(0.0),
            theta=fields.constant(np.zeros(2)),
            phi=fields.constant(0.0),
            v_star=fields.constant(1.0),
            x0=(0.0, 0.0),
            domain=Box(lo=(-2.0, -2.0), hi=(2.0, 2.0)),
            horizon=5.0)
        res = gop_consistency_residuals(m, [(0.5, (0.1, -0.3)),
                                            (1.5, (0.0, 0.0))])
        assert res.max_abs_relative == 0.0

    def test_relative_residual_invariant_under_vstar_rescaling(self):
        # shifting x0 rescales v* by the constant exp(lam * dx0) while
        # leaving f, g, r, theta unchanged; a deliberate theta/r offset
        # plants a residual signal (-0.01 relative) well above the finite
        # difference noise floor, and the relative residual must not see
        # the rescaling
        def broken(x0):
            m = canonical(x0=x0)
            return FactorModelSpec(
                n=1, d=1, f=m.f, g=m.g, r=m.r.plus_constant(0.01),
                theta=fields.constant([0.2 + 0.01]), phi=m.phi,
                v_star=m.v_star, x0=m.x0, domain=m.domain,
                horizon=m.horizon)

        pts = [(0.5, (0.03,)), (1.0, (0.08,)), (2.0, (0.05,))]
        r1 = gop_consistency_residuals(broken(0.05), pts)
        r2 = gop_consistency_residuals(broken(0.06), pts)
        assert np.allclose(r1.grad_relative, -0.01, atol=1e-7)
        assert np.allclose(r1.grad_relative, r2.grad_relative, atol=1e-7)
        assert np.allclose(r1.drift_relative, r2.drift_relative, atol=1e-6)

    def test_requires_v_star(self):
        m = canonical()
        bare = FactorModelSpec(
            n=1, d=1, f=m.f, g=m.g, r=m.r, theta=m.theta, phi=m.phi,
            x0=m.x0, domain=m.domain, horizon=m.horizon)
        with pytest.raises(ValueError, match="v_star"):
            gop_consistency_residuals(bare, [(0.5, (0.05,))])

    def test_rejects_points_near_boundary(self):
        m = canonical()
        edge = m.domain.hi[0] - 1e-7
        with pytest.raises(ValueError, match="boundary"):
            gop_consistency_residuals(m, [(0.5, (edge,))])


class TestSpecValidation:
    def test_x0_outside_domain(self):
        m = canonical()
        with pytest.raises(ValueError, match="x0"):
            FactorModelSpec(n=1, d=1, f=m.f, g=m.g, r=m.r, theta=m.theta,
                            phi=m.phi, v_star=m.v_star, x0=(9.0,),
                            domain=m.domain, horizon=m.horizon)

    def test_v_star_must_be_one_at_start(self):
        m = canonical()
        with pytest.raises(ValueError, match="v_star"):
            FactorModelSpec(n=1, d=1, f=m.f, g=m.g, r=m.r, theta=m.theta,
                            phi=m.phi, v_star=fields.exp_affine(0.5, 2.0),
                            x0=m.x0, domain=m.domain, horizon=m.horizon)

    def test_wrong_field_arity(self):
        m = canonical()
        with pytest.raises(ValueError, match="shape"):
            FactorModelSpec(n=1, d=1, f=fields.constant(0.0), g=m.g, r=m.r,
                            theta=m.theta, phi=m.phi, x0=m.x0,
                            domain=m.domain, horizon=m.horizon)

    def test_phi_nonnegative_probe(self):
        assert canonical().phi_nonnegative()
        m = canonical(phi=fields.constant(-0.01))
        assert not m.phi_nonnegative()


class TestSerialization:
    def test_round_trip(self):
        m = canonical(phi=fields.quadratic(0.01, 0.05, 0.001))
        m2 = model_from_json(model_to_json(m))
        pts = np.linspace(m.domain.lo[0] + 0.01, m.domain.hi[0] - 0.01,
                          9)[:, None]
        for t in (0.0, 0.8, 3.0):
            for name in ("f", "g", "r", "theta", "phi", "v_star"):
                assert np.array_equal(getattr(m, name)(t, pts),
                                      getattr(m2, name)(t, pts)), name
        assert m2.x0 == m.x0
        assert m2.horizon == m.horizon

    def test_derived_field_refuses_serialization(self):
        m = canonical()
        shifted = m.with_phi(fields.derived("custom", (), lambda t, x:
                                            np.zeros(x.shape[0])))
        with pytest.raises(ValueError, match="serialize"):
            model_to_json(shifted)

    def test_tabulated_round_trip(self):
        ts = np.linspace(0, 1, 4)
        xs = np.linspace(-1, 1, 5)
        vals = np.outer(1 + ts, xs ** 2)
        f = fields.tabulated(ts, xs, vals)
        g = fields.field_from_dict(
            __import__("json").loads(
                __import__("json").dumps(fields.field_to_dict(f))))
        q = np.linspace(-0.9, 0.9, 7)[:, None]
        assert np.allclose(f(0.37, q), g(0.37, q))
