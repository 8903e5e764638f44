"""Simple kriging, its dual form and precision-matrix cross-validation."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial.distance import cdist

from ember.errors import ValidationError
from ember.kriging import (
    build_system,
    dual_krige_field,
    innovation_covariance,
    krige_at,
    krige_many,
    loo_cross_validate,
)
from ember.variogram import VariogramModel


def direct_loo(sys):
    """Remove each datum and re-solve the reduced system from scratch."""
    A = sys.C + sys.jitter * np.eye(sys.n)
    out = np.empty(sys.n)
    for i in range(sys.n):
        keep = np.delete(np.arange(sys.n), i)
        if keep.size == 0:
            out[i] = sys.mean
            continue
        lam = np.linalg.solve(A[np.ix_(keep, keep)], A[keep, i])
        out[i] = sys.mean + lam @ (sys.z[keep] - sys.mean)
    return out


@pytest.fixture
def random_system():
    rng = np.random.default_rng(8)
    pts = rng.uniform(0, 100, (30, 2))
    z = rng.normal(size=30)
    return build_system(pts, z, VariogramModel("exponential", 1.3, 40.0, 0.05), mean=0.2)


class TestBuildSystem:
    def test_single_point(self):
        s = build_system([[0.0, 0.0]], [2.0], VariogramModel("spherical", 1.0, 10.0, 0.25))
        np.testing.assert_array_equal(s.C, [[1.25]])

    def test_precision_is_inverse(self):
        rng = np.random.default_rng(1)
        s = build_system(rng.uniform(0, 10, (3, 2)), rng.normal(size=3),
                         VariogramModel("gaussian", 1.0, 6.0))
        np.testing.assert_allclose(s.precision @ (s.C + s.jitter * np.eye(3)), np.eye(3), atol=1e-10)

    def test_precision_diagonal(self, random_system):
        np.testing.assert_allclose(random_system.precision_diagonal(),
                                   np.diag(random_system.precision), rtol=1e-10)

    def test_coincident_points(self):
        with pytest.raises(ValidationError):
            build_system([[1.0, 1.0], [1.0, 1.0]], [0.0, 1.0], VariogramModel("spherical"))

    def test_default_mean_is_data_mean(self):
        s = build_system([[0, 0], [5, 5]], [1.0, 3.0], VariogramModel("spherical", 1, 3))
        assert s.mean == 2.0


class TestKrigeAt:
    def test_exact_at_data(self, random_system):
        s = build_system(random_system.locations, random_system.z,
                         VariogramModel("spherical", 1.0, 30.0), mean=0.0)
        for i in (0, 7, 29):
            est, var = krige_at(s, s.locations[i])
            assert est == pytest.approx(s.z[i], abs=1e-8)
            assert var == pytest.approx(0.0, abs=1e-8)

    def test_single_datum_closed_form(self):
        m = VariogramModel("exponential", 2.0, 30.0)
        s = build_system([[0.0, 0.0]], [3.0], m, mean=1.0)
        est, var = krige_at(s, [6.0, 8.0])
        rho = m.covariance(10.0) / m.covariance(0.0)
        assert est == pytest.approx(1.0 + rho * 2.0, rel=1e-9)
        assert var == pytest.approx(2.0 - m.covariance(10.0) ** 2 / 2.0, rel=1e-8)

    def test_symmetric_data(self):
        m = VariogramModel("gaussian", 1.0, 10.0)
        a = krige_at(build_system([[-1, 0], [1, 0]], [5.0, 5.0], m, mean=0.0), [0.0, 0.0])
        b = krige_at(build_system([[1, 0], [-1, 0]], [5.0, 5.0], m, mean=0.0), [0.0, 0.0])
        assert a == pytest.approx(b, rel=1e-12)
        c = build_system([[-1, 0], [1, 0]], [5.0, 5.0], m, mean=0.0)
        lam = c.solve(c.cross_covariance([[0.0, 0.0]])[:, 0])
        assert lam[0] == pytest.approx(lam[1], rel=1e-12)

    def test_vectorized_matches_scalar(self, random_system):
        rng = np.random.default_rng(2)
        targets = rng.uniform(0, 100, (20, 2))
        est, var = krige_many(random_system, targets)
        for k, t in enumerate(targets):
            e, v = krige_at(random_system, t)
            assert est[k] == pytest.approx(e, abs=1e-12)
            assert var[k] == pytest.approx(v, abs=1e-12)


class TestDualKriging:
    def test_matches_primal(self, random_system):
        targets = np.random.default_rng(3).uniform(0, 100, (50, 2))
        primal = np.array([krige_at(random_system, t)[0] for t in targets])
        np.testing.assert_allclose(dual_krige_field(random_system, targets), primal, atol=1e-9)

    def test_empty_targets(self, random_system):
        assert dual_krige_field(random_system, np.empty((0, 2))).shape == (0,)

    def test_reproduces_data(self):
        rng = np.random.default_rng(4)
        pts = rng.uniform(0, 50, (25, 2))
        z = rng.normal(size=25)
        s = build_system(pts, z, VariogramModel("exponential", 1.0, 20.0))
        np.testing.assert_allclose(dual_krige_field(s, pts), z, atol=1e-8)


class TestLooCrossValidation:
    def test_matches_direct_five_points(self):
        rng = np.random.default_rng(5)
        s = build_system(rng.uniform(0, 20, (5, 2)), rng.normal(size=5),
                         VariogramModel("spherical", 1.0, 15.0, 0.1), mean=0.3)
        np.testing.assert_allclose(loo_cross_validate(s).zk_minus, direct_loo(s), atol=1e-10)

    def test_single_datum_gives_prior_mean(self):
        s = build_system([[0.0, 0.0]], [4.0], VariogramModel("spherical"), mean=1.5)
        cv = loo_cross_validate(s)
        assert cv.zk_minus[0] == pytest.approx(1.5, abs=1e-12)
        assert cv.variances[0] == pytest.approx(1.0)

    def test_variance_is_direct_kriging_variance(self, random_system):
        s = random_system
        cv = loo_cross_validate(s)
        A = s.C + s.jitter * np.eye(s.n)
        keep = np.arange(1, s.n)
        lam = np.linalg.solve(A[np.ix_(keep, keep)], A[keep, 0])
        assert cv.variances[0] == pytest.approx(A[0, 0] - lam @ A[keep, 0], rel=1e-9)

    def test_innovation_covariance_diagonal(self, random_system):
        cv = loo_cross_validate(random_system)
        np.testing.assert_allclose(np.diag(innovation_covariance(random_system)), cv.variances,
                                   rtol=1e-10)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 25), st.sampled_from(["spherical", "exponential", "gaussian"]),
       st.floats(5, 60), st.floats(0, 0.5), st.integers(0, 2**31))
def test_loo_matches_direct_property(n, kind, a, nugget, seed):
    rng = np.random.default_rng(seed)
    pts = rng.uniform(0, 100, (n, 2))
    model = VariogramModel(kind, 1.0, a, nugget)
    C = model.covariance(cdist(pts, pts)) + 1e-10 * np.eye(n)
    z = np.linalg.cholesky(C) @ rng.normal(size=n)
    s = build_system(pts, z, model, mean=0.0)
    np.testing.assert_allclose(loo_cross_validate(s).zk_minus, direct_loo(s),
                               atol=1e-8 * max(np.ptp(z), 1.0))
