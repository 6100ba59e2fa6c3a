import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from numpy.testing import assert_allclose

from nonignorable.errors import ConfigurationError, DataError, MissingOutcomeError
from nonignorable.model import (
    GFunction,
    HFamily,
    ModelSpec,
    Observation,
    Sample,
    expit,
    h_linear_eval_grad,
    propensity,
)

finite = st.floats(-50, 50, allow_nan=False)


def test_expit_matches_high_precision_values():
    # mpmath, 40 digits (scripts/compute_oracles.py)
    assert_allclose(expit(-0.4), 0.40131233988754799963, rtol=1e-15)
    assert_allclose(expit(-0.2), 0.45016600268752209144, rtol=1e-15)


def test_expit_saturates_without_overflow():
    with np.errstate(over="raise"):
        assert expit(-800.0) == 0.0
        assert expit(800.0) == 1.0


@given(finite)
def test_expit_symmetry(t):
    assert_allclose(expit(t) + expit(-t), 1.0, atol=1e-15)


def test_propensity_design_point():
    # beta = -0.2, g(u) = -0.4 + 0.3u at y = 0, u = 0
    g = GFunction.affine(-0.4, [0.3])
    assert_allclose(propensity(0.0, np.array([0.0]), -0.2, g, HFamily.linear()), 0.40131233988754799963)


@given(st.floats(-10, 10), st.floats(-10, 10), st.floats(0.01, 3))
def test_propensity_increases_in_y_when_beta_negative(y, u, dy):
    g = GFunction.affine(0.1, [0.2])
    h = HFamily.linear()
    lo = propensity(y, np.array([u]), -0.3, g, h)
    hi = propensity(y + dy, np.array([u]), -0.3, g, h)
    assert 0.0 <= lo <= hi <= 1.0


def test_propensity_rejects_wrong_beta_length():
    with pytest.raises(ConfigurationError):
        propensity(0.0, np.array([0.0]), [0.1, 0.2], GFunction.zero(1), HFamily.linear())


def test_linear_h_value_and_gradient():
    assert h_linear_eval_grad(2.0, -0.5) == (1.0, -2.0)
    h = HFamily.linear()
    assert_allclose(h.eval(np.array([1.0, 2.0]), np.array([0.3])), [-0.3, -0.6])
    assert h.grad(np.zeros((3, 4)), np.array([0.3])).shape == (3, 4, 1)


def test_custom_h_gradient_check_catches_errors():
    good = HFamily.custom(lambda y, b: -b[0] * y - b[1] * y ** 2,
                          lambda y, b: np.stack([-y, -y ** 2], axis=-1), 2)
    bad = HFamily.custom(lambda y, b: -b[0] * y - b[1] * y ** 2,
                         lambda y, b: np.stack([-y, y ** 2], axis=-1), 2)
    probes_y, probes_b = [0.5, 1.5, -2.0], [[0.1, 0.2], [-0.3, 0.0], [1.0, -1.0]]
    assert good.check_gradient(probes_y, probes_b) < 1e-6
    assert bad.check_gradient(probes_y, probes_b) > 1.0


def test_model_spec_checks_gradient_dimension():
    broken = HFamily.custom(lambda y, b: -b[0] * y, lambda y, b: -y[..., None], 2)
    with pytest.raises(ConfigurationError):
        ModelSpec(broken, GFunction.zero(1))


class TestGFunction:
    def test_affine_and_quadratic(self):
        g = GFunction.quadratic(-0.8, [0.0, 0.0], [0.2, 0.2])
        assert_allclose(g(np.array([1.0, 2.0])), -0.8 + 0.2 + 0.8)
        assert_allclose(g(np.array([[1.0, 2.0], [0.0, 0.0]])), [0.2, -0.8])

    def test_scalar_input_is_one_point(self):
        assert_allclose(GFunction.affine(0.0, [-0.4])(2.0), -0.8)

    def test_dimension_mismatch(self):
        with pytest.raises(ConfigurationError):
            GFunction.affine(0.0, [1.0, 2.0])(np.ones((3, 1)))

    def test_custom(self):
        g = GFunction.custom(lambda U: np.sin(U[:, 0]))
        assert_allclose(g(np.array([[0.0], [np.pi / 2]])), [0.0, 1.0], atol=1e-15)

    def test_describe(self):
        assert GFunction.affine(0.0, [-0.4]).describe() == "0-0.4*u1"


class TestObservation:
    def test_missing_outcome_is_inaccessible(self):
        ob = Observation((0.1, 1.0), (0,), (1,), 0)
        with pytest.raises(MissingOutcomeError):
            ob.y

    def test_y_required_when_observed(self):
        with pytest.raises(DataError):
            Observation((0.1, 1.0), (0,), (1,), 1)
        with pytest.raises(DataError):
            Observation((0.1, 1.0), (0,), (1,), 0, 2.0)

    def test_partition(self):
        with pytest.raises(ConfigurationError):
            Observation((0.1, 1.0), (0,), (0,), 1, 1.0)

    def test_views(self):
        ob = Observation((0.1, 1.0, 2.0), (0, 2), (1,), 1, 3.0)
        assert_allclose(ob.u, [0.1, 2.0])
        assert_allclose(ob.z, [1.0])
        assert ob.y == 3.0


class TestSample:
    def test_nonrespondent_outcomes_are_hidden(self):
        s = Sample([[0.0, 1.0], [1.0, -1.0]], [1, 0], [2.0, 99.0], (0,), (1,))
        assert np.isnan(s.y[1])
        assert_allclose(s.y_filled, [2.0, 0.0])

    def test_validation(self):
        with pytest.raises(DataError):
            Sample([[0.0, 1.0]], [2], [1.0], (0,), (1,))
        with pytest.raises(DataError):
            Sample([[np.nan, 1.0]], [1], [1.0], (0,), (1,))
        with pytest.raises(DataError):
            Sample([[0.0, 1.0]], [1], [np.nan], (0,), (1,))
        with pytest.raises(DataError):
            Sample([[0.0, 1.0]], [1, 0], [1.0], (0,), (1,))

    def test_arrays_are_read_only(self, sample_a):
        with pytest.raises(ValueError):
            sample_a.X[0, 0] = 1.0

    def test_observation_round_trip(self, sample_a):
        assert Sample.from_observations(sample_a.observations) == sample_a

    def test_take_and_estimable(self, sample_a):
        resp = np.flatnonzero(sample_a.r == 1)
        sub = sample_a.take(resp[:5])
        assert sub.N == 5 and sub.r.all()
        with pytest.raises(DataError):
            sub.check_estimable()
        sample_a.check_estimable()
