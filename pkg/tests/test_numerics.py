import math

import numpy as np
import pytest
from scipy import integrate

from ordscr.numerics import (
    DegenerateCorrelationError,
    InfeasibleMarginError,
    MarginTargets,
    MatrixConditioningError,
    MaximizeOptions,
    RectangleSpec,
    bivariate_normal_cdf,
    generalized_eigen_trace,
    ipf_fit,
    maximize,
    mvn_rectangle_probability,
    std_normal_cdf,
)


# ---------------------------------------------------------------------------
# std_normal_cdf


def test_std_normal_cdf_basics():
    assert std_normal_cdf(0.0) == pytest.approx(0.5, abs=1e-15)
    assert std_normal_cdf(np.inf) == 1.0
    assert std_normal_cdf(-np.inf) == 0.0


def test_std_normal_cdf_against_high_precision_erf():
    # mpmath 50-digit oracle for Phi(1.96), frozen
    assert std_normal_cdf(1.96) == pytest.approx(0.9750021048517795658634, abs=1e-12)
    xs = np.linspace(-6, 6, 41)
    vals = std_normal_cdf(xs)
    assert (np.diff(vals) >= 0).all()
    for x, v in zip(xs, vals):
        want = 0.5 * math.erfc(-x / math.sqrt(2))
        assert v == pytest.approx(want, abs=1e-12)


def test_std_normal_cdf_rejects_nan():
    with pytest.raises(ValueError):
        std_normal_cdf(float("nan"))


# ---------------------------------------------------------------------------
# bivariate_normal_cdf


def _phi2_oracle(a, b, rho):
    """1-D reduction of the bivariate integral (independent of the GL code)."""

    def integrand(t):
        return math.exp(-(a * a - 2 * t * a * b + b * b) / (2 * (1 - t * t))) / math.sqrt(
            1 - t * t
        )

    val, _ = integrate.quad(integrand, 0.0, rho, epsabs=1e-13, epsrel=1e-13)
    return std_normal_cdf(a) * std_normal_cdf(b) + val / (2 * math.pi)


def test_phi2_trivial_values():
    assert bivariate_normal_cdf(0.0, 0.0, 0.0) == pytest.approx(0.25, abs=1e-14)
    want = 0.25 + math.asin(0.5) / (2 * math.pi)
    assert bivariate_normal_cdf(0.0, 0.0, 0.5) == pytest.approx(want, abs=1e-10)


def test_phi2_against_2d_quadrature_oracle():
    rho = 0.3

    def density(y, x):
        z = (x * x - 2 * rho * x * y + y * y) / (2 * (1 - rho * rho))
        return math.exp(-z) / (2 * math.pi * math.sqrt(1 - rho * rho))

    want, _ = integrate.dblquad(density, -8.5, 1.0, lambda _: -8.5, lambda _: -0.5)
    assert bivariate_normal_cdf(1.0, -0.5, 0.3) == pytest.approx(want, abs=1e-7)


@pytest.mark.parametrize(
    "a,b,rho",
    [
        (1.0, -0.5, 0.3),
        (0.5, 0.5, 0.95),
        (-1.2, 2.0, -0.97),
        (1.5, -1.5, 0.93),
        (0.7, 0.3, 0.74),
        (0.7, 0.3, -0.76),
        (0.0, 0.0, -0.925),
        (2.5, -2.5, 0.999),
        (-0.4, -0.6, -0.999),
    ],
)
def test_phi2_matches_1d_reduction_oracle(a, b, rho):
    assert bivariate_normal_cdf(a, b, rho) == pytest.approx(_phi2_oracle(a, b, rho), abs=5e-9)


def test_phi2_symmetry_and_marginals():
    rng = np.random.default_rng(3)
    for _ in range(50):
        a, b = rng.normal(size=2) * 2
        rho = rng.uniform(-0.99, 0.99)
        assert bivariate_normal_cdf(a, b, rho) == pytest.approx(
            bivariate_normal_cdf(b, a, rho), abs=1e-12
        )
        assert bivariate_normal_cdf(a, np.inf, rho) == pytest.approx(
            std_normal_cdf(a), abs=1e-12
        )


def test_phi2_independence_grid():
    grid = np.linspace(-4.0, 4.0, 21)
    a = np.repeat(grid, grid.size)
    b = np.tile(grid, grid.size)
    got = bivariate_normal_cdf(a, b, np.zeros_like(a))
    want = std_normal_cdf(a) * std_normal_cdf(b)
    assert np.abs(got - want).max() <= 1e-10


def test_phi2_rectangle_partition_sums_to_one():
    # Partition of the plane induced by finite threshold sets on each axis.
    ta = np.concatenate(([-np.inf], [-1.3, -0.2, 0.4, 2.1], [np.inf]))
    tb = np.concatenate(([-np.inf], [-0.7, 0.8, 1.5], [np.inf]))
    for rho in (-0.95, -0.4, 0.0, 0.6, 0.93):
        grid = bivariate_normal_cdf(ta[:, None], tb[None, :], rho)
        cells = np.diff(np.diff(grid, axis=0), axis=1)
        assert cells.sum() == pytest.approx(1.0, abs=1e-9)
        assert (cells >= -1e-12).all()


def test_phi2_degenerate_rho_rejected():
    with pytest.raises(DegenerateCorrelationError):
        bivariate_normal_cdf(0.0, 0.0, 1.0 - 1e-13)


# ---------------------------------------------------------------------------
# mvn_rectangle_probability


def test_rectangle_independent_orthant():
    spec = RectangleSpec(
        mean=np.zeros(2),
        covariance=np.eye(2),
        lower=[-np.inf, -np.inf],
        upper=[0.0, 0.0],
    )
    prob, err = mvn_rectangle_probability(spec)
    assert prob == pytest.approx(0.25, abs=1e-14)
    assert err == 0.0


def test_rectangle_2x2_block_equals_phi2_combination():
    rho = 0.6
    cov = np.array([[1.0, rho], [rho, 1.0]])
    lo = np.array([-0.5, 0.2])
    hi = np.array([1.3, 2.4])
    spec = RectangleSpec(mean=np.zeros(2), covariance=cov, lower=lo, upper=hi)
    prob, err = mvn_rectangle_probability(spec, seed=9)
    want = (
        bivariate_normal_cdf(hi[0], hi[1], rho)
        - bivariate_normal_cdf(hi[0], lo[1], rho)
        - bivariate_normal_cdf(lo[0], hi[1], rho)
        + bivariate_normal_cdf(lo[0], lo[1], rho)
    )
    assert err == 0.0
    assert prob == pytest.approx(want, abs=1e-12)


def test_rectangle_block_diagonal_is_seed_independent():
    cov = np.zeros((3, 3))
    cov[:2, :2] = [[1.0, 0.4], [0.4, 1.0]]
    cov[2, 2] = 2.0
    spec = RectangleSpec(
        mean=[0.1, -0.2, 0.3],
        covariance=cov,
        lower=[-1.0, -np.inf, 0.0],
        upper=[1.0, 0.5, np.inf],
    )
    p1, e1 = mvn_rectangle_probability(spec, seed=1)
    p2, e2 = mvn_rectangle_probability(spec, seed=999)
    assert p1 == p2
    assert e1 == e2 == 0.0


def test_rectangle_equicorrelated_orthant_matches_quadrature():
    # 3-D orthant with rho = 0.5 everywhere; quadrature oracle equals the
    # closed form 1/8 + 3*asin(rho)/(4*pi) = 0.25 exactly.
    cov = np.full((3, 3), 0.5)
    np.fill_diagonal(cov, 1.0)
    spec = RectangleSpec(
        mean=np.zeros(3), covariance=cov, lower=[-np.inf] * 3, upper=[0.0] * 3
    )
    prob, se = mvn_rectangle_probability(spec, seed=42, tol=5e-5)
    assert se <= 5e-5
    assert abs(prob - 0.25) <= 3 * max(se, 1e-12) + 1e-6


def test_rectangle_rejects_indefinite_covariance():
    cov = np.array([[1.0, 2.0], [2.0, 1.0]])
    spec = RectangleSpec(mean=np.zeros(2), covariance=cov, lower=[-1, -1], upper=[1, 1])
    with pytest.raises(MatrixConditioningError):
        mvn_rectangle_probability(spec)


# ---------------------------------------------------------------------------
# maximize


def test_maximize_scalar_quadratic():
    res = maximize(lambda x: -((x[0] - 3.0) ** 2), start=np.array([0.0]))
    assert res.status == "converged"
    assert res.x[0] == pytest.approx(3.0, abs=1e-6)


def test_maximize_separable_quadratic_5d():
    c = np.array([1.0, -2.0, 0.5, 3.0, -1.0])
    res = maximize(lambda x: -np.sum((x - c) ** 2), start=np.zeros(5))
    assert np.abs(res.x - c).max() <= 1e-6


def test_maximize_rosenbrock():
    def neg_rosen(x):
        return -(100.0 * (x[1] - x[0] ** 2) ** 2 + (1.0 - x[0]) ** 2)

    res = maximize(
        neg_rosen,
        start=np.array([-1.2, 1.0]),
        opts=MaximizeOptions(gtol=1e-10, ftol=1e-14, max_evals=5000),
    )
    assert np.abs(res.x - 1.0).max() <= 1e-4


def test_maximize_never_returns_below_start():
    # objective with a cliff into non-finite territory
    def obj(x):
        if x[0] > 0.5:
            return float("nan")
        return -((x[0] + 1.0) ** 2)

    res = maximize(obj, start=np.array([0.0]))
    assert res.value >= obj(np.array([0.0])) - 1e-12


# ---------------------------------------------------------------------------
# generalized_eigen_trace


def test_eigen_trace_identity_and_scaling():
    rng = np.random.default_rng(5)
    A = rng.normal(size=(4, 4))
    H = A @ A.T + 4.0 * np.eye(4)
    assert generalized_eigen_trace(H, H, ridge=0.0) == pytest.approx(4.0, abs=1e-10)
    assert generalized_eigen_trace(2.0 * H, H, ridge=0.0) == pytest.approx(8.0, abs=1e-10)


def test_eigen_trace_matches_direct_inverse():
    rng = np.random.default_rng(6)
    A = rng.normal(size=(4, 4))
    B = rng.normal(size=(4, 4))
    H = A @ A.T + 2.0 * np.eye(4)
    V = B @ B.T + np.eye(4)
    want = float(np.trace(np.linalg.inv(H) @ V))
    assert generalized_eigen_trace(V, H, ridge=0.0) == pytest.approx(want, abs=1e-8)


def test_eigen_trace_congruence_invariance():
    rng = np.random.default_rng(7)
    A = rng.normal(size=(5, 5))
    B = rng.normal(size=(5, 5))
    H = A @ A.T + np.eye(5)
    V = B @ B.T + 0.5 * np.eye(5)
    base = generalized_eigen_trace(V, H, ridge=0.0)
    for _ in range(5):
        J = rng.normal(size=(5, 5)) + np.eye(5)
        got = generalized_eigen_trace(J.T @ V @ J, J.T @ H @ J, ridge=0.0)
        assert got == pytest.approx(base, rel=1e-6)


# ---------------------------------------------------------------------------
# ipf_fit


def test_ipf_consistent_init_converges_immediately():
    rng = np.random.default_rng(8)
    joint = rng.random((3, 4)) + 0.1
    m0, m1 = joint.sum(axis=1), joint.sum(axis=0)
    prod = np.outer(m0, m1) / joint.sum()
    targets = MarginTargets(axes=[(0,), (1,)], tables=[m0, m1])
    fit, disc, sweeps = ipf_fit(prod, targets, tol=1e-6)
    assert sweeps <= 1
    assert disc <= 1e-15


def test_ipf_recovers_two_way_margins():
    rng = np.random.default_rng(9)
    joint = rng.random((2, 2, 2)) + 0.2
    joint /= joint.sum()
    targets = MarginTargets(
        axes=[(0, 1), (0, 2), (1, 2)],
        tables=[joint.sum(axis=2), joint.sum(axis=1), joint.sum(axis=0)],
    )
    fit, disc, sweeps = ipf_fit(np.full((2, 2, 2), 0.125), targets, tol=1e-10, max_sweeps=500)
    assert disc <= 1e-10
    for axes, want in zip(targets.axes, targets.tables):
        summed = tuple(a for a in range(3) if a not in axes)
        assert np.abs(fit.sum(axis=summed) - want).max() <= 1e-10


def test_ipf_inconsistent_targets_stop_at_max_sweeps():
    # same grand total, contradictory structure: a (0,) margin clashing
    # with the (0,) margin implied by a full (0,1) target
    t0 = np.array([0.9, 0.1])
    clash = np.array([[0.1, 0.2], [0.3, 0.4]])
    init = np.array([[0.98, 0.01], [0.005, 0.005]])
    targets = MarginTargets(axes=[(0,), (0, 1)], tables=[t0, clash])
    fit, disc, sweeps = ipf_fit(init, targets, tol=1e-10, max_sweeps=50)
    assert sweeps == 50
    assert disc > 1e-10


def test_ipf_infeasible_raises():
    init = np.array([[0.0, 0.0], [1.0, 1.0]])
    targets = MarginTargets(axes=[(0,)], tables=[np.array([0.5, 1.5])])
    with pytest.raises(InfeasibleMarginError):
        ipf_fit(init, targets)


def test_ipf_mass_and_sign_invariants():
    rng = np.random.default_rng(10)
    for _ in range(20):
        shape = tuple(rng.integers(2, 4, size=3))
        init = rng.random(shape) + 0.05
        joint = rng.random(shape) + 0.05
        joint /= joint.sum()
        init *= joint.sum() / init.sum()
        targets = MarginTargets(
            axes=[(0,), (1, 2)], tables=[joint.sum(axis=(1, 2)), joint.sum(axis=0)]
        )
        fit, disc, _ = ipf_fit(init, targets, tol=1e-9)
        assert (fit >= 0.0).all()
        assert fit.sum() == pytest.approx(joint.sum(), rel=1e-12)
