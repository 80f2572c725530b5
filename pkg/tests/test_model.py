import json

import numpy as np
import pytest

from ordscr.model import (
    ComponentMoments,
    LayoutError,
    OrdinalSchema,
    ParameterSpace,
    ScrParameters,
    Thresholds,
    count_parameters,
    derive_moments,
    first_second_order_correlation,
    pack,
    params_from_dict,
    params_to_dict,
    unpack,
    upper_cholesky,
)


def table1_separated_params(eps=1e-8):
    """Identified representation of the separated-groups generator.

    The generator's noise block loads variables 3..5 exactly, which sits
    on the boundary of the triangular identification (zero leading
    diagonals in V2), so the head diagonal is nudged by eps.
    """
    schema = OrdinalSchema((5, 5, 5, 5, 5))
    s8, s15 = np.sqrt(0.8), np.sqrt(1.5)
    V1 = np.zeros((5, 2))
    V1[0, 0] = s8
    V1[1, 1] = s8
    V2 = np.zeros((5, 3))
    V2[0, 0] = eps
    V2[1, 1] = eps
    V2[2, 2] = s15
    V2[3, 0] = s15
    V2[4, 1] = s15
    thr = Thresholds(tuple(np.array([0.0, 1.0, 2.0, 3.0]) for _ in range(5)))
    omega2 = np.array([[1.25, 0.75], [0.75, 1.25]])
    return ScrParameters(
        schema=schema,
        G=2,
        Q=2,
        weights=np.array([0.3, 0.7]),
        V1=V1,
        V2=V2,
        T=[upper_cholesky(omega2)],
        eta_star=np.array([[-2.24, 4.47], [2.80, 0.56]]),
        eta0_star=np.zeros(3),
        thresholds=thr,
    )


def random_params(space, rng, scale=0.6):
    return space.unpack(rng.normal(scale=scale, size=space.dim))


# ---------------------------------------------------------------------------
# schema and thresholds


def test_schema_validation():
    s = OrdinalSchema((3, 4, 5))
    assert s.P == 3
    assert s.pattern_count == 60
    with pytest.raises(ValueError):
        OrdinalSchema((3,))
    with pytest.raises(ValueError):
        OrdinalSchema((3, 2))


def test_thresholds_pinned_and_increasing():
    Thresholds((np.array([0.0, 1.0, 2.5]),))
    with pytest.raises(ValueError):
        Thresholds((np.array([0.1, 1.0]),))
    with pytest.raises(ValueError):
        Thresholds((np.array([0.0, 1.0, 0.9]),))


# ---------------------------------------------------------------------------
# derive_moments


def test_moments_separated_scenario_mean():
    moms = derive_moments(table1_separated_params())
    assert np.abs(moms[0].mean - np.array([-2.0, 4.0, 0.0, 0.0, 0.0])).max() < 0.01


def test_moments_separated_scenario_sigma2_block():
    moms = derive_moments(table1_separated_params())
    want = np.array([[1.0, 0.6], [0.6, 1.0]])
    assert np.abs(moms[1].covariance[:2, :2] - want).max() < 1e-6


def test_moments_identity_construction():
    schema = OrdinalSchema((3, 3, 3))
    params = ScrParameters(
        schema=schema,
        G=1,
        Q=1,
        weights=np.array([1.0]),
        V1=np.eye(3)[:, :1],
        V2=np.eye(3)[:, 1:],
        T=[],
        eta_star=np.zeros((1, 1)),
        eta0_star=np.zeros(2),
        thresholds=Thresholds(tuple(np.array([0.0, 1.0]) for _ in range(3))),
    )
    moms = derive_moments(params)
    assert np.allclose(moms[0].mean, 0.0)
    assert np.allclose(moms[0].covariance, np.eye(3))


def test_moments_are_positive_definite_for_random_draws():
    schema = OrdinalSchema((4, 4, 4, 4))
    space = ParameterSpace(schema, 3, 2)
    rng = np.random.default_rng(11)
    for _ in range(50):
        params = random_params(space, rng)
        for m in derive_moments(params):
            np.linalg.cholesky(m.covariance)  # raises if not PD
            assert (m.sd > 0).all()
            assert np.allclose(np.diag(m.correlation), 1.0)


# ---------------------------------------------------------------------------
# pack / unpack


def test_pack_unpack_round_trip_spec_examples():
    params = table1_separated_params()
    packed = pack(params)
    back = unpack(packed.theta, params.schema, 2, 2)
    assert np.abs(pack(back).theta - packed.theta).max() <= 1e-12

    # uniform weights G=2 -> logit segment [0]
    space = packed.space
    assert params.weights[0] != params.weights[1]
    uniform = space.unpack(np.zeros(space.dim))
    assert np.allclose(uniform.weights, 0.5)
    assert space.pack(uniform)[space.s_w] == pytest.approx([0.0])

    # thresholds [0,1,2,3] -> unit log-increments [0, 0]
    theta = space.pack(params)
    for sl in space.thr_slices:
        assert np.allclose(theta[sl], 0.0)


def test_pack_unpack_thousand_random_round_trips():
    schema = OrdinalSchema((5, 4, 3, 5))
    space = ParameterSpace(schema, 2, 2)
    rng = np.random.default_rng(12)
    worst = 0.0
    for _ in range(1000):
        theta = rng.normal(scale=0.7, size=space.dim)
        theta2 = space.pack(space.unpack(theta))
        worst = max(worst, float(np.abs(theta - theta2).max()))
    assert worst <= 1e-12


def test_pack_rejects_wrong_length():
    schema = OrdinalSchema((3, 3, 3))
    space = ParameterSpace(schema, 2, 1)
    with pytest.raises(LayoutError):
        space.unpack(np.zeros(space.dim + 1))


def test_packed_dim_equals_parameter_count():
    for (P, Q, G, C) in [
        (5, 2, 2, (5, 5, 5, 5, 5)),
        (3, 1, 2, (3, 4, 5)),
        (3, 3, 3, (4, 5, 3)),
        (4, 2, 1, (3, 3, 4, 4)),
    ]:
        schema = OrdinalSchema(C)
        space = ParameterSpace(schema, G, Q)
        assert space.dim == count_parameters(P, Q, G, C)[0]


def test_moments_batch_matches_scalar_path():
    schema = OrdinalSchema((5, 5, 5, 5, 5))
    space = ParameterSpace(schema, 2, 2)
    rng = np.random.default_rng(13)
    thetas = rng.normal(scale=0.5, size=(6, space.dim))
    w, mu, sigma, cuts = space.moments_batch(thetas)
    for b in range(6):
        params = space.unpack(thetas[b])
        moms = derive_moments(params)
        assert np.allclose(w[b], params.weights, atol=1e-12)
        for g in range(2):
            assert np.allclose(mu[b, g], moms[g].mean, atol=1e-12)
            assert np.allclose(sigma[b, g], moms[g].covariance, atol=1e-12)
        for i in range(5):
            assert np.allclose(cuts[i][b], params.thresholds.cuts[i], atol=1e-12)


# ---------------------------------------------------------------------------
# count_parameters


def test_count_parameters_spec_values():
    assert count_parameters(5, 2, 2, [5] * 5) == (42, 180, True)
    assert count_parameters(3, 1, 2, (3, 4, 5)) == (17, 35, True)
    count, bound, ok = count_parameters(3, 3, 4, (3, 3, 3))
    assert count > bound and not ok


def test_count_parameters_gss_g4_not_identified():
    # GSS schema: schooling (4), siblings (5), happiness (3)
    count, bound, ok = count_parameters(3, 3, 4, (4, 5, 3))
    assert not ok


def test_count_parameters_monotone():
    base, _, _ = count_parameters(4, 2, 2, (4, 4, 4, 4))
    for G in (3, 4, 5):
        c, _, _ = count_parameters(4, 2, G, (4, 4, 4, 4))
        assert c > base
        base = c
    prev, _, _ = count_parameters(4, 2, 2, (4, 4, 4, 4))
    for bump in range(4):
        C = [4, 4, 4, 4]
        C[bump] += 2
        c, _, _ = count_parameters(4, 2, 2, C)
        assert c > prev


# ---------------------------------------------------------------------------
# first_second_order_correlation


def test_correlation_identity_case():
    schema = OrdinalSchema((3, 3, 3))
    params = ScrParameters(
        schema=schema,
        G=1,
        Q=1,
        weights=np.array([1.0]),
        V1=np.eye(3)[:, :1],
        V2=np.eye(3)[:, 1:],
        T=[],
        eta_star=np.zeros((1, 1)),
        eta0_star=np.zeros(2),
        thresholds=Thresholds(tuple(np.array([0.0, 1.0]) for _ in range(3))),
    )
    assert np.allclose(first_second_order_correlation(params), np.eye(3), atol=1e-12)


def test_correlation_entries_bounded():
    schema = OrdinalSchema((4, 4, 4, 4))
    space = ParameterSpace(schema, 2, 2)
    rng = np.random.default_rng(14)
    for _ in range(30):
        corr = first_second_order_correlation(random_params(space, rng))
        assert (np.abs(corr) <= 1.0 + 1e-12).all()


def test_correlation_argmax_invariant_under_v2_scaling():
    # structured (separated-noise) configuration: rescaling the noise
    # loadings must not move the per-column argmax of |corr|
    params = table1_separated_params()
    corr = first_second_order_correlation(params)
    scaled = ScrParameters(
        schema=params.schema,
        G=2,
        Q=2,
        weights=params.weights,
        V1=params.V1,
        V2=2.0 * params.V2,
        T=params.T,
        eta_star=params.eta_star,
        eta0_star=params.eta0_star,
        thresholds=params.thresholds,
    )
    corr2 = first_second_order_correlation(scaled)
    assert np.array_equal(np.abs(corr).argmax(axis=0), np.abs(corr2).argmax(axis=0))


# ---------------------------------------------------------------------------
# serialization


def test_json_round_trip():
    params = table1_separated_params()
    payload = json.dumps(params_to_dict(params))
    back = params_from_dict(json.loads(payload))
    space = ParameterSpace(params.schema, 2, 2)
    assert np.abs(space.pack(back) - space.pack(params)).max() <= 1e-12


def test_q_equals_p_has_no_noise_block():
    schema = OrdinalSchema((4, 4, 4))
    space = ParameterSpace(schema, 2, 3)
    params = space.unpack(np.zeros(space.dim))
    assert params.V2 is None
    assert params.eta0_star.size == 0
    back = params_from_dict(params_to_dict(params))
    assert back.V2 is None
