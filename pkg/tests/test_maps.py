"""Map-layer oracles: evaluation, Jacobians, preimages, Birkhoff sums."""

import json

import numpy as np
import pytest

from svph.errors import (NonPositiveDeterminant, RootCountMismatch,
                         ValidationError)
from svph.fourier import CoeffTable
from svph.maps import (MapSpec, Observable, birkhoff_sum, degree_integral,
                       eval_map, jacobian, jacobian_batch, jacobian_power,
                       orbit, preimages, preimages_batch, torus_distance,
                       validate_spec, wrap01)


def doubling(omega_amp=0.0):
    # F(x, theta) = (2x, theta + omega_amp * sin(2 pi x))
    om = (CoeffTable.from_dict({(1, 0): omega_amp / 2j})
          if omega_amp else CoeffTable.zero())
    return MapSpec("skew_linear", 2, CoeffTable.zero(), om)


def two_basin_map():
    # F(x, theta) = (2x, theta + 0.05 sin(2 pi x) sin(2 pi theta))
    om = CoeffTable.from_dict({(1, 1): -0.05 / 4, (1, -1): 0.05 / 4})
    return MapSpec("skew_linear", 2, CoeffTable.zero(), om)


def general_map():
    # f = 3x + 0.05 sin(2 pi (x + theta)), omega = eps*(cos 2pi x + 0.3 sin 2pi theta)
    fc = CoeffTable.from_dict({(1, 1): 0.05 / 2j})
    om = CoeffTable.from_dict({(1, 0): 0.5, (0, 1): 0.3 / 2j})
    return MapSpec("fast_slow", 3, fc, om, epsilon=0.05)


def test_eval_trivial_cases():
    spec = doubling()
    x, t = eval_map(spec, 0.3, 0.7)
    assert abs(x - 0.6) < 1e-15 and abs(t - 0.7) < 1e-15
    x, t = eval_map(spec, 0.75, 0.2)
    assert abs(x - 0.5) < 1e-15  # wraps mod 1
    spec2 = doubling(0.05)
    x, t = eval_map(spec2, 0.25, 0.5)
    assert abs(t - (0.5 + 0.05)) < 1e-15


def test_two_basin_circles_invariant():
    spec = two_basin_map()
    for theta0 in (0.0, 0.5):
        x, t = eval_map(spec, 0.37, theta0)
        assert abs(t - theta0) < 1e-14


def test_jacobian_closed_form():
    spec = doubling(0.05)
    j = jacobian(spec, (0.1, 0.9))
    assert abs(j.a11 - 2.0) < 1e-15
    assert abs(j.a12) < 1e-15
    assert abs(j.a21 - 0.05 * 2 * np.pi * np.cos(2 * np.pi * 0.1)) < 1e-13
    assert abs(j.a22 - 1.0) < 1e-15
    assert abs(j.det - 2.0) < 1e-13


def test_jacobian_finite_difference_oracle():
    rng = np.random.default_rng(3)
    spec = general_map()
    h = 1e-6
    for _ in range(100):
        p = rng.random(2)
        j = jacobian(spec, p)
        for col, dv in ((0, np.array([h, 0.0])), (1, np.array([0.0, h]))):
            fp = np.array(eval_map(spec, *(p + dv)))
            fm = np.array(eval_map(spec, *(p - dv)))
            d = ((fp - fm + 0.5) % 1.0 - 0.5) / (2 * h)
            np.testing.assert_allclose(
                d, j.matrix[:, col], atol=1e-5,
                err_msg=f"finite-difference column {col} at {p}")


def test_nonpositive_determinant_raises():
    # omega with a slope strong enough to flip orientation somewhere
    om = CoeffTable.from_dict({(1, 0): 0.5 / 2j})  # 0.5 sin(2 pi x)
    fc = CoeffTable.from_dict({(0, 1): 0.4 / 2j})  # f = 2x + 0.4 sin(2 pi theta)
    spec = MapSpec("skew_general", 2, fc, om)
    with pytest.raises(NonPositiveDeterminant):
        validate_spec(spec)


def test_degree_matches_det_integral():
    for spec, deg in ((doubling(0.1), 2), (two_basin_map(), 2), (general_map(), 3)):
        integral = degree_integral(spec)
        assert abs(integral - deg) < 1e-8
        validate_spec(spec)


def test_preimages_closed_form_doubling():
    spec = doubling(0.05)
    pts = preimages(spec, (0.5, 0.5))
    expected = np.array([[0.25, 0.45], [0.75, 0.55]])
    np.testing.assert_allclose(pts, expected, atol=1e-12)


def test_preimages_skew_invariants_random():
    rng = np.random.default_rng(7)
    spec = two_basin_map()
    targets = rng.random((1000, 2))
    pts = preimages_batch(spec, targets)
    assert pts.shape == (1000, 2, 2)
    fx, ft = eval_map(spec, pts[..., 0], pts[..., 1])
    res = np.maximum(np.abs((fx - targets[:, :1] + 0.5) % 1 - 0.5),
                     np.abs((ft - targets[:, 1:] + 0.5) % 1 - 0.5))
    assert res.max() < 1e-10
    gaps = np.abs(pts[:, 0] - pts[:, 1]).max(axis=1)
    assert gaps.min() >= 1e-8


def test_preimages_newton_path():
    rng = np.random.default_rng(19)
    spec = general_map()
    targets = rng.random((64, 2))
    pts = preimages_batch(spec, targets)
    assert pts.shape == (64, 3, 2)
    fx, ft = eval_map(spec, pts[..., 0], pts[..., 1])
    res = np.maximum(np.abs((fx - targets[:, :1] + 0.5) % 1 - 0.5),
                     np.abs((ft - targets[:, 1:] + 0.5) % 1 - 0.5))
    assert res.max() < 1e-10
    for i in range(len(targets)):
        for a in range(3):
            for b in range(a + 1, 3):
                assert torus_distance(pts[i, a], pts[i, b]) >= 1e-8


def test_preimage_count_mismatch_detected():
    # starve the Newton search of seeds so it cannot find all three roots
    from svph.maps import _preimages_newton
    spec = general_map()
    with pytest.raises(RootCountMismatch):
        _preimages_newton(spec, np.array([[0.3, 0.4]]), seeds_per_axis=1)


def test_orbit_and_cocycle_identity():
    spec = doubling(0.1)
    obs = Observable(CoeffTable.from_dict({(1, 0): 0.5}))  # cos(2 pi x)
    rng = np.random.default_rng(23)
    for _ in range(25):
        p = rng.random(2)
        m, n = int(rng.integers(1, 12)), int(rng.integers(1, 12))
        fmp = orbit(spec, p, m)[-1]
        lhs = birkhoff_sum(spec, obs, p, m + n)
        rhs = birkhoff_sum(spec, obs, p, m) + birkhoff_sum(spec, obs, fmp, n)
        assert abs(lhs - rhs) < 1e-10


def test_birkhoff_constant_observable():
    spec = doubling(0.1)
    obs = Observable(CoeffTable.from_dict({(0, 0): 3.0}))
    assert abs(birkhoff_sum(spec, obs, (0.2, 0.3), 17) - 51.0) < 1e-12
    centered = Observable(CoeffTable.from_dict({(0, 0): 3.0}),
                          centered_offsets=(3.0,))
    assert abs(birkhoff_sum(spec, centered, (0.2, 0.3), 17)) < 1e-12


def test_birkhoff_multi_offset_requires_basin():
    spec = doubling()
    obs = Observable(CoeffTable.from_dict({(0, 0): 1.0}),
                     centered_offsets=(0.5, 1.5))
    with pytest.raises(ValidationError):
        birkhoff_sum(spec, obs, (0.1, 0.1), 5)
    assert abs(birkhoff_sum(spec, obs, (0.1, 0.1), 4, basin_index=1)
               - (4.0 - 6.0)) < 1e-12


def test_jacobian_chain_rule():
    spec = general_map()
    rng = np.random.default_rng(2)
    for _ in range(10):
        p = rng.random(2)
        m = int(rng.integers(1, 10))
        n = int(rng.integers(1, 10))
        fmp = orbit(spec, p, m)[-1]
        lhs = jacobian_power(spec, p, m + n)
        rhs = jacobian_power(spec, fmp, n) @ jacobian_power(spec, p, m)
        np.testing.assert_allclose(lhs, rhs, rtol=1e-8, atol=1e-10)


def test_json_round_trip():
    spec = general_map()
    d = spec.to_json_dict()
    spec2 = MapSpec.from_json(json.dumps(d))
    assert spec2.kind == spec.kind and spec2.ell == spec.ell
    rng = np.random.default_rng(1)
    pts = rng.random((20, 2))
    np.testing.assert_allclose(
        np.stack(eval_map(spec, pts[:, 0], pts[:, 1])),
        np.stack(eval_map(spec2, pts[:, 0], pts[:, 1])), atol=0)
    assert spec2.digest() == spec.digest()


def test_observable_json_round_trip():
    obs = Observable(CoeffTable.from_dict({(1, 0): 0.5}), (0.25,))
    obs2 = Observable.from_json_dict(obs.to_json_dict())
    assert obs2.centered_offsets == (0.25,)
    assert obs2.digest() == obs.digest()


def test_map_kind_validation():
    with pytest.raises(ValidationError):
        MapSpec("weird", 2, CoeffTable.zero(), CoeffTable.zero())
    with pytest.raises(ValidationError):
        MapSpec("skew_linear", 1, CoeffTable.zero(), CoeffTable.zero())
    with pytest.raises(ValidationError):
        MapSpec("skew_linear", 2, CoeffTable.from_dict({(1, 0): 0.1}),
                CoeffTable.zero())


def test_wrap01_range():
    vals = wrap01(np.array([-0.25, 0.0, 1.0, 1.75]))
    np.testing.assert_allclose(vals, [0.75, 0.0, 0.0, 0.75], atol=0)
