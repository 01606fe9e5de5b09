"""Cone audits, growth-rate fits, and transversality sums.

Closed-form oracles come from the pure product map (2x, theta) and from
lattice arithmetic on shear skews, where every Jacobian is triangular and
the extremes are hand-computable.
"""

import math

import numpy as np
import pytest

from svph.errors import BudgetExceeded, ConeNotInvariant, ValidationError
from svph.fourier import CoeffTable
from svph.hyperbolicity import (ConeParams, a6_rate, check_a1_a5, check_cones,
                                image_cone_angles, transversality_sums, zeta)
from svph.maps import MapSpec, eval_map, jacobian_batch


def sin_x(amp):
    return CoeffTable.from_dict({(1, 0): amp / 2j})


def cos_x(amp):
    return CoeffTable.from_dict({(1, 0): amp / 2.0})


def linear_skew(ell, omega):
    return MapSpec(kind="skew_linear", ell=ell, f_coeffs=CoeffTable.zero(),
                   omega_coeffs=omega)


PRODUCT2 = linear_skew(2, CoeffTable.zero())
MIXING = linear_skew(2, cos_x(0.1))
CONES = ConeParams(chi_u=0.75, chi_c=1.0)


def two_basin_map():
    # omega = 0.05 sin(2 pi x) sin(2 pi theta)
    table = CoeffTable.from_dict({(1, 1): -0.05 / 4, (1, -1): 0.05 / 4})
    return linear_skew(2, table)


def test_zeta_exact():
    assert zeta(4) == 720
    assert zeta(2) == 36
    assert zeta(1) == 12


def test_cone_params_validation():
    with pytest.raises(ValidationError):
        ConeParams(chi_u=1.5)
    with pytest.raises(ValidationError):
        ConeParams(chi_u=0.5, chi_c=0.0)


def test_a5_margin_closed_form():
    spec = linear_skew(3, sin_x(0.05))
    rep = check_a1_a5(spec, grid=16)
    assert rep.a1_ok
    expected = 3.0 - 2.0 * (1.0 + 0.1 * math.pi)
    assert abs(rep.a5_margin - expected) < 1e-12
    assert rep.a5_ok
    assert abs(rep.sup_dx_omega - 0.1 * math.pi) < 1e-12


def test_a5_boundary_case_fails():
    rep = check_a1_a5(PRODUCT2, grid=16)
    assert rep.a1_ok
    assert rep.a5_margin == 0.0
    assert not rep.a5_ok  # strict inequality required


def test_a5_ell4_with_shear():
    spec = linear_skew(4, cos_x(0.1))
    rep = check_a1_a5(spec, grid=32)
    expected = 4.0 - 2.0 * (1.0 + 0.2 * math.pi)
    assert abs(rep.a5_margin - expected) < 1e-12
    assert rep.a5_ok


def test_a15_grid_floor():
    with pytest.raises(ValidationError):
        check_a1_a5(PRODUCT2, grid=8)


def test_product_map_cone_report():
    rep = check_cones(PRODUCT2, CONES, grid=16, n_max=20)
    # DF = diag(2,1): boundary slope s -> s/2, worst contraction 1/2 on both
    # cones
    assert abs(rep.iota_star - 0.5) < 1e-12
    assert rep.a2_ok
    ns = rep.n_values
    # |DF^n v|^2 = 4^n cos^2 t + sin^2 t on |t| <= pi/4
    lam_minus = np.sqrt((4.0 ** ns + 1.0) / 2.0)
    assert np.allclose(rep.lambda_minus_n, lam_minus, rtol=1e-9)
    assert np.allclose(rep.lambda_plus_n, 2.0 ** ns, rtol=1e-9)
    # central co-norm sup attained on the invariant vertical direction
    assert np.allclose(rep.lambda_c_plus_n, 1.0, atol=1e-12)
    lamc_minus = np.sqrt((4.0 ** (-ns.astype(float)) + 1.0) / 2.0)
    assert np.allclose(rep.lambda_c_minus_n, lamc_minus, rtol=1e-9)
    # fitted rates and the pinching margin log 2 (lambda_c = 1)
    assert abs(rep.lam - 2.0) < 1e-6
    assert abs(rep.Lam - 2.0) < 1e-6
    assert abs(rep.lambda_c - 1.0) < 1e-6
    assert rep.zeta_r == 720
    # zeta_r amplifies the ~1e-8 fit residue in lambda_c by 720
    assert abs(rep.pinching_margin - math.log(2.0)) < 1e-4
    assert rep.pinching_ok
    assert rep.C_star >= 1.0


def test_mixing_iota_closed_form():
    rep = check_cones(MIXING, CONES, grid=16, n_max=20)
    # slope image (omega' + s)/2 with sup|omega'| = 0.2 pi on the lattice
    expected = (0.2 * math.pi + 0.75) / 2.0 / 0.75
    assert abs(rep.iota_star - expected) < 1e-12
    assert rep.a2_ok
    assert rep.lambda_c >= 1.0
    assert 0.99 < rep.lambda_c_plus < 1.02
    assert rep.pinching_ok
    assert rep.pinching_margin > 0.4


def test_cone_report_orderings():
    rep = check_cones(two_basin_map(), CONES, grid=16, n_max=16)
    assert np.all(rep.lambda_minus_n <= rep.lambda_plus_n + 1e-12)
    assert np.all(rep.lambda_c_minus_n <= rep.lambda_c_plus_n + 1e-12)
    assert rep.lambda_c >= 1.0
    assert rep.C_star >= 1.0
    assert rep.a2_ok


def test_cone_not_invariant_raises():
    # strong shear: slope image (omega' + s)/2 with |omega'| up to 1.8 pi
    spec = linear_skew(2, sin_x(0.9))
    with pytest.raises(ConeNotInvariant):
        check_cones(spec, CONES, grid=16, n_max=4)


def test_image_cone_angles_product():
    cones = ConeParams(chi_u=0.2)
    lo, hi = image_cone_angles(PRODUCT2, (0.3, 0.7), 3, cones)
    assert abs(lo + math.atan(0.025)) < 1e-14
    assert abs(hi - math.atan(0.025)) < 1e-14
    assert hi - lo < math.pi / 2


def test_image_cone_angles_compose():
    spec = two_basin_map()
    z = (0.123, 0.456)
    lo, hi = image_cone_angles(spec, z, 3, CONES)
    s = np.array([-CONES.chi_u, CONES.chi_u])
    zx, zt = z
    for _ in range(3):
        a11, a12, a21, a22 = jacobian_batch(spec, np.full(2, zx),
                                            np.full(2, zt))
        s = np.sort((a21 + a22 * s) / (a11 + a12 * s))
        zx, zt = (float(v) for v in eval_map(spec, zx, zt))
    assert abs(math.atan(s[0]) - lo) < 1e-10
    assert abs(math.atan(s[1]) - hi) < 1e-10


def test_product_transversality_exactly_one():
    # all 2^n branches share the interval around slope 0; sum of |det|^{-1}
    # over the full tree is exactly one
    for n in (2, 5, 8):
        rep = transversality_sums(PRODUCT2, n, CONES, samples=16, seed=3)
        assert rep.n_values == [n]
        assert abs(rep.N_tilde[0] - 1.0) < 1e-10
        assert abs(rep.N_F[0] - 1.0) < 1e-10
        assert not rep.a6_ok


def test_a6_product_rate_one():
    rep = a6_rate(PRODUCT2, [2, 4], CONES, samples=8, seed=5)
    assert np.allclose(rep.rate, 1.0, atol=1e-10)
    assert not rep.a6_ok


def test_a6_mixing_decays():
    rep = a6_rate(MIXING, [4, 6, 8], CONES, samples=48, seed=1)
    assert rep.a6_ok
    assert rep.rate[-1] < 0.95
    assert rep.rate[-1] <= rep.rate[0] + 0.02
    for i, n in enumerate(rep.n_values):
        # self-pair lower bound: det DF == 2 exactly for this skew
        assert rep.N_F[i] >= 2.0 ** (-n) - 1e-12
        assert rep.N_F[i] >= rep.N_tilde[i] - 1e-9
    # submultiplicativity within sampling noise
    assert rep.N_tilde[2] <= rep.N_tilde[0] ** 2 + 0.05


def test_line_grid_refinement_monotone():
    coarse = transversality_sums(MIXING, 6, CONES, samples=16, seed=2,
                                 line_grid=64)
    fine = transversality_sums(MIXING, 6, CONES, samples=16, seed=2,
                               line_grid=512)
    assert fine.N_tilde[0] >= coarse.N_tilde[0] - 1e-12
    # constant-Jacobian map: every containment sum is at most the full-tree
    # sum, which is exactly 1
    assert fine.N_tilde[0] <= 1.0 + 1e-12
    assert coarse.N_tilde[0] <= 1.0 + 1e-12


def test_transversality_budget():
    with pytest.raises(BudgetExceeded):
        transversality_sums(PRODUCT2, 30, CONES, samples=64)
