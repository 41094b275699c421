"""Lattice kernel sums against hand values and high-precision oracles."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from critlat import (
    kappa_eps,
    kernel_j,
    lattice_sum_alpha,
    lattice_tail_alpha,
    log_asymptote,
    second_moment_matrix,
    slab_points,
    slab_weights,
    total_kernel_mass,
    unit_ball_volume,
)
from critlat.kernel import ball_points, half_ball_points


# ----- single jump weights ------------------------------------------------------


def test_jump_weight_hand_values():
    assert kernel_j((1, 0), 2) == 1.0
    assert kernel_j((0, 2), 2) == 2.0**-4
    assert kernel_j((3, 4), 2) == 5.0**-4
    assert kernel_j((2,), 1) == 0.125
    assert kernel_j((1, 1, 1), 3) == pytest.approx(3.0 ** (-5.0 / 2.0), rel=1e-15)


def test_jump_weight_vanishes_at_origin():
    assert kernel_j((0,), 1) == 0.0
    assert kernel_j((0, 0), 2) == 0.0
    assert kernel_j((0, 0, 0), 3) == 0.0


# ----- normalisation constant ---------------------------------------------------


def test_normalisation_hand_sums():
    # eps=1/2, d=1: integer |w| <= 2, sum 2*(1 + 1/2) = 3
    assert kappa_eps(0.5, 1) == 3.0
    # eps=1/4, d=1: 2*(1 + 1/2 + 1/3 + 1/4) = 25/6
    assert kappa_eps(0.25, 1) == pytest.approx(25.0 / 6.0, rel=1e-15)


@pytest.mark.parametrize(
    "eps,d",
    [(0.125, 1), (2.0**-7, 1), (0.125, 2), (2.0**-10, 2), (0.25, 3)],
)
def test_normalisation_matches_brute_enumeration(eps, d):
    inv = 1.0 / eps
    want = oracles.brute_power_sum(d, inv * inv, float(d))
    assert kappa_eps(eps, d) == pytest.approx(want, rel=1e-13)


def test_normalisation_grows_toward_log_asymptote():
    for d in (1, 2):
        devs = []
        prev = 0.0
        for k in range(4, 13):
            eps = 2.0**-k
            kap = kappa_eps(eps, d)
            assert kap > prev  # strictly increasing as the lattice refines
            prev = kap
            devs.append(abs(kap - log_asymptote(eps, d)))
        # deviation from d*V_d*|ln eps| stays bounded: no growth trend
        assert devs[-1] <= 1.5 * float(np.median(devs))


def test_normalisation_rejects_bad_eps():
    for eps in (0.0, 1.0, 1.5, -0.25):
        with pytest.raises(ValueError):
            kappa_eps(eps, 1)


def test_unit_ball_volumes():
    assert unit_ball_volume(1) == pytest.approx(2.0, rel=1e-15)
    assert unit_ball_volume(2) == pytest.approx(math.pi, rel=1e-15)
    assert unit_ball_volume(3) == pytest.approx(4.0 * math.pi / 3.0, rel=1e-15)


# ----- general power sums -------------------------------------------------------


def test_power_sum_counts_sites_at_zero_exponent():
    # alpha=0 counts lattice points: eps * #{|w| <= 2} = 0.5 * 4
    assert lattice_sum_alpha(0.0, 0.5, 1) == 2.0


@settings(max_examples=30, deadline=None)
@given(
    k=st.integers(min_value=1, max_value=7),
    d=st.sampled_from([1, 2]),
)
def test_power_sum_at_critical_exponent_is_the_normalisation(k, d):
    eps = 2.0**-k
    assert lattice_sum_alpha(float(d), eps, d) == kappa_eps(eps, d)


def test_supercritical_power_sum_diverges_quadratically():
    # alpha = d+2: eps^-2 times a converging integer sum
    d = 2
    for eps in (1.0 / 32, 1.0 / 64):
        scaled = lattice_sum_alpha(float(d + 2), eps, d) * eps**2
        assert scaled == pytest.approx(
            oracles.exact_lattice_mass(d, d + 2), rel=1e-3
        )


def test_power_sum_rejects_negative_exponent():
    with pytest.raises(ValueError):
        lattice_sum_alpha(-1.0, 0.5, 1)


def test_tail_sum_matches_zeta_tail():
    # eps=1/4, d=1, alpha=3: eps^-2 * 2 * (zeta(3) - 1 - 1/8 - 1/27)
    import mpmath as mp

    with mp.workdps(30):
        want = 16.0 * float(
            2 * (mp.zeta(3) - 1 - mp.mpf(1) / 8 - mp.mpf(1) / 27)
        )
    assert lattice_tail_alpha(3.0, 0.25, 1) == pytest.approx(want, rel=1e-12)


def test_tail_sum_requires_convergence():
    with pytest.raises(ValueError):
        lattice_tail_alpha(1.0, 0.5, 1)
    with pytest.raises(ValueError):
        lattice_tail_alpha(2.0, 0.5, 2)


@pytest.mark.parametrize(
    "d,alpha",
    [(1, 3.0), (1, 4.0), (2, 4.0), (2, 6.0)],
)
def test_total_mass_matches_high_precision_constants(d, alpha):
    want = oracles.exact_lattice_mass(d, alpha)
    assert total_kernel_mass(d, alpha) == pytest.approx(want, rel=1e-12)


def test_total_mass_rejects_divergent_exponent():
    with pytest.raises(ValueError):
        total_kernel_mass(2, 2.0)


# ----- second moment of the jump law ---------------------------------------------


def test_second_moment_is_identity_over_dimension():
    assert second_moment_matrix(0.125, 1) == pytest.approx(np.array([[1.0]]))
    m2 = second_moment_matrix(0.125, 2)
    assert m2[0, 0] == pytest.approx(0.5, abs=1e-14)
    assert m2[1, 1] == pytest.approx(0.5, abs=1e-14)


def test_second_moment_off_diagonal_is_exactly_zero():
    # reflection pairing makes the cancellation exact in float arithmetic
    for d, eps in ((2, 0.125), (2, 1.0 / 32), (3, 0.125)):
        m2 = second_moment_matrix(eps, d)
        off = m2[~np.eye(d, dtype=bool)]
        assert np.all(off == 0.0)


def test_second_moment_matches_brute_enumeration():
    eps, d = 1.0 / 16, 2
    ball = oracles.euclid_ball_ints((1.0 / eps) ** 2, d).astype(np.float64)
    ssq = np.einsum("ij,ij->i", ball, ball)
    jw = ssq ** (-(d + 2) / 2.0)
    kappa = oracles.brute_power_sum(d, (1.0 / eps) ** 2, float(d))
    want = np.einsum("i,ij,ik->jk", jw, ball, ball) / kappa
    assert second_moment_matrix(eps, d) == pytest.approx(want, abs=1e-12)


# ----- forward slabs --------------------------------------------------------------


def test_slab_hand_examples():
    assert slab_points(0, 1).tolist() == [[1]]
    assert slab_points(0, 2).tolist() == [[1, 0]]
    pts = slab_points(1, 2)
    assert pts.shape == (15, 2)
    assert set(pts[:, 0]) == {3, 4, 5}
    assert np.max(np.abs(pts[:, 1])) == 2


@pytest.mark.parametrize("d", [1, 2])
def test_slab_counts_follow_closed_form(d):
    for k in range(4):
        r = 3**k
        assert slab_points(k, d).shape[0] == r * (2 * r - 1) ** (d - 1)


@pytest.mark.parametrize("d", [1, 2])
def test_slabs_are_pairwise_disjoint(d):
    seen = set()
    for k in range(4):
        pts = {tuple(p) for p in slab_points(k, d).tolist()}
        assert not (seen & pts)
        seen |= pts


def test_slab_rejects_negative_scale():
    with pytest.raises(ValueError):
        slab_points(-1, 2)


@pytest.mark.parametrize("d", [1, 2])
def test_slab_weights_are_convex_and_weight_proportional(d):
    for k in range(4):
        pts, wts = slab_weights(k, d)
        assert np.all(wts > 0.0)
        assert float(np.sum(wts)) == pytest.approx(1.0, abs=1e-14)
        jw = np.array([kernel_j(p, d) for p in pts])
        ratio = wts / jw
        assert float(np.max(ratio) / np.min(ratio)) == pytest.approx(1.0, rel=1e-12)


@pytest.mark.parametrize("d", [1, 2])
def test_slab_mass_scales_inverse_quadratically(d):
    # total jump weight of slab k decays like 9^-k with a bounded constant
    masses = []
    for k in range(5):
        pts = slab_points(k, d).astype(np.float64)
        ssq = np.einsum("ij,ij->i", pts, pts)
        masses.append(float(np.sum(ssq ** (-(d + 2) / 2.0))))
    for k, mass in enumerate(masses):
        assert 0.3 <= mass * 9.0**k <= 1.1
    for k in range(len(masses) - 1):
        assert 8.0 <= masses[k] / masses[k + 1] <= 18.0


# ----- ball enumeration ------------------------------------------------------------


@pytest.mark.parametrize("d,rsq", [(1, 9.0), (2, 10.0), (3, 6.0)])
def test_ball_enumeration_matches_definition(d, rsq):
    got = {tuple(p) for p in ball_points(rsq, d).tolist()}
    want = {tuple(p) for p in oracles.euclid_ball_ints(rsq, d).tolist()}
    assert got == want


@pytest.mark.parametrize("d,rsq", [(1, 16.0), (2, 12.0), (3, 5.0)])
def test_half_ball_splits_antipodal_pairs(d, rsq):
    full = {tuple(p) for p in ball_points(rsq, d).tolist()}
    half = [tuple(p) for p in half_ball_points(rsq, d).tolist()]
    assert len(half) * 2 == len(full)
    mirrored = {tuple(-c for c in p) for p in half}
    assert set(half) | mirrored == full
    assert not (set(half) & mirrored)
    for p in half:
        first = next(c for c in p if c != 0)
        assert first > 0
