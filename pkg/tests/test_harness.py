import math

import numpy as np
import pytest
from conftest import PROFILE_C
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from widedegen.convex_gauge import Ball, Polytope, dual_boundary_directions, g_delta
from widedegen.errors import InvalidArgument
from widedegen.harness import (
    BallWindow,
    cascade,
    cascade_levels,
    continuity_report,
    epsilon_convergence,
    excess,
    gdelta_limit_check,
    geometric_lemma_check,
    geometric_threshold,
    initial_mu,
    iteration_lemma_check,
    level_measures,
    subsolution_energy_check,
    sup_representation_error,
)
from widedegen.integrand import PrototypeIntegrand
from widedegen.regularize import assemble
from widedegen.solver import build_grid, solve_dirichlet

UNIT = [[0.0, 1.0], [0.0, 1.0]]
BALL = Ball()
DIRS = dual_boundary_directions(BALL, 64)


@pytest.fixture(scope="module")
def reg():
    return assemble(PrototypeIntegrand(2.0), 3.0, 0.1)


def affine_solution(reg, q, h=1 / 32):
    grid = build_grid(UNIT, h)
    q = np.asarray(q, float)
    return solve_dirichlet(reg, grid, 0.0, lambda x: x @ q, initial="zero")


# -- windows and excess


def test_window_must_fit():
    grid = build_grid(UNIT, 1 / 32)
    with pytest.raises(InvalidArgument):
        BallWindow(grid, [0.5, 0.5], 0.3)
    w = BallWindow(grid, [0.5, 0.5], 0.25)
    assert w.resolved and w.count > 0


def test_excess_affine_zero(reg):
    sol = affine_solution(reg, [0.6, 0.3])
    w = BallWindow(sol.grid, [0.5, 0.5], 0.25)
    assert excess(sol, w) == pytest.approx(0.0, abs=1e-20)


def test_excess_matches_direct_sum():
    grid = build_grid([[-1, 1], [-1, 1]], 1 / 32)
    xc = grid.cell_centers()
    field = np.stack([xc[..., 0], np.zeros(xc.shape[:-1])], -1)
    w = BallWindow(grid, [0.0, 0.0], 0.5)
    inside = [(float(x), float(y)) for x, y in xc.reshape(-1, 2) if math.hypot(x, y) < 0.5]
    m = math.fsum(x for x, _ in inside) / len(inside)
    ref = math.fsum((x - m) ** 2 for x, _ in inside) / len(inside)
    assert excess(field, w) == pytest.approx(ref, rel=1e-12)


@given(st.floats(-5, 5), st.floats(-5, 5), st.integers(0, 1000))
def test_excess_translation_invariant_and_minimal(c1, c2, seed):
    grid = build_grid(UNIT, 1 / 16)
    field = np.random.default_rng(seed).standard_normal(grid.cell_dims + (2,))
    w = BallWindow(grid, [0.5, 0.5], 0.25)
    base = excess(field, w)
    c = np.array([c1, c2])
    assert excess(field + c, w) == pytest.approx(base, rel=1e-9, abs=1e-12)
    vals = field[w.cells]
    assert base <= float(np.mean(np.sum((vals - c) ** 2, axis=-1))) + 1e-12


# -- level measures


def test_level_measures_affine_all_or_nothing(reg):
    delta, nu = 0.1, 0.125
    q = np.array([1.5, 0.2])
    sol = affine_solution(reg, q)
    w = BallWindow(sol.grid, [0.5, 0.5], 0.25)
    for mu in [0.1, 0.3, 0.5]:
        st_ = level_measures(sol, w, delta, mu, nu, DIRS)
        proj = DIRS @ q - (1 + delta)
        expect = proj > (1 - nu) * mu
        du = sol.Du[w.cells]
        # gradient equals q up to solver tolerance; directions near the threshold are skipped
        clear = np.abs(proj - (1 - nu) * mu) > 1e-6
        np.testing.assert_array_equal((st_.fractions == 1.0)[clear], expect[clear])
        assert np.all((st_.fractions == 0.0) | (st_.fractions == 1.0))
        assert st_.label == ("NonDegenerate" if expect.any() else "Degenerate")
        assert np.abs(du - q).max() < 1e-6


def test_level_measures_inside_body_degenerate():
    grid = build_grid(UNIT, 1 / 32)
    rng = np.random.default_rng(0)
    field = rng.standard_normal(grid.cell_dims + (2,))
    field /= np.maximum(np.linalg.norm(field, axis=-1, keepdims=True), 1.0)
    w = BallWindow(grid, [0.5, 0.5], 0.25)
    st_ = level_measures(field, w, 0.1, 0.05, 0.125, DIRS)
    assert np.all(st_.counts == 0) and st_.label == "Degenerate"


@pytest.mark.parametrize("seed", range(5))
def test_level_measures_recount(seed):
    grid = build_grid(UNIT, 1 / 32)
    rng = np.random.default_rng(seed)
    field = 1.3 * rng.standard_normal(grid.cell_dims + (2,))
    w = BallWindow(grid, [0.5, 0.5], 0.25)
    delta, mu, nu = 0.1, 0.4, 0.125
    st_ = level_measures(field, w, delta, mu, nu, DIRS)
    xc = grid.cell_centers()
    for j, e in enumerate(DIRS):
        count = 0
        for idx in np.ndindex(*grid.cell_dims):
            if math.hypot(*(xc[idx] - 0.5)) < 0.25 and float(field[idx] @ e) - (1 + delta) > (1 - nu) * mu:
                count += 1
        assert st_.counts[j] == count
    measures = st_.complement_measures
    nondeg = np.any(measures < nu * st_.ball_measure)
    deg = np.all(measures >= nu * st_.ball_measure)
    assert nondeg != deg
    assert st_.label == ("NonDegenerate" if nondeg else "Degenerate")


def test_level_measures_argument_checks():
    grid = build_grid(UNIT, 1 / 32)
    field = np.zeros(grid.cell_dims + (2,))
    w = BallWindow(grid, [0.5, 0.5], 0.25)
    for nu in (0.0, 0.3):
        with pytest.raises(InvalidArgument):
            level_measures(field, w, 0.1, 0.1, nu, DIRS)
    with pytest.raises(InvalidArgument):
        level_measures(field, np.zeros(grid.cell_dims, bool), 0.1, 0.1, 0.1, DIRS, grid=grid)


# -- cascade


def test_cascade_levels_exact_bound():
    for kappa in (0.8, 0.9, 0.95):
        levels, bounds, alpha = cascade_levels(0.7, kappa, 20)
        assert np.all(levels <= bounds)
        np.testing.assert_allclose(levels, 0.7 * kappa ** np.arange(20), rtol=1e-14)
        assert alpha == pytest.approx(-math.log(kappa) / math.log(2))


def test_cascade_affine_degenerate(reg):
    sol = affine_solution(reg, [0.6, 0.3], h=1 / 64)
    tr = cascade(sol, [0.5, 0.5], 0.25, 0.1, 0.2, 0.9, 0.125, 20, BALL)
    assert tr.switched_at is None and tr.steps
    assert all(s.label == "Degenerate" and s.sup_gdelta == 0.0 for s in tr.steps)
    assert tr.checks_pass and tr.truncated


def test_cascade_affine_nondegenerate(reg):
    delta, mu = 0.1, 0.3
    q = (1 + delta + mu) * DIRS[5]
    sol = affine_solution(reg, q, h=1 / 64)
    tr = cascade(sol, [0.5, 0.5], 0.25, delta, mu, 0.9, 0.125, 4, BALL)
    assert tr.steps[0].label == "NonDegenerate" and tr.switched_at == 0
    for s in tr.steps:
        assert s.lower_bound_check
        assert s.lower_bound_min == pytest.approx(1 + delta + mu, abs=1e-8)
    assert tr.checks_pass


def test_cascade_profile_transition(profile_refinement):
    _, sols = profile_refinement
    sol = sols[1 / 128]
    delta, nu, kappa = 0.1, 0.125, 0.5
    x0 = np.array([0.75, 0.5])
    w = BallWindow(sol.grid, x0, 0.125)
    mu = initial_mu(sol, w, delta, BALL)
    tr = cascade(sol, x0, 0.125, delta, mu, kappa, nu, 8, BALL, directions=DIRS)
    labels = [s.label for s in tr.steps]
    assert labels[0] == "Degenerate" and "NonDegenerate" in labels
    # brute-force recount of every recorded quantity
    du = sol.Du
    xc = sol.grid.cell_centers()
    dist = np.linalg.norm(xc - x0, axis=-1)
    gd = np.linalg.norm(g_delta(BALL, delta, du), axis=-1)
    for s in tr.steps:
        mask = dist < s.rho
        assert s.cells == int(mask.sum())
        assert s.sup_gdelta == pytest.approx(float(gd[mask].max()), abs=1e-15)
        proj = du[mask] @ DIRS.T - (1 + delta)
        fr = np.mean(proj > (1 - nu) * s.mu, axis=0)
        assert s.max_fraction == pytest.approx(float(fr.max()))
        nxt = dist < s.rho / 2
        if s.degenerate_check is not None:
            assert s.degenerate_sup_next == pytest.approx(float(gd[nxt].max()), abs=1e-15)
        if s.lower_bound_check is not None:
            assert s.lower_bound_min == pytest.approx(float(np.linalg.norm(du[nxt], axis=-1).min()), rel=1e-14)
    assert tr.level_bound_holds


def test_cascade_rejects_bad_kappa(reg):
    sol = affine_solution(reg, [0.1, 0.1])
    with pytest.raises(InvalidArgument):
        cascade(sol, [0.5, 0.5], 0.2, 0.1, 0.1, 1.0, 0.1, 3, BALL)


# -- epsilon convergence


def test_convergence_identical_and_affine(reg):
    a = affine_solution(reg, [0.6, 0.3])
    b = affine_solution(reg.with_epsilon(0.01), [0.6, 0.3])
    tab = epsilon_convergence([a, a, b], 0.1, BALL)
    assert tab.distances[0, 1] == 0.0
    assert np.all(tab.distances == 0.0) and tab.monotone


def test_convergence_mismatch(reg):
    a = affine_solution(reg, [0.6, 0.3])
    b = affine_solution(reg, [0.6, 0.3], h=1 / 16)
    c = affine_solution(reg, [0.5, 0.3])
    for other in (b, c):
        with pytest.raises(InvalidArgument):
            epsilon_convergence([a, other], 0.1, BALL)


def test_convergence_profile_sweep(profile_sweep):
    tab = epsilon_convergence(profile_sweep, 0.2, BALL)
    assert tab.monotone
    assert np.allclose(tab.distances, tab.distances.T)


# -- continuity


def test_continuity_constant_flat():
    grid = build_grid(UNIT, 1 / 32)
    rep = continuity_report(np.ones(grid.cell_dims + (2,)), grid, [1 / 32, 2 / 32, 4 / 32, 8 / 32, 16 / 32])
    assert rep.status == "flat" and rep.alpha_hat is None
    assert np.all(rep.modulus == 0)


def test_continuity_affine_G_zero(reg):
    sol = affine_solution(reg, [0.6, 0.3])
    rep = continuity_report(sol.Du, sol.grid, [1 / 32, 4 / 32, 16 / 32], K="K2", body=BALL)
    assert rep.status == "flat"


def test_continuity_argument_checks():
    grid = build_grid(UNIT, 1 / 32)
    f = np.zeros(grid.cell_dims)
    with pytest.raises(InvalidArgument):
        continuity_report(f, grid, [0.1, 0.5])
    with pytest.raises(InvalidArgument):
        continuity_report(f, grid, [0.1, 0.2, 0.4])
    with pytest.raises(InvalidArgument):
        continuity_report(f, grid, [0.03, 0.1, 0.3], K="K1")


def test_continuity_linear_field_exponent_one():
    grid = build_grid(UNIT, 1 / 64)
    xc = grid.cell_centers()
    rep = continuity_report(xc[..., 0], grid, [k / 64 for k in (1, 2, 4, 8, 16)])
    assert rep.alpha_hat == pytest.approx(1.0, abs=1e-9)
    assert np.all(np.diff(rep.modulus) >= 0)


def test_continuity_modulus_bruteforce():
    grid = build_grid(UNIT, 1 / 8)
    v = np.random.default_rng(2).standard_normal(grid.cell_dims)
    radii = np.array([1 / 8, 2 / 8, 3 / 8, 10 / 8])
    rep = continuity_report(v, grid, radii)
    xc = grid.cell_centers().reshape(-1, 2)
    flat = v.ravel()
    d = np.linalg.norm(xc[:, None] - xc[None], axis=-1)
    diff = np.abs(flat[:, None] - flat[None])
    for r, om in zip(radii, rep.modulus):
        assert om == pytest.approx(float(diff[d <= r + 1e-12].max()))


def test_continuity_profile_alpha_stable(profile_refinement):
    _, sols = profile_refinement
    radii = [k / 64 for k in (1, 2, 4, 8, 16)]
    a = [continuity_report(g_delta(BALL, 0.1, sols[h].Du), sols[h].grid, radii).alpha_hat for h in (1 / 64, 1 / 128)]
    assert a[0] > 0 and a[1] > 0
    assert abs(a[1] - a[0]) / a[0] < 0.2


@pytest.mark.parametrize("body", [BALL, Polytope([[1, 1], [-1, 1], [-1, -1], [1, -1]])])
def test_gdelta_limit(body):
    rng = np.random.default_rng(0)
    xi = 3 * rng.standard_normal((5000, 2))
    rep = gdelta_limit_check(xi, body, 0.1)
    assert rep["holds_outer_radius"]
    r_in, r_out = body.radii()
    assert rep["max_difference"] <= 0.1 * r_out
    if isinstance(body, Ball):
        assert rep["holds_inner_radius"]


def test_sup_representation_halves():
    xi = 3 * np.random.default_rng(1).standard_normal((4000, 2))
    errs = [sup_representation_error(xi, BALL, dual_boundary_directions(BALL, m)) for m in (64, 128, 256)]
    assert all(e >= -1e-12 for e in errs)
    assert errs[1] <= 0.5 * errs[0] and errs[2] <= 0.5 * errs[1]


# -- standalone lemmas


def test_geometric_example():
    ok, tr = geometric_lemma_check(0.25, 1.0, 2.0, 1.0, 10)
    assert ok
    np.testing.assert_allclose(tr[:3], [0.25, 0.0625, 0.0078125], rtol=1e-14)
    assert geometric_lemma_check(0.0, 1.0, 2.0, 1.0, 5)[0]
    assert not geometric_lemma_check(10.0, 1.0, 2.0, 1.0, 30)[0]


@given(st.floats(0.1, 10), st.floats(1.1, 16), st.floats(0.25, 3), st.floats(0.0, 1.0))
def test_geometric_threshold_property(C, b, kappa, frac):
    y0 = frac * geometric_threshold(C, b, kappa)
    # at the threshold itself the iterates decay like b^(-i/kappa)
    assert geometric_lemma_check(y0, C, b, kappa, 600)[0]


def test_geometric_just_above_threshold_diverges():
    thr = geometric_threshold(1.0, 2.0, 1.0)
    assert not geometric_lemma_check(thr * (1 + 1e-6), 1.0, 2.0, 1.0, 200)[0]


def test_geometric_argument_checks():
    for args in [(1.0, 0.0, 2.0, 1.0, 3), (1.0, 1.0, 1.0, 1.0, 3), (-1.0, 1.0, 2.0, 1.0, 3), (1.0, 1.0, 2.0, 1.0, 2.5)]:
        with pytest.raises(InvalidArgument):
            geometric_lemma_check(*args)


def test_iteration_lemma_examples():
    rho = np.linspace(1.0, 2.0, 100)
    zero = iteration_lemma_check(rho, np.zeros(100), 0.5, 1.0, 0.0, 0.0, 1.0, 0.5)
    assert zero.holds and zero.C_tilde == 0.0
    A, alpha, R1 = 0.5, 1.0, 2.5
    phi = A / (R1 - rho) ** alpha
    res = iteration_lemma_check(rho, phi, 0.5, A, 0.0, 0.0, alpha, 0.0)
    assert res.holds and np.isfinite(res.C_tilde)
    with pytest.raises(InvalidArgument):
        iteration_lemma_check(rho, phi, 1.0, A, 0.0, 0.0, alpha, 0.0)
    with pytest.raises(InvalidArgument):
        iteration_lemma_check(rho, phi, 0.5, A, 0.0, 0.0, 0.5, 1.0)


def test_iteration_lemma_detects_violation():
    rho = np.linspace(1.0, 2.0, 20)
    phi = np.where(rho < 1.5, 100.0, 0.0)
    assert not iteration_lemma_check(rho, phi, 0.5, 0.01, 0.0, 0.0, 1.0, 0.0).holds


# -- subsolution


def test_subsolution_affine_zero(reg):
    sol = affine_solution(reg, [0.6, 0.3])
    w = BallWindow(sol.grid, [0.5, 0.5], 0.25)
    rows = subsolution_energy_check(sol, w, 0.1, DIRS[0], [0.01, 0.1])
    assert all(r["lhs"] == 0 and r["ratio"] == 0 and r["empty"] for r in rows)


def test_subsolution_profile(profile_refinement):
    _, sols = profile_refinement
    sol = sols[1 / 128]
    w = BallWindow(sol.grid, [0.75, 0.5], 0.125)
    e = np.array([1.0, 0.0])
    # levels spread over the range of v on the innermost ball, so every row is nonempty
    top_inner = float((np.maximum(sol.Du[w.sub(0.5)] @ e - 1.1, 0.0) ** 2).max())
    levels = [top_inner * (j + 0.5) / 8 for j in range(8)]
    rows = subsolution_energy_check(sol, w, 0.1, e, levels)
    assert not any(r["empty"] for r in rows)
    # constant needed at level k: worst ratio over tau
    const = np.array([max(r["ratio"] for r in rows if r["k"] == k) for k in levels])
    assert np.all(const > 0) and const.max() / const.min() < 3.0
    top = float((np.maximum(sol.Du[w.cells] @ e - 1.1, 0.0) ** 2).max())
    above = subsolution_energy_check(sol, w, 0.1, e, [2 * top])
    assert all(r["empty"] and r["lhs"] == 0 for r in above)
