import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import make_data, mixed_map
from gmfm.families import FamilyKind, loglik_cell
from gmfm.model import (
    FactorParams,
    FamilyBlock,
    FamilyMap,
    MatrixSeries,
    Problem,
    all_col_blocks,
    all_factor_blocks,
    all_row_blocks,
    batched_blocks,
    col_block,
    factor_block,
    factor_design,
    factor_hessians,
    natural_params,
    objective_Q,
    penalty,
    penalty_terms,
    row_block,
    total_loglik,
    unvec_F,
    vec_F,
)
from gmfm.normalize import constraint_residuals, normalize


def test_family_map_resolve_and_roundtrip():
    fm = FamilyMap(FamilyKind.POISSON, (FamilyBlock(FamilyKind.LOGIT, cols=(3, 4)), FamilyBlock("probit", rows=(1, 1), slices=(2, 2))))
    codes = fm.resolve(3, 4, 2)
    assert codes.dtype == np.int8 and codes.shape == (2, 3, 4)
    assert (codes[:, :, :2][:, 1:] == FamilyKind.POISSON).all()
    assert (codes[0, :, 2:] == FamilyKind.LOGIT).all()
    assert (codes[1, 0] == FamilyKind.PROBIT).all()
    assert FamilyMap.from_dict(fm.to_dict()) == fm
    assert fm.families() == {FamilyKind.POISSON, FamilyKind.LOGIT, FamilyKind.PROBIT}
    with pytest.raises(ValueError):
        FamilyMap(FamilyKind.GAUSSIAN, (FamilyBlock(FamilyKind.LOGIT, cols=(3, 9)),)).resolve(3, 4, 2)
    with pytest.raises(ValueError):
        FamilyBlock.from_dict({"family": "logit", "rows": [3, 2]})


def test_matrix_series_validation():
    with pytest.raises(ValueError):
        MatrixSeries(np.zeros((2, 1, 3)))
    with pytest.raises(ValueError):
        MatrixSeries(np.zeros((3, 3)))
    X = MatrixSeries(np.zeros((2, 3, 3)))
    assert (X.T, X.p1, X.p2) == (2, 3, 3)
    assert X.observed.all()
    with pytest.raises(ValueError):
        X.values[0, 0, 0] = 1.0
    assert MatrixSeries(np.zeros((2, 3, 3)), np.ones((2, 3, 3), bool)).mask is None


def test_factor_params_validation(rng):
    with pytest.raises(ValueError):
        FactorParams(np.ones((3, 2)), np.ones((3, 2)), np.ones((4, 2, 3)))
    with pytest.raises(ValueError):
        FactorParams(np.ones((2, 3)), np.ones((3, 3)), np.ones((4, 3, 3)))
    th = FactorParams.random(5, 4, 3, 2, 2, rng)
    assert th.dims == (5, 4, 3) and (th.k1, th.k2) == (2, 2)
    assert np.abs(th.R).max() <= 1


def test_natural_params_and_vec(rng):
    th = FactorParams.random(4, 3, 2, 2, 3, rng)
    pi = natural_params(th)
    t, i, j = 1, 2, 0
    assert pi[t, i, j] == pytest.approx(th.R[i] @ th.F[t] @ th.C[j])
    f = vec_F(th.F)
    # column-major: F[a, b] at b * k1 + a
    assert f[t, 2 * 2 + 1] == th.F[t, 1, 2]
    np.testing.assert_array_equal(unvec_F(f, 2, 3), th.F)
    Z = factor_design(th)
    np.testing.assert_allclose(Z @ f[t], pi[t].reshape(-1), atol=1e-12)
    assert np.abs(natural_params(th, clamp=0.1)).max() <= 0.1


def test_total_loglik_direct(rng):
    fm = mixed_map(4, 4)
    X, th = make_data(fm, 4, 4, 3, 2, 2, seed=3)
    codes = fm.resolve(4, 4, 3)
    pi = natural_params(th)
    direct = sum(
        loglik_cell(FamilyKind(int(codes[t, i, j])), X.values[t, i, j], pi[t, i, j])
        for t in range(3) for i in range(4) for j in range(4)
    )
    assert total_loglik(X, fm, th) == pytest.approx(direct, rel=1e-12)


def test_missing_cells_are_dropped(rng):
    fm = FamilyMap(FamilyKind.GAUSSIAN)
    X, th = make_data(fm, 4, 5, 3, 1, 1)
    mask = np.ones(X.values.shape, bool)
    mask[0, 1, 2] = mask[2, 3, 4] = False
    vals = np.array(X.values)
    full = Problem.build(X, fm)
    part = Problem.build(MatrixSeries(vals, mask), fm)
    cells = -0.5 * (vals - natural_params(th)) ** 2
    assert total_loglik(part, None, th) == pytest.approx(cells[mask].sum())
    assert total_loglik(full, None, th) == pytest.approx(cells.sum())
    assert part.n_observed == 58


def test_problem_rejects_out_of_support():
    fm = FamilyMap(FamilyKind.POISSON)
    with pytest.raises(ValueError):
        Problem.build(MatrixSeries(np.full((2, 3, 3), 0.5)), fm)


@given(st.integers(0, 1000), st.sampled_from(list(FamilyKind) + ["mixed"]))
def test_rotation_invariance(seed, fam):
    gen = np.random.default_rng(seed)
    p1, p2, T, k1, k2 = 5, 4, 3, 2, 2
    fm = mixed_map(p1, p2) if fam == "mixed" else FamilyMap(fam)
    X, th = make_data(fm, p1, p2, T, k1, k2, seed=seed)
    G1 = gen.normal(size=(k1, k1)) + 3 * np.eye(k1)
    G2 = gen.normal(size=(k2, k2)) + 3 * np.eye(k2)
    G1i, G2i = np.linalg.inv(G1), np.linalg.inv(G2)
    rot = FactorParams(th.R @ G1, th.C @ G2.T, np.matmul(np.matmul(G1i, th.F), G2i))
    assert total_loglik(X, fm, rot) == pytest.approx(total_loglik(X, fm, th), abs=1e-9, rel=1e-12)


def _fd_grad_hess(f, x0, h=1e-4):
    k = x0.size
    g = np.zeros(k)
    H = np.zeros((k, k))
    E = np.eye(k) * h
    for a in range(k):
        g[a] = (f(x0 + E[a]) - f(x0 - E[a])) / (2 * h)
        for b in range(k):
            H[a, b] = (f(x0 + E[a] + E[b]) - f(x0 + E[a] - E[b]) - f(x0 - E[a] + E[b]) + f(x0 - E[a] - E[b])) / (4 * h * h)
    return g, H


@pytest.mark.parametrize("fam", list(FamilyKind) + ["mixed"])
def test_block_derivatives_finite_differences(fam):
    p1, p2, T, k1, k2 = 4, 4, 3, 2, 2
    fm = mixed_map(p1, p2) if fam == "mixed" else FamilyMap(fam)
    X, th = make_data(fm, p1, p2, T, k1, k2, seed=11)
    P = Problem.build(X, fm)

    def with_R(i, v):
        R = np.array(th.R)
        R[i] = v
        return th.replace(R=R)

    def with_C(j, v):
        C = np.array(th.C)
        C[j] = v
        return th.replace(C=C)

    def with_f(t, v):
        f = vec_F(th.F)
        f[t] = v
        return th.replace(F=unvec_F(f, k1, k2))

    checks = [
        (row_block(2, P, None, th), lambda v: total_loglik(P, None, with_R(1, v)), th.R[1]),
        (col_block(3, P, None, th), lambda v: total_loglik(P, None, with_C(2, v)), th.C[2]),
        (factor_block(3, P, None, th), lambda v: total_loglik(P, None, with_f(2, v)), vec_F(th.F)[2]),
    ]
    for (s, H), f, x0 in checks:
        g, Hn = _fd_grad_hess(f, np.array(x0))
        np.testing.assert_allclose(s, g, rtol=1e-5, atol=1e-6)
        np.testing.assert_allclose(H, Hn, rtol=1e-4, atol=1e-4)


def test_all_blocks_agree_with_single_blocks():
    fm = mixed_map(5, 4)
    X, th = make_data(fm, 5, 4, 3, 2, 3, seed=2)
    P = Problem.build(X, fm)
    s, H = all_row_blocks(P, th)
    s1, H1 = row_block(4, P, None, th)
    np.testing.assert_allclose(s[3], s1)
    np.testing.assert_allclose(H[3], H1)
    s, H = all_col_blocks(P, th)
    np.testing.assert_allclose(s[1], col_block(2, P, None, th)[0])
    s, H = all_factor_blocks(P, th)
    np.testing.assert_allclose(H[2], factor_block(3, P, None, th)[1])
    with pytest.raises(IndexError):
        row_block(0, P, None, th)


def test_factor_hessians_match_generic(rng):
    th = FactorParams.random(6, 5, 4, 3, 2, rng)
    d2 = rng.normal(size=(4, 30))
    np.testing.assert_allclose(factor_hessians(th.R, th.C, d2), batched_blocks(factor_design(th), d2, d2)[1], atol=1e-12)


def test_rank_one_score_consistency():
    fm = FamilyMap(FamilyKind.LOGIT)
    X, th = make_data(fm, 4, 3, 2, 1, 1, seed=5)
    P = Problem.build(X, fm)
    sr = all_row_blocks(P, th)[0][:, 0]
    sc = all_col_blocks(P, th)[0][:, 0]
    sf = all_factor_blocks(P, th)[0][:, 0]
    # d/dlog-scale of r, c and F give the same total
    assert np.dot(sr, th.R[:, 0]) == pytest.approx(np.dot(sc, th.C[:, 0]))
    assert np.dot(sr, th.R[:, 0]) == pytest.approx(np.dot(sf, th.F[:, 0, 0]))


def test_penalty_zero_iff_normalized(rng):
    th = FactorParams.random(6, 5, 8, 2, 3, rng)
    assert penalty(th) < -1e-6
    nt = normalize(th)
    assert abs(penalty(nt)) <= 1e-12 * 6 * 5 * 8
    assert constraint_residuals(nt).satisfied()
    # constructed: orthonormal loadings but non-diagonal factor covariance -> negative penalty
    R = np.sqrt(6) * np.linalg.qr(rng.normal(size=(6, 2)))[0]
    C = np.sqrt(5) * np.linalg.qr(rng.normal(size=(5, 3)))[0]
    F = rng.normal(size=(8, 2, 3))
    bad = FactorParams(R, C, F)
    assert constraint_residuals(bad).max_residual() > 1e-3
    assert penalty(bad) < 0


def test_penalty_terms_nonpositive_and_weighted(rng):
    th = FactorParams.random(5, 4, 3, 2, 2, rng)
    t = penalty_terms(th)
    assert all(v <= 0 for v in t)
    from gmfm.model import PenaltyWeights

    t2 = penalty_terms(th, PenaltyWeights(2, 0.5, 1))
    assert t2[0] == pytest.approx(2 * t[0]) and t2[1] == pytest.approx(0.5 * t[1]) and t2[2] == pytest.approx(t[2])
    X, _ = make_data(FamilyMap(FamilyKind.GAUSSIAN), 5, 4, 3, 2, 2)
    assert objective_Q(X, FamilyMap(), th) == pytest.approx(total_loglik(X, FamilyMap(), th) + sum(t))
