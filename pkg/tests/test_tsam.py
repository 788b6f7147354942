import numpy as np
import pytest
from scipy.optimize import minimize

from conftest import make_data
from gmfm.evalsim.metrics import ccor
from gmfm.evalsim.simulate import family_map_for
from gmfm.families import FamilyKind
from gmfm.model import FactorParams, FamilyMap, MatrixSeries, natural_params, total_loglik
from gmfm.normalize import normalize
from gmfm.tsam import TsamConfig, alternating_stage, one_step_correction, tsam_fit, typed_index_sets


def test_config_validation():
    with pytest.raises(ValueError):
        TsamConfig(0, 1)
    with pytest.raises(ValueError):
        TsamConfig(1, 1, restarts=0)
    with pytest.raises(ValueError):
        TsamConfig(1, 1, tol=0)


def test_index_sets_uniform():
    s = typed_index_sets(FamilyMap(FamilyKind.POISSON), (4, 5, 6))
    sz = s.sizes()
    assert sz["col"] == [4 * 6] * 5
    assert sz["row"] == [5 * 6] * 4
    assert sz["slice"] == [20] * 6


def test_index_sets_case4_columns_single_type():
    p1, p2, T = 6, 8, 5
    s = typed_index_sets(family_map_for("case4", p1, p2), (p1, p2, T))
    assert s.sizes()["col"] == [p1 * T] * p2
    assert s.col.all()


def test_index_sets_case6_counting_oracle():
    p1, p2, T = 7, 9, 3
    fm = family_map_for("case6", p1, p2)
    codes = fm.resolve(p1, p2, T)
    s = typed_index_sets(fm, (p1, p2, T))
    for t in range(T):
        counts = [int(np.sum(codes[t] == f)) for f in range(5)]
        assert s.sizes()["slice"][t] == max(counts)
    for i in range(p1):
        assert s.sizes()["row"][i] == max(int(np.sum(codes[:, i] == f)) for f in range(5))
        assert s.sizes()["row"][i] * 2 >= p2 * T
    with pytest.raises(ValueError):
        typed_index_sets(fm, (p1, p2, T), "bogus")
    pref = typed_index_sets(fm, (p1, p2, T), "prefer:logit")
    assert (codes[pref.slice] == FamilyKind.LOGIT).all()


def _rank_one(p1=6, p2=5, T=8, seed=0):
    gen = np.random.default_rng(seed)
    th = FactorParams(gen.uniform(0.5, 1.5, (p1, 1)), gen.uniform(0.5, 1.5, (p2, 1)), gen.normal(size=(T, 1, 1)))
    return MatrixSeries(natural_params(th)), th


def test_noiseless_rank_one_recovery():
    X, th = _rank_one()
    est, rep = tsam_fit(X, FamilyMap(), TsamConfig(1, 1, restarts=2, tol=1e-12, max_outer=300))
    np.testing.assert_allclose(natural_params(est), X.values, atol=1e-6)
    assert ccor(est.R, th.R) >= 0.9999 and ccor(est.C, th.C) >= 0.9999


def test_stationary_point_unchanged():
    X, _ = _rank_one(seed=1)
    est, _ = tsam_fit(X, FamilyMap(), TsamConfig(1, 1, restarts=1, tol=1e-14, max_outer=500))
    exact = normalize(FactorParams(est.R, est.C, est.F))
    one = alternating_stage(X, FamilyMap(), TsamConfig(1, 1, max_outer=1), exact)
    np.testing.assert_allclose(natural_params(one), natural_params(exact), atol=1e-8)
    corr = one_step_correction(X, FamilyMap(), exact)
    np.testing.assert_allclose(natural_params(corr), natural_params(exact), atol=1e-8)


def test_logit_monotone_trace():
    fm = FamilyMap(FamilyKind.LOGIT)
    X, _ = make_data(fm, 10, 8, 12, 2, 2, seed=4, scale=2.0)
    _, rep = tsam_fit(X, fm, TsamConfig(2, 2, restarts=2))
    tr = np.array(rep.loglik_trace)
    assert rep.monotone_violations == 0
    assert np.all(np.diff(tr) >= -1e-8 * np.abs(tr[1:]))


def test_gaussian_correction_is_block_least_squares(rng):
    X, th = make_data(FamilyMap(), 6, 5, 4, 2, 2, seed=7)
    tilde = FactorParams.random(6, 5, 4, 2, 2, rng)
    out = one_step_correction(X, FamilyMap(), tilde, ridge=0.0)
    x = X.values
    for i in range(6):
        Z = np.array([tilde.F[t] @ tilde.C[j] for t in range(4) for j in range(5)])
        y = np.array([x[t, i, j] for t in range(4) for j in range(5)])
        np.testing.assert_allclose(out.R[i], np.linalg.lstsq(Z, y, rcond=None)[0], atol=1e-9)
    for j in range(5):
        Z = np.array([tilde.F[t].T @ tilde.R[i] for t in range(4) for i in range(6)])
        y = np.array([x[t, i, j] for t in range(4) for i in range(6)])
        np.testing.assert_allclose(out.C[j], np.linalg.lstsq(Z, y, rcond=None)[0], atol=1e-9)
    for t in range(4):
        Z = np.array([np.kron(tilde.C[j], tilde.R[i]) for j in range(5) for i in range(6)])
        y = np.array([x[t, i, j] for j in range(5) for i in range(6)])
        np.testing.assert_allclose(out.F[t].reshape(-1, order="F"), np.linalg.lstsq(Z, y, rcond=None)[0], atol=1e-9)


def test_reported_loglik_and_normalised():
    # count and binary halves, large enough that the estimate stays bounded
    fm = family_map_for("case4", 16, 14)
    X, _ = make_data(fm, 16, 14, 24, 2, 2, seed=9, scale=1.5)
    est, rep = tsam_fit(X, fm, TsamConfig(2, 2, restarts=2))
    assert rep.loglik == pytest.approx(total_loglik(X, fm, est), abs=1e-8)
    assert rep.residuals_after["max_residual"] <= 1e-10
    assert len(rep.restarts) == 2 and rep.best_restart in (1, 2)
    assert rep.clamped_cells == 0
    assert rep.loglik >= max(r.loglik for r in rep.restarts if not r.failed) - 1e-6


def test_deterministic():
    fm = FamilyMap(FamilyKind.POISSON)
    X, _ = make_data(fm, 6, 6, 8, 2, 1, seed=2)
    a = tsam_fit(X, fm, TsamConfig(2, 1, restarts=2, seed=5))
    b = tsam_fit(X, fm, TsamConfig(2, 1, restarts=2, seed=5))
    np.testing.assert_array_equal(a[0].R, b[0].R)
    assert a[1].to_dict() == b[1].to_dict()


def test_init_checked_and_used():
    X, th = make_data(FamilyMap(), 6, 5, 4, 2, 2, seed=3)
    with pytest.raises(ValueError):
        tsam_fit(X, FamilyMap(), TsamConfig(1, 1), init=th)
    with pytest.raises(ValueError):
        tsam_fit(X, FamilyMap(), TsamConfig(7, 1))
    est, rep = tsam_fit(X, FamilyMap(), TsamConfig(2, 2, restarts=1, max_outer=1), init=th)
    assert rep.restarts[0].loglik >= total_loglik(X, FamilyMap(), th) - 1e-9


def _oracle_gaussian_rank1(x, starts=50, seed=0):
    """Joint gradient ascent over (r, c, f) for k1 = k2 = 1, best of many random starts."""
    T, p1, p2 = x.shape
    gen = np.random.default_rng(seed)

    def negll(v):
        r, c, f = v[:p1], v[p1 : p1 + p2], v[p1 + p2 :]
        res = x - f[:, None, None] * r[None, :, None] * c[None, None, :]
        g_r = -np.einsum("tij,t,j->i", res, f, c)
        g_c = -np.einsum("tij,t,i->j", res, f, r)
        g_f = -np.einsum("tij,i,j->t", res, r, c)
        return 0.5 * np.sum(res**2), np.concatenate([g_r, g_c, g_f])

    best = np.inf
    for _ in range(starts):
        v0 = gen.uniform(-1, 1, p1 + p2 + T)
        out = minimize(negll, v0, jac=True, method="L-BFGS-B", options={"ftol": 1e-15, "gtol": 1e-12, "maxiter": 5000})
        best = min(best, out.fun)
    return -best  # gaussian cells carry no normalising constant


def test_tiny_instance_matches_joint_oracle():
    gen = np.random.default_rng(21)
    x = gen.normal(size=(4, 3, 3)) + np.einsum("t,i,j->tij", gen.normal(size=4), gen.normal(size=3), gen.normal(size=3))
    X = MatrixSeries(x)
    _, rep = tsam_fit(X, FamilyMap(), TsamConfig(1, 1, restarts=5, tol=1e-12, max_outer=2000))
    assert abs(rep.loglik - _oracle_gaussian_rank1(x)) <= 1e-4


def test_separated_binary_fit_is_flagged():
    # weak signal on a small logit panel: some cells separate and the estimate runs off to the clamp
    fm = FamilyMap(FamilyKind.LOGIT)
    X, _ = make_data(fm, 12, 10, 20, 2, 2, seed=9)
    _, rep = tsam_fit(X, fm, TsamConfig(2, 2, restarts=1, max_outer=30))
    assert rep.clamped_cells > 0
    assert any("separated" in w for w in rep.warnings)
