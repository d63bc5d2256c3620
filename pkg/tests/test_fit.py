import numpy as np
import pytest
from scipy import optimize

from oracles import dense_loglik, random_design, random_pd, univariate_ri_loglik
from pvmixed.data import ModelSpec, Term
from pvmixed.errors import ValidationError
from pvmixed.fit import (
    FitOptions,
    FitResult,
    WeightSet,
    correlation,
    decompose,
    fit_ml,
    fit_weighted_univariate,
    robust_cluster_cov,
    variance_explained,
)
from pvmixed.likelihood import StackedDesign, profiled_loglik
from pvmixed.simulate import SimConfig, generative_model_spec
from simutil import sim_design

TIGHT = FitOptions(tol_loglik=1e-14, tol_grad=1e-8, max_iter=500)


def generated_design(rng, J, n, Sigma, T, beta0=None):
    """Intercept-only multivariate design drawn from the model itself."""
    M = Sigma.shape[0]
    beta0 = np.zeros(M) if beta0 is None else beta0
    sizes = np.full(J, n)
    N = J * n
    u = rng.multivariate_normal(np.zeros(M), T, size=J) if np.any(T) else np.zeros((J, M))
    e = rng.multivariate_normal(np.zeros(M), Sigma, size=N)
    y = beta0 + np.repeat(u, n, axis=0) + e
    X = np.zeros((N, M, M))
    X[:, np.arange(M), np.arange(M)] = 1.0
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    return StackedDesign(tuple(f"o{m}" for m in range(M)), [f"o{m}:intercept" for m in range(M)], X, y,
                         [f"c{j:03d}" for j in range(J)], [f"s{j:03d}" for j in range(J)], offsets)


# --- fit_ml ----------------------------------------------------------------


def test_null_class_effect_gives_small_icc(rng):
    D = generated_design(rng, 200, 15, np.eye(3) * 100.0, np.zeros((3, 3)))
    F = fit_ml(D)
    icc = decompose(F).icc
    assert np.all(icc < 2.0)


def test_toy_instance_matches_brute_force_oracle(rng):
    D = random_design(rng, sizes=[3, 4, 2, 5, 3], M=1, n_cov=0)
    D = D.with_y(D.y + np.repeat(rng.normal(size=D.J), D.sizes)[:, None])
    F = fit_ml(D, TIGHT)

    def neg(v):
        s2, t2 = np.exp(v)
        mu = F.beta  # profiled over a 1-d mean below
        best = optimize.minimize_scalar(
            lambda m: -dense_loglik(D, np.array([[s2]]), np.array([[t2]]), np.array([m])),
            bracket=(mu[0] - 1, mu[0] + 1))
        return best.fun

    grid = optimize.brute(neg, ((-4.0, 2.0), (-6.0, 2.0)), Ns=12, finish=optimize.fmin, full_output=True)
    assert F.loglik == pytest.approx(-grid[1], abs=1e-4)


def test_multivariate_fit_has_no_better_point_on_a_slice(rng):
    D = random_design(rng, J=5, sizes=[4, 3, 5, 4, 3], M=3, n_cov=0)
    D = D.with_y(D.y + np.repeat(rng.normal(size=(D.J, 3)), D.sizes, axis=0))
    F = fit_ml(D, TIGHT)
    th = F.params.theta
    for a, b in ((0, 6), (2, 8), (3, 9)):
        def neg(v):
            t = th.copy()
            t[a], t[b] = v
            return -profiled_loglik(t, D)

        res = optimize.brute(neg, ((th[a] - 0.5, th[a] + 0.5), (th[b] - 0.5, th[b] + 0.5)), Ns=11,
                             finish=optimize.fmin, full_output=True)
        assert -res[1] <= F.loglik + 1e-4


def test_fit_result_invariants(small_sim):
    pop, d = small_sim
    _, _, D = sim_design(pop.config)
    F = fit_ml(D)
    assert F.converged
    assert F.loglik >= F.initial_loglik
    assert np.linalg.eigvalsh(F.Sigma)[0] > 0
    # T may approach the boundary on small data; that must be flagged
    assert np.linalg.eigvalsh(F.T)[0] > 0 or "near-singular T" in F.flags
    for C in (F.cov_model, F.cov_robust):
        np.testing.assert_allclose(C, C.T, atol=1e-12 * np.max(np.abs(C)))
        assert np.linalg.eigvalsh(C)[0] > -1e-10 * np.max(np.abs(C))
    assert np.all(np.diff(F.history) >= -1e-13 * abs(F.loglik))


def test_refit_is_bit_identical(small_sim):
    pop, _ = small_sim
    _, _, D = sim_design(pop.config)
    a, b = fit_ml(D), fit_ml(D)
    assert a.loglik == b.loglik
    assert np.array_equal(a.beta, b.beta) and np.array_equal(a.Sigma, b.Sigma)
    assert np.array_equal(a.cov_robust, b.cov_robust)


def test_scale_equivariance(rng):
    S, T = random_pd(rng, 3, scale=50.0), random_pd(rng, 3, scale=15.0)
    D = generated_design(rng, 60, 8, S, T, beta0=np.array([500.0, 480.0, 510.0]))
    c = 7.5
    a = fit_ml(D, TIGHT)
    b = fit_ml(D.with_y(c * D.y), TIGHT)
    np.testing.assert_allclose(b.beta, c * a.beta, rtol=1e-8)
    np.testing.assert_allclose(b.Sigma, c ** 2 * a.Sigma, rtol=1e-6)
    np.testing.assert_allclose(b.T, c ** 2 * a.T, rtol=1e-6)
    da, db = decompose(a), decompose(b)
    for k in ("within", "between", "total", "icc"):
        np.testing.assert_allclose(getattr(db, k), getattr(da, k), atol=1e-8)


def test_univariate_fit_matches_hand_rolled_ml(rng):
    D = generated_design(rng, 40, 6, np.array([[4.0]]), np.array([[1.5]]), beta0=np.array([3.0]))
    F = fit_ml(D, TIGHT)
    ys = [D.y[D.offsets[j]:D.offsets[j + 1], 0] for j in range(D.J)]
    res = optimize.minimize(lambda v: -univariate_ri_loglik(ys, np.exp(v[0]), np.exp(v[1]), v[2]),
                            np.array([0.0, 0.0, 0.0]), method="Nelder-Mead",
                            options={"xatol": 1e-12, "fatol": 1e-14, "maxiter": 20000, "maxfev": 40000})
    s2, t2, mu = np.exp(res.x[0]), np.exp(res.x[1]), res.x[2]
    assert F.Sigma[0, 0] == pytest.approx(s2, rel=1e-6)
    assert F.T[0, 0] == pytest.approx(t2, rel=1e-6)
    assert F.beta[0] == pytest.approx(mu, rel=1e-6)


def test_fd_gradient_option_reaches_same_optimum(rng):
    D = generated_design(rng, 30, 5, random_pd(rng, 2), random_pd(rng, 2))
    a = fit_ml(D, TIGHT)
    b = fit_ml(D, FitOptions(gradient="fd"))
    assert b.loglik == pytest.approx(a.loglik, abs=1e-6)


def test_max_iter_flags_and_returns_best(rng):
    D = generated_design(rng, 30, 5, random_pd(rng, 3), random_pd(rng, 3))
    F = fit_ml(D, FitOptions(max_iter=1))
    assert not F.converged and "not-converged" in F.flags
    assert F.loglik >= F.initial_loglik


def test_fit_requires_two_classes(rng):
    D = random_design(rng, sizes=[4], M=1, n_cov=0)
    with pytest.raises(ValidationError):
        fit_ml(D)


@pytest.mark.parametrize("raw", [{"gradient": "bogus"}, {"tol_grad": 0}, {"max_iter": 0}])
def test_fit_options_validation(raw):
    with pytest.raises(ValidationError):
        FitOptions.from_dict(raw)


def test_fit_result_roundtrip(rng):
    D = generated_design(rng, 20, 4, random_pd(rng, 2), random_pd(rng, 2))
    F = fit_ml(D)
    G = FitResult.from_dict(F.to_dict())
    np.testing.assert_array_equal(G.beta, F.beta)
    np.testing.assert_array_equal(G.cov_robust, F.cov_robust)
    assert G.coef_names == F.coef_names and G.flags == F.flags


# --- robust covariance -----------------------------------------------------


def test_robust_close_to_model_when_correctly_specified():
    c = SimConfig(seed=11, n_pv=1, sd_meas=0.0, two_class_school_share=0.0).with_classes(400)
    _, _, D = sim_design(c)
    F = fit_ml(D)
    ratio = F.se("robust") / F.se("model")
    assert np.all((ratio > 0.8) & (ratio < 1.2)), ratio


def test_robust_detects_duplicated_classes(rng):
    D = generated_design(rng, 40, 6, np.eye(2) * 4.0, np.eye(2))
    n = D.sizes
    X = np.concatenate([D.X, D.X])
    y = np.concatenate([D.y, D.y])
    # reorder so each class copy sits right after the original
    idx = np.concatenate([np.r_[D.offsets[j]:D.offsets[j + 1], D.N + D.offsets[j]:D.N + D.offsets[j + 1]]
                          for j in range(D.J)])
    sizes = np.repeat(n, 2)
    cids = [f"{c}{s}" for c in D.class_ids for s in "ab"]
    schools = [f"k{j}" for j in range(D.J) for _ in "ab"]
    D2 = StackedDesign(D.outcomes, D.coef_names, X[idx], y[idx], cids, schools,
                       np.concatenate([[0], np.cumsum(sizes)]))
    F = fit_ml(D2)
    naive = robust_cluster_cov(F, D2, cluster={c: c for c in cids})
    clustered = robust_cluster_cov(F, D2)
    assert np.all(np.sqrt(np.diag(clustered)) > np.sqrt(np.diag(naive)))


def test_robust_single_school_errors(rng):
    D = generated_design(rng, 10, 4, np.eye(1), np.eye(1))
    F = fit_ml(D)
    with pytest.raises(ValidationError):
        robust_cluster_cov(F, D, cluster={c: "k" for c in D.class_ids})


def test_robust_missing_cluster_errors(rng):
    D = generated_design(rng, 10, 4, np.eye(1), np.eye(1))
    F = fit_ml(D)
    with pytest.raises(ValidationError):
        robust_cluster_cov(F, D, cluster={D.class_ids[0]: "k"})


# --- weighted univariate ---------------------------------------------------


def unit_weights(prep, value=1.0):
    f = prep.frame
    student = {s: value for s in f["student_id"]}
    sc = dict(zip(f["student_id"], f["class_id"]))
    cs = dict(zip(f["class_id"], f["school_id"]))
    return WeightSet(student, {c: 1.0 for c in cs}, {k: 1.0 for k in set(cs.values())}, cs, sc)


def read_design(config, terms=("female", "hrl")):
    full = generative_model_spec(config, terms=list(terms))
    read_terms = tuple(Term(t.name, {"read": t.columns["read"]}) for t in full.terms)
    return sim_design(config, ModelSpec(("read",), read_terms, full.transforms))


def test_weighted_with_unit_weights_equals_unweighted():
    _, prep, D = read_design(SimConfig(seed=3, n_pv=1).with_classes(80))
    a = fit_ml(D, TIGHT)
    b = fit_weighted_univariate(D, unit_weights(prep), TIGHT)
    np.testing.assert_allclose(b.beta, a.beta, rtol=1e-8, atol=1e-8)
    assert b.Sigma[0, 0] == pytest.approx(a.Sigma[0, 0], rel=1e-8)
    assert b.T[0, 0] == pytest.approx(a.T[0, 0], rel=1e-8)
    np.testing.assert_allclose(b.cov_robust, a.cov_robust, rtol=1e-6)


def test_cluster_scaling_removes_constant_student_weights():
    _, prep, D = read_design(SimConfig(seed=4, n_pv=1).with_classes(60))
    a = fit_ml(D, TIGHT)
    b = fit_weighted_univariate(D, unit_weights(prep, 3.0), TIGHT, scaling="cluster")
    np.testing.assert_allclose(b.beta, a.beta, rtol=1e-7, atol=1e-7)
    assert b.Sigma[0, 0] == pytest.approx(a.Sigma[0, 0], rel=1e-7)


def test_weighted_rejects_multivariate(small_sim):
    pop, _ = small_sim
    _, prep, D = sim_design(pop.config)
    with pytest.raises(ValidationError):
        fit_weighted_univariate(D, unit_weights(prep))


def test_weightset_validation_and_products():
    with pytest.raises(ValidationError):
        WeightSet({"a": 0.0}, {"c": 1.0}, {"k": 1.0}, {"c": "k"}, {"a": "c"})
    with pytest.raises(ValidationError):
        WeightSet({"a": 1.0}, {"c": -1.0}, {"k": 1.0}, {"c": "k"}, {"a": "c"})
    W = WeightSet({"a": 2.0}, {"c": 3.0}, {"k": 5.0}, {"c": "k"}, {"a": "c"})
    assert W.class_weight("c") == 15.0
    assert W.overall("a") == 30.0


def test_weightset_csv_roundtrip(tmp_path):
    W = WeightSet({"a": 2.5, "b": 1.0}, {"c": 3.0}, {"k": 5.0}, {"c": "k"}, {"a": "c", "b": "c"})
    W.to_csv(tmp_path / "w.csv")
    V = WeightSet.from_csv(tmp_path / "w.csv")
    assert dict(V.student) == dict(W.student) and V.class_weight("c") == 15.0


# --- decompositions --------------------------------------------------------


def _result(S, T, outcomes=("a", "b", "c")):
    p = len(outcomes)
    z = np.zeros((p, p))
    return FitResult(tuple(outcomes), tuple(f"{o}:intercept" for o in outcomes), np.zeros(p), S, T, 0.0, z, z,
                     np.zeros((2, 2)), 0, 0.0, "converged", True, 0, 0, (), 0.0)


def test_decompose_identity():
    r = decompose(_result(np.eye(3), np.eye(3)))
    np.testing.assert_allclose(np.diag(r.pct_between), 50.0)
    np.testing.assert_allclose(r.within, np.eye(3))
    np.testing.assert_allclose(r.between, np.eye(3))


def test_decompose_total_matches_dense(rng):
    for _ in range(10):
        S, T = random_pd(rng, 3), random_pd(rng, 3)
        r = decompose(_result(S, T))
        V = S + T
        ref = V / np.sqrt(np.outer(np.diag(V), np.diag(V)))
        np.testing.assert_allclose(r.total, ref, atol=1e-12)
        assert np.all(np.abs(r.total) <= 1.0 + 1e-15)
        np.testing.assert_allclose(r.icc, 100 * np.diag(T) / np.diag(V))


def test_variance_explained_identity_and_sign():
    S, T = np.diag([4.0, 5.0]), np.diag([1.0, 2.0])
    null = _result(S, T, ("a", "b"))
    out = variance_explained(null, null)
    assert out["within_reduction"] == [0.0, 0.0] and out["between_reduction"] == [0.0, 0.0]
    worse = variance_explained(null, _result(S * 1.1, T, ("a", "b")))
    assert worse["within_reduction"][0] == pytest.approx(-10.0)
    with pytest.raises(ValidationError):
        variance_explained(null, _result(S, T, ("a", "c")))


def test_variance_explained_constructed_between_share(rng):
    J, n = 500, 12
    z = rng.normal(size=J)
    tau2 = 10.0
    b = np.sqrt(0.3 * tau2)
    u = b * z + rng.normal(0, np.sqrt(0.7 * tau2), J)
    y = np.repeat(u, n) + rng.normal(0, 5.0, J * n)
    N = J * n
    X_full = np.zeros((N, 1, 2))
    X_full[:, 0, 0] = 1.0
    X_full[:, 0, 1] = np.repeat(z, n)
    offsets = np.arange(0, N + 1, n)
    ids = [f"c{j}" for j in range(J)]
    full = StackedDesign(("y",), ["y:intercept", "y:z"], X_full, y[:, None], ids, ids, offsets)
    null = StackedDesign(("y",), ["y:intercept"], X_full[:, :, :1], y[:, None], ids, ids, offsets)
    out = variance_explained(fit_ml(null), fit_ml(full))
    assert out["between_reduction"][0] == pytest.approx(30.0, abs=5.0)
    assert abs(out["within_reduction"][0]) < 2.0


def test_correlation_unit_diagonal(rng):
    R = correlation(random_pd(rng, 4))
    np.testing.assert_array_equal(np.diag(R), 1.0)
