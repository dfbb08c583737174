import numpy as np
import pytest

from dislearn import metrics, pde, polymap as pm, reduction as red, \
    surrogate as sg


@pytest.fixture(scope="module")
def test_set(prob_semi64, cov_semi64):
    return pde.generate_dataset(prob_semi64, cov_semi64, 80, seed=42)


@pytest.fixture(scope="module")
def moments(test_set):
    return metrics.test_moments(test_set)


@pytest.fixture(scope="module")
def trained_setup(samples_semi64, cov_semi64, test_set, moments):
    """A small trained surrogate with its encoded test data."""
    r = 5
    in_b = red.input_dis(samples_semi64, cov_semi64, r)
    out_b = red.output_pca(samples_semi64, r)
    data = sg.encode_dataset(samples_semi64, in_b, out_b)
    net0 = sg.LatentNetwork.initialized(r, 3, 2 * r, "softplus", seed=1)
    sched = sg.TrainingSchedule(epochs=80, batch_size=20, lr0=1e-3,
                                lr_halvings=(60,), seed=2)
    net, _ = sg.train(net0, data, sched)
    pair = metrics.encode_test_pair(test_set, in_b, out_b, moments)
    surr = sg.Surrogate(in_basis=in_b, out_basis=out_b, net=net)
    return surr, pair, net


def naive_l2(samples, surr):
    M = samples.problem.mesh.M
    num = den = 0.0
    for k in range(samples.N):
        yk = samples.Y[k]
        pk = sg.predict(surr, samples.X[k])
        num += (yk - pk) @ M @ (yk - pk)
        den += yk @ M @ yk
    return num / den


def naive_h1(samples, surr):
    mesh = samples.problem.mesh
    cov = samples.cov
    B = mesh.mass_sqrt()
    W = cov.Phi * np.sqrt(cov.mu)
    num = den = 0.0
    for k in range(samples.N):
        Jt = B @ samples.J[k] @ W
        Jhat = B @ sg.predict_jacobian(surr, samples.X[k]) @ W
        num += np.sum((Jt - Jhat) ** 2)
        den += np.sum(Jt**2)
    return num / den


# ---------------------------------------------------------------------------
# generalization errors
# ---------------------------------------------------------------------------

def test_l2_error_direct_matches_naive(test_set, trained_setup):
    surr, _, _ = trained_setup
    sub = pde.SampleSet(problem=test_set.problem, cov=test_set.cov,
                        seed=test_set.seed, N=20, X=test_set.X[:20],
                        Y=test_set.Y[:20], J=test_set.J[:20],
                        newton_iters=test_set.newton_iters[:20])
    rep = metrics.l2_error(sub, surr)
    assert abs(rep.value - naive_l2(sub, surr)) < 1e-12 * rep.value
    reph = metrics.h1_semi_error(sub, surr)
    assert abs(reph.value - naive_h1(sub, surr)) < 1e-12 * reph.value


def test_fast_path_matches_direct(test_set, trained_setup):
    surr, pair, net = trained_setup
    l2_fast, h1_fast = metrics.surrogate_errors(pair, net)
    l2_dir = metrics.l2_error(test_set, surr)
    h1_dir = metrics.h1_semi_error(test_set, surr)
    assert abs(l2_fast.value - l2_dir.value) < 1e-10 * l2_dir.value
    assert abs(h1_fast.value - h1_dir.value) < 1e-10 * h1_dir.value


def test_constant_surrogate_ratios(samples_semi64, cov_semi64, test_set):
    r = 4
    in_b = red.input_pca(cov_semi64, r)
    out_b = red.output_pca(samples_semi64, r)
    net = sg.LatentNetwork.zeros(r, 2, 2 * r, "softplus")
    surr = sg.Surrogate(in_basis=in_b, out_basis=out_b, net=net)
    M = test_set.problem.mesh.M
    dy = test_set.Y - out_b.mean
    expected = np.einsum("ki,ij,kj->", dy, M, dy) \
        / np.einsum("ki,ij,kj->", test_set.Y, M, test_set.Y)
    rep = metrics.l2_error(test_set, surr)
    assert abs(rep.value - expected) < 1e-12 * expected
    # zero-Jacobian surrogate has relative derivative error exactly 1
    reph = metrics.h1_semi_error(test_set, surr)
    assert abs(reph.value - 1.0) < 1e-12


def test_error_report_validation():
    with pytest.raises(ValueError):
        metrics.ErrorReport(name="x", value=1.0, numerator=1.0,
                            denominator=0.0, n_test=1, provenance={})
    with pytest.raises(ValueError):
        metrics.ErrorReport(name="x", value=-1.0, numerator=-1.0,
                            denominator=1.0, n_test=1, provenance={})


def test_empty_test_set_rejected(test_set, trained_setup):
    surr, _, _ = trained_setup
    empty = pde.SampleSet(problem=test_set.problem, cov=test_set.cov,
                          seed=0, N=0, X=test_set.X[:0], Y=test_set.Y[:0],
                          J=test_set.J[:0], newton_iters=np.zeros(0, np.int64))
    with pytest.raises(ValueError):
        metrics.l2_error(empty, surr)


# ---------------------------------------------------------------------------
# reconstruction errors and excess risk
# ---------------------------------------------------------------------------

def test_reconstruction_full_rank_vanishes(samples_semi64, cov_semi64,
                                           test_set, moments):
    d = cov_semi64.d
    bi = red.input_pca(cov_semi64, d)
    rep = metrics.reconstruction_errors(test_set, bi, moments)["jacobian_in"]
    assert rep.value < 1e-10
    bo = red.output_pca(samples_semi64, samples_semi64.N - 2)
    # an output basis of full numerical rank reconstructs training data only;
    # exactness on the test set needs rank d, so just check the input side
    assert rep.denominator > 0


def test_reconstruction_training_identity(samples_semi64, cov_semi64):
    mom_train = metrics.test_moments(samples_semi64)
    grams = red.jacobian_gram_operators(samples_semi64, cov_semi64)
    for r in (3, 8):
        bo = red.output_pca(samples_semi64, r)
        rep = metrics.reconstruction_errors(samples_semi64, bo,
                                            mom_train)["output"]
        measured = rep.value * rep.denominator / samples_semi64.N
        assert abs(measured - red.trailing_sum(bo, r)) < 1e-8 * measured
        bdx = red.input_dis(samples_semi64, cov_semi64, r, grams=grams)
        rep = metrics.reconstruction_errors(samples_semi64, bdx,
                                            mom_train)["jacobian_in"]
        measured = rep.value * rep.denominator / samples_semi64.N
        assert abs(measured - red.trailing_sum(bdx, r)) < 1e-8 * measured
        bdy = red.output_dis(samples_semi64, r, grams=grams)
        rep = metrics.reconstruction_errors(samples_semi64, bdy,
                                            mom_train)["jacobian_out"]
        measured = rep.value * rep.denominator / samples_semi64.N
        assert abs(measured - red.trailing_sum(bdy, r)) < 1e-8 * measured


def test_reconstruction_dis_beats_pca_held_out(samples_semi64, cov_semi64,
                                               test_set, moments):
    r = 10
    bp = red.input_pca(cov_semi64, r)
    bd = red.input_dis(samples_semi64, cov_semi64, r)
    ep = metrics.reconstruction_errors(test_set, bp, moments)["jacobian_in"]
    ed = metrics.reconstruction_errors(test_set, bd, moments)["jacobian_in"]
    assert ed.value < ep.value


def test_excess_risk_zero_for_identical(samples_semi64, test_set, moments):
    b = red.output_pca(samples_semi64, 5)
    assert metrics.excess_risk(b, b, test_set, moments) == 0.0


def test_excess_risk_validation(samples_semi64, cov_semi64, test_set,
                                moments):
    bo = red.output_pca(samples_semi64, 5)
    bd = red.output_dis(samples_semi64, 5)
    with pytest.raises(ValueError):
        metrics.excess_risk(bo, bd, test_set, moments)
    with pytest.raises(ValueError):
        metrics.excess_risk(bo, red.output_pca(samples_semi64, 4), test_set,
                            moments)
    bi = red.input_pca(cov_semi64, 5)
    with pytest.raises(ValueError):
        metrics.excess_risk(bi, bi, test_set, moments)


def test_excess_risk_lemma_bound(prob_semi64, cov_semi64):
    # trace-form excess of an empirical basis against its reference operator
    # obeys the min(global, local) projection-error bound exactly; the
    # measured test excess then exceeds it by at most the test-noise margin
    r = 5
    big, grams_big = red.streamed_dataset_operators(prob_semi64, cov_semi64,
                                                    400, seed=71)
    small, grams_small = red.streamed_dataset_operators(prob_semi64,
                                                        cov_semi64, 30,
                                                        seed=72)
    ref = red.output_dis(big, r, grams=grams_big)
    emp = red.output_dis(small, r, grams=grams_small)
    A_ref = grams_big[1]
    A_small = grams_small[1]
    excess_trace = metrics.trace_excess(A_ref, emp, ref)
    bound = metrics.excess_risk_bound(A_small, A_ref, ref.eigs, r)
    assert excess_trace <= bound + 1e-12
    test = pde.generate_dataset(prob_semi64, cov_semi64, 60, seed=73)
    mom = metrics.test_moments(test)
    measured = metrics.excess_risk(emp, ref, test, mom)
    denom = mom.sum_j2 / mom.n
    margin = abs(measured - excess_trace / denom)
    assert measured <= bound / denom + margin + 1e-12


# ---------------------------------------------------------------------------
# decomposition and bound curves
# ---------------------------------------------------------------------------

def test_error_decomposition_bounds(trained_setup, moments):
    _, pair, net = trained_setup
    dec = metrics.error_decomposition(pair, net, moments)
    l2_meas, l2a, l2b, l2c = dec["l2"]
    assert l2_meas <= l2a + l2b + l2c + 1e-9 * max(1.0, l2_meas)
    # the L2 split is an exact orthogonal decomposition
    assert abs(l2_meas - (l2a + l2b + l2c)) < 1e-9 * max(1.0, l2_meas)
    h1_meas, h1a, h1b, h1c = dec["h1"]
    assert h1_meas <= h1a + h1b + h1c + 1e-9 * max(1.0, h1_meas)


def test_bound_curves_identity_and_monotone(samples_semi64, cov_semi64):
    mom = metrics.test_moments(samples_semi64)
    bo = red.output_pca(samples_semi64, 12)
    rows = metrics.bound_curves(bo, "output", [2, 4, 8, 12], samples_semi64,
                                mom)
    for r, measured, trailing, scaled in rows:
        assert abs(measured - trailing) < 1e-8 * max(measured, 1e-300)
        assert scaled == trailing
    bd = red.input_dis(samples_semi64, cov_semi64, 12)
    rows = metrics.bound_curves(bd, "jacobian_in", [2, 4, 8, 12],
                                samples_semi64, mom)
    vals = [row[1] for row in rows]
    assert all(a >= b for a, b in zip(vals, vals[1:]))


def test_rate_slope():
    ns = np.array([80, 160, 320, 640])
    assert abs(metrics.rate_slope(ns, 3.0 / ns) + 1.0) < 1e-12
    with pytest.raises(ValueError):
        metrics.rate_slope(ns, np.array([1.0, -1.0, 1.0, 1.0]))


def test_mean_estimator_error(mesh64):
    a = np.ones(mesh64.d)
    b = np.zeros(mesh64.d)
    # || 1 ||_Y^2 = integral of 1 over (0, 1)
    assert abs(metrics.mean_estimator_error(a, b, mesh64) - 1.0) < 1e-12


def test_csv_row_format():
    row = metrics.csv_row("l2", "semilinear", "input_dis", "output_pca",
                          10, 1000, 3, 0.5, 2.0)
    parts = row.split(",")
    assert len(parts) == metrics.CSV_HEADER.count(",") + 1
    assert parts[0] == "l2"
    assert float(parts[7]) == 0.5


# ---------------------------------------------------------------------------
# Monte Carlo conditional expectation
# ---------------------------------------------------------------------------

def hermite_on_field(hmap, cov):
    """Wrap a Hermite map as a nodal-space function via whitening."""
    def func(x):
        return pm.map_eval(hmap, cov.whiten(x)[:hmap.dim_in])
    return func


def test_conditional_mc_full_rank_is_exact(cov_semi64):
    hmap = pm.random_map(4, 3, 2, 6, seed=3)
    func = hermite_on_field(hmap, cov_semi64)
    bi = red.input_pca(cov_semi64, cov_semi64.d)
    x = cov_semi64.sample_field(19)
    val = metrics.conditional_expectation_mc(func, cov_semi64, bi, x,
                                             n_inner=3, seed=5)
    assert np.abs(val - func(x)).max() < 1e-9 * max(1.0, np.abs(func(x)).max())


def test_conditional_mc_matches_analytic(cov_semi64):
    hmap = pm.random_map(4, 2, 3, 8, seed=4)
    func = hermite_on_field(hmap, cov_semi64)
    r = 2
    bi = red.input_pca(cov_semi64, r)
    x = cov_semi64.sample_field(23)
    n_inner = 4096
    est = metrics.conditional_expectation_mc(func, cov_semi64, bi, x,
                                             n_inner=n_inner, seed=6)
    ce = pm.conditional_expectation(hmap, set(range(1, r + 1)))
    analytic = pm.map_eval(ce, cov_semi64.whiten(x)[:hmap.dim_in])
    # inner standard error from a fresh batch of evaluations
    qx = red.project(bi, x)
    vals = np.array([func(qx + cov_semi64.sample_field(77, index=m)
                          - red.project(bi, cov_semi64.sample_field(77, index=m)))
                     for m in range(512)])
    se = vals.std(axis=0) / np.sqrt(n_inner) + 1e-300
    assert np.all(np.abs(est - analytic) <= 5 * se)


def test_conditional_mc_variance_scaling(cov_semi64):
    hmap = pm.random_map(3, 1, 2, 5, seed=8)
    func = hermite_on_field(hmap, cov_semi64)
    bi = red.input_pca(cov_semi64, 2)
    x = cov_semi64.sample_field(29)
    reps_m = np.array([metrics.conditional_expectation_mc(
        func, cov_semi64, bi, x, n_inner=64, seed=1000 + k)[0]
        for k in range(20)])
    reps_2m = np.array([metrics.conditional_expectation_mc(
        func, cov_semi64, bi, x, n_inner=128, seed=2000 + k)[0]
        for k in range(20)])
    ratio = reps_m.var(ddof=1) / reps_2m.var(ddof=1)
    assert 1.5 <= ratio <= 2.8


def test_conditional_mc_rejects_bad_inner(cov_semi64):
    bi = red.input_pca(cov_semi64, 2)
    with pytest.raises(ValueError):
        metrics.conditional_expectation_mc(lambda x: x, cov_semi64, bi,
                                           np.zeros(cov_semi64.d), 0, 1)


def test_subspace_poincare_check_rows():
    hmap = pm.random_map(4, 2, 3, 8, seed=10)
    rows = metrics.subspace_poincare_check(hmap, [0, 1, 2, 3, 4])
    assert len(rows) == 5
    for r, lhs, rhs in rows:
        assert lhs <= rhs + 1e-12
    assert rows[-1][1] == 0.0
