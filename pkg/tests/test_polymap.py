import json

import numpy as np
import pytest
from numpy.polynomial.hermite_e import hermegauss

from dislearn import polymap as pm


def test_hermite_base_cases():
    t = np.linspace(-3, 3, 11)
    assert np.array_equal(pm.hermite_eval(0, t), np.ones_like(t))
    assert np.array_equal(pm.hermite_eval(1, t), t)
    # H_2 from the Rodrigues definition, expanded by hand
    assert np.abs(pm.hermite_eval(2, t) - (t**2 - 1) / np.sqrt(2)).max() < 1e-14


def test_hermite_orthonormality_quadrature():
    t, w = hermegauss(200)
    w = w / np.sqrt(2 * np.pi)
    table = pm.hermite_table(8, t)
    for m in range(9):
        for n in range(9):
            val = np.sum(w * table[m] * table[n])
            assert abs(val - (1.0 if m == n else 0.0)) < 1e-10


def test_map_eval_and_parseval():
    m = pm.random_map(4, 3, 3, 10, seed=1)
    # Parseval: second moment equals the squared coefficient norm
    gen = np.random.default_rng(0)
    XI = gen.standard_normal((200_000, 4))
    vals = pm.map_eval(m, XI)
    mc = np.mean(np.sum(vals**2, axis=1))
    se = np.std(np.sum(vals**2, axis=1)) / np.sqrt(XI.shape[0])
    assert abs(mc - m.l2_norm_sq()) < 4 * se


def test_linear_map_constant_jacobian():
    alphas = ((0, 0), (1, 0))
    coeffs = np.array([[0.5, -1.0], [2.0, 3.0]])
    m = pm.HermiteMap(dim_in=2, alphas=alphas, coeffs=coeffs)
    J = pm.map_jacobian(m, np.array([0.3, -0.7]))
    expected = np.zeros((2, 2))
    expected[:, 0] = coeffs[1]
    assert np.abs(J - expected).max() < 1e-14


def test_map_jacobian_fd():
    m = pm.random_map(5, 3, 4, 12, seed=3)
    gen = np.random.default_rng(1)
    xi = gen.standard_normal(5)
    J = pm.map_jacobian(m, xi)
    eps = 1e-6
    for k in range(5):
        e = np.zeros(5)
        e[k] = eps
        fd = (pm.map_eval(m, xi + e) - pm.map_eval(m, xi - e)) / (2 * eps)
        assert np.abs(fd - J[:, k]).max() < 1e-7 * max(1.0, np.abs(J).max())


def test_derivative_energy_monte_carlo():
    m = pm.random_map(4, 2, 3, 8, seed=5)
    gen = np.random.default_rng(2)
    XI = gen.standard_normal((100_000, 4))
    # ||DF||_F^2 evaluated via the partial-derivative maps, vectorized
    total = np.zeros(XI.shape[0])
    for k in range(m.dim_in):
        pk = pm.partial_derivative(m, k)
        total += np.sum(pm.map_eval(pk, XI) ** 2, axis=1)
    mc = total.mean()
    se = total.std() / np.sqrt(XI.shape[0])
    assert abs(mc - m.derivative_energy()) < 3 * se


def test_partial_derivative_matches_jacobian():
    m = pm.random_map(3, 2, 3, 7, seed=9)
    xi = np.array([0.2, -1.1, 0.5])
    J = pm.map_jacobian(m, xi)
    for k in range(3):
        col = pm.map_eval(pm.partial_derivative(m, k), xi)
        assert np.abs(col - J[:, k]).max() < 1e-12


def test_conditional_expectation_structure():
    m = pm.random_map(4, 2, 3, 9, seed=7)
    full = pm.conditional_expectation(m, set(range(1, 5)))
    xi = np.array([0.1, 0.2, -0.3, 0.4])
    assert np.abs(pm.map_eval(full, xi) - pm.map_eval(m, xi)).max() < 1e-14
    none = pm.conditional_expectation(m, set())
    assert np.abs(pm.map_eval(none, xi) - m.mean()).max() < 1e-14


def test_conditional_expectation_nested_mc():
    m = pm.random_map(5, 3, 3, 10, seed=11)
    ce = pm.conditional_expectation(m, {1, 2})
    gen = np.random.default_rng(3)
    for probe in gen.standard_normal((10, 2)):
        Z = gen.standard_normal((4096, 5))
        Z[:, 0] = probe[0]
        Z[:, 1] = probe[1]
        vals = pm.map_eval(m, Z)
        mc = vals.mean(axis=0)
        se = vals.std(axis=0) / np.sqrt(Z.shape[0]) + 1e-300
        analytic = pm.map_eval(ce, np.array([probe[0], probe[1], 0, 0, 0]))
        assert np.all(np.abs(mc - analytic) <= 5 * se)


def test_constants_degree_one_exact():
    lin = pm.HermiteMap(dim_in=3, alphas=((0, 0, 0), (1, 0, 0), (0, 1, 0)),
                        coeffs=np.array([[1.0, 0.0], [2.0, 1.0], [0.0, 3.0]]))
    kd, kh = pm.exact_constants(lin)
    assert abs(kd - 1.0) < 1e-12
    assert kh == 0.0


def test_constants_pure_degree_term():
    pure = pm.HermiteMap(dim_in=2, alphas=((2, 1),),
                         coeffs=np.array([[1.0, 2.0]]))
    kd, _ = pm.exact_constants(pure)
    assert abs(kd - 3.0) < 1e-12


def test_constants_random_maps_bounded():
    gen = np.random.default_rng(4)
    for i in range(100):
        deg = int(gen.integers(1, 5))
        m = pm.random_map(dim_in=int(gen.integers(2, 7)),
                          d_out=int(gen.integers(1, 5)),
                          degree=deg, n_terms=int(gen.integers(3, 10)),
                          seed=1000 + i)
        n = m.degree
        kd, kh = pm.exact_constants(m)
        assert kd <= n + 1e-9
        assert kh <= max(n - 1, 0) + 1e-9
        kd_probe, kh_probe = pm.verify_constants(m, seed=i)
        assert kd_probe <= kd + 1e-9
        assert kh_probe <= kh + 1e-9


def test_constants_probe_agreement_mixed_degree():
    m = pm.random_map(4, 3, 3, 10, seed=21)
    kd, kh = pm.exact_constants(m)
    assert 1.0 - 1e-9 <= kd <= 3.0 + 1e-9
    kd_probe, kh_probe = pm.verify_constants(m, n_probes=2000, seed=0)
    # dense probing gets close to the generalized-eigenvalue optimum
    assert kd_probe <= kd + 1e-9
    assert kd_probe > 0.5 * kd


def test_poincare_equality_linear():
    lin = pm.HermiteMap(dim_in=3, alphas=((1, 0, 0), (0, 0, 1)),
                        coeffs=np.array([[1.0, 2.0], [3.0, -1.0]]))
    # E||F - mean||^2 == E||DF||_F^2 for degree-1 maps
    var = sum(float(c @ c) for a, c in zip(lin.alphas, lin.coeffs)
              if sum(a) >= 1)
    assert abs(var - lin.derivative_energy()) < 1e-14


def test_subspace_poincare_all_maps():
    gen = np.random.default_rng(6)
    for i in range(30):
        m = pm.random_map(dim_in=5, d_out=3,
                          degree=int(gen.integers(1, 5)),
                          n_terms=8, seed=2000 + i)
        for r in range(m.dim_in + 1):
            lhs, rhs = pm.subspace_poincare_sides(m, r)
            assert lhs <= rhs + 1e-12
        lhs, rhs = pm.subspace_poincare_sides(m, m.dim_in)
        assert lhs == 0.0 and rhs == 0.0


def test_subspace_poincare_degree_one_equality():
    lin = pm.HermiteMap(dim_in=4,
                        alphas=((1, 0, 0, 0), (0, 1, 0, 0), (0, 0, 0, 1)),
                        coeffs=np.array([[1.0], [2.0], [0.5]]))
    for r in range(5):
        lhs, rhs = pm.subspace_poincare_sides(lin, r)
        assert abs(lhs - rhs) < 1e-12


def test_json_roundtrip():
    m = pm.random_map(3, 2, 2, 6, seed=13)
    back = pm.HermiteMap.from_json(json.loads(json.dumps(m.to_json())))
    assert back.alphas == m.alphas
    assert np.array_equal(back.coeffs, m.coeffs)


def test_rejects_duplicates_and_nonfinite():
    with pytest.raises(ValueError):
        pm.HermiteMap(dim_in=2, alphas=((1, 0), (1, 0)),
                      coeffs=np.ones((2, 1)))
    with pytest.raises(ValueError):
        pm.HermiteMap(dim_in=2, alphas=((1, 0),),
                      coeffs=np.array([[np.nan]]))
