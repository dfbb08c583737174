import numpy as np
import pytest

from dislearn import field


def test_mesh_closed_forms():
    m = field.assemble_mesh(2)
    M_expected = 0.5 * np.array([[1 / 3, 1 / 6, 0],
                                 [1 / 6, 2 / 3, 1 / 6],
                                 [0, 1 / 6, 1 / 3]])
    K_expected = np.array([[2.0, -2.0, 0.0], [-2.0, 4.0, -2.0], [0.0, -2.0, 2.0]])
    assert np.allclose(m.M, M_expected, atol=1e-15)
    assert np.allclose(m.K, K_expected, atol=1e-15)


def test_mesh_dimensions_and_mass():
    m = field.assemble_mesh(256)
    assert m.d == 257
    assert abs(m.M.sum() - 1.0) < 1e-12  # integral of 1*1 over (0,1)
    # SPD mass, PSD stiffness
    assert np.all(np.linalg.eigvalsh(m.M) > 0)
    assert np.linalg.eigvalsh(m.K).min() > -1e-12


def test_mesh_rejects_tiny():
    with pytest.raises(ValueError):
        field.assemble_mesh(1)


def test_covariance_invariants(mesh64):
    cov = field.build_covariance(mesh64, 2.0, 10.0, 1.0)
    d = mesh64.d
    gram = cov.Phi.T @ mesh64.M @ cov.Phi
    assert np.abs(gram - np.eye(d)).max() < 1e-10
    assert np.all(cov.mu > 0)
    assert np.all(np.diff(cov.mu) <= 1e-16)
    # alpha = 1: (a_d K + a_I M)^(-1) M phi_i = mu_i phi_i
    op = np.linalg.solve(2.0 * mesh64.K + 10.0 * mesh64.M, mesh64.M)
    for i in (0, 3, 17):
        err = np.linalg.norm(op @ cov.Phi[:, i] - cov.mu[i] * cov.Phi[:, i])
        assert err / cov.mu[i] < 1e-8


def test_covariance_rejects_nonpositive(mesh64):
    with pytest.raises(ValueError):
        field.build_covariance(mesh64, 0.0, 10.0, 1.0)
    with pytest.raises(ValueError):
        field.build_covariance(mesh64, 2.0, -1.0, 1.0)
    with pytest.raises(ValueError):
        field.build_covariance(mesh64, 2.0, 10.0, 0.0)


def test_sampling_modes(cov_semi64):
    cov = cov_semi64
    assert np.all(cov.unwhiten(np.zeros(cov.d)) == 0.0)
    e1 = np.zeros(cov.d)
    e1[0] = 1.0
    x = cov.unwhiten(e1)
    assert np.allclose(x, np.sqrt(cov.mu[0]) * cov.Phi[:, 0], atol=1e-15)


def test_sampling_determinism(cov_semi64):
    a = cov_semi64.sample_field(42, index=3)
    b = cov_semi64.sample_field(42, index=3)
    assert np.array_equal(a, b)
    c = cov_semi64.sample_field(42, index=4)
    assert not np.array_equal(a, c)


def test_monte_carlo_covariance_oracle(cov_semi64, mesh64):
    # <phi_1, x>_X^2 averages to mu_1 over many samples
    cov = cov_semi64
    n = 50_000
    vals = np.empty(n)
    phi1_M = mesh64.M @ cov.Phi[:, 0]
    for k in range(n):
        vals[k] = phi1_M @ cov.sample_field(123, index=k)
    mean = np.mean(vals**2)
    se = np.std(vals**2) / np.sqrt(n)
    assert abs(mean - cov.mu[0]) < 3 * se


def test_whiten_roundtrip(cov_semi64):
    gen = np.random.default_rng(0)
    xi = gen.standard_normal(cov_semi64.d)
    back = cov_semi64.whiten(cov_semi64.unwhiten(xi))
    assert np.abs(back - xi).max() < 1e-10
    x = cov_semi64.sample_field(9)
    assert np.abs(cov_semi64.unwhiten(cov_semi64.whiten(x)) - x).max() < 1e-10


def test_cm_inner_products(cov_semi64, mesh64):
    cov = cov_semi64
    phi1 = cov.Phi[:, 0]
    assert abs(cov.cm_inner(phi1, phi1) - 1.0 / cov.mu[0]) < 1e-8 / cov.mu[0]
    # dense-operator oracle: <w1, w2>_E = w1^T M C^{-1} w2
    gen = np.random.default_rng(1)
    w1 = cov.unwhiten(gen.standard_normal(cov.d))
    w2 = cov.unwhiten(gen.standard_normal(cov.d))
    Cinv = (cov.Phi / cov.mu) @ cov.Phi.T @ mesh64.M
    brute = w1 @ mesh64.M @ Cinv @ w2
    assert abs(cov.cm_inner(w1, w2) - brute) < 1e-8 * abs(brute)


def test_parseval_in_cm(cov_semi64):
    for seed in range(4):
        x = cov_semi64.sample_field(7, index=seed)
        xi = cov_semi64.whiten(x)
        lhs = float(xi @ xi)
        rhs = cov_semi64.cm_inner(x, x)
        assert abs(lhs - rhs) < 1e-9 * abs(rhs)


def test_sampling_mean_bound(cov_semi64, mesh64):
    n = 10_000
    acc = np.zeros(cov_semi64.d)
    for k in range(n):
        acc += cov_semi64.sample_field(55, index=k)
    mean = acc / n
    xnorm = np.sqrt(mean @ mesh64.M @ mean)
    assert xnorm < 5.0 * np.sqrt(cov_semi64.trace() / n)


def test_eigenvalue_decay_slope():
    mesh = field.assemble_mesh(256)
    cov = field.build_covariance(mesh, 2.0, 10.0, 1.0)
    idx = np.arange(19, 200)  # 1-based i in [20, 200]
    slope = np.polyfit(np.log(idx + 1), np.log(cov.mu[idx]), 1)[0]
    assert -2.3 < slope < -1.7


def test_sign_convention_deterministic(mesh64):
    a = field.build_covariance(mesh64, 2.0, 10.0, 1.0)
    b = field.build_covariance(mesh64, 2.0, 10.0, 1.0)
    assert np.array_equal(a.Phi, b.Phi)
    peak = np.argmax(np.abs(a.Phi), axis=0)
    assert np.all(a.Phi[peak, np.arange(a.d)] > 0)
