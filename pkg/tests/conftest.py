import numpy as np
import pytest

from dislearn import field, pde, reduction


@pytest.fixture(scope="session")
def mesh64():
    return field.assemble_mesh(64)


@pytest.fixture(scope="session")
def cov_semi64(mesh64):
    return field.build_covariance(mesh64, 2.0, 10.0, 1.0)


@pytest.fixture(scope="session")
def cov_burg64(mesh64):
    return field.build_covariance(mesh64, 10.0, 20.0, 1.0)


@pytest.fixture(scope="session")
def prob_semi64(mesh64):
    return pde.semilinear_problem(mesh64)


@pytest.fixture(scope="session")
def prob_burg64(mesh64):
    return pde.burgers_problem(mesh64)


@pytest.fixture(scope="session")
def samples_semi64(prob_semi64, cov_semi64):
    return pde.generate_dataset(prob_semi64, cov_semi64, 60, seed=5)


@pytest.fixture(scope="session")
def samples_burg64(prob_burg64, cov_burg64):
    return pde.generate_dataset(prob_burg64, cov_burg64, 40, seed=6)


@pytest.fixture(scope="session")
def grams_semi64(samples_semi64, cov_semi64):
    return reduction.jacobian_gram_operators(samples_semi64, cov_semi64)


def make_linear_samples(problem, cov, A, N, seed):
    """SampleSet for the synthetic linear map y = A x with exact Jacobians."""
    d = problem.d
    X = np.empty((N, d))
    for k in range(N):
        X[k] = cov.sample_field(seed, index=k)
    Y = X @ A.T
    J = np.broadcast_to(A, (N, d, d)).copy()
    return pde.SampleSet(problem=problem, cov=cov, seed=seed, N=N,
                         X=X, Y=Y, J=J,
                         newton_iters=np.zeros(N, dtype=np.int64))
