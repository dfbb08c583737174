"""Gaussian random field inputs on a 1D linear finite element mesh.

The input space is L2(0,1) discretized with linear elements.  The input
measure N(0, C) has covariance C = (a_delta*(-Lap) + a_I*I)^(-alpha),
represented spectrally through the generalized eigenproblem

    (a_delta*K + a_I*M) phi_i = rho_i * M phi_i,

so covariance eigenvalues are mu_i = rho_i^(-alpha) and all actions of
C^(+-1/2) and C^(-1) are exact.  Whitened coordinates xi (coefficients in
the frame sqrt(mu_i)*phi_i) carry the Cameron-Martin geometry: Euclidean
inner products of whitened vectors equal the Cameron-Martin inner product.

Objects here are immutable after construction and safe to share across
threads; sampling takes explicit (seed, index) substreams so parallel
sampling partitions seeds.
"""

from dataclasses import dataclass, field as dc_field

import numpy as np
import scipy.linalg

from . import rng


@dataclass(frozen=True)
class Mesh1D:
    """Uniform linear-FE mesh of [0,1] with consistent mass/stiffness matrices."""

    n_el: int
    nodes: np.ndarray
    M: np.ndarray  # mass matrix, SPD, full (no lumping)
    K: np.ndarray  # stiffness ∫ u'v', symmetric PSD
    _cache: dict = dc_field(default_factory=dict, repr=False, compare=False)

    @property
    def d(self):
        return self.n_el + 1

    @property
    def h(self):
        return 1.0 / self.n_el

    def mass_sqrt(self):
        """Symmetric square root of M (dense, computed once and cached)."""
        if "B" not in self._cache:
            w, V = scipy.linalg.eigh(self.M)
            self._cache["B"] = (V * np.sqrt(w)) @ V.T
            self._cache["Binv"] = (V / np.sqrt(w)) @ V.T
        return self._cache["B"]

    def mass_sqrt_inv(self):
        self.mass_sqrt()
        return self._cache["Binv"]


def assemble_mesh(n_el):
    """Assemble the uniform mesh with n_el linear elements on [0,1]."""
    if n_el < 2:
        raise ValueError(f"need at least 2 elements, got {n_el}")
    d = n_el + 1
    h = 1.0 / n_el
    nodes = np.linspace(0.0, 1.0, d)

    M = np.zeros((d, d))
    K = np.zeros((d, d))
    # element matrices: mass h/6*[[2,1],[1,2]], stiffness 1/h*[[1,-1],[-1,1]]
    for e in range(n_el):
        i = e
        M[i:i + 2, i:i + 2] += (h / 6.0) * np.array([[2.0, 1.0], [1.0, 2.0]])
        K[i:i + 2, i:i + 2] += (1.0 / h) * np.array([[1.0, -1.0], [-1.0, 1.0]])
    return Mesh1D(n_el=n_el, nodes=nodes, M=M, K=K)


def _fix_signs(vecs):
    """Flip columns so the largest-magnitude entry is positive (first on ties)."""
    idx = np.argmax(np.abs(vecs), axis=0)
    signs = np.sign(vecs[idx, np.arange(vecs.shape[1])])
    signs[signs == 0] = 1.0
    return vecs * signs


@dataclass(frozen=True)
class SpectralCovariance:
    """Dense eigen-representation of C = (a_delta*K + a_I*M)^(-alpha) wrt M."""

    mesh: Mesh1D
    a_delta: float
    a_I: float
    alpha: float
    Phi: np.ndarray  # d x d, columns M-orthonormal, descending mu order
    rho: np.ndarray  # operator eigenvalues, ascending
    mu: np.ndarray   # covariance eigenvalues rho^(-alpha), descending

    @property
    def d(self):
        return self.mesh.d

    def params(self):
        return {"a_delta": self.a_delta, "a_I": self.a_I, "alpha": self.alpha,
                "n_el": self.mesh.n_el}

    # -- whitening -------------------------------------------------------
    def whiten(self, x):
        """Cameron-Martin coordinates xi_i = mu_i^(-1/2) * phi_i^T M x.

        Accepts a vector (d,) or a stack (..., d); returns matching shape.
        """
        proj = x @ (self.mesh.M @ self.Phi)
        return proj / np.sqrt(self.mu)

    def unwhiten(self, xi):
        """Inverse of whiten: x = sum_i sqrt(mu_i) xi_i phi_i."""
        return (xi * np.sqrt(self.mu)) @ self.Phi.T

    def cm_inner(self, w1, w2):
        """Cameron-Martin inner product <w1, w2>_E."""
        return float(self.whiten(w1) @ self.whiten(w2))

    def x_inner(self, u, v):
        """L2 (mass-weighted) inner product on the mesh."""
        return float(u @ self.mesh.M @ v)

    # -- sampling --------------------------------------------------------
    def sample_field(self, seed, index=0):
        """One draw x ~ N(0, C) from substream (seed, index)."""
        xi = rng.standard_normals(seed, rng.LANE_FIELD, index, self.d)
        return self.unwhiten(xi)

    def sample_whitened(self, seed, index=0):
        """The underlying standard-normal coordinates of sample (seed, index)."""
        return rng.standard_normals(seed, rng.LANE_FIELD, index, self.d)

    def trace(self):
        """tr C = E ||x||_X^2."""
        return float(np.sum(self.mu))

    def dense_covariance(self):
        """C as a nodal matrix: x-representer of the covariance, Phi diag(mu) Phi^T."""
        return (self.Phi * self.mu) @ self.Phi.T


def build_covariance(mesh, a_delta, a_I, alpha):
    """Solve the dense generalized eigenproblem defining the input measure."""
    if a_delta <= 0 or a_I <= 0 or alpha <= 0:
        raise ValueError("covariance coefficients a_delta, a_I, alpha must be positive")
    A = a_delta * mesh.K + a_I * mesh.M
    try:
        rho, Phi = scipy.linalg.eigh(A, mesh.M)
    except scipy.linalg.LinAlgError as exc:  # pragma: no cover
        raise RuntimeError(f"generalized eigensolver failed: {exc}") from exc
    # eigh returns ascending rho with Phi^T M Phi = I; mu = rho^-alpha descends
    Phi = _fix_signs(Phi)
    mu = rho ** (-alpha)
    return SpectralCovariance(mesh=mesh, a_delta=a_delta, a_I=a_I, alpha=alpha,
                              Phi=Phi, rho=rho, mu=mu)
