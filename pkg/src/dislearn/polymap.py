"""Hermite-polynomial test maps with closed-form derivatives and projections.

Maps act on whitened Gaussian coordinates and are finite chaos expansions
F(xi) = sum_alpha c_alpha * prod_i H_{alpha_i}(xi_i) in the normalized
probabilists' Hermite basis, so second moments, derivative energies,
conditional expectations, and the derivative/Hessian inverse constants are
all available in closed form.  This is the brute-force oracle layer for
the subspace-Poincare and inverse-inequality diagnostics.
"""

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from . import rng


def hermite_eval(n, t):
    """Normalized probabilists' Hermite H_n / sqrt(n!) at t (scalar or array).

    Uses the stable three-term recurrence
    H_{n+1}(t) = (t*H_n(t) - sqrt(n)*H_{n-1}(t)) / sqrt(n+1).
    """
    t = np.asarray(t, dtype=float)
    if n < 0:
        raise ValueError("Hermite order must be >= 0")
    h_prev = np.ones_like(t)
    if n == 0:
        return h_prev
    h = t.copy()
    for k in range(1, n):
        h, h_prev = (t * h - np.sqrt(k) * h_prev) / np.sqrt(k + 1.0), h
    return h


def hermite_table(n_max, t):
    """All orders 0..n_max at once; shape (n_max+1,) + t.shape."""
    t = np.asarray(t, dtype=float)
    out = np.empty((n_max + 1,) + t.shape)
    out[0] = 1.0
    if n_max >= 1:
        out[1] = t
    for k in range(1, n_max):
        out[k + 1] = (t * out[k] - np.sqrt(k) * out[k - 1]) / np.sqrt(k + 1.0)
    return out


@dataclass(frozen=True)
class HermiteMap:
    """Finite Wiener-chaos expansion with vector coefficients."""

    dim_in: int
    alphas: tuple          # tuple of multi-index tuples, each length dim_in
    coeffs: np.ndarray     # (n_terms, d_out)

    def __post_init__(self):
        if len(set(self.alphas)) != len(self.alphas):
            raise ValueError("duplicate multi-indices")
        if not np.all(np.isfinite(self.coeffs)):
            raise ValueError("non-finite coefficients")

    @property
    def d_out(self):
        return self.coeffs.shape[1]

    @property
    def degree(self):
        return max((sum(a) for a in self.alphas), default=0)

    def l2_norm_sq(self):
        """||F||^2 over the Gaussian = sum of squared coefficient norms."""
        return float(np.sum(self.coeffs**2))

    def mean(self):
        for a, c in zip(self.alphas, self.coeffs):
            if sum(a) == 0:
                return c.copy()
        return np.zeros(self.d_out)

    def derivative_energy(self):
        """E ||DF||_F^2 = sum_alpha |alpha| ||c_alpha||^2 (chaos identity)."""
        orders = np.array([sum(a) for a in self.alphas], dtype=float)
        return float(orders @ np.sum(self.coeffs**2, axis=1))

    def to_json(self):
        return {"dim_in": self.dim_in,
                "terms": [{"alpha": list(a), "c": c.tolist()}
                          for a, c in zip(self.alphas, self.coeffs)]}

    @classmethod
    def from_json(cls, obj):
        alphas = tuple(tuple(t["alpha"]) for t in obj["terms"])
        coeffs = np.array([t["c"] for t in obj["terms"]], dtype=float)
        return cls(dim_in=obj["dim_in"], alphas=alphas, coeffs=coeffs)


def _term_values(m, xi):
    """H_alpha(xi) for every term; xi of shape (dim_in,) or (N, dim_in)."""
    xi = np.asarray(xi, dtype=float)
    squeeze = xi.ndim == 1
    pts = xi[None, :] if squeeze else xi
    n_max = m.degree
    table = hermite_table(n_max, pts)        # (n_max+1, N, dim_in)
    vals = np.ones((len(m.alphas), pts.shape[0]))
    for t, a in enumerate(m.alphas):
        for i, ai in enumerate(a):
            if ai:
                vals[t] *= table[ai, :, i]
    return vals[:, 0] if squeeze else vals


def map_eval(m, xi):
    """F(xi); xi (dim_in,) -> (d_out,), or (N, dim_in) -> (N, d_out)."""
    vals = _term_values(m, xi)
    if vals.ndim == 1:
        return vals @ m.coeffs
    return vals.T @ m.coeffs


def map_jacobian(m, xi):
    """DF(xi) of shape (d_out, dim_in), using H_n' = sqrt(n) H_{n-1}."""
    xi = np.asarray(xi, dtype=float)
    table = hermite_table(m.degree, xi[None, :])  # (n_max+1, 1, dim_in)
    J = np.zeros((m.d_out, m.dim_in))
    for a, c in zip(m.alphas, m.coeffs):
        for k, ak in enumerate(a):
            if ak == 0:
                continue
            prod = np.sqrt(ak) * table[ak - 1, 0, k]
            for i, ai in enumerate(a):
                if i != k and ai:
                    prod *= table[ai, 0, i]
            J[:, k] += prod * c
    return J


def partial_derivative(m, k):
    """The map xi -> dF/dxi_k as a HermiteMap (H_n' = sqrt(n) H_{n-1})."""
    alphas = []
    coeffs = []
    for a, c in zip(m.alphas, m.coeffs):
        if a[k] == 0:
            continue
        down = list(a)
        down[k] -= 1
        alphas.append(tuple(down))
        coeffs.append(np.sqrt(a[k]) * c)
    if not alphas:
        return HermiteMap(dim_in=m.dim_in, alphas=(tuple([0] * m.dim_in),),
                          coeffs=np.zeros((1, m.d_out)))
    return HermiteMap(dim_in=m.dim_in, alphas=tuple(alphas),
                      coeffs=np.array(coeffs))


def conditional_expectation(m, retained):
    """Analytic E[F | sigma(xi_i, i in retained)]: drop terms leaving the set."""
    retained = set(retained)
    if not retained.issubset(range(1, m.dim_in + 1)):
        raise ValueError("retained coordinates must be within 1..dim_in")
    keep = [t for t, a in enumerate(m.alphas)
            if all(i + 1 in retained for i, ai in enumerate(a) if ai)]
    if not keep:
        return HermiteMap(dim_in=m.dim_in,
                          alphas=(tuple([0] * m.dim_in),),
                          coeffs=np.zeros((1, m.d_out)))
    return HermiteMap(dim_in=m.dim_in,
                      alphas=tuple(m.alphas[t] for t in keep),
                      coeffs=m.coeffs[keep])


# ---------------------------------------------------------------------------
# inverse-inequality constants
# ---------------------------------------------------------------------------

def _restricted_max_geneig(A, Bq, tol=1e-12):
    """max of <u,Au>/<u,Bu> over the range of B (both PSD)."""
    w, V = scipy.linalg.eigh(Bq)
    keep = w > tol * max(w.max(), 1e-300)
    if not np.any(keep):
        return 0.0
    Vk = V[:, keep]
    Ar = Vk.T @ A @ Vk
    Br = Vk.T @ Bq @ Vk
    return float(scipy.linalg.eigh(Ar, Br, eigvals_only=True).max())


def derivative_constant_forms(m):
    """Quadratic-form matrices (A, B) with <u,Au> = <u, H_Y u>, <u,Bu> = <u, C_Y u>."""
    A = np.zeros((m.d_out, m.d_out))
    Bq = np.zeros((m.d_out, m.d_out))
    for a, c in zip(m.alphas, m.coeffs):
        na = sum(a)
        if na == 0:
            continue
        cc = np.outer(c, c)
        A += na * cc
        Bq += cc
    return A, Bq


def hessian_constant_forms(m):
    """Quadratic forms in the direction v for the Hessian inverse inequality.

    With G_v = DF v = sum_beta g_beta(v) H_beta and
    g_beta(v) = sum_k v_k sqrt(beta_k + 1) c_{beta + e_k}:
    <v,Av> = sum |beta| ||g_beta||^2 (Hessian energy) and
    <v,Bv> = sum ||g_beta||^2 (derivative energy).
    """
    by_beta = {}
    for a, c in zip(m.alphas, m.coeffs):
        for k, ak in enumerate(a):
            if ak == 0:
                continue
            beta = list(a)
            beta[k] -= 1
            by_beta.setdefault(tuple(beta), []).append((k, np.sqrt(ak), c))
    A = np.zeros((m.dim_in, m.dim_in))
    Bq = np.zeros((m.dim_in, m.dim_in))
    for beta, entries in by_beta.items():
        nb = sum(beta)
        for k, sk, ck in entries:
            for l, sl, cl in entries:
                val = sk * sl * float(ck @ cl)
                Bq[k, l] += val
                A[k, l] += nb * val
    return A, Bq


def exact_constants(m):
    """(K_D, K_H) as exact generalized eigenvalues of the analytic forms."""
    kd = _restricted_max_geneig(*derivative_constant_forms(m))
    kh = _restricted_max_geneig(*hessian_constant_forms(m))
    return kd, kh


def verify_constants(m, n_probes=64, seed=0):
    """Observed (K_D, K_H) maxima over canonical plus random unit probes.

    The exact values are exposed by exact_constants(); the probe maxima are
    a sanity layer that can only fall below them.
    """
    Ad, Bd = derivative_constant_forms(m)
    Ah, Bh = hessian_constant_forms(m)
    gen = rng.stream(seed, rng.LANE_PROBE)

    def probe_max(A, Bq, dim):
        best = 0.0
        probes = [np.eye(dim)[i] for i in range(dim)]
        probes += list(gen.standard_normal((n_probes, dim)))
        for u in probes:
            den = u @ Bq @ u
            if den > 1e-14 * max(np.trace(Bq), 1e-300):
                best = max(best, (u @ A @ u) / den)
        return best

    return probe_max(Ad, Bd, m.d_out), probe_max(Ah, Bh, m.dim_in)


def subspace_poincare_sides(m, r):
    """Analytic (LHS, RHS) of the subspace inequality at rank r.

    LHS: energy of chaos terms not measurable from the first r coordinates.
    RHS: derivative energy through the truncated directions.
    """
    lhs = 0.0
    rhs = 0.0
    for a, c in zip(m.alphas, m.coeffs):
        e = float(c @ c)
        if any(ai for i, ai in enumerate(a) if i >= r):
            lhs += e
        rhs += sum(a[i] for i in range(r, m.dim_in)) * e
    return lhs, rhs


def random_map(dim_in, d_out, degree, n_terms, seed):
    """Random sparse Hermite map with the constant term included."""
    gen = rng.stream(seed, rng.LANE_PROBE, 1)
    alphas = {tuple([0] * dim_in)}
    guard = 0
    while len(alphas) < n_terms + 1 and guard < 50 * n_terms:
        guard += 1
        a = [0] * dim_in
        total = gen.integers(1, degree + 1)
        for _ in range(total):
            a[gen.integers(0, dim_in)] += 1
        alphas.add(tuple(a))
    alphas = tuple(sorted(alphas))
    coeffs = gen.standard_normal((len(alphas), d_out))
    return HermiteMap(dim_in=dim_in, alphas=alphas, coeffs=coeffs)
