"""Reduced bases: input/output PCA and derivative-informed subspaces (DIS).

Input-side bases are orthonormal in the Cameron-Martin inner product (their
whitened coordinate vectors are Euclidean-orthonormal); output-side bases
are orthonormal in the mass-weighted L2 inner product.  All eigenproblems
are solved densely in whitened or M^(1/2) coordinates, so the empirical
reconstruction identities (training reconstruction error equals the
trailing eigenvalue sum) hold to machine precision.

Empirical operators use the biased 1/N estimators.  Jacobian Gram
accumulation streams over samples in chunks (Jacobian stacks may be
disk-backed) and combines chunk partials with pairwise summation so the
result is independent of the reduction order.
"""

from dataclasses import dataclass, field as dc_field

import numpy as np
import scipy.linalg

INPUT_PCA = "input_pca"
OUTPUT_PCA = "output_pca"
INPUT_DIS = "input_dis"
OUTPUT_DIS = "output_dis"
INPUT_KINDS = (INPUT_PCA, INPUT_DIS)
OUTPUT_KINDS = (OUTPUT_PCA, OUTPUT_DIS)

EIG_CLAMP_REL = 1e-14  # eigenvalues below this times the top one count as zero


def exact_source():
    return {"type": "exact"}


def empirical_source(N, seed):
    return {"type": "empirical", "N": int(N), "seed": int(seed)}


@dataclass
class ReducedBasis:
    """r decoder columns, the full eigenvalue list, and a mean shift.

    cols holds nodal coordinates; eigs always has length d so trailing sums
    are available past r.  mean is the empirical output mean for output
    bases and the zero vector otherwise.
    """

    kind: str
    source: dict
    r: int
    cols: np.ndarray   # (d, r)
    eigs: np.ndarray   # (d,)
    mean: np.ndarray   # (d,)
    mesh: object
    cov: object        # SpectralCovariance for input bases (None allowed on output)
    _cache: dict = dc_field(default_factory=dict, repr=False)

    @property
    def d(self):
        return self.cols.shape[0]

    def is_input(self):
        return self.kind in INPUT_KINDS

    def whitened_cols(self):
        """Input bases: cols in whitened coordinates (Euclidean-orthonormal)."""
        if "W" not in self._cache:
            if not self.is_input():
                raise ValueError(f"{self.kind} has no whitened columns")
            self._cache["W"] = self.cov.whiten(self.cols.T).T
        return self._cache["W"]

    def mass_cols(self):
        """Output bases: M^(1/2) cols (Euclidean-orthonormal)."""
        if "BU" not in self._cache:
            if self.is_input():
                raise ValueError(f"{self.kind} has no mass-weighted columns")
            self._cache["BU"] = self.mesh.mass_sqrt() @ self.cols
        return self._cache["BU"]

    def truncate(self, r):
        """View of the same basis at a smaller rank."""
        if r > self.r:
            raise ValueError(f"rank {r} exceeds stored rank {self.r}")
        return ReducedBasis(kind=self.kind, source=self.source, r=r,
                            cols=self.cols[:, :r], eigs=self.eigs,
                            mean=self.mean, mesh=self.mesh, cov=self.cov)


def _fix_signs_nodal(cols):
    idx = np.argmax(np.abs(cols), axis=0)
    signs = np.sign(cols[idx, np.arange(cols.shape[1])])
    signs[signs == 0] = 1.0
    return cols * signs


def _descending(vals, vecs):
    """Stable descending reorder; ties keep the solver's ascending order."""
    order = np.argsort(-vals, kind="stable")
    return vals[order], vecs[:, order]


# ---------------------------------------------------------------------------
# pairwise-streamed Jacobian Gram operators
# ---------------------------------------------------------------------------

def _pairwise_combine(parts):
    parts = list(parts)
    while len(parts) > 1:
        nxt = [parts[i] + parts[i + 1] for i in range(0, len(parts) - 1, 2)]
        if len(parts) % 2:
            nxt.append(parts[-1])
        parts = nxt
    return parts[0]


def whitened_jacobian_chunk(Jc, mesh, cov):
    """Jacobian stack mapped to the (E, Y) frame: B J W per slice."""
    return np.matmul(mesh.mass_sqrt(), np.matmul(Jc, cov.Phi * np.sqrt(cov.mu)))


def _chunk_grams(C):
    """(sum_k C_k^T C_k, sum_k C_k C_k^T) via two stacked BLAS products."""
    c, d, _ = C.shape
    Cv = C.reshape(c * d, d)
    Gx = Cv.T @ Cv
    Dv = np.ascontiguousarray(C.transpose(0, 2, 1)).reshape(c * d, d)
    Gy = Dv.T @ Dv
    return Gx, Gy


def jacobian_gram_operators(samples, cov, chunk=64):
    """Empirical sensitivity operators (1/N sums of Jacobian Grams).

    Returns (Hx, Hy): Hx in whitened input coordinates (xi -> xi) and Hy in
    M^(1/2) output coordinates, both symmetric d x d.  Streams over the
    Jacobian stack chunk by chunk.
    """
    J = samples.require_jacobians()
    N = samples.N
    parts_x, parts_y = [], []
    for lo in range(0, N, chunk):
        C = whitened_jacobian_chunk(np.asarray(J[lo:lo + chunk]),
                                    samples.problem.mesh, cov)
        gx, gy = _chunk_grams(C)
        parts_x.append(gx)
        parts_y.append(gy)
    Hx = _pairwise_combine(parts_x) / N
    Hy = _pairwise_combine(parts_y) / N
    return 0.5 * (Hx + Hx.T), 0.5 * (Hy + Hy.T)


def hs_norm_sq_jacobians(samples, cov, chunk=64):
    """Per-sample squared HS(E, Y) norms of the stored Jacobians."""
    J = samples.require_jacobians()
    out = np.empty(samples.N)
    for lo in range(0, samples.N, chunk):
        C = whitened_jacobian_chunk(np.asarray(J[lo:lo + chunk]),
                                    samples.problem.mesh, cov)
        out[lo:lo + C.shape[0]] = np.einsum("kij,kij->k", C, C)
    return out


def streamed_dataset_operators(problem, cov, N, seed, chunk=128):
    """Generate a dataset while accumulating its Jacobian Gram operators.

    Jacobians are reduced to the two d x d sensitivity operators chunk by
    chunk and discarded, so arbitrarily large N fits in memory.  Returns
    (samples, (Hx, Hy)) where samples carries X and Y but no Jacobian
    stack; the operators match jacobian_gram_operators on a stored stack.
    """
    from . import pde

    d = problem.d
    X = np.empty((N, d))
    Y = np.empty((N, d))
    iters = np.empty(N, dtype=np.int64)
    Jbuf = np.empty((min(chunk, N), d, d))
    parts_x, parts_y = [], []
    for lo in range(0, N, chunk):
        hi = min(lo + chunk, N)
        for k in range(lo, hi):
            x = cov.sample_field(seed, index=k)
            try:
                y, its = pde.solve(problem, x)
            except pde.NonConvergence as exc:
                exc.sample_index = k
                raise
            X[k] = x
            Y[k] = y
            iters[k] = its
            Jbuf[k - lo] = pde.jacobian(problem, x, y)
        gx, gy = _chunk_grams(
            whitened_jacobian_chunk(Jbuf[:hi - lo], problem.mesh, cov))
        parts_x.append(gx)
        parts_y.append(gy)
    Hx = _pairwise_combine(parts_x) / N
    Hy = _pairwise_combine(parts_y) / N
    samples = pde.SampleSet(problem=problem, cov=cov, seed=seed, N=N,
                            X=X, Y=Y, J=None, newton_iters=iters)
    return samples, (0.5 * (Hx + Hx.T), 0.5 * (Hy + Hy.T))


# ---------------------------------------------------------------------------
# basis constructions
# ---------------------------------------------------------------------------

def input_pca(cov, r):
    """Exact input PCA: leading covariance eigenvectors, Cameron-Martin normalized."""
    if r > cov.d:
        raise ValueError(f"rank {r} exceeds dimension {cov.d}")
    cols = cov.Phi[:, :r] * np.sqrt(cov.mu[:r])
    return ReducedBasis(kind=INPUT_PCA, source=exact_source(), r=r,
                        cols=cols, eigs=cov.mu.copy(), mean=np.zeros(cov.d),
                        mesh=cov.mesh, cov=cov)


def output_pca(samples, r):
    """Empirical centered output PCA via thin SVD in M^(1/2) coordinates."""
    if samples.N < 2:
        raise ValueError("output PCA needs at least 2 samples")
    mesh = samples.problem.mesh
    d = mesh.d
    if r > d:
        raise ValueError(f"rank {r} exceeds dimension {d}")
    B = mesh.mass_sqrt()
    fhat = samples.Y.mean(axis=0)
    Z = (B @ (samples.Y - fhat).T) / np.sqrt(samples.N)
    need_full = r > min(d, samples.N)
    U, s, _ = scipy.linalg.svd(Z, full_matrices=need_full)
    eigs = np.zeros(d)
    eigs[:s.shape[0]] = s**2
    cols = _fix_signs_nodal(mesh.mass_sqrt_inv() @ U[:, :r])
    return ReducedBasis(kind=OUTPUT_PCA,
                        source=empirical_source(samples.N, samples.seed), r=r,
                        cols=cols, eigs=eigs, mean=fhat, mesh=mesh, cov=samples.cov)


def input_dis(samples, cov, r, grams=None):
    """Empirical input DIS: eigenvectors of the averaged J*J Gram in E."""
    if r > cov.d:
        raise ValueError(f"rank {r} exceeds dimension {cov.d}")
    Hx = grams[0] if grams is not None else jacobian_gram_operators(samples, cov)[0]
    vals, vecs = scipy.linalg.eigh(Hx)
    vals, vecs = _descending(np.maximum(vals, 0.0), vecs)
    cols = _fix_signs_nodal(cov.unwhiten(vecs[:, :r].T).T)
    return ReducedBasis(kind=INPUT_DIS,
                        source=empirical_source(samples.N, samples.seed), r=r,
                        cols=cols, eigs=vals, mean=np.zeros(cov.d),
                        mesh=cov.mesh, cov=cov)


def output_dis(samples, r, grams=None):
    """Empirical output DIS: eigenvectors of the averaged J J* Gram in Y."""
    mesh = samples.problem.mesh
    if r > mesh.d:
        raise ValueError(f"rank {r} exceeds dimension {mesh.d}")
    Hy = grams[1] if grams is not None else \
        jacobian_gram_operators(samples, samples.cov)[1]
    vals, vecs = scipy.linalg.eigh(Hy)
    vals, vecs = _descending(np.maximum(vals, 0.0), vecs)
    cols = _fix_signs_nodal(mesh.mass_sqrt_inv() @ vecs[:, :r])
    return ReducedBasis(kind=OUTPUT_DIS,
                        source=empirical_source(samples.N, samples.seed), r=r,
                        cols=cols, eigs=vals, mean=samples.Y.mean(axis=0),
                        mesh=mesh, cov=samples.cov)


BUILDERS = {
    INPUT_PCA: lambda samples, cov, r: input_pca(cov, r),
    OUTPUT_PCA: lambda samples, cov, r: output_pca(samples, r),
    INPUT_DIS: lambda samples, cov, r: input_dis(samples, cov, r),
    OUTPUT_DIS: lambda samples, cov, r: output_dis(samples, r),
}


# ---------------------------------------------------------------------------
# encoders / decoders / projections
# ---------------------------------------------------------------------------

def _check_side(basis, want_input):
    if basis.is_input() != want_input:
        side = "input" if want_input else "output"
        raise ValueError(f"{basis.kind} used as an {side} basis")


def encode_input(basis, x):
    """Cameron-Martin coefficients of x in the basis; x may be (d,) or (N, d)."""
    _check_side(basis, True)
    return basis.cov.whiten(x) @ basis.whitened_cols()


def decode_input(basis, s):
    _check_side(basis, True)
    return s @ basis.cols.T


def encode_output(basis, y):
    """Mass-weighted coefficients of y (no mean handling here)."""
    _check_side(basis, False)
    return y @ (basis.mesh.M @ basis.cols)


def decode_output(basis, q):
    _check_side(basis, False)
    return q @ basis.cols.T


def project(basis, v):
    """decode(encode(v)): rank-r orthogonal projection on the basis's side."""
    if basis.is_input():
        return decode_input(basis, encode_input(basis, v))
    return decode_output(basis, encode_output(basis, v))


def reduce_jacobian(J, out_basis, in_basis):
    """Latent-space Jacobian target G = U^T M J V for one Jacobian or a stack."""
    _check_side(out_basis, False)
    _check_side(in_basis, True)
    if J.shape[-2:] != (out_basis.d, in_basis.d):
        raise ValueError(f"Jacobian shape {J.shape} does not match bases")
    UtM = out_basis.cols.T @ out_basis.mesh.M
    return UtM @ J @ in_basis.cols


def trailing_sum(basis, r):
    """Sum of the eigenvalues past rank r."""
    if r > basis.d:
        raise ValueError(f"rank {r} exceeds dimension {basis.d}")
    return float(np.sum(basis.eigs[r:]))


def constraint_check(basis, Bmat, h):
    """Max violation of B f = h over retained basis columns and the mean.

    Columns with (numerically) zero eigenvalues are excluded; the
    constraint-preservation property only covers nonzero eigenvalues.
    """
    Bmat = np.atleast_2d(Bmat)
    keep = basis.eigs[:basis.r] > EIG_CLAMP_REL * max(basis.eigs[0], 1e-300)
    viol = np.abs(Bmat @ basis.mean - h).max()
    if np.any(keep):
        viol = max(viol, np.abs(Bmat @ basis.cols[:, keep]).max())
    return float(viol)


def random_output_projection(mesh, r, gen):
    """Random rank-r M-orthonormal columns (for optimality comparisons)."""
    Z = gen.standard_normal((mesh.d, r))
    Q, _ = np.linalg.qr(mesh.mass_sqrt() @ Z)
    return mesh.mass_sqrt_inv() @ Q
