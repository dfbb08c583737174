"""Error diagnostics: reconstruction errors, excess risks, generalization
errors, rate regressions, and Monte Carlo conditional expectations.

Squared-error ratios are always ratios of sums over the test set (never
means of per-sample ratios), so they are invariant under rescaling the
test size.  Hilbert-Schmidt contractions of Jacobians are evaluated in the
whitened-input / M^(1/2)-output frame, where the (E, Y) Hilbert-Schmidt
norm is the Frobenius norm.

For repeated evaluations against one test set, second-moment operators
(TestMoments) are computed once by streaming over the stored Jacobians;
every projection-type metric is then a cheap trace form.  The direct
per-sample implementations remain available and agree to machine
precision (they evaluate the same sums).
"""

from dataclasses import dataclass

import numpy as np

from . import reduction, surrogate as sg


@dataclass
class ErrorReport:
    """A named nonnegative ratio with its normalization recorded."""

    name: str
    value: float
    numerator: float
    denominator: float
    n_test: int
    provenance: dict

    def __post_init__(self):
        if self.denominator <= 0:
            raise ValueError(f"{self.name}: non-positive denominator")
        if self.value < -1e-12:
            raise ValueError(f"{self.name}: negative value {self.value}")


def _report(name, num, den, n, prov=None):
    return ErrorReport(name=name, value=num / den, numerator=num,
                       denominator=den, n_test=n, provenance=prov or {})


CSV_HEADER = "metric,problem,basis_in,basis_out,rank,n_train,seed,value,denominator"


def csv_row(metric, problem, basis_in, basis_out, rank, n_train, seed, value,
            denominator):
    return (f"{metric},{problem},{basis_in},{basis_out},{rank},{n_train},"
            f"{seed},{value:.16e},{denominator:.16e}")


# ---------------------------------------------------------------------------
# test-set second moments
# ---------------------------------------------------------------------------

@dataclass
class TestMoments:
    """Streaming second moments of a test set in the (E, Y) frame."""

    n: int
    mesh: object
    cov: object
    sum_y: np.ndarray     # sum of outputs
    gram_y: np.ndarray    # sum (B y)(B y)^T
    gram_jx: np.ndarray   # sum Jt^T M Jt   (whitened input coords)
    gram_jy: np.ndarray   # sum (B Jt)(B Jt)^T

    @property
    def sum_y2(self):
        return float(np.trace(self.gram_y))

    @property
    def sum_j2(self):
        return float(np.trace(self.gram_jx))

    def mean_y(self):
        return self.sum_y / self.n

    def centered_energy(self):
        """sum ||y_k - mean||_Y^2."""
        Bm = self.mesh.mass_sqrt() @ self.mean_y()
        return self.sum_y2 - self.n * float(Bm @ Bm)


def test_moments(samples, chunk=64):
    """Accumulate TestMoments over a SampleSet (Jacobians streamed)."""
    J = samples.require_jacobians()
    mesh = samples.problem.mesh
    cov = samples.cov
    B = mesh.mass_sqrt()
    parts = None
    for lo in range(0, samples.N, chunk):
        BY = samples.Y[lo:lo + chunk] @ B
        C = reduction.whitened_jacobian_chunk(np.asarray(J[lo:lo + chunk]),
                                              mesh, cov)
        gx, gy = reduction._chunk_grams(C)
        p = [BY.T @ BY, gx, gy]
        parts = p if parts is None else [a + b for a, b in zip(parts, p)]
    return TestMoments(n=samples.N, mesh=mesh, cov=cov,
                       sum_y=samples.Y.sum(axis=0),
                       gram_y=parts[0], gram_jx=parts[1], gram_jy=parts[2])


def _residual_energy_y(m, basis, center):
    """sum ||(I - P)(y_k - center)||_Y^2 from moments (P from an output basis)."""
    B = m.mesh.mass_sqrt()
    Bc = B @ center
    Bs = B @ m.sum_y
    BU = basis.mass_cols()
    total = m.sum_y2 - 2.0 * float(Bc @ Bs) + m.n * float(Bc @ Bc)
    GU = BU.T @ m.gram_y @ BU
    sU = BU.T @ Bs
    cU = BU.T @ Bc
    inside = float(np.trace(GU)) - 2.0 * float(cU @ sU) + m.n * float(cU @ cU)
    return total - inside


def _residual_energy_jac_out(m, basis):
    """sum ||(I - P) Jt_k||_HS^2."""
    BU = basis.mass_cols()
    return float(np.trace(m.gram_jy)) - float(np.trace(BU.T @ m.gram_jy @ BU))


def _residual_energy_jac_in(m, basis):
    """sum ||Jt_k (I - Q)||_HS^2."""
    W = basis.whitened_cols()
    return float(np.trace(m.gram_jx)) - float(np.trace(W.T @ m.gram_jx @ W))


def reconstruction_errors(samples, basis, moments=None):
    """The reconstruction errors a basis is responsible for, as ratios.

    Output bases: {"output": ..., "jacobian_out": ...}; input bases:
    {"jacobian_in": ...}.  Denominators are the centered output energy and
    the Jacobian energy of the test set.
    """
    m = moments if moments is not None else test_moments(samples)
    prov = {"basis": basis.kind, "source": basis.source, "r": basis.r}
    out = {}
    if basis.is_input():
        out["jacobian_in"] = _report("jacobian_in",
                                     _residual_energy_jac_in(m, basis),
                                     m.sum_j2, m.n, prov)
    else:
        out["output"] = _report("output",
                                _residual_energy_y(m, basis, basis.mean),
                                m.centered_energy(), m.n, prov)
        out["jacobian_out"] = _report("jacobian_out",
                                      _residual_energy_jac_out(m, basis),
                                      m.sum_j2, m.n, prov)
    return out


EXCESS_METRIC = {reduction.OUTPUT_PCA: "output",
                 reduction.OUTPUT_DIS: "jacobian_out",
                 reduction.INPUT_DIS: "jacobian_in"}


def excess_risk(small_basis, reference_basis, samples, moments=None):
    """Reconstruction-error gap between an empirical basis and a reference.

    Both are evaluated on the same test set with the metric the basis kind
    is responsible for; slightly negative values (test noise) are reported
    as-is.
    """
    if small_basis.kind != reference_basis.kind:
        raise ValueError("bases have different kinds")
    if small_basis.r != reference_basis.r:
        raise ValueError("bases have different ranks")
    metric = EXCESS_METRIC.get(small_basis.kind)
    if metric is None:
        raise ValueError(f"no excess-risk metric for {small_basis.kind}")
    m = moments if moments is not None else test_moments(samples)
    small = reconstruction_errors(samples, small_basis, m)[metric]
    ref = reconstruction_errors(samples, reference_basis, m)[metric]
    return small.value - ref.value


def excess_risk_bound(operator_small, operator_ref, eigs_ref, r):
    """min of the global sqrt(2r) and local gap-form projection-error bounds.

    Operators are the dense symmetric matrices whose eigenvectors define
    the two bases (in their orthonormal coordinate frame); eigs_ref are the
    reference eigenvalues, descending.
    """
    dist = float(np.linalg.norm(operator_small - operator_ref))
    global_bound = np.sqrt(2.0 * r) * dist
    gap = eigs_ref[r - 1] - eigs_ref[r]
    local_bound = np.inf if gap <= 0 else 2.0 * dist**2 / gap
    return min(global_bound, local_bound)


def trace_excess(operator_ref, basis_small, basis_ref):
    """tr(A_ref (P_ref - P_hat)) with both projections in operator coords."""
    if basis_small.is_input():
        Ps = basis_small.whitened_cols()
        Pr = basis_ref.whitened_cols()
    else:
        Ps = basis_small.mass_cols()
        Pr = basis_ref.mass_cols()
    return float(np.trace(Pr.T @ operator_ref @ Pr)
                 - np.trace(Ps.T @ operator_ref @ Ps))


# ---------------------------------------------------------------------------
# surrogate generalization errors
# ---------------------------------------------------------------------------

def l2_error(samples, surr, chunk=512):
    """Relative squared output error: sum ||y - yhat||_Y^2 / sum ||y||_Y^2."""
    if samples.N == 0:
        raise ValueError("empty test set")
    M = samples.problem.mesh.M
    num = 0.0
    den = 0.0
    for lo in range(0, samples.N, chunk):
        Y = samples.Y[lo:lo + chunk]
        diff = Y - sg.predict(surr, samples.X[lo:lo + chunk])
        num += float(np.einsum("ki,ij,kj->", diff, M, diff))
        den += float(np.einsum("ki,ij,kj->", Y, M, Y))
    return _report("l2", num, den, samples.N)


def h1_semi_error(samples, surr, chunk=64):
    """Relative squared Jacobian error in HS(E, Y), computed directly."""
    J = samples.require_jacobians()
    mesh = samples.problem.mesh
    BU = mesh.mass_sqrt() @ surr.out_basis.cols
    Wb = surr.in_basis.whitened_cols()
    num = 0.0
    den = 0.0
    for lo in range(0, samples.N, chunk):
        C = reduction.whitened_jacobian_chunk(np.asarray(J[lo:lo + chunk]),
                                              mesh, samples.cov)
        S = reduction.encode_input(surr.in_basis, samples.X[lo:lo + chunk])
        Jlat = sg.net_jacobian(surr.net, S)
        Chat = np.einsum("ij,kjl,ml->kim", BU, Jlat, Wb)
        num += float(np.einsum("kij,kij->", C - Chat, C - Chat))
        den += float(np.einsum("kij,kij->", C, C))
    return _report("h1_semi", num, den, samples.N)


@dataclass
class PairTestData:
    """Encoded test set for one basis pair plus its net-independent energies."""

    in_basis: object
    out_basis: object
    S: np.ndarray
    Q: np.ndarray          # encoded mean-shifted outputs
    G: np.ndarray          # reduced test Jacobians
    recon_out: float       # sum ||(I-P)(y - mean)||_Y^2
    recon_jac: float       # sum ||Jt||^2 - sum ||G||_F^2
    sum_y2: float
    sum_j2: float
    n: int


def encode_test_pair(samples, in_basis, out_basis, moments=None, chunk=256):
    """Latent test tuples and residual energies for fast repeated evaluation."""
    m = moments if moments is not None else test_moments(samples)
    S = reduction.encode_input(in_basis, samples.X)
    Q = reduction.encode_output(out_basis, samples.Y - out_basis.mean)
    J = samples.require_jacobians()
    UtM = out_basis.cols.T @ out_basis.mesh.M
    V = in_basis.cols
    G = np.empty((samples.N, out_basis.r, in_basis.r))
    for lo in range(0, samples.N, chunk):
        G[lo:lo + chunk] = UtM @ np.asarray(J[lo:lo + chunk]) @ V
    return PairTestData(
        in_basis=in_basis, out_basis=out_basis, S=S, Q=Q, G=G,
        recon_out=_residual_energy_y(m, out_basis, out_basis.mean),
        recon_jac=m.sum_j2 - float(np.einsum("kij,kij->", G, G)),
        sum_y2=m.sum_y2, sum_j2=m.sum_j2, n=m.n)


def surrogate_errors(pair, net):
    """(l2, h1) reports via the exact orthogonal error decomposition.

    The full-space squared error splits into the latent misfit plus the
    net-independent reconstruction energy of the pair, so no full-space
    fields or Jacobians are rebuilt.
    """
    pred = sg.forward(net, pair.S)
    l2_num = float(np.einsum("ki,ki->", pair.Q - pred, pair.Q - pred)) \
        + pair.recon_out
    Jlat = sg.net_jacobian(net, pair.S)
    dG = pair.G - Jlat
    h1_num = float(np.einsum("kij,kij->", dG, dG)) + pair.recon_jac
    return (_report("l2", l2_num, pair.sum_y2, pair.n),
            _report("h1_semi", h1_num, pair.sum_j2, pair.n))


def error_decomposition(pair, net, moments):
    """Independently computed upper-bound terms for the measured errors.

    Returns {"l2": (measured, latent, recon, mean_shift),
             "h1": (measured, latent, jac_in, jac_out)}; the measured
    squared errors never exceed the sums of their terms.
    """
    m = moments
    pred = sg.forward(net, pair.S)
    latent_l2 = float(np.einsum("ki,ki->", pair.Q - pred, pair.Q - pred))
    ybar = m.mean_y()
    recon_centered = _residual_energy_y(m, pair.out_basis, ybar)
    shift = ybar - pair.out_basis.mean
    proj = reduction.project(pair.out_basis, shift)
    Bres = m.mesh.mass_sqrt() @ (shift - proj)
    mean_shift = m.n * float(Bres @ Bres)
    l2_measured = latent_l2 + pair.recon_out

    Jlat = sg.net_jacobian(net, pair.S)
    dG = pair.G - Jlat
    latent_h1 = float(np.einsum("kij,kij->", dG, dG))
    jac_in = _residual_energy_jac_in(m, pair.in_basis)
    jac_out = _residual_energy_jac_out(m, pair.out_basis)
    h1_measured = latent_h1 + pair.recon_jac
    return {"l2": (l2_measured, latent_l2, recon_centered, mean_shift),
            "h1": (h1_measured, latent_h1, jac_in, jac_out)}


# ---------------------------------------------------------------------------
# Monte Carlo conditional expectation
# ---------------------------------------------------------------------------

def conditional_expectation_mc(func, cov, in_basis, x, n_inner, seed):
    """(1/M) sum_m F(Q x + (I - Q) z_m) with fresh field samples z_m.

    func maps a nodal input vector to an output vector.  The optimal ridge
    function (conditional expectation given the encoded input) has exactly
    this representation for Gaussian inputs.
    """
    if n_inner < 1:
        raise ValueError("n_inner must be >= 1")
    qx = reduction.project(in_basis, x)
    acc = None
    for mth in range(n_inner):
        z = cov.sample_field(seed, index=mth)
        val = func(qx + z - reduction.project(in_basis, z))
        acc = val if acc is None else acc + val
    return acc / n_inner


def subspace_poincare_check(hmap, r_list):
    """Analytic (r, LHS, RHS) rows; raises if the inequality ever fails."""
    from . import polymap

    rows = []
    for r in r_list:
        lhs, rhs = polymap.subspace_poincare_sides(hmap, r)
        if lhs > rhs + 1e-12:
            raise AssertionError(
                f"subspace Poincare violated at r={r}: {lhs} > {rhs}")
        rows.append((r, lhs, rhs))
    return rows


# ---------------------------------------------------------------------------
# rate regression and bound curves
# ---------------------------------------------------------------------------

def rate_slope(ns, values):
    """Least-squares slope of log(values) against log(ns)."""
    ns = np.asarray(ns, dtype=float)
    values = np.asarray(values, dtype=float)
    if np.any(values <= 0):
        raise ValueError("rate regression needs positive values")
    return float(np.polyfit(np.log(ns), np.log(values), 1)[0])


def mean_estimator_error(mean_small, mean_ref, mesh):
    """||F_hat_N - F_hat_ref||_Y^2."""
    diff = mean_small - mean_ref
    return float(diff @ mesh.M @ diff)


def bound_curves(basis, metric, r_grid, samples, moments=None, scale=1.0):
    """(r, measured, trailing, scale*trailing) rows for one basis family.

    The basis is truncated to each rank in r_grid; `metric` picks which of
    its reconstruction errors to measure.  Measured values are reported as
    raw energies divided by the metric's denominator, matching the trailing
    eigenvalue sums normalized the same way.
    """
    m = moments if moments is not None else test_moments(samples)
    rows = []
    for r in r_grid:
        b = basis.truncate(r)
        rep = reconstruction_errors(samples, b, m)[metric]
        trailing = reduction.trailing_sum(b, r) * m.n / rep.denominator
        rows.append((r, rep.value, trailing, scale * trailing))
    return rows
