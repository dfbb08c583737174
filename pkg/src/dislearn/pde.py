"""Benchmark PDE operators on the unit interval and dataset generation.

Two nonlinear problems map an input field x to a solution y on the shared
mesh (output space reuses the input mesh and mass matrix):

* semilinear: -(c1(s) y')' + c2 y^3 = x, y(0)=0, natural at s=1, with
  c1(s) = 0.0001 + 0.01 on (0.5, 1) evaluated at element midpoints and
  c2 = 0.1.  The cubic term uses the nodal product approximation
  M (y*y*y), so the residual is R = K_c1 y + c2 M y^3 - M x.
* burgers: -c1 y'' + y y' = c2(s) x, y(0)=y(1)=0, viscosity c1 = 0.01 and
  a Gaussian source profile c2 centered at s=0.4; convection is assembled
  with exact Galerkin element integrals of y y' (no stabilization).

Dirichlet conditions are enforced by row replacement, which keeps the
state dimension fixed and makes Dirichlet rows of every Jacobian exactly
zero.  Solves use damped Newton with an Armijo backtracking line search;
steady Burgers falls back to a 5-step load homotopy on failure.  Sample k
of a dataset draws from its own random substream, so generation order and
parallelization cannot change the data.
"""

from dataclasses import dataclass

import numpy as np
import scipy.linalg

SEMILINEAR = "semilinear"
BURGERS = "burgers"

NEWTON_MAX_ITER = 50
NEWTON_RTOL = 1e-10
ARMIJO_C = 1e-4
HOMOTOPY_STEPS = (0.2, 0.4, 0.6, 0.8, 1.0)


class NonConvergence(RuntimeError):
    """Newton failure; carries the final residual norm and iteration trace."""

    def __init__(self, message, residual_norm, trace, sample_index=None):
        super().__init__(message)
        self.residual_norm = residual_norm
        self.trace = trace
        self.sample_index = sample_index


def _to_banded(A):
    """Tridiagonal matrix -> (3, d) banded storage for scipy.solve_banded."""
    d = A.shape[0]
    ab = np.zeros((3, d))
    ab[0, 1:] = np.diag(A, 1)
    ab[1, :] = np.diag(A)
    ab[2, :-1] = np.diag(A, -1)
    return ab


def _tri_mv(ab, v):
    """Matvec with a (3, d) banded tridiagonal matrix."""
    out = ab[1] * v
    out[:-1] += ab[0, 1:] * v[1:]
    out[1:] += ab[2, :-1] * v[:-1]
    return out


@dataclass(frozen=True)
class PdeProblem:
    kind: str
    mesh: object
    coefficients: dict
    dirichlet_dofs: tuple  # node indices with essential value 0
    K_c1: np.ndarray       # stiffness with the problem's diffusion coefficient
    c2_nodal: np.ndarray   # source profile at nodes (burgers) or None

    @property
    def d(self):
        return self.mesh.d

    # Tridiagonal bookkeeping for the fast solver path.  The dense
    # residual_dy/residual_dx functions below stay the reference surface.
    def _banded(self):
        try:
            return self._banded_cache
        except AttributeError:
            cache = {
                "K": _to_banded(self.K_c1),
                "M": _to_banded(self.mesh.M),
                "dRdx": residual_dx(self),
            }
            object.__setattr__(self, "_banded_cache", cache)
            return cache


def _stiffness_with_coefficient(mesh, c1_el):
    """Assemble ∫ c1 u'v' with piecewise-constant c1 per element."""
    d = mesh.d
    h = mesh.h
    K = np.zeros((d, d))
    w = c1_el / h
    K[np.arange(d - 1), np.arange(d - 1)] += w
    K[np.arange(1, d), np.arange(1, d)] += w
    K[np.arange(d - 1), np.arange(1, d)] -= w
    K[np.arange(1, d), np.arange(d - 1)] -= w
    return K


def semilinear_problem(mesh):
    """Semilinear elliptic operator with the discontinuous diffusion coefficient."""
    mids = 0.5 * (mesh.nodes[:-1] + mesh.nodes[1:])
    c1_el = 0.0001 + 0.01 * (mids > 0.5)
    return PdeProblem(
        kind=SEMILINEAR,
        mesh=mesh,
        coefficients={"c1_low": 0.0001, "c1_jump": 0.01, "c1_split": 0.5, "c2": 0.1},
        dirichlet_dofs=(0,),
        K_c1=_stiffness_with_coefficient(mesh, c1_el),
        c2_nodal=None,
    )


def burgers_problem(mesh):
    """Steady Burgers operator with viscosity 0.01 and Gaussian source profile."""
    s = mesh.nodes
    c2 = np.exp(-((s - 0.4) ** 2) / 0.05**2) / (0.025 * np.sqrt(2.0 * np.pi))
    return PdeProblem(
        kind=BURGERS,
        mesh=mesh,
        coefficients={"c1": 0.01, "profile_center": 0.4, "profile_width": 0.05,
                      "profile_scale": 1.0 / (0.025 * np.sqrt(2.0 * np.pi))},
        dirichlet_dofs=(0, mesh.n_el),
        K_c1=_stiffness_with_coefficient(mesh, np.full(mesh.n_el, 0.01)),
        c2_nodal=c2,
    )


def make_problem(kind, mesh):
    if kind == SEMILINEAR:
        return semilinear_problem(mesh)
    if kind == BURGERS:
        return burgers_problem(mesh)
    raise ValueError(f"unknown problem kind {kind!r}")


# ---------------------------------------------------------------------------
# residuals and partial derivatives
# ---------------------------------------------------------------------------

def _convection(y):
    """Galerkin convection vector for y y' on linear elements (exact integrals)."""
    y1, y2 = y[:-1], y[1:]
    dy = y2 - y1
    out = np.zeros_like(y)
    out[:-1] += dy * (2.0 * y1 + y2) / 6.0
    out[1:] += dy * (y1 + 2.0 * y2) / 6.0
    return out


def _convection_jacobian(y):
    d = y.shape[0]
    y1, y2 = y[:-1], y[1:]
    Jn = np.zeros((d, d))
    i = np.arange(d - 1)
    Jn[i, i] += (y2 - 4.0 * y1) / 6.0
    Jn[i, i + 1] += (y1 + 2.0 * y2) / 6.0
    Jn[i + 1, i] += -(2.0 * y1 + y2) / 6.0
    Jn[i + 1, i + 1] += (4.0 * y2 - y1) / 6.0
    return Jn


def residual(problem, y, x):
    """R(y, x) with Dirichlet rows replaced by y_i - 0."""
    M = problem.mesh.M
    if problem.kind == SEMILINEAR:
        c2 = problem.coefficients["c2"]
        R = problem.K_c1 @ y + c2 * (M @ (y**3)) - M @ x
    else:
        R = problem.K_c1 @ y + _convection(y) - M @ (problem.c2_nodal * x)
    for i in problem.dirichlet_dofs:
        R[i] = y[i]
    return R


def residual_dy(problem, y):
    """∂R/∂y with identity Dirichlet rows."""
    M = problem.mesh.M
    if problem.kind == SEMILINEAR:
        c2 = problem.coefficients["c2"]
        A = problem.K_c1 + 3.0 * c2 * (M * (y**2)[None, :])
    else:
        A = problem.K_c1 + _convection_jacobian(y)
    for i in problem.dirichlet_dofs:
        A[i, :] = 0.0
        A[i, i] = 1.0
    return A


def residual_dx(problem):
    """∂R/∂x with zeroed Dirichlet rows (independent of the state)."""
    M = problem.mesh.M
    if problem.kind == SEMILINEAR:
        A = -M.copy()
    else:
        A = -(M * problem.c2_nodal[None, :])
    for i in problem.dirichlet_dofs:
        A[i, :] = 0.0
    return A


# ---------------------------------------------------------------------------
# nonlinear solve
# ---------------------------------------------------------------------------

def _residual_fast(problem, y, x, load):
    """residual() with precomputed banded operators and load = M x term."""
    b = problem._banded()
    if problem.kind == SEMILINEAR:
        c2 = problem.coefficients["c2"]
        R = _tri_mv(b["K"], y) + c2 * _tri_mv(b["M"], y**3) - load
    else:
        R = _tri_mv(b["K"], y) + _convection(y) - load
    for i in problem.dirichlet_dofs:
        R[i] = y[i]
    return R


def _banded_dy(problem, y):
    """∂R/∂y in (3, d) banded storage with identity Dirichlet rows."""
    b = problem._banded()
    if problem.kind == SEMILINEAR:
        c2 = problem.coefficients["c2"]
        ab = b["K"] + 3.0 * c2 * b["M"] * (y**2)[None, :]
    else:
        ab = b["K"].copy()
        y1, y2 = y[:-1], y[1:]
        i = np.arange(problem.d - 1)
        ab[1, :-1] += (y2 - 4.0 * y1) / 6.0      # (i, i)
        ab[0, 1:] += (y1 + 2.0 * y2) / 6.0       # (i, i+1)
        ab[2, :-1] += -(2.0 * y1 + y2) / 6.0     # (i+1, i)
        ab[1, 1:] += (4.0 * y2 - y1) / 6.0       # (i+1, i+1)
    for i in problem.dirichlet_dofs:
        ab[1, i] = 1.0
        if i + 1 < problem.d:
            ab[0, i + 1] = 0.0
        if i - 1 >= 0:
            ab[2, i - 1] = 0.0
    return ab


def _load_vector(problem, x):
    b = problem._banded()
    if problem.kind == SEMILINEAR:
        return _tri_mv(b["M"], x)
    return _tri_mv(b["M"], problem.c2_nodal * x)


def _newton(problem, x, y0, tol):
    y = y0.copy()
    trace = []
    load = _load_vector(problem, x)
    r = _residual_fast(problem, y, x, load)
    rnorm = np.linalg.norm(r)
    trace.append(rnorm)
    for _ in range(NEWTON_MAX_ITER):
        if rnorm <= tol:
            return y, len(trace) - 1, trace
        ab = _banded_dy(problem, y)
        step = scipy.linalg.solve_banded((1, 1), ab, -r, check_finite=False)
        # Armijo backtracking on the merit 0.5*||R||^2 with halving
        t = 1.0
        r2 = rnorm**2
        while t > 2.0**-30:
            y_try = y + t * step
            r_try = _residual_fast(problem, y_try, x, load)
            if np.linalg.norm(r_try) ** 2 <= (1.0 - 2.0 * ARMIJO_C * t) * r2:
                break
            t *= 0.5
        else:
            break
        y = y_try
        r = r_try
        rnorm = np.linalg.norm(r)
        trace.append(rnorm)
    if rnorm <= tol:
        return y, len(trace) - 1, trace
    raise NonConvergence(
        f"Newton stalled at residual {rnorm:.3e} (tol {tol:.3e})", rnorm, trace)


def solve(problem, x, y0=None):
    """Solve R(y, x) = 0 by damped Newton; returns (y, iteration_count).

    Steady Burgers restarts with a 5-step load homotopy when the direct
    solve fails.  y0 must satisfy the Dirichlet values (zeros by default).
    """
    if y0 is None:
        y0 = np.zeros(problem.d)
    tol = NEWTON_RTOL * (1.0 + np.linalg.norm(problem.mesh.M @ x))
    try:
        return _newton(problem, x, y0, tol)[:2]
    except NonConvergence:
        if problem.kind != BURGERS:
            raise
    total = 0
    y = np.zeros(problem.d)
    for scale in HOMOTOPY_STEPS:
        xs = scale * x
        tol_s = NEWTON_RTOL * (1.0 + np.linalg.norm(problem.mesh.M @ xs))
        y, its, _ = _newton(problem, xs, y, tol_s)
        total += its
    return y, total


def jacobian(problem, x, y):
    """Full Jacobian dy/dx: one factorization of ∂R/∂y, d back-substitutions."""
    ab = _banded_dy(problem, y)
    try:
        J = scipy.linalg.solve_banded((1, 1), ab, -problem._banded()["dRdx"],
                                      check_finite=False)
    except (scipy.linalg.LinAlgError, ValueError) as exc:
        raise RuntimeError(f"singular state Jacobian: {exc}") from exc
    J[list(problem.dirichlet_dofs), :] = 0.0
    return J


def apply_forward(problem, x):
    """Convenience y = F(x) from the zero initial guess."""
    return solve(problem, x)[0]


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------

@dataclass
class SampleSet:
    """Tuples (x_k, y_k, J_k) with provenance; J may be a disk-backed memmap."""

    problem: PdeProblem
    cov: object
    seed: int
    N: int
    X: np.ndarray            # (N, d)
    Y: np.ndarray            # (N, d)
    J: np.ndarray            # (N, d, d) or None when Jacobians were not stored
    newton_iters: np.ndarray

    @property
    def d(self):
        return self.problem.d

    def has_jacobians(self):
        return self.J is not None

    def require_jacobians(self):
        if self.J is None:
            raise ValueError("this SampleSet was generated without Jacobians")
        return self.J


def generate_dataset(problem, cov, N, seed, jacobians=True, J_buffer=None):
    """Generate N independent samples (x, F(x), DF(x)) from per-sample substreams.

    Every solve starts from the zero initial guess, so the result is a pure
    function of (problem, cov, N, seed) regardless of evaluation order.
    J_buffer, when given, must be an (N, d, d) array (e.g. a memmap) that
    receives the Jacobians in place.
    """
    if N < 1:
        raise ValueError("N must be >= 1")
    d = problem.d
    X = np.empty((N, d))
    Y = np.empty((N, d))
    iters = np.empty(N, dtype=np.int64)
    J = None
    if jacobians:
        J = J_buffer if J_buffer is not None else np.empty((N, d, d))
        if J.shape != (N, d, d):
            raise ValueError(f"J buffer has shape {J.shape}, expected {(N, d, d)}")
    for k in range(N):
        x = cov.sample_field(seed, index=k)
        try:
            y, its = solve(problem, x)
        except NonConvergence as exc:
            exc.sample_index = k
            raise
        X[k] = x
        Y[k] = y
        iters[k] = its
        if jacobians:
            J[k] = jacobian(problem, x, y)
    return SampleSet(problem=problem, cov=cov, seed=seed, N=N,
                     X=X, Y=Y, J=J, newton_iters=iters)
