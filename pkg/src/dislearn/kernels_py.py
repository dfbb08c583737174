"""Pure-NumPy latent-network kernels (reference backend).

The compiled extension in _core.pyx implements the same three entry points;
dislearn.kernels picks one at import time.  Everything here is vectorized
over the batch.  Gradients of the derivative-matching loss term flow through
the network's own Jacobian, which brings in second derivatives of the
activation; the recursions mirror forward-over-reverse accumulation.

Weight layout: weights[0] is (d_W, r), interior (d_W, d_W), weights[-1] is
(r, d_W); biases match rows.  Activation ids: 0 softplus, 1 SiLU, 2 GeLU.
"""

import numpy as np
from scipy.special import expit, ndtr

SOFTPLUS, SILU, GELU = 0, 1, 2
ACT_IDS = {"softplus": SOFTPLUS, "silu": SILU, "gelu": GELU}

_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def act_eval(act_id, z):
    """(psi(z), psi'(z), psi''(z)) elementwise."""
    if act_id == SOFTPLUS:
        s = expit(z)
        return np.logaddexp(0.0, z), s, s * (1.0 - s)
    if act_id == SILU:
        s = expit(z)
        s1 = s * (1.0 - s)
        return z * s, s + z * s1, 2.0 * s1 + z * s1 * (1.0 - 2.0 * s)
    if act_id == GELU:
        phi = _INV_SQRT_2PI * np.exp(-0.5 * z * z)
        cdf = ndtr(z)
        return z * cdf, cdf + z * phi, (2.0 - z * z) * phi
    raise ValueError(f"unknown activation id {act_id}")


def act_third(act_id, z):
    """psi'''(z), used only by activation-class diagnostics."""
    if act_id == SOFTPLUS:
        s = expit(z)
        return s * (1.0 - s) * (1.0 - 2.0 * s)
    if act_id == SILU:
        s = expit(z)
        s1 = s * (1.0 - s)
        s2 = s1 * (1.0 - 2.0 * s)
        s3 = s2 * (1.0 - 2.0 * s) - 2.0 * s1 * s1
        return 3.0 * s2 + z * s3
    if act_id == GELU:
        phi = _INV_SQRT_2PI * np.exp(-0.5 * z * z)
        return (z**3 - 4.0 * z) * phi
    raise ValueError(f"unknown activation id {act_id}")


def _forward_pass(weights, biases, act_id, S):
    """Activations and derivative diagonals layer by layer."""
    L = len(weights)
    a = S
    cache_a = [S]
    cache_d1 = []
    cache_d2 = []
    for l in range(L - 1):
        z = a @ weights[l].T + biases[l]
        a, d1, d2 = act_eval(act_id, z)
        cache_a.append(a)
        cache_d1.append(d1)
        cache_d2.append(d2)
    out = a @ weights[-1].T + biases[-1]
    return out, cache_a, cache_d1, cache_d2


def forward(weights, biases, act_id, S):
    """Network outputs for a batch S of shape (B, r)."""
    return _forward_pass(weights, biases, act_id, S)[0]


def jacobian(weights, biases, act_id, S):
    """Network Jacobians (B, r, r) by forward accumulation."""
    _, _, d1, _ = _forward_pass(weights, biases, act_id, S)
    L = len(weights)
    B = S.shape[0]
    T = np.broadcast_to(weights[0], (B,) + weights[0].shape).copy()
    T *= d1[0][:, :, None]
    for l in range(1, L - 1):
        T = d1[l][:, :, None] * np.matmul(weights[l], T)
    return np.matmul(weights[-1], T)


def loss_and_grad(weights, biases, act_id, S, Q, G, inv_a0, inv_a1):
    """Mean weighted Sobolev loss over the batch and its parameter gradient.

    loss = mean_k [ inv_a0_k ||out_k - q_k||^2 + inv_a1_k ||J_k - G_k||_F^2 ].
    Either weight vector may be zero to isolate one term.  Returns
    (loss, grad_weights, grad_biases).
    """
    L = len(weights)
    B = S.shape[0]
    out, a, d1, d2 = _forward_pass(weights, biases, act_id, S)

    # tangent chain for the network Jacobian
    U = [None] * (L - 1)   # pre-activation tangents W_l T_{l-1}
    T = [None] * (L - 1)   # post-activation tangents
    U[0] = np.broadcast_to(weights[0], (B,) + weights[0].shape)
    T[0] = d1[0][:, :, None] * U[0]
    for l in range(1, L - 1):
        U[l] = np.matmul(weights[l], T[l - 1])
        T[l] = d1[l][:, :, None] * U[l]
    J = np.matmul(weights[-1], T[L - 2]) if L >= 2 else None

    res_out = out - Q
    res_jac = J - G
    loss = (np.einsum("bi,bi,b->", res_out, res_out, inv_a0)
            + np.einsum("bij,bij,b->", res_jac, res_jac, inv_a1)) / B

    e = 2.0 * res_out * inv_a0[:, None]
    E = 2.0 * res_jac * inv_a1[:, None, None]

    gW = [None] * L
    gb = [None] * L
    gW[-1] = np.einsum("bi,bj->ij", e, a[L - 1]) \
        + np.einsum("bik,bjk->ij", E, T[L - 2])
    gb[-1] = e.sum(axis=0)

    c = e @ weights[-1]                     # cotangent of a_{L-1}
    R = np.matmul(weights[-1].T, E)         # cotangent of T_{L-1}
    for l in range(L - 2, -1, -1):
        RU = d1[l][:, :, None] * R
        gz = d2[l] * np.einsum("bik,bik->bi", R, U[l])
        delta = d1[l] * c + gz
        gW[l] = np.einsum("bi,bj->ij", delta, a[l])
        if l == 0:
            gW[l] += RU.sum(axis=0)  # T_{-1} is the identity
        else:
            gW[l] += np.einsum("bik,bjk->ij", RU, T[l - 1])
        gb[l] = delta.sum(axis=0)
        if l > 0:
            c = delta @ weights[l]
            R = np.matmul(weights[l].T, RU)

    inv_b = 1.0 / B
    return loss, [g * inv_b for g in gW], [g * inv_b for g in gb]
