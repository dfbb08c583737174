# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled latent-network kernels.

Same contracts as dislearn.kernels_py (forward, jacobian, loss_and_grad).
Tangent and cotangent blocks are stored transposed, as (r, width) rows, so
every inner loop is a contiguous dot product or axpy over the width; for
the small matrices involved (width ~ 2r) this beats BLAS dispatch.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport erfc, exp, log1p
from libc.stdlib cimport free, malloc
from libc.string cimport memset

cnp.import_array()

cdef double INV_SQRT_2PI = 0.3989422804014326779399460599343818684759
cdef double INV_SQRT_2 = 0.7071067811865475244008443621048490392848


cdef inline void act3(int act, double t, double* v, double* d1, double* d2) noexcept nogil:
    cdef double s, phi, cdf
    if act == 0:  # softplus
        if t > 0.0:
            v[0] = t + log1p(exp(-t))
            s = 1.0 / (1.0 + exp(-t))
        else:
            v[0] = log1p(exp(t))
            s = exp(t) / (1.0 + exp(t))
        d1[0] = s
        d2[0] = s * (1.0 - s)
    elif act == 1:  # silu
        if t > 0.0:
            s = 1.0 / (1.0 + exp(-t))
        else:
            s = exp(t) / (1.0 + exp(t))
        v[0] = t * s
        d1[0] = s + t * s * (1.0 - s)
        d2[0] = 2.0 * s * (1.0 - s) + t * s * (1.0 - s) * (1.0 - 2.0 * s)
    else:  # gelu
        phi = INV_SQRT_2PI * exp(-0.5 * t * t)
        cdf = 0.5 * erfc(-t * INV_SQRT_2)
        v[0] = t * cdf
        d1[0] = cdf + t * phi
        d2[0] = (2.0 - t * t) * phi


cdef class _Net:
    """Pointer table over the (validated, contiguous) parameter arrays."""

    cdef int L, r, w, act
    cdef double** Wp
    cdef double** bp
    cdef list _keep

    def __cinit__(self, weights, biases, act_id):
        cdef int L = len(weights)
        cdef cnp.ndarray[cnp.float64_t, ndim=2] w2
        cdef cnp.ndarray[cnp.float64_t, ndim=1] b1
        self.L = L
        self.w = weights[0].shape[0]
        self.r = weights[0].shape[1]
        self.act = act_id
        self.Wp = <double**>malloc(L * sizeof(double*))
        self.bp = <double**>malloc(L * sizeof(double*))
        self._keep = []
        cdef int l
        for l in range(L):
            w2 = np.ascontiguousarray(weights[l], dtype=np.float64)
            b1 = np.ascontiguousarray(biases[l], dtype=np.float64)
            self._keep.append(w2)
            self._keep.append(b1)
            self.Wp[l] = <double*>cnp.PyArray_DATA(w2)
            self.bp[l] = <double*>cnp.PyArray_DATA(b1)

    def __dealloc__(self):
        if self.Wp != NULL:
            free(self.Wp)
        if self.bp != NULL:
            free(self.bp)


cdef inline double _dot(double* x, double* y, int n) noexcept nogil:
    cdef int j
    cdef double acc = 0.0
    for j in range(n):
        acc += x[j] * y[j]
    return acc


cdef inline void _axpy(double a, double* x, double* y, int n) noexcept nogil:
    cdef int j
    for j in range(n):
        y[j] += a * x[j]


cdef inline void _affine(double* W, double* b, double* x, double* out,
                         int m, int n) noexcept nogil:
    cdef int i
    for i in range(m):
        out[i] = b[i] + _dot(W + i * n, x, n)


cdef inline void _tangent_step(double* W, double* Tt_prev, double* Ut,
                               int w, int r, int n_prev) noexcept nogil:
    # Ut[k, i] = sum_j W[i, j] * Tt_prev[k, j]; all rows contiguous
    cdef int k, i
    for k in range(r):
        for i in range(w):
            Ut[k * w + i] = _dot(W + i * n_prev, Tt_prev + k * n_prev, n_prev)


def forward(weights, biases, int act_id, double[:, ::1] S):
    cdef _Net net = _Net(weights, biases, act_id)
    cdef int B = S.shape[0], r = net.r, w = net.w, L = net.L
    cdef cnp.ndarray[cnp.float64_t, ndim=2] out_arr = np.empty((B, r))
    cdef double[:, ::1] out = out_arr
    cdef double* buf = <double*>malloc(2 * w * sizeof(double))
    cdef double* z = buf
    cdef double* a = buf + w
    cdef double d1, d2
    cdef int b, l, i
    with nogil:
        for b in range(B):
            _affine(net.Wp[0], net.bp[0], &S[b, 0], z, w, r)
            for i in range(w):
                act3(net.act, z[i], &a[i], &d1, &d2)
            for l in range(1, L - 1):
                _affine(net.Wp[l], net.bp[l], a, z, w, w)
                for i in range(w):
                    act3(net.act, z[i], &a[i], &d1, &d2)
            _affine(net.Wp[L - 1], net.bp[L - 1], a, &out[b, 0], r, w)
    free(buf)
    return out_arr


def jacobian(weights, biases, int act_id, double[:, ::1] S):
    cdef _Net net = _Net(weights, biases, act_id)
    cdef int B = S.shape[0], r = net.r, w = net.w, L = net.L
    cdef cnp.ndarray[cnp.float64_t, ndim=3] J_arr = np.empty((B, r, r))
    cdef double[:, :, ::1] J = J_arr
    cdef double* buf = <double*>malloc((2 * w + 2 * w * r) * sizeof(double))
    cdef double* z = buf
    cdef double* a = buf + w
    cdef double* Tt = buf + 2 * w            # transposed tangent (r, w)
    cdef double* Tn = buf + 2 * w + w * r
    cdef double* tmp
    cdef double d1v, d2v
    cdef int b, l, i, k
    with nogil:
        for b in range(B):
            _affine(net.Wp[0], net.bp[0], &S[b, 0], z, w, r)
            for i in range(w):
                act3(net.act, z[i], &a[i], &d1v, &d2v)
                for k in range(r):
                    Tt[k * w + i] = d1v * net.Wp[0][i * r + k]
            for l in range(1, L - 1):
                _affine(net.Wp[l], net.bp[l], a, z, w, w)
                _tangent_step(net.Wp[l], Tt, Tn, w, r, w)
                for i in range(w):
                    act3(net.act, z[i], &a[i], &d1v, &d2v)
                    for k in range(r):
                        Tn[k * w + i] *= d1v
                tmp = Tt; Tt = Tn; Tn = tmp
            for i in range(r):
                for k in range(r):
                    J[b, i, k] = _dot(net.Wp[L - 1] + i * w, Tt + k * w, w)
    free(buf)
    return J_arr


def loss_and_grad(weights, biases, int act_id, double[:, ::1] S,
                  double[:, ::1] Q, double[:, :, ::1] G,
                  double[::1] inv_a0, double[::1] inv_a1):
    cdef _Net net = _Net(weights, biases, act_id)
    cdef int B = S.shape[0], r = net.r, w = net.w, L = net.L
    cdef int nh = L - 1  # hidden (activated) layers

    gW_list = [np.zeros_like(weights[l]) for l in range(L)]
    gb_list = [np.zeros_like(biases[l]) for l in range(L)]
    cdef double** gWp = <double**>malloc(L * sizeof(double*))
    cdef double** gbp = <double**>malloc(L * sizeof(double*))
    cdef int l
    for l in range(L):
        gWp[l] = <double*>cnp.PyArray_DATA(<cnp.ndarray>gW_list[l])
        gbp[l] = <double*>cnp.PyArray_DATA(<cnp.ndarray>gb_list[l])

    # per-sample caches; tangents/cotangents transposed as (r, w) rows
    cdef double* A = <double*>malloc(nh * w * sizeof(double))
    cdef double* D1 = <double*>malloc(nh * w * sizeof(double))
    cdef double* D2 = <double*>malloc(nh * w * sizeof(double))
    cdef double* U = <double*>malloc(nh * w * r * sizeof(double))
    cdef double* T = <double*>malloc(nh * w * r * sizeof(double))
    cdef double* z = <double*>malloc(w * sizeof(double))
    cdef double* out = <double*>malloc(r * sizeof(double))
    cdef double* e = <double*>malloc(r * sizeof(double))
    cdef double* E = <double*>malloc(r * r * sizeof(double))
    cdef double* c = <double*>malloc(w * sizeof(double))
    cdef double* cn = <double*>malloc(w * sizeof(double))
    cdef double* R = <double*>malloc(w * r * sizeof(double))
    cdef double* Rn = <double*>malloc(w * r * sizeof(double))
    cdef double* RU = <double*>malloc(w * r * sizeof(double))
    cdef double* delta = <double*>malloc(w * sizeof(double))

    cdef double loss = 0.0, acc, dv, ia0, ia1, resid, ei
    cdef double* Wl
    cdef double* al
    cdef double* gw
    cdef double* Tl
    cdef double* Ul
    cdef double* row
    cdef double* tmp
    cdef int b, i, j, k, nin
    with nogil:
        for b in range(B):
            ia0 = inv_a0[b]
            ia1 = inv_a1[b]
            # ---- forward pass with tangents
            _affine(net.Wp[0], net.bp[0], &S[b, 0], z, w, r)
            for i in range(w):
                act3(net.act, z[i], &A[i], &D1[i], &D2[i])
            for k in range(r):
                for i in range(w):
                    U[k * w + i] = net.Wp[0][i * r + k]
                    T[k * w + i] = D1[i] * U[k * w + i]
            for l in range(1, nh):
                Wl = net.Wp[l]
                Ul = U + l * w * r
                Tl = T + l * w * r
                _affine(Wl, net.bp[l], &A[(l - 1) * w], z, w, w)
                _tangent_step(Wl, T + (l - 1) * w * r, Ul, w, r, w)
                for i in range(w):
                    act3(net.act, z[i], &A[l * w + i], &D1[l * w + i], &D2[l * w + i])
                for k in range(r):
                    row = Ul + k * w
                    for i in range(w):
                        Tl[k * w + i] = D1[l * w + i] * row[i]
            Wl = net.Wp[L - 1]
            Tl = T + (nh - 1) * w * r
            _affine(Wl, net.bp[L - 1], &A[(nh - 1) * w], out, r, w)
            # ---- residuals, loss, top-layer gradient
            gw = gWp[L - 1]
            al = &A[(nh - 1) * w]
            for i in range(r):
                resid = out[i] - Q[b, i]
                loss += ia0 * resid * resid
                ei = 2.0 * ia0 * resid
                e[i] = ei
                gbp[L - 1][i] += ei
                _axpy(ei, al, gw + i * w, w)
            for i in range(r):
                for k in range(r):
                    resid = _dot(Wl + i * w, Tl + k * w, w) - G[b, i, k]
                    loss += ia1 * resid * resid
                    E[i * r + k] = 2.0 * ia1 * resid
            for i in range(r):
                for k in range(r):
                    _axpy(E[i * r + k], Tl + k * w, gw + i * w, w)
            # c = W_L^T e ; R = W_L^T E   (R transposed: R[k, :w])
            memset(c, 0, w * sizeof(double))
            for i in range(r):
                _axpy(e[i], Wl + i * w, c, w)
            memset(R, 0, w * r * sizeof(double))
            for i in range(r):
                for k in range(r):
                    _axpy(E[i * r + k], Wl + i * w, R + k * w, w)
            # ---- backward through hidden layers
            for l in range(nh - 1, -1, -1):
                Ul = U + l * w * r
                memset(delta, 0, w * sizeof(double))
                for k in range(r):
                    row = R + k * w
                    for i in range(w):
                        RU[k * w + i] = D1[l * w + i] * row[i]
                        delta[i] += row[i] * Ul[k * w + i]
                for i in range(w):
                    dv = D1[l * w + i] * c[i] + D2[l * w + i] * delta[i]
                    delta[i] = dv
                    gbp[l][i] += dv
                if l == 0:
                    al = &S[b, 0]
                    nin = r
                else:
                    al = &A[(l - 1) * w]
                    nin = w
                gw = gWp[l]
                for i in range(w):
                    _axpy(delta[i], al, gw + i * nin, nin)
                if l == 0:
                    for k in range(r):
                        for i in range(w):
                            gw[i * r + k] += RU[k * w + i]
                else:
                    Wl = net.Wp[l]
                    Tl = T + (l - 1) * w * r
                    for k in range(r):
                        row = RU + k * w
                        for i in range(w):
                            _axpy(row[i], Tl + k * w, gw + i * w, w)
                    memset(cn, 0, w * sizeof(double))
                    for i in range(w):
                        _axpy(delta[i], Wl + i * w, cn, w)
                    memset(Rn, 0, w * r * sizeof(double))
                    for k in range(r):
                        row = RU + k * w
                        for i in range(w):
                            _axpy(row[i], Wl + i * w, Rn + k * w, w)
                    tmp = c; c = cn; cn = tmp
                    tmp = R; R = Rn; Rn = tmp

    free(A); free(D1); free(D2); free(U); free(T); free(z); free(out)
    free(e); free(E); free(c); free(cn); free(R); free(Rn); free(RU); free(delta)
    free(gWp); free(gbp)

    inv_b = 1.0 / B
    for l in range(L):
        gW_list[l] *= inv_b
        gb_list[l] *= inv_b
    return loss / B, gW_list, gb_list
