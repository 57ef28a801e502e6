# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled two-tower loss/gradient kernel (see ``_kernel_py`` for the reference)."""

import numpy as np

from libc.math cimport exp, log, sqrt, tanh, isfinite
from libc.stdlib cimport malloc, free
from libc.string cimport memset


cdef inline double temperature_dot(const double* a, const double* b, Py_ssize_t E,
                                   double temperature) noexcept nogil:
    cdef double s = 0.0
    cdef Py_ssize_t k
    for k in range(E):
        s += a[k] * b[k]
    return temperature * s

cdef inline Py_ssize_t _tower_size(const long long* dims, int L) noexcept nogil:
    cdef Py_ssize_t s = 0
    cdef int l
    for l in range(L):
        s += dims[l + 1] * dims[l] + dims[l + 1]
    return s


cdef void _tower_forward(const double* theta, const long long* dims, int L,
                         double* acts, const Py_ssize_t* a_off, Py_ssize_t n,
                         bint relu) noexcept nogil:
    cdef Py_ssize_t i, o, k, n_in, n_out
    cdef const double* W
    cdef const double* b
    cdef double* a_in
    cdef double* a_out
    cdef double s
    cdef int l
    cdef Py_ssize_t p = 0
    for l in range(L):
        n_in = dims[l]
        n_out = dims[l + 1]
        W = theta + p
        b = W + n_out * n_in
        p += n_out * n_in + n_out
        a_in = acts + a_off[l]
        a_out = acts + a_off[l + 1]
        for i in range(n):
            for o in range(n_out):
                s = b[o]
                for k in range(n_in):
                    s += W[o * n_in + k] * a_in[i * n_in + k]
                if l < L - 1:
                    if relu:
                        s = s if s > 0.0 else 0.0
                    else:
                        s = tanh(s)
                a_out[i * n_out + o] = s


cdef void _tower_backward(const double* theta, double* grad, const long long* dims,
                          int L, const double* acts, const Py_ssize_t* a_off,
                          Py_ssize_t n, bint relu, double* delta,
                          double* scratch) noexcept nogil:
    # delta holds dLoss/d(output) as n x dims[L]; it is overwritten.
    cdef Py_ssize_t i, o, k, n_in, n_out, p
    cdef const double* W
    cdef double* dW
    cdef double* db
    cdef const double* a_in
    cdef double s, a
    cdef double* tmp
    cdef int l
    cdef Py_ssize_t[64] p_off
    p = 0
    for l in range(L):
        p_off[l] = p
        p += dims[l + 1] * dims[l] + dims[l + 1]
    for l in range(L - 1, -1, -1):
        n_in = dims[l]
        n_out = dims[l + 1]
        W = theta + p_off[l]
        dW = grad + p_off[l]
        db = dW + n_out * n_in
        a_in = acts + a_off[l]
        memset(dW, 0, (n_out * n_in + n_out) * sizeof(double))
        # row-major accumulation keeps every inner access contiguous
        for i in range(n):
            for o in range(n_out):
                s = delta[i * n_out + o]
                if s == 0.0:
                    continue
                db[o] += s
                for k in range(n_in):
                    dW[o * n_in + k] += s * a_in[i * n_in + k]
        if l > 0:
            memset(scratch, 0, n * n_in * sizeof(double))
            for i in range(n):
                for o in range(n_out):
                    s = delta[i * n_out + o]
                    if s == 0.0:
                        continue
                    for k in range(n_in):
                        scratch[i * n_in + k] += s * W[o * n_in + k]
                for k in range(n_in):
                    s = scratch[i * n_in + k]
                    a = a_in[i * n_in + k]
                    if relu:
                        s = s if a > 0.0 else 0.0
                    else:
                        s = s * (1.0 - a * a)
                    scratch[i * n_in + k] = s
            tmp = delta
            delta = scratch
            scratch = tmp


def loss_and_grad(theta, x_dims, d_dims, relu, double temperature, X, labels, D):
    """Same contract as ``_kernel_py.loss_and_grad``."""
    cdef const double[::1] th = np.ascontiguousarray(theta, dtype=np.float64)
    cdef const long long[::1] xd = np.ascontiguousarray(x_dims, dtype=np.int64)
    cdef const long long[::1] dd = np.ascontiguousarray(d_dims, dtype=np.int64)
    cdef const double[:, ::1] Xv = np.ascontiguousarray(X, dtype=np.float64)
    cdef const double[:, ::1] Dv = np.ascontiguousarray(D, dtype=np.float64)
    cdef const long long[::1] yv = np.ascontiguousarray(labels, dtype=np.int64)
    cdef int Lx = xd.shape[0] - 1
    cdef int Ld = dd.shape[0] - 1
    cdef Py_ssize_t n = Xv.shape[0]
    cdef Py_ssize_t C = Dv.shape[0]
    cdef Py_ssize_t E = xd[Lx]
    cdef bint use_relu = bool(relu)
    if Lx > 63 or Ld > 63:
        raise ValueError("too many layers")

    cdef Py_ssize_t[64] ax_off
    cdef Py_ssize_t[64] ad_off
    cdef Py_ssize_t tot_x = 0, tot_d = 0, max_w = 0
    cdef int l
    for l in range(Lx + 1):
        ax_off[l] = tot_x
        tot_x += n * xd[l]
        if n * xd[l] > max_w:
            max_w = n * xd[l]
    for l in range(Ld + 1):
        ad_off[l] = tot_d
        tot_d += C * dd[l]
        if C * dd[l] > max_w:
            max_w = C * dd[l]

    cdef double[::1] xacts = np.empty(tot_x, dtype=np.float64)
    cdef double[::1] dacts = np.empty(tot_d, dtype=np.float64)
    cdef double[::1] delta = np.empty(max_w, dtype=np.float64)
    cdef double[::1] scratch = np.empty(max_w, dtype=np.float64)
    cdef double[::1] delta_d = np.empty(max_w, dtype=np.float64)
    grad_arr = np.zeros(th.shape[0], dtype=np.float64)
    cdef double[::1] g = grad_arr
    cdef double[:, ::1] Uh = np.empty((n, E), dtype=np.float64)
    cdef double[:, ::1] Vh = np.empty((C, E), dtype=np.float64)
    cdef double[::1] nu = np.empty(n, dtype=np.float64)
    cdef double[::1] nv = np.empty(C, dtype=np.float64)
    cdef double[::1] P = np.empty(C, dtype=np.float64)

    cdef Py_ssize_t i, j, k, c
    cdef Py_ssize_t x_size = _tower_size(&xd[0], Lx)
    cdef double s, m, z, total, dot, loss_sum = 0.0
    cdef const double* U
    cdef const double* V
    cdef Py_ssize_t bad = -1

    with nogil:
        for i in range(n * xd[0]):
            xacts[i] = (&Xv[0, 0])[i]
        for i in range(C * dd[0]):
            dacts[i] = (&Dv[0, 0])[i]
        _tower_forward(&th[0], &xd[0], Lx, &xacts[0], ax_off, n, use_relu)
        _tower_forward(&th[0] + x_size, &dd[0], Ld, &dacts[0], ad_off, C, use_relu)
        U = &xacts[0] + ax_off[Lx]
        V = &dacts[0] + ad_off[Ld]
        for i in range(n):
            s = 0.0
            for k in range(E):
                s += U[i * E + k] * U[i * E + k]
            nu[i] = sqrt(s)
        for c in range(C):
            s = 0.0
            for k in range(E):
                s += V[c * E + k] * V[c * E + k]
            nv[c] = sqrt(s)
    for i in range(n):
        if nu[i] == 0.0:
            raise ZeroDivisionError("zero-norm embedding")
    for c in range(C):
        if nv[c] == 0.0:
            raise ZeroDivisionError("zero-norm embedding")

    with nogil:
        for i in range(n):
            for k in range(E):
                Uh[i, k] = U[i * E + k] / nu[i]
        for c in range(C):
            for k in range(E):
                Vh[c, k] = V[c * E + k] / nv[c]
        # reuse delta for dL/dUh (n x E) and delta_d for dL/dVh (C x E)
        for i in range(n * E):
            delta[i] = 0.0
        for i in range(C * E):
            delta_d[i] = 0.0
        for i in range(n):
            m = -1e308
            for c in range(C):
                s = 0.0
                for k in range(E):
                    s += Uh[i, k] * Vh[c, k]
                z = temperature * s
                P[c] = z
                if z > m:
                    m = z
            total = 0.0
            for c in range(C):
                P[c] = exp(P[c] - m)
                total += P[c]
            s = m + log(total) - temperature_dot(&Uh[i, 0], &Vh[yv[i], 0], E, temperature)
            if not isfinite(s):
                bad = i
                break
            loss_sum += s
            for c in range(C):
                z = P[c] / total
                if c == yv[i]:
                    z -= 1.0
                z = temperature * z / n
                for k in range(E):
                    delta[i * E + k] += z * Vh[c, k]
                    delta_d[c * E + k] += z * Uh[i, k]
    if bad >= 0:
        return float("nan"), None, int(bad)

    with nogil:
        for i in range(n):
            dot = 0.0
            for k in range(E):
                dot += delta[i * E + k] * Uh[i, k]
            for k in range(E):
                delta[i * E + k] = (delta[i * E + k] - dot * Uh[i, k]) / nu[i]
        for c in range(C):
            dot = 0.0
            for k in range(E):
                dot += delta_d[c * E + k] * Vh[c, k]
            for k in range(E):
                delta_d[c * E + k] = (delta_d[c * E + k] - dot * Vh[c, k]) / nv[c]
        _tower_backward(&th[0], &g[0], &xd[0], Lx, &xacts[0], ax_off, n,
                        use_relu, &delta[0], &scratch[0])
        _tower_backward(&th[0] + x_size, &g[0] + x_size, &dd[0], Ld, &dacts[0],
                        ad_off, C, use_relu, &delta_d[0], &scratch[0])
    return loss_sum / n, grad_arr, -1

