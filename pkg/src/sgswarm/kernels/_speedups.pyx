# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled dense-net kernels: BLAS matmuls with fused bias/activation loops.

Mirrors kernels/pure.py. Matmuls go through dgemm directly; bias add,
activations and the Adam update are single fused C loops, which is where
the speedup over the NumPy fallback comes from (fewer temporaries).
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport sqrt as csqrt
from libc.math cimport tanh as ctanh
from scipy.linalg.cython_blas cimport dgemm

cnp.import_array()

DEF LEAKY_SLOPE = 0.01

OUT_NONE = 0
OUT_TANH = 1


cdef void _gemm_x_wt(double[:, ::1] X, double[:, ::1] W, double[:, ::1] Z) noexcept:
    # Row-major Z(B,out) = X(B,in) @ W(out,in).T via column-major dgemm.
    cdef int m = W.shape[0]      # out
    cdef int n = X.shape[0]      # batch
    cdef int k = X.shape[1]      # in
    cdef double one = 1.0, zero = 0.0
    if m == 0 or n == 0:
        return
    dgemm("T", "N", &m, &n, &k, &one, &W[0, 0], &k, &X[0, 0], &k, &zero, &Z[0, 0], &m)


cdef void _gemm_dzt_a(double[:, ::1] dZ, double[:, ::1] A, double[:, ::1] dW) noexcept:
    # Row-major dW(out,in) = dZ(B,out).T @ A(B,in).
    cdef int m = A.shape[1]      # in
    cdef int n = dZ.shape[1]     # out
    cdef int k = A.shape[0]      # batch
    cdef double one = 1.0, zero = 0.0
    if m == 0 or n == 0:
        return
    dgemm("N", "T", &m, &n, &k, &one, &A[0, 0], &m, &dZ[0, 0], &n, &zero, &dW[0, 0], &m)


cdef void _gemm_dz_w(double[:, ::1] dZ, double[:, ::1] W, double[:, ::1] dA) noexcept:
    # Row-major dA(B,in) = dZ(B,out) @ W(out,in).
    cdef int m = W.shape[1]      # in
    cdef int n = dZ.shape[0]     # batch
    cdef int k = W.shape[0]      # out
    cdef double one = 1.0, zero = 0.0
    if m == 0 or n == 0:
        return
    dgemm("N", "N", &m, &n, &k, &one, &W[0, 0], &m, &dZ[0, 0], &k, &zero, &dA[0, 0], &m)


cdef void _bias_act(double[:, ::1] Z, double[::1] b, double[:, ::1] out, int act) noexcept:
    # out = activation(Z + b); act: 0 = identity, 1 = tanh, 2 = leaky-relu.
    cdef Py_ssize_t i, j
    cdef double z
    for i in range(Z.shape[0]):
        for j in range(Z.shape[1]):
            z = Z[i, j] + b[j]
            if act == 2:
                out[i, j] = z if z >= 0.0 else LEAKY_SLOPE * z
            elif act == 1:
                out[i, j] = ctanh(z)
            else:
                out[i, j] = z


def mlp_forward(list Ws, list bs, cnp.ndarray X, int out_act):
    cdef Py_ssize_t last = len(Ws) - 1
    cdef Py_ssize_t l
    cdef cnp.ndarray A = np.ascontiguousarray(X, dtype=np.float64)
    cdef cnp.ndarray Z, out
    cdef int act
    for l in range(len(Ws)):
        W = Ws[l]
        Z = np.empty((A.shape[0], W.shape[0]), dtype=np.float64)
        _gemm_x_wt(A, W, Z)
        act = 2 if l < last else (1 if out_act == OUT_TANH else 0)
        _bias_act(Z, bs[l], Z, act)
        A = Z
    return A


def mlp_forward_cached(list Ws, list bs, cnp.ndarray X, int out_act):
    cdef Py_ssize_t last = len(Ws) - 1
    cdef Py_ssize_t l
    cdef cnp.ndarray A = np.ascontiguousarray(X, dtype=np.float64)
    cdef cnp.ndarray Z, Anext
    cdef int act
    As = [A]
    Zs = []
    for l in range(len(Ws)):
        W = Ws[l]
        Z = np.empty((A.shape[0], W.shape[0]), dtype=np.float64)
        _gemm_x_wt(A, W, Z)
        _bias_act(Z, bs[l], Z, 0)   # keep raw pre-activation in the cache
        Zs.append(Z)
        Anext = np.empty_like(Z)
        act = 2 if l < last else (1 if out_act == OUT_TANH else 0)
        if act == 0:
            Anext = Z
        else:
            _apply_act(Z, Anext, act)
        A = Anext
        if l < last:
            As.append(A)
    return A, As, Zs


cdef void _apply_act(double[:, ::1] Z, double[:, ::1] out, int act) noexcept:
    cdef Py_ssize_t i, j
    cdef double z
    for i in range(Z.shape[0]):
        for j in range(Z.shape[1]):
            z = Z[i, j]
            if act == 2:
                out[i, j] = z if z >= 0.0 else LEAKY_SLOPE * z
            else:
                out[i, j] = ctanh(z)


cdef void _tanh_back(double[:, ::1] dY, double[:, ::1] Y, double[:, ::1] dZ) noexcept:
    cdef Py_ssize_t i, j
    for i in range(dY.shape[0]):
        for j in range(dY.shape[1]):
            dZ[i, j] = dY[i, j] * (1.0 - Y[i, j] * Y[i, j])


cdef void _leaky_back(double[:, ::1] dA, double[:, ::1] Z, double[:, ::1] dZ) noexcept:
    cdef Py_ssize_t i, j
    for i in range(dA.shape[0]):
        for j in range(dA.shape[1]):
            dZ[i, j] = dA[i, j] if Z[i, j] >= 0.0 else LEAKY_SLOPE * dA[i, j]


cdef void _col_sums(double[:, ::1] M, double[::1] out) noexcept:
    cdef Py_ssize_t i, j
    for j in range(M.shape[1]):
        out[j] = 0.0
    for i in range(M.shape[0]):
        for j in range(M.shape[1]):
            out[j] += M[i, j]


def mlp_backward(list Ws, list As, list Zs, cnp.ndarray Y, cnp.ndarray dY, int out_act):
    cdef Py_ssize_t L = len(Ws)
    cdef Py_ssize_t l
    cdef cnp.ndarray dZ, dA, dW, db
    dY = np.ascontiguousarray(dY, dtype=np.float64)
    if out_act == OUT_TANH:
        dZ = np.empty_like(dY)
        _tanh_back(dY, Y, dZ)
    else:
        dZ = dY
    dWs = [None] * L
    dbs = [None] * L
    for l in range(L - 1, -1, -1):
        W = Ws[l]
        A = As[l]
        dW = np.empty_like(W)
        _gemm_dzt_a(dZ, A, dW)
        db = np.empty(W.shape[0], dtype=np.float64)
        _col_sums(dZ, db)
        dWs[l] = dW
        dbs[l] = db
        dA = np.empty((dZ.shape[0], W.shape[1]), dtype=np.float64)
        _gemm_dz_w(dZ, W, dA)
        if l > 0:
            dZ = np.empty_like(dA)
            _leaky_back(dA, Zs[l - 1], dZ)
    return dWs, dbs, dA


def sgd_step(list params, list grads, double lr):
    cdef double[::1] p, g
    cdef Py_ssize_t i
    for arr, garr in zip(params, grads):
        p = arr.reshape(-1)
        g = np.ascontiguousarray(garr, dtype=np.float64).reshape(-1)
        for i in range(p.shape[0]):
            p[i] -= lr * g[i]


def adam_step(list params, list grads, list ms, list vs, long t,
              double lr, double beta1, double beta2, double eps):
    cdef double c1 = 1.0 - beta1 ** t
    cdef double c2 = 1.0 - beta2 ** t
    cdef double[::1] p, g, m, v
    cdef double gi
    cdef Py_ssize_t i
    for arr, garr, marr, varr in zip(params, grads, ms, vs):
        p = arr.reshape(-1)
        g = np.ascontiguousarray(garr, dtype=np.float64).reshape(-1)
        m = marr.reshape(-1)
        v = varr.reshape(-1)
        for i in range(p.shape[0]):
            gi = g[i]
            m[i] = beta1 * m[i] + (1.0 - beta1) * gi
            v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi
            p[i] -= lr * (m[i] / c1) / (csqrt(v[i] / c2) + eps)
