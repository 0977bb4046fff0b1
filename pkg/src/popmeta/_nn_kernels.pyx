# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled kernels for the two-layer tanh network.

Same contract as popmeta._nn_numpy; explicit loops beat BLAS dispatch for
the tiny matrices used here (hidden size <= 100, batch <= 100).
"""

from libc.math cimport tanh

import numpy as np


def forward(double[:, ::1] W1, double[::1] b1,
            double[:, ::1] W2, double[::1] b2,
            double[:, ::1] X):
    cdef Py_ssize_t n = X.shape[0], din = X.shape[1]
    cdef Py_ssize_t h = W1.shape[0], dout = W2.shape[0]
    out_arr = np.empty((n, dout))
    cdef double[:, ::1] out = out_arr
    cdef double[::1] a = np.empty(h)
    cdef Py_ssize_t i, j, k
    cdef double z
    with nogil:
        for i in range(n):
            for j in range(h):
                z = b1[j]
                for k in range(din):
                    z += W1[j, k] * X[i, k]
                a[j] = tanh(z)
            for j in range(dout):
                z = b2[j]
                for k in range(h):
                    z += W2[j, k] * a[k]
                out[i, j] = z
    return out_arr


def loss(double[:, ::1] W1, double[::1] b1,
         double[:, ::1] W2, double[::1] b2,
         double[:, ::1] X, double[:, ::1] Y):
    cdef Py_ssize_t n = X.shape[0], din = X.shape[1]
    cdef Py_ssize_t h = W1.shape[0], dout = W2.shape[0]
    cdef double[::1] a = np.empty(h)
    cdef Py_ssize_t i, j, k
    cdef double z, e, acc = 0.0
    with nogil:
        for i in range(n):
            for j in range(h):
                z = b1[j]
                for k in range(din):
                    z += W1[j, k] * X[i, k]
                a[j] = tanh(z)
            for j in range(dout):
                z = b2[j]
                for k in range(h):
                    z += W2[j, k] * a[k]
                e = z - Y[i, j]
                acc += e * e
    return acc / n


def loss_grad(double[:, ::1] W1, double[::1] b1,
              double[:, ::1] W2, double[::1] b2,
              double[:, ::1] X, double[:, ::1] Y):
    cdef Py_ssize_t n = X.shape[0], din = X.shape[1]
    cdef Py_ssize_t h = W1.shape[0], dout = W2.shape[0]
    gW1_arr = np.zeros((h, din))
    gb1_arr = np.zeros(h)
    gW2_arr = np.zeros((dout, h))
    gb2_arr = np.zeros(dout)
    cdef double[:, ::1] gW1 = gW1_arr
    cdef double[::1] gb1 = gb1_arr
    cdef double[:, ::1] gW2 = gW2_arr
    cdef double[::1] gb2 = gb2_arr
    cdef double[::1] a = np.empty(h)
    cdef double[::1] r = np.empty(dout)
    cdef Py_ssize_t i, j, k
    cdef double z, e, dz, acc = 0.0, scale = 2.0 / n
    with nogil:
        for i in range(n):
            for j in range(h):
                z = b1[j]
                for k in range(din):
                    z += W1[j, k] * X[i, k]
                a[j] = tanh(z)
            for j in range(dout):
                z = b2[j]
                for k in range(h):
                    z += W2[j, k] * a[k]
                e = z - Y[i, j]
                acc += e * e
                r[j] = scale * e
                gb2[j] += r[j]
                for k in range(h):
                    gW2[j, k] += r[j] * a[k]
            for j in range(h):
                dz = 0.0
                for k in range(dout):
                    dz += W2[k, j] * r[k]
                dz *= 1.0 - a[j] * a[j]
                gb1[j] += dz
                for k in range(din):
                    gW1[j, k] += dz * X[i, k]
    return acc / n, gW1_arr, gb1_arr, gW2_arr, gb2_arr


cdef void _grad_into(double[:, ::1] W1, double[::1] b1,
                     double[:, ::1] W2, double[::1] b2,
                     double[:, ::1] X, double[:, ::1] Y,
                     Py_ssize_t[::1] idx, Py_ssize_t n,
                     double[:, ::1] gW1, double[::1] gb1,
                     double[:, ::1] gW2, double[::1] gb2,
                     double[::1] a, double[::1] r, double* value) noexcept nogil:
    """Loss and gradient over rows X[idx[0..n-1]]; g* are overwritten."""
    cdef Py_ssize_t din = X.shape[1], h = W1.shape[0], dout = W2.shape[0]
    cdef Py_ssize_t i, j, k, row
    cdef double z, e, dz, acc = 0.0, scale = 2.0 / n
    gW1[:, :] = 0.0
    gb1[:] = 0.0
    gW2[:, :] = 0.0
    gb2[:] = 0.0
    for i in range(n):
        row = idx[i]
        for j in range(h):
            z = b1[j]
            for k in range(din):
                z += W1[j, k] * X[row, k]
            a[j] = tanh(z)
        for j in range(dout):
            z = b2[j]
            for k in range(h):
                z += W2[j, k] * a[k]
            e = z - Y[row, j]
            acc += e * e
            r[j] = scale * e
            gb2[j] += r[j]
            for k in range(h):
                gW2[j, k] += r[j] * a[k]
        for j in range(h):
            dz = 0.0
            for k in range(dout):
                dz += W2[k, j] * r[k]
            dz *= 1.0 - a[j] * a[j]
            gb1[j] += dz
            for k in range(din):
                gW1[j, k] += dz * X[row, k]
    value[0] = acc / n


def maml_contrib(double[:, ::1] W1, double[::1] b1,
                 double[:, ::1] W2, double[::1] b2,
                 double[:, ::1] X, double[:, ::1] Y,
                 Py_ssize_t[::1] tr_idx, Py_ssize_t[::1] m_idx,
                 double alpha, bint second_order,
                 double[:, ::1] accW1, double[::1] accb1,
                 double[:, ::1] accW2, double[::1] accb2):
    """One task's share of the meta update, fused into a single call.

    Computes the inner gradient on X[tr_idx], steps the parameters by
    -alpha * grad, evaluates loss and gradient on X[m_idx] at the stepped
    parameters, applies the second-order correction g - alpha * (H @ g)
    when requested, and adds the result onto the acc* arrays.  Returns the
    post-inner-update loss on the meta batch.
    """
    cdef Py_ssize_t din = X.shape[1], h = W1.shape[0], dout = W2.shape[0]
    cdef Py_ssize_t ntr = tr_idx.shape[0], nm = m_idx.shape[0]
    cdef double[:, ::1] gW1 = np.empty((h, din))
    cdef double[::1] gb1 = np.empty(h)
    cdef double[:, ::1] gW2 = np.empty((dout, h))
    cdef double[::1] gb2 = np.empty(dout)
    cdef double[:, ::1] aW1 = np.empty((h, din))
    cdef double[::1] ab1 = np.empty(h)
    cdef double[:, ::1] aW2 = np.empty((dout, h))
    cdef double[::1] ab2 = np.empty(dout)
    cdef double[:, ::1] hW1 = np.empty((h, din))
    cdef double[::1] hb1 = np.empty(h)
    cdef double[:, ::1] hW2 = np.empty((dout, h))
    cdef double[::1] hb2 = np.empty(dout)
    cdef double[::1] a = np.empty(h)
    cdef double[::1] t = np.empty(h)
    cdef double[::1] ra = np.empty(h)
    cdef double[::1] r = np.empty(dout)
    cdef double[::1] rr = np.empty(dout)
    cdef Py_ssize_t i, j, k, row
    cdef double z, rz, e, re, da, rda, rdz, ignored, value = 0.0, scale = 2.0 / ntr
    with nogil:
        # inner gradient and the stepped (task-adapted) parameters
        _grad_into(W1, b1, W2, b2, X, Y, tr_idx, ntr, gW1, gb1, gW2, gb2, a, r, &ignored)
        for j in range(h):
            ab1[j] = b1[j] - alpha * gb1[j]
            for k in range(din):
                aW1[j, k] = W1[j, k] - alpha * gW1[j, k]
        for j in range(dout):
            ab2[j] = b2[j] - alpha * gb2[j]
            for k in range(h):
                aW2[j, k] = W2[j, k] - alpha * gW2[j, k]
        # meta-batch loss and gradient at the adapted parameters
        _grad_into(aW1, ab1, aW2, ab2, X, Y, m_idx, nm, gW1, gb1, gW2, gb2, a, r, &value)
        if second_order:
            # H @ g at the pre-step parameters over the inner batch
            hW1[:, :] = 0.0
            hb1[:] = 0.0
            hW2[:, :] = 0.0
            hb2[:] = 0.0
            for i in range(ntr):
                row = tr_idx[i]
                for j in range(h):
                    z = b1[j]
                    rz = gb1[j]
                    for k in range(din):
                        z += W1[j, k] * X[row, k]
                        rz += gW1[j, k] * X[row, k]
                    a[j] = tanh(z)
                    t[j] = 1.0 - a[j] * a[j]
                    ra[j] = t[j] * rz
                for j in range(dout):
                    z = b2[j]
                    re = gb2[j]
                    for k in range(h):
                        z += W2[j, k] * a[k]
                        re += gW2[j, k] * a[k] + W2[j, k] * ra[k]
                    e = z - Y[row, j]
                    r[j] = scale * e
                    rr[j] = scale * re
                    hb2[j] += rr[j]
                    for k in range(h):
                        hW2[j, k] += rr[j] * a[k] + r[j] * ra[k]
                for j in range(h):
                    da = 0.0
                    rda = 0.0
                    for k in range(dout):
                        da += W2[k, j] * r[k]
                        rda += gW2[k, j] * r[k] + W2[k, j] * rr[k]
                    rdz = t[j] * rda - 2.0 * a[j] * ra[j] * da
                    hb1[j] += rdz
                    for k in range(din):
                        hW1[j, k] += rdz * X[row, k]
            for j in range(h):
                accb1[j] += gb1[j] - alpha * hb1[j]
                for k in range(din):
                    accW1[j, k] += gW1[j, k] - alpha * hW1[j, k]
            for j in range(dout):
                accb2[j] += gb2[j] - alpha * hb2[j]
                for k in range(h):
                    accW2[j, k] += gW2[j, k] - alpha * hW2[j, k]
        else:
            for j in range(h):
                accb1[j] += gb1[j]
                for k in range(din):
                    accW1[j, k] += gW1[j, k]
            for j in range(dout):
                accb2[j] += gb2[j]
                for k in range(h):
                    accW2[j, k] += gW2[j, k]
    return value


def gd_adapt(double[:, ::1] W1, double[::1] b1,
             double[:, ::1] W2, double[::1] b2,
             double[:, ::1] X, double[:, ::1] Y,
             Py_ssize_t steps, double alpha):
    """``steps`` plain gradient-descent updates on (X, Y), fused.

    Returns new parameter arrays; the inputs are not modified.
    """
    cdef Py_ssize_t n = X.shape[0], din = X.shape[1]
    cdef Py_ssize_t h = W1.shape[0], dout = W2.shape[0]
    cW1_arr = np.array(W1, copy=True)
    cb1_arr = np.array(b1, copy=True)
    cW2_arr = np.array(W2, copy=True)
    cb2_arr = np.array(b2, copy=True)
    cdef double[:, ::1] cW1 = cW1_arr
    cdef double[::1] cb1 = cb1_arr
    cdef double[:, ::1] cW2 = cW2_arr
    cdef double[::1] cb2 = cb2_arr
    cdef double[:, ::1] gW1 = np.empty((h, din))
    cdef double[::1] gb1 = np.empty(h)
    cdef double[:, ::1] gW2 = np.empty((dout, h))
    cdef double[::1] gb2 = np.empty(dout)
    cdef double[::1] a = np.empty(h)
    cdef double[::1] r = np.empty(dout)
    cdef Py_ssize_t[::1] idx = np.arange(n, dtype=np.intp)
    cdef Py_ssize_t s, j, k
    cdef double value
    with nogil:
        for s in range(steps):
            _grad_into(cW1, cb1, cW2, cb2, X, Y, idx, n, gW1, gb1, gW2, gb2, a, r, &value)
            for j in range(h):
                cb1[j] -= alpha * gb1[j]
                for k in range(din):
                    cW1[j, k] -= alpha * gW1[j, k]
            for j in range(dout):
                cb2[j] -= alpha * gb2[j]
                for k in range(h):
                    cW2[j, k] -= alpha * gW2[j, k]
    return cW1_arr, cb1_arr, cW2_arr, cb2_arr


def loss_hvp(double[:, ::1] W1, double[::1] b1,
             double[:, ::1] W2, double[::1] b2,
             double[:, ::1] X, double[:, ::1] Y,
             double[:, ::1] vW1, double[::1] vb1,
             double[:, ::1] vW2, double[::1] vb2):
    cdef Py_ssize_t n = X.shape[0], din = X.shape[1]
    cdef Py_ssize_t h = W1.shape[0], dout = W2.shape[0]
    hW1_arr = np.zeros((h, din))
    hb1_arr = np.zeros(h)
    hW2_arr = np.zeros((dout, h))
    hb2_arr = np.zeros(dout)
    cdef double[:, ::1] hW1 = hW1_arr
    cdef double[::1] hb1 = hb1_arr
    cdef double[:, ::1] hW2 = hW2_arr
    cdef double[::1] hb2 = hb2_arr
    cdef double[::1] a = np.empty(h)
    cdef double[::1] t = np.empty(h)
    cdef double[::1] ra = np.empty(h)
    cdef double[::1] r = np.empty(dout)
    cdef double[::1] rr = np.empty(dout)
    cdef Py_ssize_t i, j, k
    cdef double z, rz, e, re, da, rda, rdz, scale = 2.0 / n
    with nogil:
        for i in range(n):
            for j in range(h):
                z = b1[j]
                rz = vb1[j]
                for k in range(din):
                    z += W1[j, k] * X[i, k]
                    rz += vW1[j, k] * X[i, k]
                a[j] = tanh(z)
                t[j] = 1.0 - a[j] * a[j]
                ra[j] = t[j] * rz
            for j in range(dout):
                z = b2[j]
                re = vb2[j]
                for k in range(h):
                    z += W2[j, k] * a[k]
                    re += vW2[j, k] * a[k] + W2[j, k] * ra[k]
                e = z - Y[i, j]
                r[j] = scale * e
                rr[j] = scale * re
                hb2[j] += rr[j]
                for k in range(h):
                    hW2[j, k] += rr[j] * a[k] + r[j] * ra[k]
            for j in range(h):
                da = 0.0
                rda = 0.0
                for k in range(dout):
                    da += W2[k, j] * r[k]
                    rda += vW2[k, j] * r[k] + W2[k, j] * rr[k]
                rdz = t[j] * rda - 2.0 * a[j] * ra[j] * da
                hb1[j] += rdz
                for k in range(din):
                    hW1[j, k] += rdz * X[i, k]
    return hW1_arr, hb1_arr, hW2_arr, hb2_arr
