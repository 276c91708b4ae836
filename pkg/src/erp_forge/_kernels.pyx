# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot kernels. Mirrors ``_fallback`` function for function."""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp, expf

cnp.import_array()

ctypedef fused real:
    float
    double

cdef double GELU_C = 0.7978845608028654
cdef double GELU_A = 0.044715


def sosfilt(sos, x):
    cdef double[:, ::1] s = np.ascontiguousarray(sos, dtype=np.float64)
    y_arr = np.array(x, dtype=np.float64, copy=True, order="C")
    cdef double[:, ::1] y = y_arr
    cdef Py_ssize_t n_ch = y.shape[0], n = y.shape[1], n_sec = s.shape[0]
    cdef Py_ssize_t c, i, k
    cdef double b0, b1, b2, a1, a2, z1, z2, xi, yi
    for c in range(n_ch):
        for k in range(n_sec):
            b0 = s[k, 0]; b1 = s[k, 1]; b2 = s[k, 2]
            a1 = s[k, 4]; a2 = s[k, 5]
            z1 = 0.0
            z2 = 0.0
            for i in range(n):
                xi = y[c, i]
                yi = b0 * xi + z1
                z1 = b1 * xi - a1 * yi + z2
                z2 = b2 * xi - a2 * yi
                y[c, i] = yi
    return y_arr


def _im2col(real[:, :, :, :, ::1] xp, real[:, ::1] out, Py_ssize_t kc, Py_ssize_t kt, Py_ssize_t kd):
    # each (i, j) tap of a row is one contiguous run of kd * f input values
    cdef Py_ssize_t n = xp.shape[0], cp = xp.shape[1], tp = xp.shape[2], dp = xp.shape[3], f = xp.shape[4]
    cdef Py_ssize_t co = cp - kc + 1, to = tp - kt + 1, do = dp - kd + 1
    cdef Py_ssize_t run = kd * f, b, c, t, d, i, j, q
    cdef real* src = &xp[0, 0, 0, 0, 0]
    cdef real* dst = &out[0, 0]
    cdef real* s
    for b in range(n):
        for c in range(co):
            for t in range(to):
                for d in range(do):
                    for i in range(kc):
                        for j in range(kt):
                            s = src + (((b * cp + c + i) * tp + t + j) * dp + d) * f
                            for q in range(run):
                                dst[q] = s[q]
                            dst += run


def _col2im(real[:, ::1] dcols, real[:, :, :, :, ::1] out, Py_ssize_t kc, Py_ssize_t kt, Py_ssize_t kd):
    cdef Py_ssize_t n = out.shape[0], cp = out.shape[1], tp = out.shape[2], dp = out.shape[3], f = out.shape[4]
    cdef Py_ssize_t co = cp - kc + 1, to = tp - kt + 1, do = dp - kd + 1
    cdef Py_ssize_t run = kd * f, b, c, t, d, i, j, q
    cdef real* src = &dcols[0, 0]
    cdef real* dst = &out[0, 0, 0, 0, 0]
    cdef real* o
    for b in range(n):
        for c in range(co):
            for t in range(to):
                for d in range(do):
                    for i in range(kc):
                        for j in range(kt):
                            o = dst + (((b * cp + c + i) * tp + t + j) * dp + d) * f
                            for q in range(run):
                                o[q] += src[q]
                            src += run


def im2col(xp, Py_ssize_t kc, Py_ssize_t kt, Py_ssize_t kd):
    xp = np.ascontiguousarray(xp)
    n, cp, tp, dp, f = xp.shape
    rows = n * (cp - kc + 1) * (tp - kt + 1) * (dp - kd + 1)
    out = np.empty((rows, kc * kt * kd * f), dtype=xp.dtype)
    if out.size:
        _im2col(xp, out, kc, kt, kd)
    return out


def col2im(dcols, padded_shape, Py_ssize_t kc, Py_ssize_t kt, Py_ssize_t kd):
    dcols = np.ascontiguousarray(dcols)
    out = np.zeros(padded_shape, dtype=dcols.dtype)
    if dcols.size:
        _col2im(dcols, out, kc, kt, kd)
    return out


cdef inline real _exp_clamped(real u) noexcept nogil:
    # clamp keeps exp finite; exp-based forms vectorise under -O3
    cdef real lim = 80 if real is float else 700
    if u > lim:
        u = lim
    elif u < -lim:
        u = -lim
    if real is float:
        return expf(u)
    else:
        return exp(u)


def _gelu_fwd(real[::1] x, real[::1] y, real[::1] d):
    # with e = exp(2u): 1 + tanh u = 2e/(e+1), 1 - tanh^2 u = 4e/(e+1)^2, no cancellation in the tails
    cdef Py_ssize_t i
    cdef real v, e, r, c = <real>GELU_C, a = <real>GELU_A, h = 0.5, one = 1, two = 2, a3 = 3 * a
    for i in range(x.shape[0]):
        v = x[i]
        e = _exp_clamped(two * c * (v + a * v * v * v))
        r = one / (e + one)
        y[i] = v * e * r
        d[i] = e * r + two * v * e * r * r * c * (one + a3 * v * v)


def _swish_fwd(real[::1] x, real[::1] y, real[::1] d):
    cdef Py_ssize_t i
    cdef real v, e, s, one = 1
    for i in range(x.shape[0]):
        v = x[i]
        e = _exp_clamped(-v)
        s = one / (one + e)
        y[i] = v * s
        d[i] = s + v * s * (e * s)


def _gelu_only(real[::1] x, real[::1] y):
    cdef Py_ssize_t i
    cdef real v, e, c = <real>GELU_C, a = <real>GELU_A, one = 1, two = 2
    for i in range(x.shape[0]):
        v = x[i]
        e = _exp_clamped(two * c * (v + a * v * v * v))
        y[i] = v * e / (e + one)


def _swish_only(real[::1] x, real[::1] y):
    cdef Py_ssize_t i
    cdef real v, one = 1
    for i in range(x.shape[0]):
        v = x[i]
        y[i] = v / (one + _exp_clamped(-v))


def _value_only(fn, x, out=None):
    x = np.ascontiguousarray(x)
    y = np.empty_like(x) if out is None else out
    fn(x.reshape(-1), y.reshape(-1))
    return y


def _with_deriv(fn, x, out=None):
    x = np.ascontiguousarray(x)
    y = np.empty_like(x) if out is None else out
    d = np.empty_like(x)
    fn(x.reshape(-1), y.reshape(-1), d.reshape(-1))
    return y, d


def gelu_with_deriv(x, out=None):
    """GELU(x) and its derivative in one pass."""
    return _with_deriv(_gelu_fwd, x, out)


def swish_with_deriv(x, out=None):
    return _with_deriv(_swish_fwd, x, out)


def gelu(x, out=None):
    return _value_only(_gelu_only, x, out)


def gelu_grad(x, dy):
    return (dy * gelu_with_deriv(x)[1]).astype(x.dtype, copy=False)


def swish(x, out=None):
    return _value_only(_swish_only, x, out)


def swish_grad(x, dy):
    return (dy * swish_with_deriv(x)[1]).astype(x.dtype, copy=False)


def _bn_fwd(real[:, ::1] x, real[::1] gamma, real[::1] beta, double eps,
            real[:, ::1] y, real[:, ::1] xhat, double[::1] mean, double[::1] var, real[::1] inv_std):
    cdef Py_ssize_t m = x.shape[0], f = x.shape[1], i, j
    cdef double[::1] acc = np.zeros(f)
    cdef double[::1] acc2 = np.zeros(f)
    cdef double dv
    for i in range(m):
        for j in range(f):
            acc[j] += x[i, j]
    for j in range(f):
        mean[j] = acc[j] / m
    for i in range(m):
        for j in range(f):
            dv = x[i, j] - mean[j]
            acc2[j] += dv * dv
    for j in range(f):
        var[j] = acc2[j] / m
        inv_std[j] = <real>(1.0 / (var[j] + eps) ** 0.5)
    cdef real h
    for i in range(m):
        for j in range(f):
            h = <real>(x[i, j] - mean[j]) * inv_std[j]
            xhat[i, j] = h
            y[i, j] = h * gamma[j] + beta[j]


def _bn_bwd(real[:, ::1] dy, real[:, ::1] xhat, real[::1] gamma, real[::1] inv_std,
            real[:, ::1] dx, double[::1] dgamma, double[::1] dbeta):
    cdef Py_ssize_t m = dy.shape[0], f = dy.shape[1], i, j
    for i in range(m):
        for j in range(f):
            dbeta[j] += dy[i, j]
            dgamma[j] += dy[i, j] * xhat[i, j]
    cdef double[::1] c1 = np.empty(f)
    cdef double[::1] c2 = np.empty(f)
    cdef double[::1] sc = np.empty(f)
    for j in range(f):
        sc[j] = gamma[j] * inv_std[j]
        c1[j] = dbeta[j] / m
        c2[j] = dgamma[j] / m
    for i in range(m):
        for j in range(f):
            dx[i, j] = <real>(sc[j] * (dy[i, j] - c1[j] - xhat[i, j] * c2[j]))


def bn_forward_train(x, gamma, beta, eps):
    """Training-mode batch norm over the rows of a (M, F) array.

    Returns (y, xhat, mean, var, inv_std); mean and var are population moments.
    """
    x = np.ascontiguousarray(x)
    m, f = x.shape
    y = np.empty_like(x)
    xhat = np.empty_like(x)
    mean = np.empty(f)
    var = np.empty(f)
    inv_std = np.empty(f, dtype=x.dtype)
    _bn_fwd(x, np.ascontiguousarray(gamma, dtype=x.dtype), np.ascontiguousarray(beta, dtype=x.dtype),
            eps, y, xhat, mean, var, inv_std)
    return y, xhat, mean, var, inv_std


def bn_backward(dy, xhat, gamma, inv_std):
    """Returns (dx, dgamma, dbeta) for :func:`bn_forward_train`."""
    dy = np.ascontiguousarray(dy, dtype=xhat.dtype)
    f = dy.shape[1]
    dx = np.empty_like(dy)
    dgamma = np.zeros(f)
    dbeta = np.zeros(f)
    _bn_bwd(dy, xhat, np.ascontiguousarray(gamma, dtype=dy.dtype), np.ascontiguousarray(inv_std, dtype=dy.dtype),
            dx, dgamma, dbeta)
    return dx, dgamma.astype(dy.dtype), dbeta.astype(dy.dtype)
