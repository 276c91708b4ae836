"""Pure-numpy versions of the hot kernels.

Every function here has a compiled twin in ``_kernels.pyx`` with the same
signature and the same output up to floating-point summation order.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

_GELU_C = np.sqrt(2.0 / np.pi)
_GELU_A = 0.044715


def sosfilt(sos, x):
    """Cascade of biquads in transposed direct form II, zero initial state.

    ``x`` is (channels, samples); the recursion runs over samples and is
    vectorised across channels.
    """
    sos = np.asarray(sos, dtype=np.float64)
    y = np.array(x, dtype=np.float64, copy=True, order="C")
    n_ch, n = y.shape
    for b0, b1, b2, _, a1, a2 in sos:
        z1 = np.zeros(n_ch)
        z2 = np.zeros(n_ch)
        cols = y.T.copy()
        out = np.empty_like(cols)
        for i in range(n):
            xi = cols[i]
            yi = b0 * xi + z1
            z1 = b1 * xi - a1 * yi + z2
            z2 = b2 * xi - a2 * yi
            out[i] = yi
        y = np.ascontiguousarray(out.T)
    return y


def im2col(xp, kc, kt, kd):
    """Patch matrix of a padded (N, C, T, D, F) array.

    Rows are output positions in (n, c, t, d) order; columns follow the
    kernel layout (kc, kt, kd, F).
    """
    n, cp, tp, dp, f = xp.shape
    co, to, do = cp - kc + 1, tp - kt + 1, dp - kd + 1
    win = sliding_window_view(xp, (kc, kt, kd), axis=(1, 2, 3))
    # (N, Co, To, Do, F, kc, kt, kd) -> (N, Co, To, Do, kc, kt, kd, F)
    win = win.transpose(0, 1, 2, 3, 5, 6, 7, 4)
    return np.ascontiguousarray(win).reshape(n * co * to * do, kc * kt * kd * f)


def col2im(dcols, padded_shape, kc, kt, kd):
    """Adjoint of :func:`im2col`: scatter-add patch gradients."""
    n, cp, tp, dp, f = padded_shape
    co, to, do = cp - kc + 1, tp - kt + 1, dp - kd + 1
    d = dcols.reshape(n, co, to, do, kc, kt, kd, f)
    out = np.zeros(padded_shape, dtype=dcols.dtype)
    for i in range(kc):
        for j in range(kt):
            for k in range(kd):
                out[:, i:i + co, j:j + to, k:k + do, :] += d[:, :, :, :, i, j, k, :]
    return out


def _into(y, out):
    if out is None:
        return y
    out[...] = y
    return out


def gelu_with_deriv(x, out=None):
    """GELU(x) and its derivative; ``out`` (may be ``x``) receives GELU(x)."""
    inner = _GELU_C * (x + _GELU_A * x ** 3)
    th = np.tanh(inner)
    y = 0.5 * x * (1.0 + th)
    d = 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * _GELU_C * (1.0 + 3.0 * _GELU_A * x * x)
    return _into(y.astype(x.dtype, copy=False), out), d.astype(x.dtype, copy=False)


def swish_with_deriv(x, out=None):
    s = _sigmoid(x)
    d = (s + x * s * (1.0 - s)).astype(x.dtype, copy=False)
    return _into((x * s).astype(x.dtype, copy=False), out), d


def gelu(x, out=None):
    inner = _GELU_C * (x + _GELU_A * x ** 3)
    return _into((0.5 * x * (1.0 + np.tanh(inner))).astype(x.dtype, copy=False), out)


def gelu_grad(x, dy):
    inner = _GELU_C * (x + _GELU_A * x ** 3)
    th = np.tanh(inner)
    d = 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * _GELU_C * (1.0 + 3.0 * _GELU_A * x * x)
    return (dy * d).astype(x.dtype, copy=False)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def swish(x, out=None):
    return _into((x * _sigmoid(x)).astype(x.dtype, copy=False), out)


def swish_grad(x, dy):
    s = _sigmoid(x)
    return (dy * (s + x * s * (1.0 - s))).astype(x.dtype, copy=False)


def bn_forward_train(x, gamma, beta, eps):
    """Training-mode batch norm over the rows of a (M, F) array.

    Returns (y, xhat, mean, var, inv_std); mean and var are population moments.
    """
    mean = x.mean(axis=0, dtype=np.float64)
    xc = x - mean.astype(x.dtype)
    var = (xc.astype(np.float64) ** 2).mean(axis=0)
    inv_std = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = xc * inv_std
    return xhat * gamma + beta, xhat, mean, var, inv_std


def bn_backward(dy, xhat, gamma, inv_std):
    """Returns (dx, dgamma, dbeta) for :func:`bn_forward_train`."""
    m = dy.shape[0]
    dbeta = dy.sum(axis=0, dtype=np.float64)
    dgamma = (dy * xhat).sum(axis=0, dtype=np.float64)
    dx = (gamma * inv_std) * (dy - (dbeta / m).astype(dy.dtype) - xhat * (dgamma / m).astype(dy.dtype))
    return dx.astype(dy.dtype, copy=False), dgamma.astype(dy.dtype), dbeta.astype(dy.dtype)
