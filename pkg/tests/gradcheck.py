"""Central finite-difference oracle shared by the gradient tests."""

import numpy as np

H = 1e-4


def rel_error(a, b):
    a, b = np.ravel(a), np.ravel(b)
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / scale)


def numeric_grad(f, arr, h=H):
    """d f() / d arr by central differences, perturbing ``arr`` in place."""
    g = np.zeros_like(arr)
    it = np.nditer(arr, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = arr[i]
        arr[i] = old + h
        fp = f()
        arr[i] = old - h
        fm = f()
        arr[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def check_layer(layer, x, rng, training=True):
    """Max relative error over the input and every parameter of ``layer``.

    The scalar objective is ``sum(w * layer(x))`` for a fixed random ``w``.
    """
    y = layer.forward(x, training=training)
    w = rng.standard_normal(y.shape)

    def objective():
        return float(np.sum(w * layer.forward(x, training=training)))

    layer.forward(x, training=training)
    dx = layer.backward(w)
    errs = {"input": rel_error(dx, numeric_grad(objective, x))}
    analytic = {k: np.array(v) for k, v in layer.grads.items()}
    for name, p in layer.params.items():
        errs[name] = rel_error(analytic[name], numeric_grad(objective, p))
    return errs
