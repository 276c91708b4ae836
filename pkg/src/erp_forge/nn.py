"""A small layer engine covering exactly what the ERP classifiers need.

Arrays are batch-first and channels-last:

* 2D samples are ``(C, T, F)`` -> batches ``(N, C, T, F)``
* 3D samples are ``(C, T, D, F)`` -> batches ``(N, C, T, D, F)``

where ``C`` is the electrode (or CSP component) axis, ``T`` time, ``D`` the
temporal-shift depth and ``F`` the feature maps. Convolutions are
cross-correlations. Every layer implements ``forward(x, training)``,
``backward(dy)`` and ``output_shape(sample_shape)``.
"""

import struct

import numpy as np

from erp_forge import kernels
from erp_forge.errors import DegenerateBatch, InvalidSpec, NotForwarded, ShapeMismatch

BN_EPS = 1e-5
BN_MOMENTUM = 0.9


def _uniform_init(rng, shape, fan_in, dtype):
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


class Layer:
    kind = "layer"
    table_row = None

    def __init__(self, name=None):
        self.name = name or self.kind
        self.params = {}
        self.grads = {}
        self.buffers = {}
        self._cache = None

    def output_shape(self, shape):
        return tuple(shape)

    def zero_grad(self):
        for k, v in self.params.items():
            self.grads[k] = np.zeros_like(v)

    def _require_cache(self):
        if self._cache is None:
            raise NotForwarded(f"{self.name}: backward called before forward")
        return self._cache

    def __repr__(self):
        return f"{type(self).__name__}({self.name!r})"


class Conv(Layer):
    """2D or 3D convolution (``len(kernel)`` decides) with bias.

    ``padding='same'`` pads symmetrically with zeros so every spatial axis
    keeps its size; ``'valid'`` uses no padding.
    """

    kind = "conv"

    def __init__(self, kernel, filters, in_features, padding="valid", *, rng, dtype=np.float32, name=None):
        super().__init__(name)
        kernel = tuple(int(k) for k in kernel)
        if len(kernel) not in (2, 3) or min(kernel) < 1:
            raise InvalidSpec(f"bad kernel {kernel}")
        if padding not in ("valid", "same"):
            raise InvalidSpec(f"bad padding {padding!r}")
        self.kernel = kernel
        self.ndim = len(kernel)
        self.filters = int(filters)
        self.in_features = int(in_features)
        self.padding = padding
        self.input_grad = True
        fan_in = int(np.prod(kernel)) * self.in_features
        self.params["W"] = _uniform_init(rng, kernel + (self.in_features, self.filters), fan_in, dtype)
        self.params["b"] = np.zeros(self.filters, dtype=dtype)
        self.zero_grad()

    @property
    def _k3(self):
        return self.kernel if self.ndim == 3 else self.kernel + (1,)

    def _pads(self):
        if self.padding == "valid":
            return [(0, 0)] * 3
        return [((k - 1) // 2, k - 1 - (k - 1) // 2) for k in self._k3]

    def output_shape(self, shape):
        shape = tuple(shape)
        if len(shape) != self.ndim + 1:
            raise ShapeMismatch(f"{self.name}: expected {self.ndim + 1}-axis sample, got {shape}")
        if shape[-1] != self.in_features:
            raise ShapeMismatch(f"{self.name}: expected {self.in_features} input features, got {shape[-1]}")
        if self.padding == "same":
            return shape[:-1] + (self.filters,)
        out = []
        for size, k in zip(shape[:-1], self.kernel):
            if k > size:
                raise ShapeMismatch(f"{self.name}: kernel {self.kernel} does not fit input {shape}")
            out.append(size - k + 1)
        return tuple(out) + (self.filters,)

    def forward(self, x, training=False):
        self.output_shape(x.shape[1:])
        x5 = x if self.ndim == 3 else x[:, :, :, None, :]
        pads = self._pads()
        if any(p != (0, 0) for p in pads):
            x5 = np.pad(x5, [(0, 0), *pads, (0, 0)])
        x5 = np.ascontiguousarray(x5, dtype=self.params["W"].dtype)
        kc, kt, kd = self._k3
        n, cp, tp, dp, _ = x5.shape
        out_sp = (cp - kc + 1, tp - kt + 1, dp - kd + 1)
        cols = kernels.im2col(x5, kc, kt, kd)
        wmat = self.params["W"].reshape(-1, self.filters)
        y = cols @ wmat
        y += self.params["b"]
        y = y.reshape((n,) + out_sp + (self.filters,))
        if self.ndim == 2:
            y = y[:, :, :, 0, :]
        self._cache = (cols, x5.shape, x.shape) if training else None
        return y

    def backward(self, dy):
        cols, padded_shape, in_shape = self._require_cache()
        dy2 = np.ascontiguousarray(dy).reshape(-1, self.filters)
        self.grads["W"] = (cols.T @ dy2).reshape(self.params["W"].shape)
        self.grads["b"] = dy2.sum(axis=0)
        if not self.input_grad:
            return None
        dcols = dy2 @ self.params["W"].reshape(-1, self.filters).T
        kc, kt, kd = self._k3
        dxp = kernels.col2im(dcols, padded_shape, kc, kt, kd)
        (c0, c1), (t0, t1), (d0, d1) = self._pads()
        dx = dxp[:, c0:padded_shape[1] - c1, t0:padded_shape[2] - t1, d0:padded_shape[3] - d1, :]
        return np.ascontiguousarray(dx.reshape(in_shape))


class BatchNorm(Layer):
    """Per-feature normalisation over the batch and every non-feature axis."""

    kind = "batchnorm"

    def __init__(self, features, *, dtype=np.float32, name=None):
        super().__init__(name)
        self.features = int(features)
        self.params["gamma"] = np.ones(self.features, dtype=dtype)
        self.params["beta"] = np.zeros(self.features, dtype=dtype)
        self.buffers["running_mean"] = np.zeros(self.features, dtype=dtype)
        self.buffers["running_var"] = np.ones(self.features, dtype=dtype)
        self.zero_grad()

    def output_shape(self, shape):
        if shape[-1] != self.features:
            raise ShapeMismatch(f"{self.name}: expected {self.features} features, got {shape[-1]}")
        return tuple(shape)

    inplace = True

    def forward(self, x, training=False, inplace=False):
        gamma, beta = self.params["gamma"], self.params["beta"]
        if not training:
            self._cache = None
            scale = gamma / np.sqrt(self.buffers["running_var"] + BN_EPS)
            shift = beta - self.buffers["running_mean"] * scale
            if inplace:
                y = x
                y *= scale.astype(x.dtype, copy=False)
            else:
                y = x * scale.astype(x.dtype, copy=False)
            y += shift.astype(x.dtype, copy=False)
            return y
        if x.shape[0] < 2:
            raise DegenerateBatch(f"{self.name}: batch of {x.shape[0]} in training mode")
        x2 = x.reshape(-1, self.features)
        m = x2.shape[0]
        y, xhat, mean, var, inv_std = kernels.bn_forward_train(x2, gamma, beta, BN_EPS)
        self._cache = (xhat, inv_std, x.shape)
        mom = BN_MOMENTUM
        self.buffers["running_mean"] = (mom * self.buffers["running_mean"] + (1 - mom) * mean).astype(gamma.dtype)
        unbiased = var * m / max(m - 1, 1)
        self.buffers["running_var"] = (mom * self.buffers["running_var"] + (1 - mom) * unbiased).astype(gamma.dtype)
        return y.reshape(x.shape)

    def backward(self, dy):
        xhat, inv_std, shape = self._require_cache()
        dx, self.grads["gamma"], self.grads["beta"] = kernels.bn_backward(
            dy.reshape(-1, self.features), xhat, self.params["gamma"], inv_std
        )
        return dx.reshape(shape)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


ACTIVATIONS = ("relu", "gelu", "swish", "sigmoid")


def activation(kind, x, out=None):
    """Elementwise activation; GELU is the tanh approximation, Swish uses beta=1.

    ``out`` (which may be ``x``) receives the result when given.
    """
    if kind == "relu":
        return np.maximum(x, 0, out=out)
    if kind == "gelu":
        return kernels.gelu(x, out=out)
    if kind == "swish":
        return kernels.swish(x, out=out)
    if kind == "sigmoid":
        return _sigmoid(x).astype(x.dtype, copy=False)
    raise InvalidSpec(f"unknown activation {kind!r}")


def activation_grad(kind, x, dy):
    """``dy`` times the derivative of ``activation(kind, .)`` at ``x``."""
    if kind == "relu":
        return dy * (x > 0)
    if kind == "gelu":
        return kernels.gelu_grad(x, dy)
    if kind == "swish":
        return kernels.swish_grad(x, dy)
    if kind == "sigmoid":
        s = _sigmoid(x)
        return (dy * s * (1 - s)).astype(x.dtype, copy=False)
    raise InvalidSpec(f"unknown activation {kind!r}")


class Activation(Layer):
    kind = "activation"

    def __init__(self, fn, name=None):
        if fn not in ACTIVATIONS:
            raise InvalidSpec(f"unknown activation {fn!r}")
        super().__init__(name or fn)
        self.fn = fn

    inplace = True

    def forward(self, x, training=False, inplace=False):
        out = x if inplace and x.flags.c_contiguous else None
        if not training:
            self._cache = None
            return activation(self.fn, x, out=out)
        if self.fn == "gelu":
            y, d = kernels.gelu_with_deriv(x, out=out)
        elif self.fn == "swish":
            y, d = kernels.swish_with_deriv(x, out=out)
        elif self.fn == "relu":
            y, d = np.maximum(x, 0), (x > 0).astype(x.dtype)
        else:
            y = activation(self.fn, x)
            d = y * (1 - y)
        self._cache = d
        return y

    def backward(self, dy):
        return dy * self._require_cache()


class SqueezeExcite(Layer):
    """GAP -> FC(hidden) -> ReLU -> FC(features) -> sigmoid, then rescale each feature map."""

    kind = "se_block"

    def __init__(self, features, hidden=8, *, rng, dtype=np.float32, name=None):
        super().__init__(name)
        self.features = int(features)
        self.hidden = int(hidden)
        self.params["W1"] = _uniform_init(rng, (self.features, self.hidden), self.features, dtype)
        self.params["b1"] = np.zeros(self.hidden, dtype=dtype)
        self.params["W2"] = _uniform_init(rng, (self.hidden, self.features), self.hidden, dtype)
        self.params["b2"] = np.zeros(self.features, dtype=dtype)
        self.zero_grad()

    def output_shape(self, shape):
        if shape[-1] != self.features:
            raise ShapeMismatch(f"{self.name}: expected {self.features} features, got {shape[-1]}")
        return tuple(shape)

    def excitation_shape(self, shape):
        return (1,) * (len(shape) - 1) + (self.features,)

    def excitation(self, x):
        """Per-sample gate of shape (N, F)."""
        axes = tuple(range(1, x.ndim - 1))
        s = x.mean(axis=axes)
        h = s @ self.params["W1"] + self.params["b1"]
        r = np.maximum(h, 0)
        e = r @ self.params["W2"] + self.params["b2"]
        return s, h, r, _sigmoid(e).astype(x.dtype, copy=False)

    def forward(self, x, training=False):
        s, h, r, g = self.excitation(x)
        gb = g.reshape((x.shape[0],) + (1,) * (x.ndim - 2) + (self.features,))
        self._cache = (x, s, h, r, g) if training else None
        return x * gb

    def backward(self, dy):
        x, s, h, r, g = self._require_cache()
        axes = tuple(range(1, x.ndim - 1))
        count = int(np.prod(x.shape[1:-1]))
        bshape = (x.shape[0],) + (1,) * (x.ndim - 2) + (self.features,)
        dg = (dy * x).sum(axis=axes)
        de = dg * g * (1 - g)
        self.grads["W2"] = r.T @ de
        self.grads["b2"] = de.sum(axis=0)
        dh = (de @ self.params["W2"].T) * (h > 0)
        self.grads["W1"] = s.T @ dh
        self.grads["b1"] = dh.sum(axis=0)
        ds = dh @ self.params["W1"].T
        return dy * g.reshape(bshape) + (ds / count).reshape(bshape)


class GlobalAvgPool(Layer):
    """Mean over every axis except batch and features; singleton axes are kept."""

    kind = "gap"

    def output_shape(self, shape):
        return (1,) * (len(shape) - 1) + (shape[-1],)

    def forward(self, x, training=False):
        self._cache = x.shape if training else None
        return x.mean(axis=tuple(range(1, x.ndim - 1)), keepdims=True)

    def backward(self, dy):
        shape = self._require_cache()
        count = int(np.prod(shape[1:-1]))
        return np.broadcast_to(dy / count, shape).copy()


class Flatten(Layer):
    kind = "flatten"

    def output_shape(self, shape):
        return (int(np.prod(shape)),)

    def forward(self, x, training=False):
        self._cache = x.shape if training else None
        return x.reshape(x.shape[0], -1)

    def backward(self, dy):
        return dy.reshape(self._require_cache())


class Dense(Layer):
    """Fully connected layer; flattens its input first."""

    kind = "dense"

    def __init__(self, in_features, units, *, rng, dtype=np.float32, name=None):
        super().__init__(name)
        self.in_features = int(in_features)
        self.units = int(units)
        self.params["W"] = _uniform_init(rng, (self.in_features, self.units), self.in_features, dtype)
        self.params["b"] = np.zeros(self.units, dtype=dtype)
        self.zero_grad()

    def output_shape(self, shape):
        if int(np.prod(shape)) != self.in_features:
            raise ShapeMismatch(f"{self.name}: expected {self.in_features} inputs, got shape {tuple(shape)}")
        return (self.units,)

    def forward(self, x, training=False):
        x2 = x.reshape(x.shape[0], -1)
        self._cache = (x2, x.shape) if training else None
        return x2 @ self.params["W"] + self.params["b"]

    def backward(self, dy):
        x2, shape = self._require_cache()
        self.grads["W"] = x2.T @ dy
        self.grads["b"] = dy.sum(axis=0)
        return (dy @ self.params["W"].T).reshape(shape)


class Dropout(Layer):
    """Inverted dropout: scaled by 1/(1-p) in training, identity at inference."""

    kind = "dropout"

    def __init__(self, p, *, rng, name=None):
        if not 0 <= p < 1:
            raise InvalidSpec(f"dropout p={p} outside [0, 1)")
        super().__init__(name)
        self.p = float(p)
        self.rng = rng

    def forward(self, x, training=False):
        if not training or self.p == 0:
            self._cache = 1.0 if training else None
            return x
        keep = self.rng.random(x.shape, dtype=np.float32) >= self.p
        mask = keep.astype(x.dtype) / x.dtype.type(1 - self.p)
        self._cache = mask
        return x * mask

    def backward(self, dy):
        return dy * self._require_cache()


def softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


class Softmax(Layer):
    kind = "softmax"

    def forward(self, x, training=False):
        y = softmax(x)
        self._cache = y if training else None
        return y

    def backward(self, dy):
        y = self._require_cache()
        return y * (dy - (dy * y).sum(axis=-1, keepdims=True))


class Network:
    """Sequential stack of layers.

    ``rows`` optionally maps each layer to the architecture-table row whose
    "Output Shape" cell that layer's output realises (see ``models``).
    """

    def __init__(self, layers, input_shape, *, rng=None, rows=None):
        self.layers = list(layers)
        self.input_shape = tuple(input_shape)
        self.rng = rng
        self.rows = list(rows) if rows is not None else [None] * len(self.layers)
        self._forwarded = False

    def forward(self, x, training=False):
        inp = x
        for layer in self.layers:
            # layers that do not cache their input may overwrite intermediates the network owns
            if getattr(layer, "inplace", False) and not np.may_share_memory(x, inp) and (
                    not training or isinstance(layer, Activation)):
                x = layer.forward(x, training, inplace=True)
            else:
                x = layer.forward(x, training)
        self._forwarded = training
        return x

    def backward(self, dy, from_logits=False, input_grad=True):
        """Backpropagate ``dy``.

        With ``from_logits=True`` the trailing Softmax is skipped and ``dy``
        is the gradient with respect to its input.
        """
        if not self._forwarded:
            raise NotForwarded("network backward called before a training forward pass")
        layers = self.layers
        if from_logits and isinstance(layers[-1], Softmax):
            layers = layers[:-1]
        first = layers[0]
        if isinstance(first, Conv):
            first.input_grad = input_grad
        for layer in reversed(layers):
            dy = layer.backward(dy)
            if dy is None:
                break
        if isinstance(first, Conv):
            first.input_grad = True
        return dy

    def predict(self, x, batch_size=32):
        # small batches keep the 3D intermediates in cache
        outs = [self.forward(x[i:i + batch_size], training=False) for i in range(0, len(x), batch_size)]
        return np.concatenate(outs, axis=0) if outs else np.zeros((0, 2))

    def trace(self, input_shape=None):
        """Symbolic per-layer output shapes: list of (layer name, shape)."""
        shape = tuple(input_shape or self.input_shape)
        out = []
        for layer in self.layers:
            shape = layer.output_shape(shape)
            out.append((layer.name, shape))
        return out

    def parameters(self):
        """Yield (layer index, name, param array, grad array) in a fixed order."""
        for i, layer in enumerate(self.layers):
            for name in sorted(layer.params):
                yield i, name, layer.params[name], layer.grads[name]

    def n_params(self):
        return int(sum(p.size for _, _, p, _ in self.parameters()))

    def state_arrays(self):
        """Every persistent array (parameters and buffers), in checkpoint order."""
        for i, layer in enumerate(self.layers):
            for name in sorted(layer.params):
                yield i, name, layer.params[name]
            for name in sorted(layer.buffers):
                yield i, name, layer.buffers[name]

    def get_state(self):
        return {(i, name): arr.copy() for i, name, arr in self.state_arrays()}

    def set_state(self, state):
        for (i, name), arr in state.items():
            layer = self.layers[i]
            target = layer.params if name in layer.params else layer.buffers
            if target[name].shape != arr.shape:
                raise ShapeMismatch(f"layer {i} {name}: shape {arr.shape} != {target[name].shape}")
            target[name] = np.array(arr, dtype=target[name].dtype)


CHECKPOINT_MAGIC = b"ERPW"
CHECKPOINT_VERSION = 1


def save_checkpoint(network, path):
    """Versioned binary checkpoint.

    Layout (little endian): ``b"ERPW"``, u8 version, u32 array count, then per
    array: u32 layer index, u8 name length, name bytes, u8 ndim, u32 dims,
    float32 values in row-major order.
    """
    arrays = list(network.state_arrays())
    chunks = [CHECKPOINT_MAGIC, struct.pack("<BI", CHECKPOINT_VERSION, len(arrays))]
    for i, name, arr in arrays:
        nb = name.encode("ascii")
        chunks.append(struct.pack("<IB", i, len(nb)) + nb)
        chunks.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


def load_checkpoint(network, path):
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not an erp_forge checkpoint")
    version, count = struct.unpack_from("<BI", buf, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    pos = 9
    state = {}
    for _ in range(count):
        i, nlen = struct.unpack_from("<IB", buf, pos)
        pos += 5
        name = buf[pos:pos + nlen].decode("ascii")
        pos += nlen
        (ndim,) = struct.unpack_from("<B", buf, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}I", buf, pos)
        pos += 4 * ndim
        size = int(np.prod(shape))
        state[(i, name)] = np.frombuffer(buf, dtype="<f4", count=size, offset=pos).reshape(shape)
        pos += 4 * size
    network.set_state(state)
    return network
