"""Hot-kernel dispatch.

The compiled extension ``erp_forge._kernels`` is used when it imports;
otherwise the numpy implementations in ``erp_forge._fallback`` take over.
Set ``ERP_FORGE_PURE=1`` to force the fallback (the benchmark and the
kernel-parity tests do this per call through :func:`backend`).
"""

import os

from erp_forge import _fallback

try:
    from erp_forge import _kernels as _compiled
except ImportError:  # extension not built
    _compiled = None

_NAMES = (
    "sosfilt", "im2col", "col2im", "gelu", "gelu_grad", "swish", "swish_grad",
    "gelu_with_deriv", "swish_with_deriv", "bn_forward_train", "bn_backward",
)


def backend(name=None):
    """Return the kernel module for ``name`` ('compiled', 'python') or the active one."""
    if name is None:
        return _active
    if name == "python":
        return _fallback
    if name == "compiled":
        if _compiled is None:
            raise ImportError("erp_forge._kernels is not built; run `pip install -e .`")
        return _compiled
    raise ValueError(f"unknown kernel backend {name!r}")


if _compiled is not None and os.environ.get("ERP_FORGE_PURE", "") not in ("1", "true", "yes"):
    _active = _compiled
    BACKEND = "compiled"
else:
    _active = _fallback
    BACKEND = "python"

HAVE_COMPILED = _compiled is not None

sosfilt = _active.sosfilt
im2col = _active.im2col
col2im = _active.col2im
gelu = _active.gelu
gelu_grad = _active.gelu_grad
swish = _active.swish
swish_grad = _active.swish_grad
gelu_with_deriv = _active.gelu_with_deriv
swish_with_deriv = _active.swish_with_deriv
bn_forward_train = _active.bn_forward_train
bn_backward = _active.bn_backward

__all__ = ["BACKEND", "HAVE_COMPILED", "backend", *_NAMES]
