"""Classification losses on softmax outputs, with gradients w.r.t. the logits."""

from dataclasses import dataclass

import numpy as np

from erp_forge.errors import InvalidProb, InvalidSpec, MissingClass

LOSS_KINDS = ("cross_entropy", "weighted_ce", "focal")
PROB_FLOOR = 1e-12


@dataclass(frozen=True)
class LossSpec:
    """``class_weights=None`` means: derive from the training labels
    (ignored by plain cross-entropy, which always uses unit weights)."""

    kind: str = "focal"
    class_weights: tuple = None
    focal_gamma: float = 2.0

    def __post_init__(self):
        if self.kind not in LOSS_KINDS:
            raise InvalidSpec(f"unknown loss {self.kind!r}")
        if self.focal_gamma < 0:
            raise InvalidSpec("focal_gamma must be >= 0")
        if self.class_weights is not None:
            w = tuple(float(v) for v in self.class_weights)
            if len(w) != 2 or min(w) <= 0:
                raise InvalidSpec(f"class weights must be two positive numbers, got {self.class_weights}")
            object.__setattr__(self, "class_weights", w)

    @property
    def gamma(self):
        return self.focal_gamma if self.kind == "focal" else 0.0

    def resolved(self, labels):
        """Copy with class weights filled in from ``labels`` where needed."""
        if self.kind == "cross_entropy":
            return LossSpec(self.kind, (1.0, 1.0), self.focal_gamma)
        if self.class_weights is not None:
            return self
        return LossSpec(self.kind, class_weights_from(labels), self.focal_gamma)


def class_weights_from(labels):
    """Inverse-frequency weights ``w_c = N / (2 N_c)`` as ``(w0, w1)``."""
    y = np.asarray(labels)
    n = len(y)
    n1 = int(np.sum(y == 1))
    n0 = int(np.sum(y == 0))
    if n0 == 0 or n1 == 0:
        raise MissingClass("class weights need both classes")
    return (n / (2.0 * n0), n / (2.0 * n1))


def _check_probs(probs):
    if not np.all(np.isfinite(probs)) or np.any(probs < 0) or np.any(probs > 1 + 1e-6):
        raise InvalidProb("probabilities must lie in [0, 1]")
    if np.any(np.abs(probs.sum(axis=1) - 1) > 1e-4):
        raise InvalidProb("probability rows must sum to 1")


def loss_forward(spec, probs, labels):
    """Mean loss over the batch and its gradient w.r.t. the pre-softmax logits.

    Per sample: ``-a_y (1 - p_y)^g log p_y``; cross-entropy and weighted CE
    are the ``g = 0`` cases. ``p_y`` is floored at 1e-12.
    """
    p_all = np.asarray(probs, dtype=np.float64)
    _check_probs(p_all)
    y = np.asarray(labels, dtype=np.int64)
    n = len(y)
    w = np.asarray(spec.class_weights if spec.class_weights is not None else (1.0, 1.0))
    alpha = w[y]
    g = spec.gamma
    p = np.maximum(p_all[np.arange(n), y], PROB_FLOOR)
    q = np.clip(1.0 - p, 0.0, None)
    logp = np.log(p)
    mod = q ** g if g else np.ones_like(q)
    loss = float(np.mean(-alpha * mod * logp))

    # dL/dp_y, then chain through the softmax: dp_y/dz_j = p_y (delta_yj - p_j)
    if g:
        with np.errstate(divide="ignore", invalid="ignore"):
            dmod = np.where(q > 0, g * q ** (g - 1), 0.0)
    else:
        dmod = 0.0
    dl_dp = -alpha * (mod / p - dmod * logp)
    onehot = np.zeros_like(p_all)
    onehot[np.arange(n), y] = 1.0
    dz = (dl_dp * p)[:, None] * (onehot - p_all) / n
    return loss, dz.astype(np.asarray(probs).dtype if np.asarray(probs).dtype.kind == "f" else np.float64)
