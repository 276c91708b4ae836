"""Optimiser, learning-rate schedule, early stopping and the training loop."""

import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from erp_forge.errors import InvalidSpec, MissingClass
from erp_forge.losses import LOSS_KINDS, LossSpec, class_weights_from, loss_forward  # noqa: F401
from erp_forge.metrics import roc_auc
from erp_forge.models import ModelSpec, as_network_input, build_model
from erp_forge.nn import Network

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    lr0: float = 1e-3
    lr_min: float = 0.0
    max_epochs: int = 100
    patience: int = 10
    min_delta: float = 1e-6
    batch_size: int = 32
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.lr0 <= 0 or self.lr_min < 0:
            raise InvalidSpec("learning rates must be positive")
        if self.patience < 1:
            raise InvalidSpec("patience must be >= 1")
        if self.batch_size < 2:
            raise InvalidSpec("batch_size must be >= 2 for batch normalisation")
        if self.max_epochs < 1:
            raise InvalidSpec("max_epochs must be >= 1")


def cosine_lr(epoch, config):
    """``lr_min + (lr0 - lr_min)(1 + cos(pi * epoch / max_epochs)) / 2``."""
    frac = min(max(epoch, 0), config.max_epochs) / config.max_epochs
    return config.lr_min + 0.5 * (config.lr0 - config.lr_min) * (1.0 + math.cos(math.pi * frac))


@dataclass
class AdamState:
    m: list
    v: list

    @classmethod
    def zeros_like(cls, params):
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])


def adam_step(params, grads, state, t, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update, in place. ``t`` counts from 1."""
    if t < 1:
        raise ValueError("adam step index starts at 1")
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * (g * g)
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype, copy=False)
    return params, state


@dataclass
class EarlyStopping:
    """Patience counter on a maximised metric."""

    patience: int = 10
    min_delta: float = 1e-6
    best: float = -math.inf
    best_epoch: int = -1
    epoch: int = -1
    bad_epochs: int = 0

    def update(self, value):
        """Record one epoch; returns True when training should stop."""
        self.epoch += 1
        if value > self.best + self.min_delta:
            self.best = value
            self.best_epoch = self.epoch
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
        return self.bad_epochs >= self.patience

    @property
    def improved(self):
        return self.best_epoch == self.epoch


def early_stop_update(state, val_auc, patience=None):
    """Functional form: returns ``("continue", None)`` or ``("stop", best_epoch)``."""
    if patience is not None:
        state.patience = patience
    return ("stop", state.best_epoch) if state.update(val_auc) else ("continue", None)


@dataclass
class TrainResult:
    network: Network
    history: list = field(default_factory=list)
    best_epoch: int = -1
    best_val_auc: float = float("nan")

    def write_history(self, path):
        write_history(self.history, path)


HISTORY_FIELDS = ("epoch", "lr", "train_loss", "val_auc")


def write_history(history, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(HISTORY_FIELDS)
        for row in history:
            w.writerow([row["epoch"], repr(row["lr"]), repr(row["train_loss"]), repr(row["val_auc"])])


def _batches(n, batch_size, rng):
    order = rng.permutation(n)
    out = [order[i:i + batch_size] for i in range(0, n, batch_size)]
    if len(out) > 1 and len(out[-1]) < 2:
        # a singleton batch cannot be batch-normalised; fold it into the previous one
        last = out.pop()
        out[-1] = np.concatenate([out[-1], last])
    return out


def train_model(model, train, val, config=TrainConfig(), loss=None):
    """Train ``model`` (a ModelSpec or a built Network) on ``train``.

    ``train``/``val`` are TrialTensors. Early stopping tracks validation AUC
    and the returned network carries the best epoch's weights.
    """
    seeds = np.random.SeedSequence(config.seed).spawn(2)
    if isinstance(model, ModelSpec):
        net = build_model(model, np.random.default_rng(seeds[0]))
    else:
        net = model
    spec = getattr(net, "spec", None)
    loss = loss or (spec.loss if spec is not None else LossSpec())
    y_train = np.asarray(train.labels)
    if not (np.any(y_train == 0) and np.any(y_train == 1)):
        raise MissingClass("training set needs both classes")
    loss = loss.resolved(y_train)
    x_train = as_network_input(train.data)
    x_val = as_network_input(val.data)
    y_val = np.asarray(val.labels)

    params = [p for _, _, p, _ in net.parameters()]
    state = AdamState.zeros_like(params)
    rng = np.random.default_rng(seeds[1])
    stopper = EarlyStopping(config.patience, config.min_delta)
    best_state = net.get_state()
    history = []
    step = 0
    for epoch in range(config.max_epochs):
        lr = cosine_lr(epoch, config)
        total, count = 0.0, 0
        for idx in _batches(len(y_train), config.batch_size, rng):
            probs = net.forward(x_train[idx], training=True)
            value, dz = loss_forward(loss, probs, y_train[idx])
            net.backward(dz.astype(np.float32), from_logits=True, input_grad=False)
            step += 1
            adam_step(params, [g for _, _, _, g in net.parameters()], state, step, lr,
                      config.beta1, config.beta2, config.adam_eps)
            total += value * len(idx)
            count += len(idx)
        val_auc = roc_auc(net.predict(x_val)[:, 1], y_val)
        history.append({"epoch": epoch, "lr": lr, "train_loss": total / count, "val_auc": val_auc})
        stop = stopper.update(val_auc)
        if stopper.improved:
            best_state = net.get_state()
        log.debug("epoch %d lr %.2e loss %.5f val_auc %.4f", epoch, lr, total / count, val_auc)
        if stop:
            break
    net.set_state(best_state)
    return TrainResult(net, history, stopper.best_epoch, stopper.best)
