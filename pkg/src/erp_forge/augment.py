"""Temporal-shift augmentation along the time axis."""

from dataclasses import dataclass

import numpy as np

from erp_forge.errors import ShiftTooLarge

DEFAULT_SHIFTS = (-2, -1, 0, 1, 2)


@dataclass(frozen=True)
class ShiftSet:
    offsets: tuple = DEFAULT_SHIFTS

    def __post_init__(self):
        offs = tuple(int(o) for o in self.offsets)
        if 0 not in offs:
            raise ValueError("shift set must contain 0")
        if list(offs) != sorted(set(offs)):
            raise ValueError("shift offsets must be strictly ascending")
        object.__setattr__(self, "offsets", offs)

    @property
    def depth(self):
        return len(self.offsets)

    @property
    def zero_index(self):
        return self.offsets.index(0)


def shift_trial(trial, dt):
    """Delay (``dt > 0``) or advance the last axis, replicating the edge sample."""
    x = np.asarray(trial)
    n = x.shape[-1]
    if abs(dt) >= n:
        raise ShiftTooLarge(f"|{dt}| must be < {n}")
    if dt == 0:
        return x.copy()
    idx = np.clip(np.arange(n) - dt, 0, n - 1)
    return x[..., idx]


def build_shift_stack(trial, shifts=ShiftSet()):
    """Stack shifted copies on a new trailing depth axis: ``(..., C, T, D)``."""
    x = np.asarray(trial)
    n = x.shape[-1]
    for dt in shifts.offsets:
        if abs(dt) >= n:
            raise ShiftTooLarge(f"|{dt}| must be < {n}")
    idx = np.clip(np.arange(n)[:, None] - np.asarray(shifts.offsets)[None, :], 0, n - 1)
    return x[..., idx]
