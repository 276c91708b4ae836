"""Recording -> model-ready trials, for the three input pipelines.

``base_trials`` does the fold-independent work (filter the continuous
recording, epoch, downsample). ``fold_inputs`` finishes each split:

* ``csp2d``: Laplacian, CSP fitted on the training split only, z-score
* ``raw2d``: z-score
* ``3d``: optional grid interpolation, z-score, shift stack
"""

from dataclasses import dataclass, field

import numpy as np

from erp_forge import augment, bdf_io, dsp
from erp_forge import spatial as sp
from erp_forge.dsp import TrialTensor

PIPELINES = ("csp2d", "raw2d", "3d")
SPATIAL_MODES = ("channels", "grid")


@dataclass(frozen=True)
class PreprocessConfig:
    low_hz: float = 0.1
    high_hz: float = 30.0
    filter_order: int = 4
    filter_phase: str = "causal"
    window_s: float = 1.0
    n_time: int = dsp.N_TIME
    n_csp: int = 6
    spatial: str = "channels"
    shifts: augment.ShiftSet = field(default_factory=augment.ShiftSet)
    grid: sp.ElectrodeGrid = sp.DEFAULT_GRID

    def __post_init__(self):
        if self.filter_phase != "causal":
            raise ValueError("only causal single-pass filtering is implemented")
        if self.spatial not in SPATIAL_MODES:
            raise ValueError(f"spatial must be one of {SPATIAL_MODES}")


def base_trials(recording, config=PreprocessConfig()):
    """Filtered, epoched, downsampled trials ``(N, C, n_time)`` with labels."""
    filt = dsp.design_butterworth_bandpass(config.low_hz, config.high_hz, config.filter_order,
                                           recording.sample_rate_hz)
    filtered = dsp.filter_apply(filt, recording.samples)
    rec = bdf_io.RawRecording(filtered, recording.sample_rate_hz, recording.events, recording.labels)
    epochs, _ = dsp.extract_epochs(rec, bdf_io.label_events(recording.events), config.window_s)
    if not epochs:
        return TrialTensor(np.zeros((0, filtered.shape[0], config.n_time)), np.zeros(0, np.int64))
    data = dsp.downsample_mean(np.stack([e.data for e in epochs]), config.n_time)
    return TrialTensor(data, np.array([e.label for e in epochs]))


def input_shape(pipeline, config=PreprocessConfig(), n_channels=32):
    """Per-trial model input shape (without the feature axis)."""
    if pipeline == "csp2d":
        return (config.n_csp, config.n_time)
    if pipeline == "raw2d":
        return (n_channels, config.n_time)
    c = config.grid.n_cells if config.spatial == "grid" else n_channels
    return (c, config.n_time, config.shifts.depth)


def fold_independent(pipeline, base, config=PreprocessConfig()):
    """Everything that does not depend on the split (all but CSP)."""
    x = base.data
    if pipeline == "csp2d":
        return sp.laplacian_apply(x, config.grid)
    if pipeline == "raw2d":
        return dsp.zscore_trial(x)
    if pipeline == "3d":
        if config.spatial == "grid":
            x = sp.grid_flatten(sp.grid_map_interpolate(x, config.grid))
        return augment.build_shift_stack(dsp.zscore_trial(x), config.shifts)
    raise ValueError(f"unknown pipeline {pipeline!r}; choose from {PIPELINES}")


@dataclass
class FoldData:
    train: TrialTensor
    val: TrialTensor
    test: TrialTensor
    csp: sp.CspModel = None


def fold_inputs(pipeline, prepared, labels, split, config=PreprocessConfig()):
    """Split ``prepared`` (output of ``fold_independent``) into float32 tensors."""
    labels = np.asarray(labels)
    csp = None
    if pipeline == "csp2d":
        csp = sp.csp_fit(prepared[split.train], labels[split.train], config.n_csp)

        def finish(idx):
            return dsp.zscore_trial(sp.csp_transform(csp, prepared[idx]))
    else:
        def finish(idx):
            return prepared[idx]

    parts = [TrialTensor(finish(idx).astype(np.float32), labels[idx]) for idx in (split.train, split.val, split.test)]
    return FoldData(*parts, csp=csp)
