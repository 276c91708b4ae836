"""Temporal preprocessing: bandpass design and filtering, epoching,
block-mean downsampling and per-trial z-scoring.

Also holds the ``ERPT`` trial container used to store preprocessed folds.
"""

import logging
import struct
from dataclasses import dataclass

import numpy as np

from erp_forge import kernels
from erp_forge.errors import InvalidBand, TooShort

log = logging.getLogger(__name__)

N_TIME = 64
ZSCORE_EPS = 1e-8


@dataclass(frozen=True)
class BandpassFilter:
    """Digital Butterworth bandpass as second-order sections.

    ``sos`` rows are ``[b0, b1, b2, 1, a1, a2]``.
    """

    low_hz: float
    high_hz: float
    order: int
    sample_rate_hz: float
    sos: np.ndarray

    def poles(self):
        out = []
        for _, _, _, _, a1, a2 in self.sos:
            out.extend(np.roots([1.0, a1, a2]))
        return np.asarray(out)


def design_butterworth_bandpass(low_hz=0.1, high_hz=30.0, order=4, sample_rate_hz=512.0):
    """Order-``order`` Butterworth lowpass prototype mapped to a bandpass and
    discretised with the prewarped bilinear transform.

    Produces ``order`` biquads (the bandpass has twice the prototype order).
    """
    fs = float(sample_rate_hz)
    if not 0 < low_hz < high_hz < fs / 2:
        raise InvalidBand(f"need 0 < {low_hz} < {high_hz} < {fs / 2}")
    if order < 2 or order % 2:
        raise InvalidBand(f"order must be even and >= 2, got {order}")
    fs2 = 2.0 * fs
    wl = fs2 * np.tan(np.pi * low_hz / fs)
    wh = fs2 * np.tan(np.pi * high_hz / fs)
    bw = wh - wl
    w0sq = wl * wh

    k = np.arange(1, order + 1)
    proto = np.exp(1j * np.pi * (2 * k + order - 1) / (2 * order))
    # s^2 - p*bw*s + w0^2 = 0 for every prototype pole p
    disc = np.sqrt((proto * bw) ** 2 - 4.0 * w0sq)
    poles_a = np.concatenate([(proto * bw + disc) / 2, (proto * bw - disc) / 2])
    poles_d = (fs2 + poles_a) / (fs2 - poles_a)
    gain = (bw * fs2) ** order / np.prod(fs2 - poles_a)
    gain = gain.real

    upper = poles_d[poles_d.imag > 0]
    if len(upper) != order:
        raise InvalidBand("bandpass poles are not in conjugate pairs; band too narrow for this order")
    upper = upper[np.argsort(np.abs(upper))]
    g = abs(gain) ** (1.0 / order)
    sos = np.zeros((order, 6))
    for i, p in enumerate(upper):
        sos[i] = [g, 0.0, -g, 1.0, -2.0 * p.real, abs(p) ** 2]
    if gain < 0:
        sos[0, :3] *= -1
    return BandpassFilter(float(low_hz), float(high_hz), int(order), fs, sos)


def frequency_response(filt, freqs_hz):
    """Complex response of the cascade at ``freqs_hz``."""
    w = 2.0 * np.pi * np.asarray(freqs_hz, dtype=float) / filt.sample_rate_hz
    zi = np.exp(-1j * w)
    h = np.ones_like(zi)
    for b0, b1, b2, a0, a1, a2 in filt.sos:
        h *= (b0 + b1 * zi + b2 * zi * zi) / (a0 + a1 * zi + a2 * zi * zi)
    return h


def filter_apply(filt, signal):
    """Causal single-pass filtering along the last axis (1D or channels x samples)."""
    x = np.asarray(signal, dtype=np.float64)
    if x.ndim == 1:
        return kernels.sosfilt(filt.sos, x[None, :])[0]
    flat = x.reshape(-1, x.shape[-1])
    return kernels.sosfilt(filt.sos, flat).reshape(x.shape)


@dataclass
class Epoch:
    data: np.ndarray
    onset_sample: int
    label: int


def epoch_length(sample_rate_hz, window_s=1.0):
    return int(round(sample_rate_hz * window_s))


def extract_epochs(recording, events, window_s=1.0):
    """Cut ``[onset, onset + round(window_s * fs))`` windows for each labeled event.

    Returns ``(epochs, n_dropped)``; events whose window overruns the
    recording are dropped.
    """
    n = epoch_length(recording.sample_rate_hz, window_s)
    total = recording.samples.shape[1]
    epochs, dropped = [], 0
    for ev in events:
        start = ev.sample_index
        if start < 0 or start + n > total:
            dropped += 1
            continue
        epochs.append(Epoch(recording.samples[:, start:start + n], start, ev.label))
    if dropped:
        log.warning("dropped %d event(s) whose epoch overruns the recording", dropped)
    return epochs, dropped


def downsample_mean(x, n_points=N_TIME):
    """Average the last axis over ``n_points`` contiguous windows.

    When the length is not a multiple of ``n_points`` the leading windows are
    one sample longer than the trailing ones.
    """
    data = x.data if isinstance(x, Epoch) else np.asarray(x)
    t_raw = data.shape[-1]
    if t_raw < n_points:
        raise TooShort(f"{t_raw} samples cannot be reduced to {n_points} points")
    q, r = divmod(t_raw, n_points)
    lengths = np.full(n_points, q)
    lengths[:r] += 1
    starts = np.concatenate([[0], np.cumsum(lengths)[:-1]])
    return np.add.reduceat(data, starts, axis=-1) / lengths


def zscore_trial(x, eps=ZSCORE_EPS):
    """Standardise each trial with its pooled mean and population std.

    ``x`` is one trial ``(C, T)`` or a batch ``(N, C, T)``; moments are pooled
    over channels and time.
    """
    x = np.asarray(x)
    axes = (-2, -1)
    mu = x.mean(axis=axes, keepdims=True)
    sd = x.std(axis=axes, keepdims=True)
    return (x - mu) / (sd + eps)


@dataclass
class TrialTensor:
    """A batch of trials ``(N, C, T)`` or ``(N, C, T, D)`` with binary labels."""

    data: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.data) != len(self.labels):
            raise ValueError(f"{len(self.data)} trials but {len(self.labels)} labels")

    def __len__(self):
        return len(self.labels)

    def subset(self, idx):
        return TrialTensor(self.data[idx], self.labels[idx])


TRIALS_MAGIC = b"ERPT"
TRIALS_VERSION = 1


def trials_to_bytes(trials):
    """``ERPT`` container.

    Little endian: ``b"ERPT"``, u8 version, u32 N, u32 N_s, u32 N_t, u32 D,
    N label bytes (0/1), then N*N_s*N_t*D float32 values in row-major
    (trial, channel, time, depth) order. 2D trials are stored with D = 1.
    """
    data = np.asarray(trials.data)
    if data.ndim == 3:
        data = data[..., None]
    n, ns, nt, d = data.shape
    head = TRIALS_MAGIC + struct.pack("<B4I", TRIALS_VERSION, n, ns, nt, d)
    return head + trials.labels.astype(np.uint8).tobytes() + np.ascontiguousarray(data, dtype="<f4").tobytes()


def trials_from_bytes(buf, squeeze_depth=True):
    if buf[:4] != TRIALS_MAGIC:
        raise ValueError("not an ERPT container")
    version, n, ns, nt, d = struct.unpack_from("<B4I", buf, 4)
    if version != TRIALS_VERSION:
        raise ValueError(f"unsupported ERPT version {version}")
    pos = 4 + 17
    labels = np.frombuffer(buf, dtype=np.uint8, count=n, offset=pos).astype(np.int64)
    pos += n
    data = np.frombuffer(buf, dtype="<f4", count=n * ns * nt * d, offset=pos).reshape(n, ns, nt, d)
    data = data.astype(np.float32)
    if squeeze_depth and d == 1:
        data = data[..., 0]
    return TrialTensor(data, labels)


def save_trials(path, trials):
    with open(path, "wb") as fh:
        fh.write(trials_to_bytes(trials))


def load_trials(path, squeeze_depth=True):
    with open(path, "rb") as fh:
        return trials_from_bytes(fh.read(), squeeze_depth)
