"""Synthetic oddball recordings with a latency-jittered P300-like bump.

Events arrive every ``soa_ms`` in blocks of ``block_size`` with a fixed
number of targets per block. The background is unit-variance Gaussian noise
passed through the analysis bandpass and rescaled to ``noise_sigma_uv``.
Each target adds ``erp_amplitude_uv * profile[ch] * exp(-((t - lat)/w)^2 / 2)``
with ``lat = erp_latency_ms + U(-jitter, jitter)`` and ``w = erp_width_ms``;
non-targets add nothing.
"""

import dataclasses
import os
from dataclasses import dataclass

import numpy as np

from erp_forge import bdf_io, dsp
from erp_forge.spatial import BIOSEMI32, DEFAULT_GRID

# approximate grid coordinates of the frontal-pole electrodes absent from the grid
_OFF_GRID = {"Fp1": (-2.0, 1.0), "AF3": (-1.0, 1.0), "AF4": (-1.0, 3.0), "Fp2": (-2.0, 3.0)}


@dataclass(frozen=True)
class SynthConfig:
    n_participants: int = 18
    targets_per_participant: int = 80
    nontargets_per_participant: int = 720
    sample_rate_hz: float = 512.0
    erp_latency_ms: float = 300.0
    latency_jitter_ms: float = 50.0
    erp_width_ms: float = 100.0
    erp_amplitude_uv: float = 1.5
    noise_sigma_uv: float = 1.0
    profile_center: str = "Pz"
    profile_spread: float = 1.5
    soa_ms: float = 500.0
    block_size: int = 20
    lead_in_s: float = 1.0
    tail_s: float = 1.5
    noise_band_hz: tuple = (0.1, 30.0)
    seed: int = 0

    def __post_init__(self):
        if self.n_participants < 0:
            raise ValueError("n_participants must be >= 0")
        if self.targets_per_participant <= 0 or self.nontargets_per_participant <= 0:
            raise ValueError("class counts must be positive")
        if not 0 <= self.latency_jitter_ms < self.erp_latency_ms:
            raise ValueError("jitter must be non-negative and below the latency")
        if self.erp_amplitude_uv < 0 or self.noise_sigma_uv < 0:
            raise ValueError("amplitude and noise sigma must be >= 0")
        if self.erp_width_ms <= 0 or self.soa_ms <= 0 or self.block_size < 1:
            raise ValueError("width, SOA and block size must be positive")

    @property
    def snr(self):
        return self.erp_amplitude_uv / self.noise_sigma_uv if self.noise_sigma_uv else float("inf")

    def with_snr(self, snr):
        if snr < 0:
            raise ValueError("SNR must be >= 0")
        return dataclasses.replace(self, erp_amplitude_uv=float(snr) * self.noise_sigma_uv)


def spatial_profile(config=SynthConfig(), channels=BIOSEMI32):
    """Per-channel gain: Gaussian in grid distance from ``profile_center``."""
    coords = {name: rc for rc, name in ((rc, DEFAULT_GRID.channels[i]) for rc, i in DEFAULT_GRID.index.items())}
    coords.update(_OFF_GRID)
    cr, cc = coords[config.profile_center]
    gain = np.empty(len(channels))
    for k, name in enumerate(channels):
        r, c = coords[name]
        gain[k] = np.exp(-((r - cr) ** 2 + (c - cc) ** 2) / (2 * config.profile_spread ** 2))
    return gain


def event_sequence(config, rng):
    """Trigger codes for one participant, block by block."""
    n_t = config.targets_per_participant
    n = n_t + config.nontargets_per_participant
    n_blocks = max(1, -(-n // config.block_size))
    sizes = np.full(n_blocks, n // n_blocks)
    sizes[: n % n_blocks] += 1
    per_block = np.full(n_blocks, n_t // n_blocks)
    per_block[: n_t % n_blocks] += 1
    codes = []
    for size, k in zip(sizes, per_block):
        block = np.full(size, bdf_io.NONTARGET_CODE)
        block[rng.choice(size, size=min(k, size), replace=False)] = bdf_io.TARGET_CODE
        codes.extend(block.tolist())
    return codes


def _noise_gain(filt, n=1 << 16):
    h = dsp.filter_apply(filt, np.r_[1.0, np.zeros(n - 1)])
    return float(np.sqrt(np.sum(h * h)))


@dataclass
class SynthRecording:
    recording: bdf_io.RawRecording
    latencies_ms: np.ndarray
    participant: int


def generate_participant(config, participant):
    """One participant's continuous recording (microvolts) with events."""
    ss = np.random.SeedSequence([config.seed, participant])
    rng_events, rng_jitter, rng_noise = (np.random.default_rng(s) for s in ss.spawn(3))
    fs = config.sample_rate_hz
    codes = event_sequence(config, rng_events)
    soa = config.soa_ms / 1000.0
    onsets = np.rint((config.lead_in_s + soa * np.arange(len(codes))) * fs).astype(np.int64)
    spr = int(round(fs))
    n = int(onsets[-1] + round(config.tail_s * fs))
    n = -(-n // spr) * spr
    n_ch = len(BIOSEMI32)

    if config.noise_sigma_uv > 0:
        filt = dsp.design_butterworth_bandpass(*config.noise_band_hz, 4, fs)
        warm = int(20 * fs)
        white = rng_noise.standard_normal((n_ch, n + warm))
        data = dsp.filter_apply(filt, white)[:, warm:] * (config.noise_sigma_uv / _noise_gain(filt))
    else:
        data = np.zeros((n_ch, n))

    is_target = np.asarray(codes) == bdf_io.TARGET_CODE
    jit = rng_jitter.uniform(-config.latency_jitter_ms, config.latency_jitter_ms, size=int(is_target.sum()))
    lat = config.erp_latency_ms + jit
    if config.erp_amplitude_uv > 0:
        prof = spatial_profile(config) * config.erp_amplitude_uv
        w = config.erp_width_ms / 1000.0 * fs
        half = int(np.ceil(6 * w))
        for onset, l_ms in zip(onsets[is_target], lat):
            centre = onset + l_ms / 1000.0 * fs
            lo = max(0, int(centre) - half)
            hi = min(n, int(centre) + half + 1)
            t = np.arange(lo, hi)
            data[:, lo:hi] += prof[:, None] * np.exp(-0.5 * ((t - centre) / w) ** 2)[None, :]

    events = list(zip(onsets.tolist(), codes))
    rec = bdf_io.RawRecording(data, fs, events, tuple(BIOSEMI32))
    return SynthRecording(rec, lat, participant)


def generate_dataset(config=SynthConfig()):
    return [generate_participant(config, p) for p in range(config.n_participants)]


def snr_sweep(config, snrs):
    """One dataset per SNR (amplitude / noise sigma), sharing the noise seed."""
    return [generate_dataset(config.with_snr(s)) for s in snrs]


def to_bdf_bytes(synth_rec):
    rec = synth_rec.recording
    header = bdf_io.make_header(BIOSEMI32, rec.n_samples, rec.sample_rate_hz,
                                patient_id=f"synthetic-{synth_rec.participant:02d}",
                                recording_id="erp-forge synthetic oddball")
    return bdf_io.write_bdf(header, rec)


def participant_filename(p):
    return f"participant_{p + 1:02d}.bdf"


def write_dataset(config, out_dir):
    """Write one BDF per participant; returns the paths."""
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    for p in range(config.n_participants):
        path = os.path.join(out_dir, participant_filename(p))
        with open(path, "wb") as fh:
            fh.write(to_bdf_bytes(generate_participant(config, p)))
        paths.append(path)
    return paths
