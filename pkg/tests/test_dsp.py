import mpmath
import numpy as np
import pytest
import scipy.signal
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from erp_forge import bdf_io, dsp
from erp_forge.errors import InvalidBand, TooShort

FS = 512.0


@pytest.fixture(scope="module")
def filt():
    return dsp.design_butterworth_bandpass(0.1, 30.0, 4, FS)


def analytic_magnitude(f_hz, low=0.1, high=30.0, order=4, fs=FS):
    """Prewarped Butterworth bandpass magnitude in extended precision."""
    mpmath.mp.dps = 40
    fs2 = 2 * mpmath.mpf(fs)
    om = fs2 * mpmath.tan(mpmath.pi * f_hz / fs)
    wl = fs2 * mpmath.tan(mpmath.pi * mpmath.mpf(low) / fs)
    wh = fs2 * mpmath.tan(mpmath.pi * mpmath.mpf(high) / fs)
    x = (om ** 2 - wl * wh) / (om * (wh - wl))
    return float(1 / mpmath.sqrt(1 + x ** (2 * order)))


def test_section_count_and_stability(filt):
    assert filt.sos.shape == (4, 6)
    assert np.all(np.abs(filt.poles()) < 1)
    np.testing.assert_array_equal(filt.sos[:, 3], 1.0)


def test_band_edges_are_minus_3db(filt):
    for f in (0.1, 30.0):
        db = 20 * np.log10(abs(dsp.frequency_response(filt, [f])[0]))
        assert abs(db - 20 * np.log10(np.sqrt(0.5))) < 0.2


def test_passband_gain(filt):
    g = abs(dsp.frequency_response(filt, [15.0])[0])
    assert 0.95 <= g <= 1.0


def test_dc_gain_exactly_zero(filt):
    assert dsp.frequency_response(filt, [0.0])[0] == 0
    # numerator of every section has a zero at z = 1
    np.testing.assert_array_equal(filt.sos[:, 0] + filt.sos[:, 1] + filt.sos[:, 2], 0.0)


def test_response_matches_extended_precision_oracle(filt):
    freqs = [0.05, 0.1, 0.5, 1.0, 5.0, 15.0, 29.0, 30.0, 45.0, 100.0, 250.0]
    got = np.abs(dsp.frequency_response(filt, freqs))
    want = np.array([analytic_magnitude(f) for f in freqs])
    np.testing.assert_allclose(got, want, rtol=1e-7, atol=1e-12)


def test_matches_scipy_design(filt):
    ref = scipy.signal.butter(4, [0.1, 30.0], "bandpass", fs=FS, output="sos")
    f = np.linspace(0.01, 255, 500)
    _, h_ref = scipy.signal.sosfreqz(ref, worN=f, fs=FS)
    np.testing.assert_allclose(np.abs(dsp.frequency_response(filt, f)), np.abs(h_ref), atol=1e-9)


def test_impulse_response_fft_matches_design(filt):
    n = 1 << 18
    h = dsp.filter_apply(filt, np.r_[1.0, np.zeros(n - 1)])
    spec = np.fft.rfft(h)
    f = np.fft.rfftfreq(n, 1 / FS)
    np.testing.assert_allclose(np.abs(spec), np.abs(dsp.frequency_response(filt, f)), atol=1e-6)


@pytest.mark.parametrize("low, high", [(0.0, 30.0), (30.0, 10.0), (0.1, 256.0), (-1.0, 5.0)])
def test_invalid_band(low, high):
    with pytest.raises(InvalidBand):
        dsp.design_butterworth_bandpass(low, high, 4, FS)


def test_odd_order_rejected():
    with pytest.raises(InvalidBand):
        dsp.design_butterworth_bandpass(0.1, 30.0, 3, FS)


def test_filter_matches_scipy_sosfilt(filt, rng):
    x = rng.standard_normal((3, 4000))
    np.testing.assert_allclose(dsp.filter_apply(filt, x), scipy.signal.sosfilt(filt.sos, x), atol=1e-12)


def test_zero_and_constant_input(filt):
    np.testing.assert_array_equal(dsp.filter_apply(filt, np.zeros(100)), 0.0)
    y = dsp.filter_apply(filt, np.full(int(120 * FS), 3.0))
    assert abs(y[-1]) < 1e-3


def test_output_length_and_shape(filt):
    assert dsp.filter_apply(filt, np.ones(7)).shape == (7,)
    assert dsp.filter_apply(filt, np.ones((2, 3, 7))).shape == (2, 3, 7)


@given(arrays(np.float64, 64, elements=st.floats(-1e3, 1e3)),
       arrays(np.float64, 64, elements=st.floats(-1e3, 1e3)),
       st.floats(-10, 10), st.floats(-10, 10))
def test_filter_linearity(x, y, a, b):
    f = dsp.design_butterworth_bandpass(0.1, 30.0, 4, FS)
    lhs = dsp.filter_apply(f, a * x + b * y)
    rhs = a * dsp.filter_apply(f, x) + b * dsp.filter_apply(f, y)
    scale = max(1.0, np.abs(lhs).max(), np.abs(rhs).max())
    assert np.abs(lhs - rhs).max() <= 1e-9 * scale


def _recording(n, fs=FS, n_ch=2):
    return bdf_io.RawRecording(np.tile(np.arange(n, dtype=float), (n_ch, 1)), fs, [])


def test_extract_epochs_window():
    rec = _recording(3000)
    epochs, dropped = dsp.extract_epochs(rec, [bdf_io.LabeledEvent(1000, 1)])
    assert dropped == 0
    assert epochs[0].data.shape == (2, 512)
    assert epochs[0].data[0, 0] == 1000 and epochs[0].data[0, -1] == 1511
    assert epochs[0].label == 1 and epochs[0].onset_sample == 1000


def test_extract_epochs_drops_overrun():
    rec = _recording(3000)
    epochs, dropped = dsp.extract_epochs(rec, [bdf_io.LabeledEvent(2990, 0), bdf_io.LabeledEvent(5, 0)])
    assert dropped == 1 and len(epochs) == 1


def test_extract_epochs_empty():
    assert dsp.extract_epochs(_recording(600), []) == ([], 0)


def test_downsample_pairwise_means():
    x = np.arange(1, 129, dtype=float)[None, :]
    np.testing.assert_allclose(dsp.downsample_mean(x)[0], np.arange(1.5, 128, 2.0))


def test_downsample_identity_and_constant(rng):
    x = rng.standard_normal((3, 64))
    np.testing.assert_array_equal(dsp.downsample_mean(x), x)
    np.testing.assert_allclose(dsp.downsample_mean(np.full((2, 512), 4.2)), 4.2)


def test_downsample_leading_windows_longer():
    # 130 = 2*64 + 2: the first two windows hold three samples
    x = np.arange(130, dtype=float)
    out = dsp.downsample_mean(x, 64)
    assert out[0] == 1.0 and out[1] == 4.0 and out[2] == 6.5 and out[-1] == 128.5


def test_downsample_accepts_epoch():
    ep = dsp.Epoch(np.ones((2, 128)), 0, 1)
    assert dsp.downsample_mean(ep).shape == (2, 64)


def test_downsample_too_short():
    with pytest.raises(TooShort):
        dsp.downsample_mean(np.zeros((2, 63)))


@given(st.integers(1, 6).map(lambda k: 64 * k), st.integers(0, 2 ** 31))
def test_downsample_preserves_grand_mean(n, seed):
    x = np.random.default_rng(seed).standard_normal((2, n))
    np.testing.assert_allclose(dsp.downsample_mean(x).mean(axis=1), x.mean(axis=1), atol=1e-12)


def test_zscore_examples():
    np.testing.assert_allclose(dsp.zscore_trial(np.array([[1.0, 2.0, 3.0]]))[0], [-1.2247, 0, 1.2247], atol=1e-3)
    np.testing.assert_array_equal(dsp.zscore_trial(np.full((3, 8), 5.0)), 0.0)


@given(arrays(np.float64, (4, 16), elements=st.floats(-1e4, 1e4)))
def test_zscore_properties(x):
    z = dsp.zscore_trial(x)
    # cancellation error in x - mean grows with |x| / std
    assert abs(z.mean()) < 1e-9 * (1 + np.abs(x).max() / (x.std() + 1e-8))
    if x.std() > 1e-3:
        # the first pass leaves std(z) = sd / (sd + eps), so a second pass rescales by about eps / sd
        np.testing.assert_allclose(dsp.zscore_trial(z), z, rtol=2 * dsp.ZSCORE_EPS / x.std(), atol=1e-6)


def test_zscore_batched_matches_per_trial(rng):
    x = rng.standard_normal((5, 3, 64)) * 10 + 2
    np.testing.assert_allclose(dsp.zscore_trial(x), np.stack([dsp.zscore_trial(t) for t in x]))


@pytest.mark.parametrize("shape", [(3, 4, 64), (3, 4, 64, 5)])
def test_erpt_round_trip(tmp_path, rng, shape):
    t = dsp.TrialTensor(rng.standard_normal(shape).astype(np.float32), [0, 1, 1])
    path = tmp_path / "f.erpt"
    dsp.save_trials(path, t)
    back = dsp.load_trials(path)
    np.testing.assert_array_equal(back.data, t.data)
    np.testing.assert_array_equal(back.labels, t.labels)


def test_erpt_layout_is_byte_exact():
    t = dsp.TrialTensor(np.arange(4, dtype=np.float32).reshape(1, 2, 2), [1])
    raw = dsp.trials_to_bytes(t)
    assert raw[:5] == b"ERPT\x01"
    assert raw[5:21] == (1).to_bytes(4, "little") + (2).to_bytes(4, "little") * 2 + (1).to_bytes(4, "little")
    assert raw[21:22] == b"\x01"
    assert raw[22:] == np.arange(4, dtype="<f4").tobytes()


def test_pipeline_determinism():
    from erp_forge import pipeline, synth
    rec = synth.generate_participant(synth.SynthConfig(n_participants=1, targets_per_participant=10,
                                                       nontargets_per_participant=30), 0).recording
    a = pipeline.base_trials(rec)
    b = pipeline.base_trials(rec)
    assert dsp.trials_to_bytes(a) == dsp.trials_to_bytes(b)
