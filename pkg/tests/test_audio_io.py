import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose, assert_array_equal
from scipy.io import wavfile

from src.errors import DecodeError, ManifestIOError, UnsupportedFormatError
from src.models.schemas import Waveform
from src.services.audio_io import pad_or_trim, peak_normalize, read_wav, resample, write_wav
from tests.conftest import dominant_frequency, sine_wave


def test_read_pcm16_scaling(tmp_path):
    path = tmp_path / "pcm.wav"
    wavfile.write(path, 44100, np.array([0, 16384, -32768], dtype=np.int16))
    w = read_wav(path)
    assert w.sample_rate == 44100
    assert_array_equal(w.samples, [0.0, 0.5, -1.0])


def test_read_stereo_float_downmix(tmp_path):
    path = tmp_path / "stereo.wav"
    wavfile.write(path, 8000, np.array([[1.0, 0.0]], dtype=np.float32))
    assert_array_equal(read_wav(path).samples, [0.5])


def test_truncated_header_is_decode_error(tmp_path):
    full = tmp_path / "full.wav"
    wavfile.write(full, 8000, np.zeros(100, dtype=np.int16))
    truncated = tmp_path / "truncated.wav"
    truncated.write_bytes(full.read_bytes()[:20])
    with pytest.raises(DecodeError):
        read_wav(truncated)


def test_int32_is_unsupported(tmp_path):
    path = tmp_path / "int32.wav"
    wavfile.write(path, 8000, np.zeros(10, dtype=np.int32))
    with pytest.raises(UnsupportedFormatError):
        read_wav(path)


def test_missing_file(tmp_path):
    with pytest.raises(ManifestIOError):
        read_wav(tmp_path / "absent.wav")


def test_write_read_within_one_lsb(tmp_path):
    rng = np.random.default_rng(3)
    w = Waveform(samples=rng.uniform(-0.99, 0.99, 2000), sample_rate=16000)
    back = read_wav(write_wav(tmp_path / "rt.wav", w))
    assert back.sample_rate == 16000
    assert np.max(np.abs(back.samples - w.samples)) <= 1 / 32768


def test_resample_identity():
    w = sine_wave(100, rate=8000)
    assert resample(w, 8000) is w


def test_resample_length_formula():
    w = Waveform(samples=np.zeros(44100), sample_rate=44100)
    out = resample(w, 5490)
    assert len(out) == 5490
    assert out.sample_rate == 5490


def test_resample_empty():
    out = resample(Waveform(samples=np.zeros(0), sample_rate=44100), 22100)
    assert len(out) == 0
    assert out.sample_rate == 22100


def test_resample_keeps_dominant_frequency():
    out = resample(sine_wave(100, duration=1.0, rate=44100), 22100)
    spectrum = np.abs(np.fft.rfft(out.samples))
    assert abs(int(np.argmax(spectrum)) - 100) <= 1


def test_resample_round_trip_correlation():
    w = sine_wave(1000, duration=1.0, rate=22050)
    back = resample(resample(w, 5490), 22050)
    assert len(back) == len(w)
    interior = slice(500, -500)
    assert np.corrcoef(back.samples[interior], w.samples[interior])[0, 1] > 0.99
    assert dominant_frequency(back.samples, 22050) == pytest.approx(1000, abs=2)


def test_pad_three_seconds_to_five():
    w = Waveform(samples=np.ones(300), sample_rate=100)
    out = pad_or_trim(w, 5.0)
    assert len(out) == 500
    assert_array_equal(out.samples[300:], 0.0)
    assert_array_equal(out.samples[:300], 1.0)


def test_trim_seven_seconds_to_five():
    w = Waveform(samples=np.arange(700, dtype=float), sample_rate=100)
    assert_array_equal(pad_or_trim(w, 5.0).samples, np.arange(500))


def test_pad_or_trim_identity():
    w = Waveform(samples=np.ones(500), sample_rate=100)
    assert pad_or_trim(w, 5.0) is w


@settings(max_examples=50, deadline=None)
@given(n=st.integers(min_value=0, max_value=2000), duration=st.floats(min_value=0.01, max_value=20.0))
def test_pad_or_trim_exact_length(n, duration):
    w = Waveform(samples=np.zeros(n), sample_rate=100)
    assert len(pad_or_trim(w, duration)) == int(round(duration * 100))


@pytest.mark.parametrize("samples, expected", [
    ([0.5, -0.25], [1.0, -0.5]),
    ([0.0, 0.0], [0.0, 0.0]),
    ([-2.0, 1.0], [-1.0, 0.5]),
])
def test_peak_normalize(samples, expected):
    out = peak_normalize(Waveform(samples=samples, sample_rate=8000))
    assert_allclose(out.samples, expected)


def test_non_finite_samples_rejected():
    with pytest.raises(ValueError):
        Waveform(samples=[0.0, np.nan], sample_rate=8000)
