from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose, assert_array_equal

from src.errors import InvalidArgumentError
from src.models.schemas import FeatureChannel, FeatureConfig, Spectrogram, Waveform, WindowKind
from src.services.dsp import (
    FeatureExtractor,
    FeatureStandardizer,
    build_mel_filterbank,
    dct_ii,
    dct_matrix,
    extract_feature_volume,
    frame_hop,
    hz_to_mel,
    log_mel_energies,
    make_window,
    mel_to_hz,
    mfcc,
    next_power_of_two,
    resize_bilinear,
    stft,
)


def naive_stft(samples, coefficients, hop, fft_size):
    length = len(coefficients)
    n_frames = (len(samples) - length) // hop + 1
    k = np.arange(fft_size // 2 + 1)
    n = np.arange(length)
    basis = np.exp(-2j * np.pi * np.outer(k, n) / fft_size)
    return np.array([np.abs(basis @ (samples[t * hop: t * hop + length] * coefficients))
                     for t in range(n_frames)])


@pytest.mark.parametrize("kind, expected", [
    (WindowKind.HANN, [0.0, 1.0, 0.0]),
    (WindowKind.HAMMING, [0.08, 1.0, 0.08]),
    (WindowKind.RECTANGULAR, [1.0, 1.0, 1.0]),
])
def test_window_values(kind, expected):
    assert_allclose(make_window(kind, 3).coefficients, expected, atol=1e-12)


def test_window_length_zero():
    with pytest.raises(InvalidArgumentError):
        make_window(WindowKind.HANN, 0)


def test_next_power_of_two():
    assert [next_power_of_two(n) for n in (1, 860, 1024, 4096, 15691)] == [1, 1024, 1024, 4096, 16384]


def test_stft_matches_naive_dft():
    rng = np.random.default_rng(0)
    w = Waveform(samples=rng.uniform(-1, 1, 1024), sample_rate=8000)
    window = make_window(WindowKind.HANN, 200)
    spec = stft(w, window, hop=128, fft_size=256)
    expected = naive_stft(w.samples, window.coefficients, 128, 256)
    assert spec.frames.shape == expected.shape
    assert_allclose(spec.frames, expected, atol=1e-6)


def test_stft_sine_on_bin_center():
    t = np.arange(1024) / 1024
    w = Waveform(samples=np.sin(2 * np.pi * 64 * t), sample_rate=1024)
    spec = stft(w, make_window(WindowKind.RECTANGULAR, 256), hop=256, fft_size=256)
    energy = spec.frames ** 2
    assert np.all(energy[:, 16] >= 0.99 * energy.sum(axis=1))


def test_stft_parseval_one_sided():
    rng = np.random.default_rng(1)
    w = Waveform(samples=rng.normal(size=512), sample_rate=8000)
    window = make_window(WindowKind.HAMMING, 128)
    spec = stft(w, window, hop=64, fft_size=128)
    weights = np.full(spec.n_bins, 2.0)
    weights[[0, -1]] = 1.0
    frames = np.lib.stride_tricks.sliding_window_view(w.samples, 128)[::64] * window.coefficients
    assert_allclose((spec.frames ** 2) @ weights, 128 * np.sum(frames ** 2, axis=1), rtol=1e-9)


def test_stft_zero_signal_and_scale():
    window = make_window(WindowKind.HANN, 64)
    zero = Waveform(samples=np.zeros(256), sample_rate=8000)
    assert_array_equal(stft(zero, window, 32, 64).frames, 0.0)

    rng = np.random.default_rng(2)
    x = rng.normal(size=256)
    base = stft(Waveform(samples=x, sample_rate=8000), window, 32, 64).frames
    scaled = stft(Waveform(samples=-2.0 * x, sample_rate=8000), window, 32, 64).frames
    assert_allclose(scaled, 2.0 * base, rtol=1e-12)


@pytest.mark.parametrize("hop, fft_size, n", [(0, 64, 256), (32, 32, 256), (32, 64, 10)])
def test_stft_invalid_arguments(hop, fft_size, n):
    with pytest.raises(InvalidArgumentError):
        stft(Waveform(samples=np.zeros(n), sample_rate=8000), make_window(WindowKind.HANN, 64), hop, fft_size)


def test_mel_reference_values():
    assert hz_to_mel(700) == pytest.approx(779.79, abs=0.01)
    assert hz_to_mel(8000) == pytest.approx(2834.99, abs=0.01)
    assert hz_to_mel(0) == 0.0


def test_negative_frequency():
    with pytest.raises(InvalidArgumentError):
        hz_to_mel(-1.0)


@given(st.floats(min_value=0.0, max_value=22050.0))
def test_mel_inverse(f):
    assert mel_to_hz(hz_to_mel(f)) == pytest.approx(f, rel=1e-9, abs=1e-9)


def test_mel_filterbank_shape_and_peaks():
    fb = build_mel_filterbank(40, 1024, 22050)
    assert fb.weights.shape == (40, 513)
    assert np.all(fb.weights >= 0)
    assert_allclose(fb.weights.max(axis=1), 1.0)
    for row in fb.weights:
        peak = int(np.argmax(row))
        assert np.all(np.diff(row[: peak + 1]) >= 0)
        assert np.all(np.diff(row[peak:]) <= 0)
    interior = fb.weights[:, fb.bin_points[0] + 1: fb.bin_points[-1]]
    assert np.all(interior.sum(axis=0) > 0)


def test_mel_filterbank_widths_grow():
    fb = build_mel_filterbank(40, 2048, 22050)
    hz_points = mel_to_hz(np.linspace(0, hz_to_mel(11025), 42))
    assert np.all(np.diff(hz_points[2:] - hz_points[:-2]) > 0)
    widths = np.array(fb.bin_points[2:]) - np.array(fb.bin_points[:-2])
    assert np.all(widths[1:] >= widths[:-1] - 1)


def test_mel_filterbank_collapsed_points():
    with pytest.raises(InvalidArgumentError):
        build_mel_filterbank(128, 256, 44100)


def test_mel_filterbank_invalid_band():
    with pytest.raises(InvalidArgumentError):
        build_mel_filterbank(10, 1024, 8000, low_hz=5000)


def test_log_mel_floor_and_scaling():
    fb = build_mel_filterbank(10, 256, 8000)
    zero = Spectrogram(frames=np.zeros((3, 129)), frame_hop=1, fft_size=256, sample_rate=8000)
    assert_allclose(log_mel_energies(zero, fb), np.log(1e-10))

    frames = np.random.default_rng(4).uniform(1.0, 2.0, size=(3, 129))
    base = log_mel_energies(Spectrogram(frames=frames, frame_hop=1, fft_size=256, sample_rate=8000), fb)
    doubled = log_mel_energies(Spectrogram(frames=2 * frames, frame_hop=1, fft_size=256, sample_rate=8000), fb)
    assert_allclose(doubled - base, np.log(4.0), atol=1e-9)


def test_log_mel_dimension_mismatch():
    fb = build_mel_filterbank(10, 256, 8000)
    spec = Spectrogram(frames=np.ones((2, 65)), frame_hop=1, fft_size=128, sample_rate=8000)
    with pytest.raises(InvalidArgumentError):
        log_mel_energies(spec, fb)


def test_dct_constant_vector():
    coefficients = dct_ii(np.ones(16))
    assert coefficients[0] == pytest.approx(4.0)
    assert_allclose(coefficients[1:], 0.0, atol=1e-12)


def test_dct_against_naive_sum():
    m = 128
    y = np.random.default_rng(5).normal(size=m)
    n = np.arange(m)
    naive = np.array([np.sum(y * np.cos(np.pi * k * (2 * n + 1) / (2 * m))) for k in range(m)])
    naive *= np.sqrt(2.0 / m)
    naive[0] /= np.sqrt(2.0)
    assert_allclose(dct_ii(y), naive, atol=1e-9)


def test_dct_matrix_orthonormal():
    matrix = dct_matrix(128)
    assert_allclose(matrix @ matrix.T, np.eye(128), atol=1e-9)


def test_mfcc_constant_signal_in_first_coefficient():
    w = Waveform(samples=np.full(4096, 0.5), sample_rate=8000)
    coeffs = mfcc(w, n_filters=20, n_coeffs=13, window_length=256, hop=128,
                  window_kind=WindowKind.RECTANGULAR)
    assert coeffs.shape == (31, 13)
    assert np.all(np.abs(coeffs[:, 0]) > np.abs(coeffs[:, 1:]).sum(axis=1))


def test_mfcc_too_many_coefficients():
    with pytest.raises(InvalidArgumentError):
        mfcc(Waveform(samples=np.zeros(1024), sample_rate=8000), 10, 12, 256, 128)


def test_frame_hop():
    assert frame_hop(5490, 860, 16) == 308
    with pytest.raises(InvalidArgumentError):
        frame_hop(100, 200, 4)
    with pytest.raises(InvalidArgumentError):
        frame_hop(210, 200, 30)


def test_resize_bilinear_corners():
    grid = np.arange(12, dtype=float).reshape(3, 4)
    out = resize_bilinear(grid, 5, 7)
    assert out.shape == (5, 7)
    assert_allclose([out[0, 0], out[0, -1], out[-1, 0], out[-1, -1]], [0, 3, 8, 11])


def test_feature_volume_default_shape():
    rng = np.random.default_rng(6)
    clip = Waveform(samples=rng.uniform(-0.5, 0.5, 5 * 22050), sample_rate=22050)
    volume = extract_feature_volume(clip, FeatureConfig())
    assert volume.shape == (430, 128, 3)
    assert volume.dtype == np.float32
    assert np.all(np.isfinite(volume))


def test_feature_volume_silent_clip(small_features):
    clip = Waveform(samples=np.zeros(22050), sample_rate=22050)
    volume = extract_feature_volume(clip, small_features)
    assert volume.shape == (16, 16, 3)
    assert_array_equal(volume[..., 0], 0.0)
    assert_allclose(volume[..., 1], np.broadcast_to(volume[0, :, 1], (16, 16)))
    assert volume[0, 0, 1] != 0.0
    assert_array_equal(volume[:, small_features.mfcc_coeffs:, 1], 0.0)
    assert_allclose(volume[..., 2], np.log(1e-10), rtol=1e-6)


def test_feature_volume_deterministic_and_channel_selection(sine, small_features):
    clip = sine(440, duration=1.0, rate=22050)
    assert_array_equal(extract_feature_volume(clip, small_features),
                       extract_feature_volume(clip, small_features))
    only_mfcc = small_features.model_copy(update={"channels": [FeatureChannel.MFCC]})
    volume = extract_feature_volume(clip, only_mfcc)
    assert volume.shape == (16, 16, 1)
    assert_array_equal(volume[..., 0], extract_feature_volume(clip, small_features)[..., 1])


def test_extractor_tables_ready_before_extraction(small_features):
    extractor = FeatureExtractor(small_features)
    for channel in small_features.channels:
        rate, length = extractor.analysis(channel)
        assert extractor.window(length).length == length
        assert extractor.filterbank(next_power_of_two(length), rate).n_filters == small_features.bins


def test_extractor_shared_between_threads(sine, small_features):
    extractor = FeatureExtractor(small_features)
    clips = [sine(freq, duration=1.0, rate=22050) for freq in (220, 440, 880, 1760)]
    serial = [extractor.extract(clip) for clip in clips]
    with ThreadPoolExecutor(max_workers=4) as executor:
        threaded = list(executor.map(extractor.extract, clips))
    for expected, actual in zip(serial, threaded):
        assert_array_equal(actual, expected)


def test_standardizer():
    rng = np.random.default_rng(7)
    volumes = [rng.normal(loc=[1.0, -3.0, 10.0], scale=[2.0, 0.5, 4.0], size=(8, 8, 3)) for _ in range(20)]
    standardizer = FeatureStandardizer().fit(volumes)
    stacked = np.stack([standardizer.transform(v) for v in volumes])
    assert_allclose(stacked.reshape(-1, 3).mean(axis=0), 0.0, atol=1e-9)
    assert_allclose(stacked.reshape(-1, 3).std(axis=0), 1.0, atol=1e-9)


def test_standardizer_constant_channel_and_unfitted():
    volumes = [np.ones((2, 2, 1)) * 5.0]
    assert_array_equal(FeatureStandardizer().fit(volumes).transform(volumes[0]), 0.0)
    with pytest.raises(InvalidArgumentError):
        FeatureStandardizer().transform(volumes[0])
    with pytest.raises(InvalidArgumentError):
        FeatureStandardizer().fit([])


@settings(max_examples=25, deadline=None)
@given(st.integers(min_value=2, max_value=40), st.integers(min_value=2, max_value=40))
def test_resize_bilinear_shape(rows, cols):
    grid = np.random.default_rng(rows * 100 + cols).normal(size=(7, 5))
    out = resize_bilinear(grid, rows, cols)
    assert out.shape == (rows, cols)
    assert out.min() >= grid.min() - 1e-12
    assert out.max() <= grid.max() + 1e-12
