"""
Service d'extraction de features
Spectrogramme STFT compressé en mel, MFCC et énergies log-mel, empilés en volume 3 canaux
"""

import logging
from functools import lru_cache
from typing import Dict, Iterable, Optional, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import fft as sp_fft
from scipy import ndimage
from scipy.signal import get_window

from src.errors import InvalidArgumentError
from src.models.schemas import (
    FeatureChannel,
    FeatureConfig,
    MelFilterbank,
    Spectrogram,
    Waveform,
    Window,
    WindowKind,
)
from src.services.audio_io import resample

logger = logging.getLogger(__name__)

MEL_SCALE = 1125.0
MEL_BREAK_HZ = 700.0
LOG_FLOOR = 1e-10

_SCIPY_WINDOWS = {
    WindowKind.HANN: "hann",
    WindowKind.HAMMING: "hamming",
    WindowKind.RECTANGULAR: "boxcar",
}

ArrayLike = Union[float, np.ndarray]


def make_window(kind: Union[WindowKind, str], length: int) -> Window:
    """Fenêtre symétrique de longueur L"""
    if length < 1:
        raise InvalidArgumentError(f"longueur de fenêtre invalide: {length}")
    kind = WindowKind(kind)
    coefficients = get_window(_SCIPY_WINDOWS[kind], length, fftbins=False)
    return Window(kind=kind, length=length, coefficients=np.asarray(coefficients, dtype=np.float64))


def next_power_of_two(n: int) -> int:
    return 1 << max(0, int(n - 1).bit_length())


def stft(w: Waveform, window: Window, hop: int, fft_size: int) -> Spectrogram:
    """
    Magnitudes |F(n, w)| trame par trame
    La trame t couvre [t·hop, t·hop + L); chaque trame est complétée par des zéros jusqu'à fft_size
    """
    if hop < 1:
        raise InvalidArgumentError(f"pas de trame invalide: {hop}")
    if fft_size < window.length:
        raise InvalidArgumentError(f"fft_size ({fft_size}) < longueur de fenêtre ({window.length})")
    if len(w) < window.length:
        raise InvalidArgumentError(
            f"clip de {len(w)} échantillons plus court qu'une fenêtre ({window.length})")

    frames = sliding_window_view(w.samples, window.length)[::hop] * window.coefficients
    magnitudes = np.abs(sp_fft.rfft(frames, n=fft_size, axis=1))
    return Spectrogram(frames=magnitudes, frame_hop=hop, fft_size=fft_size, sample_rate=w.sample_rate)


def hz_to_mel(f: ArrayLike) -> ArrayLike:
    """M(f) = 1125 · ln(1 + f / 700)"""
    f_arr = np.asarray(f, dtype=np.float64)
    if np.any(f_arr < 0):
        raise InvalidArgumentError(f"fréquence négative: {f}")
    mel = MEL_SCALE * np.log1p(f_arr / MEL_BREAK_HZ)
    return float(mel) if np.ndim(f) == 0 else mel


def mel_to_hz(m: ArrayLike) -> ArrayLike:
    """Inverse exacte de hz_to_mel"""
    m_arr = np.asarray(m, dtype=np.float64)
    if np.any(m_arr < 0):
        raise InvalidArgumentError(f"valeur mel négative: {m}")
    hz = MEL_BREAK_HZ * np.expm1(m_arr / MEL_SCALE)
    return float(hz) if np.ndim(m) == 0 else hz


def build_mel_filterbank(n_filters: int, fft_size: int, sample_rate: int,
                         low_hz: float = 0.0, high_hz: Optional[float] = None) -> MelFilterbank:
    """Triangles de crête 1.0 sur n_filters + 2 points équidistants en mel, calés sur les bins"""
    high_hz = sample_rate / 2 if high_hz is None else high_hz
    if n_filters < 1:
        raise InvalidArgumentError(f"nombre de filtres invalide: {n_filters}")
    if not 0 <= low_hz < high_hz <= sample_rate / 2:
        raise InvalidArgumentError(
            f"bornes invalides: 0 <= {low_hz} < {high_hz} <= {sample_rate / 2} requis")

    mel_points = np.linspace(hz_to_mel(low_hz), hz_to_mel(high_hz), n_filters + 2)
    hz_points = mel_to_hz(mel_points)
    bins = np.round(hz_points * fft_size / sample_rate).astype(int)
    if np.any(np.diff(bins) <= 0):
        raise InvalidArgumentError(
            f"{n_filters} filtres trop nombreux pour fft_size={fft_size} à {sample_rate} Hz "
            f"(points confondus sur un même bin)")

    n_bins = fft_size // 2 + 1
    weights = np.zeros((n_filters, n_bins))
    k = np.arange(n_bins)
    for i in range(n_filters):
        left, center, right = bins[i], bins[i + 1], bins[i + 2]
        rising = (k >= left) & (k <= center)
        falling = (k > center) & (k <= right)
        weights[i, rising] = (k[rising] - left) / (center - left)
        weights[i, falling] = (right - k[falling]) / (right - center)

    return MelFilterbank(n_filters=n_filters, weights=weights, low_hz=float(low_hz),
                         high_hz=float(high_hz), fft_size=fft_size, sample_rate=sample_rate,
                         bin_points=[int(b) for b in bins])


def mel_project(spec: Spectrogram, fb: MelFilterbank, power: bool = False) -> np.ndarray:
    """Projection des magnitudes (ou puissances) d'un spectrogramme sur le banc mel"""
    if spec.n_bins != fb.weights.shape[1]:
        raise InvalidArgumentError(
            f"dimensions incompatibles: {spec.n_bins} bins vs {fb.weights.shape[1]} colonnes")
    values = spec.frames ** 2 if power else spec.frames
    return values @ fb.weights.T


def log_mel_energies(spec: Spectrogram, fb: MelFilterbank, floor: float = LOG_FLOOR) -> np.ndarray:
    """ln(énergie mel + ε) par trame, énergie = |F|² projetée sur le banc"""
    return np.log(mel_project(spec, fb, power=True) + floor)


def dct_ii(values: np.ndarray, axis: int = -1) -> np.ndarray:
    """DCT-II orthonormée"""
    return sp_fft.dct(values, type=2, norm="ortho", axis=axis)


@lru_cache(maxsize=8)
def dct_matrix(size: int) -> np.ndarray:
    """Matrice M telle que dct_ii(y) = M @ y"""
    matrix = dct_ii(np.eye(size), axis=0)
    matrix.setflags(write=False)
    return matrix


def frame_hop(n_samples: int, window_length: int, n_frames: int) -> int:
    """Pas tel que n_frames trames complètes couvrent le signal"""
    if n_samples < window_length:
        raise InvalidArgumentError(
            f"signal de {n_samples} échantillons plus court que la fenêtre ({window_length})")
    if n_frames < 2:
        return max(1, n_samples - window_length + 1)
    hop = (n_samples - window_length) // (n_frames - 1)
    if hop < 1:
        raise InvalidArgumentError(
            f"impossible d'obtenir {n_frames} trames de {window_length} sur {n_samples} échantillons")
    return hop


def mfcc(w: Waveform, n_filters: int, n_coeffs: int, window_length: int, hop: int,
         window_kind: WindowKind = WindowKind.HANN, low_hz: float = 0.0,
         floor: float = LOG_FLOOR, filterbank: Optional[MelFilterbank] = None) -> np.ndarray:
    """
    MFCC : trames -> fenêtre -> spectre d'amplitude -> banc mel -> log -> DCT-II
    Retourne une grille T × n_coeffs
    """
    if n_coeffs > n_filters:
        raise InvalidArgumentError(f"n_coeffs ({n_coeffs}) > n_filters ({n_filters})")
    fft_size = next_power_of_two(window_length)
    spec = stft(w, make_window(window_kind, window_length), hop, fft_size)
    fb = filterbank or build_mel_filterbank(n_filters, fft_size, w.sample_rate, low_hz)
    log_mel = np.log(mel_project(spec, fb) + floor)
    return dct_ii(log_mel, axis=1)[:, :n_coeffs]


def resize_bilinear(grid: np.ndarray, rows: int, cols: int) -> np.ndarray:
    """Interpolation bilinéaire vers rows × cols, coins alignés"""
    if grid.shape == (rows, cols):
        return grid.copy()
    r = np.linspace(0, grid.shape[0] - 1, rows)
    c = np.linspace(0, grid.shape[1] - 1, cols)
    rr, cc = np.meshgrid(r, c, indexing="ij")
    return ndimage.map_coordinates(grid, [rr, cc], order=1, mode="nearest")


class FeatureExtractor:
    """Extraction du volume de features; fenêtres et bancs de filtres construits à l'initialisation"""

    def __init__(self, config: FeatureConfig):
        self.config = config
        self._windows: Dict[int, Window] = {}
        self._filterbanks: Dict[Tuple[int, int], MelFilterbank] = {}
        # Lecture seule ensuite : les workers se partagent l'extracteur
        for channel in config.channels:
            rate, length = self.analysis(channel)
            fft_size = next_power_of_two(length)
            self._windows[length] = make_window(config.window, length)
            self._filterbanks[(fft_size, rate)] = build_mel_filterbank(
                config.bins, fft_size, rate, config.mel_low_hz)
        logger.debug(f"✅ FeatureExtractor initialisé (forme {config.shape})")

    def analysis(self, channel: FeatureChannel) -> Tuple[int, int]:
        """(fréquence, longueur de fenêtre) d'un canal"""
        cfg = self.config
        if channel == FeatureChannel.SPECTROGRAM:
            return cfg.spectrogram_rate, cfg.spectrogram_window
        if channel == FeatureChannel.MFCC:
            return cfg.mfcc_rate, cfg.mfcc_window
        return cfg.log_mel_rate, int(round(cfg.log_mel_window_seconds * cfg.log_mel_rate))

    def window(self, length: int) -> Window:
        return self._windows[length]

    def filterbank(self, fft_size: int, sample_rate: int) -> MelFilterbank:
        return self._filterbanks[(fft_size, sample_rate)]

    def _spectrogram_at(self, clip: Waveform, rate: int, window_length: int) -> Spectrogram:
        w = resample(clip, rate)
        hop = frame_hop(len(w), window_length, self.config.frames)
        spec = stft(w, self.window(window_length), hop, next_power_of_two(window_length))
        # Le pas est arrondi par défaut : on garde exactement les T premières trames
        return spec.model_copy(update={"frames": spec.frames[: self.config.frames]})

    def spectrogram_channel(self, clip: Waveform) -> np.ndarray:
        cfg = self.config
        spec = self._spectrogram_at(clip, cfg.spectrogram_rate, cfg.spectrogram_window)
        fb = self.filterbank(spec.fft_size, cfg.spectrogram_rate)
        return mel_project(spec, fb)

    def mfcc_channel(self, clip: Waveform) -> np.ndarray:
        cfg = self.config
        w = resample(clip, cfg.mfcc_rate)
        hop = frame_hop(len(w), cfg.mfcc_window, cfg.frames)
        fb = self.filterbank(next_power_of_two(cfg.mfcc_window), cfg.mfcc_rate)
        coeffs = mfcc(w, cfg.bins, cfg.mfcc_coeffs, cfg.mfcc_window, hop, cfg.window,
                      cfg.mel_low_hz, cfg.log_floor, filterbank=fb)[: cfg.frames]
        return np.pad(coeffs, ((0, 0), (0, cfg.bins - cfg.mfcc_coeffs)))

    def log_mel_channel(self, clip: Waveform) -> np.ndarray:
        cfg = self.config
        rate, window_length = self.analysis(FeatureChannel.LOG_MEL)
        spec = self._spectrogram_at(clip, rate, window_length)
        fb = self.filterbank(spec.fft_size, cfg.log_mel_rate)
        return log_mel_energies(spec, fb, cfg.log_floor)

    def extract(self, clip: Waveform) -> np.ndarray:
        """Volume (frames, bins, canaux) en float32, canaux dans l'ordre de la configuration"""
        builders = {
            FeatureChannel.SPECTROGRAM: self.spectrogram_channel,
            FeatureChannel.MFCC: self.mfcc_channel,
            FeatureChannel.LOG_MEL: self.log_mel_channel,
        }
        grids = [resize_bilinear(builders[channel](clip), self.config.frames, self.config.bins)
                 for channel in self.config.channels]
        volume = np.stack(grids, axis=-1).astype(np.float32)
        if not np.all(np.isfinite(volume)):
            raise InvalidArgumentError("volume de features non fini")
        return volume


@lru_cache(maxsize=4)
def _extractor_for(config_json: str) -> FeatureExtractor:
    return FeatureExtractor(FeatureConfig.model_validate_json(config_json))


def extract_feature_volume(clip: Waveform, feature_config: FeatureConfig) -> np.ndarray:
    """Volume de features d'un clip déjà ramené à la durée canonique"""
    return _extractor_for(feature_config.model_dump_json()).extract(clip)


class FeatureStandardizer:
    """Centrage-réduction par canal, statistiques apprises sur l'entraînement seulement"""

    def __init__(self, mean: Optional[np.ndarray] = None, std: Optional[np.ndarray] = None):
        self.mean = None if mean is None else np.asarray(mean, dtype=np.float64)
        self.std = None if std is None else np.asarray(std, dtype=np.float64)

    @property
    def fitted(self) -> bool:
        return self.mean is not None

    def fit(self, volumes: Iterable[np.ndarray]) -> "FeatureStandardizer":
        total = sq_total = None
        count = 0
        for volume in volumes:
            v = volume.astype(np.float64).reshape(-1, volume.shape[-1])
            total = v.sum(axis=0) if total is None else total + v.sum(axis=0)
            sq_total = (v ** 2).sum(axis=0) if sq_total is None else sq_total + (v ** 2).sum(axis=0)
            count += v.shape[0]
        if count == 0:
            raise InvalidArgumentError("aucun volume pour estimer la normalisation")
        self.mean = total / count
        variance = np.maximum(sq_total / count - self.mean ** 2, 0.0)
        std = np.sqrt(variance)
        self.std = np.where(std > 1e-8, std, 1.0)
        logger.info(f"📊 Normalisation estimée sur {count} cellules par canal")
        return self

    def transform(self, volume: np.ndarray) -> np.ndarray:
        if not self.fitted:
            raise InvalidArgumentError("normalisation non estimée")
        return ((volume - self.mean) / self.std).astype(volume.dtype)
