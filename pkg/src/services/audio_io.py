"""
Service d'entrée/sortie audio
Décodage WAV, normalisation, rééchantillonnage et durée uniforme
"""

import logging
import struct
import warnings
from fractions import Fraction
from math import gcd
from pathlib import Path
from typing import Union

import numpy as np
from scipy import signal
from scipy.io import wavfile

from src.errors import DecodeError, InvalidArgumentError, ManifestIOError, UnsupportedFormatError
from src.models.schemas import AudioFormats, Waveform

logger = logging.getLogger(__name__)

# Passages par zéro du sinus cardinal de chaque côté, à la fréquence la plus basse
SINC_ZERO_CROSSINGS = 32

PCM16_SCALE = 32768.0

_UNSUPPORTED_MARKERS = ("Unknown wave file format", "Unsupported bit depth", "not supported")


def read_wav(path: Union[str, Path]) -> Waveform:
    """
    Lit un fichier RIFF/WAVE PCM 16 bits ou float 32 bits
    La stéréo est réduite en mono par moyenne des canaux
    """
    path = Path(path)
    if not path.exists():
        raise ManifestIOError(f"Fichier audio introuvable: {path}")

    try:
        with warnings.catch_warnings():
            # Les chunks inconnus (LIST, bext...) sont ignorés
            warnings.simplefilter("ignore", wavfile.WavFileWarning)
            rate, data = wavfile.read(path)
    except (ValueError, EOFError, struct.error, IndexError) as e:
        message = str(e)
        if any(marker in message for marker in _UNSUPPORTED_MARKERS):
            raise UnsupportedFormatError(f"{path.name}: {message}") from e
        raise DecodeError(f"{path.name}: en-tête WAV invalide ({message})") from e

    if not AudioFormats.is_supported(data.dtype):
        raise UnsupportedFormatError(
            f"{path.name}: format {data.dtype} non supporté "
            f"(attendu: {', '.join(AudioFormats.SUPPORTED_DTYPES.values())})")

    if data.ndim == 2 and data.shape[1] > 2:
        raise UnsupportedFormatError(f"{path.name}: {data.shape[1]} canaux (1 ou 2 attendus)")

    samples = data.astype(np.float64)
    if data.dtype == np.int16:
        samples /= PCM16_SCALE
    if samples.ndim == 2:
        samples = samples.mean(axis=1)

    logger.debug(f"📄 {path.name}: {len(samples)} échantillons à {rate} Hz "
                 f"({AudioFormats.describe(data.dtype)})")
    try:
        return Waveform(samples=samples, sample_rate=int(rate))
    except ValueError as e:
        raise DecodeError(f"{path.name}: contenu invalide ({e})") from e


def write_wav(path: Union[str, Path], w: Waveform) -> Path:
    """Écrit un WAV mono PCM 16 bits"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    pcm = np.clip(np.round(w.samples * PCM16_SCALE), -32768, 32767).astype(np.int16)
    wavfile.write(path, w.sample_rate, pcm)
    return path


def resample_array(samples: np.ndarray, up: int, down: int) -> np.ndarray:
    """Interpolation à bande limitée par sinus cardinal fenêtré (Hann), polyphasée"""
    if up == down:
        return np.asarray(samples, dtype=np.float64).copy()
    max_rate = max(up, down)
    taps = signal.firwin(2 * SINC_ZERO_CROSSINGS * max_rate + 1, 1.0 / max_rate, window="hann")
    return signal.resample_poly(np.asarray(samples, dtype=np.float64), up, down, window=taps)


def resample_ratio(samples: np.ndarray, ratio: float, max_denominator: int = 256) -> np.ndarray:
    """Rééchantillonne d'un rapport réel, approché par une fraction"""
    fraction = Fraction(ratio).limit_denominator(max_denominator)
    return resample_array(samples, fraction.numerator, fraction.denominator)


def resample(w: Waveform, target_rate: int) -> Waveform:
    """Change la fréquence d'échantillonnage; longueur = round(len · cible / source)"""
    if target_rate <= 0:
        raise InvalidArgumentError(f"fréquence cible invalide: {target_rate}")
    if target_rate == w.sample_rate:
        return w
    if len(w) == 0:
        return Waveform(samples=np.zeros(0), sample_rate=target_rate)

    divisor = gcd(target_rate, w.sample_rate)
    up, down = target_rate // divisor, w.sample_rate // divisor
    out = resample_array(w.samples, up, down)
    n_out = int(round(len(w) * target_rate / w.sample_rate))
    return Waveform(samples=fix_length(out, n_out), sample_rate=target_rate)


def fix_length(samples: np.ndarray, n: int) -> np.ndarray:
    """Complète par des zéros en fin ou tronque en fin"""
    if len(samples) >= n:
        return samples[:n]
    return np.pad(samples, (0, n - len(samples)))


def pad_or_trim(w: Waveform, duration: float) -> Waveform:
    """Ramène le clip à exactement duration · rate échantillons"""
    if duration <= 0:
        raise InvalidArgumentError(f"durée invalide: {duration}")
    n = int(round(duration * w.sample_rate))
    if n == len(w):
        return w
    return Waveform(samples=fix_length(w.samples, n), sample_rate=w.sample_rate)


def peak_normalize(w: Waveform) -> Waveform:
    """Met le pic absolu à 1.0; un signal nul est rendu tel quel"""
    peak = float(np.max(np.abs(w.samples))) if len(w) else 0.0
    if peak == 0.0:
        return w
    return Waveform(samples=w.samples / peak, sample_rate=w.sample_rate)


def load_canonical(path: Union[str, Path], duration: float) -> Waveform:
    """Lecture, normalisation crête et durée uniforme d'un clip"""
    return pad_or_trim(peak_normalize(read_wav(path)), duration)
