"""
Service d'augmentation audio
Bruit de fond, étirement temporel, transpositions et décalage circulaire des clips minoritaires
"""

import hashlib
import logging
from typing import Dict, List, Optional, Sequence, Tuple

import librosa
import numpy as np

from src.errors import InvalidArgumentError
from src.models.schemas import AugmentationType, AugmentSpec, Waveform
from src.services.audio_io import fix_length, pad_or_trim, resample, resample_ratio

logger = logging.getLogger(__name__)

VARIANTS_PER_CLIP = len(AugmentationType)

PITCH_TYPES = (AugmentationType.PITCH_SHIFT_A, AugmentationType.PITCH_SHIFT_B,
               AugmentationType.PITCH_SHIFT_C)

AugmentationPlan = List[Tuple[AugmentationType, Dict[str, float], Optional[int]]]


def derive_rng(seed: int, clip_id: str) -> np.random.Generator:
    """Générateur propre au clip : l'ordre de traitement ne change pas les tirages"""
    digest = hashlib.sha256(clip_id.encode("utf-8")).digest()
    return np.random.default_rng([seed & 0xFFFFFFFFFFFFFFFF, int.from_bytes(digest[:8], "little")])


def _clamp(samples: np.ndarray) -> np.ndarray:
    return np.clip(samples, -1.0, 1.0)


def mix_background_noise(w: Waveform, noise: Waveform, amp: float) -> Waveform:
    """out[i] = clamp(w[i] + amp · bruit[i]); le bruit est rééchantillonné puis bouclé ou tronqué"""
    if not 0.0 <= amp <= 1.0:
        raise InvalidArgumentError(f"amplitude de bruit hors de [0, 1]: {amp}")
    if amp == 0.0 or len(w) == 0:
        return w
    donor = resample(noise, w.sample_rate).samples
    if len(donor) == 0:
        raise InvalidArgumentError("signal de bruit vide")
    looped = np.resize(donor, len(w))
    return Waveform(samples=_clamp(w.samples + amp * looped), sample_rate=w.sample_rate)


def time_stretch(w: Waveform, rate: float, n_fft: int = 2048, hop: int = 512) -> Waveform:
    """Vocodeur de phase : durée divisée par rate, hauteur conservée"""
    if rate <= 0:
        raise InvalidArgumentError(f"taux d'étirement invalide: {rate}")
    if not 0.5 <= rate <= 2.0:
        raise InvalidArgumentError(f"taux d'étirement hors de [0.5, 2.0]: {rate}")

    n_out = int(round(len(w) / rate))
    if len(w) == 0:
        return w
    spectrum = librosa.stft(w.samples, n_fft=n_fft, hop_length=hop)
    stretched = librosa.phase_vocoder(spectrum, rate=rate, hop_length=hop, n_fft=n_fft)
    samples = librosa.istft(stretched, hop_length=hop, n_fft=n_fft, length=n_out)
    return Waveform(samples=_clamp(samples), sample_rate=w.sample_rate)


def pitch_shift(w: Waveform, semitones: float, n_fft: int = 2048, hop: int = 512) -> Waveform:
    """Étirement d'un facteur 2^(s/12) puis rééchantillonnage vers la longueur d'origine"""
    if not -12.0 <= semitones <= 12.0:
        raise InvalidArgumentError(f"transposition hors de [-12, 12] demi-tons: {semitones}")
    if semitones == 0.0 or len(w) == 0:
        return w

    rate = 2.0 ** (-semitones / 12.0)
    stretched = time_stretch(w, rate, n_fft, hop)
    samples = fix_length(resample_ratio(stretched.samples, rate), len(w))
    return Waveform(samples=_clamp(samples), sample_rate=w.sample_rate)


def time_shift(w: Waveform, fraction: float) -> Waveform:
    """Rotation circulaire de round(fraction · len) échantillons"""
    if not -0.5 <= fraction <= 0.5:
        raise InvalidArgumentError(f"décalage hors de [-0.5, 0.5]: {fraction}")
    shift = int(round(fraction * len(w)))
    return Waveform(samples=np.roll(w.samples, shift), sample_rate=w.sample_rate)


def plan_augmentations(spec: AugmentSpec, rng: np.random.Generator,
                       pool_size: int) -> AugmentationPlan:
    """Tire les paramètres des six variantes, dans un ordre fixe"""
    if pool_size < 1:
        raise InvalidArgumentError("réservoir de bruit vide")
    noise_index = int(rng.integers(pool_size))
    plan: AugmentationPlan = [
        (AugmentationType.NOISE_MIX, {"amp": float(rng.uniform(*spec.noise_amp_range))}, noise_index),
        (AugmentationType.TIME_STRETCH, {"rate": float(rng.uniform(*spec.stretch_range))}, None),
    ]
    for aug_type in PITCH_TYPES:
        plan.append((aug_type, {"semitones": float(rng.uniform(*spec.pitch_range))}, None))
    plan.append((AugmentationType.TIME_SHIFT, {"fraction": float(rng.uniform(*spec.shift_range))}, None))
    return plan


def apply_augmentation(w: Waveform, aug_type: AugmentationType, params: Dict[str, float],
                       spec: AugmentSpec, noise: Optional[Waveform] = None,
                       duration: Optional[float] = None) -> Waveform:
    """Rejoue une variante à partir de ses paramètres, puis la ramène à la durée canonique"""
    duration = duration if duration is not None else w.duration_seconds
    if aug_type == AugmentationType.NOISE_MIX:
        if noise is None:
            raise InvalidArgumentError("variante noise_mix sans signal de bruit")
        out = mix_background_noise(w, noise, params["amp"])
    elif aug_type == AugmentationType.TIME_STRETCH:
        out = time_stretch(w, params["rate"], spec.vocoder_fft, spec.vocoder_hop)
    elif aug_type in PITCH_TYPES:
        out = pitch_shift(w, params["semitones"], spec.vocoder_fft, spec.vocoder_hop)
    elif aug_type == AugmentationType.TIME_SHIFT:
        out = time_shift(w, params["fraction"])
    else:
        raise InvalidArgumentError(f"type d'augmentation inconnu: {aug_type}")
    return pad_or_trim(out, duration)


def augment_clip(w: Waveform, spec: AugmentSpec, noise_pool: Sequence[Waveform],
                 clip_id: str = "", duration: Optional[float] = None) -> List[Waveform]:
    """
    Six variantes : bruit, étirement, trois transpositions, décalage
    Les tirages dépendent uniquement de (spec.seed, clip_id)
    """
    if not noise_pool:
        raise InvalidArgumentError("réservoir de bruit vide")
    plan = plan_augmentations(spec, derive_rng(spec.seed, clip_id), len(noise_pool))
    variants = []
    for aug_type, params, noise_index in plan:
        noise = noise_pool[noise_index] if noise_index is not None else None
        variants.append(apply_augmentation(w, aug_type, params, spec, noise, duration))
        logger.debug(f"🔄 {clip_id or 'clip'}: {aug_type.value} {params}")
    return variants
