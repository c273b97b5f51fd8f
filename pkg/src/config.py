"""
Configuration du pipeline de classification audio
Fichier plat KEY=valeur, surchargé par les variables d'environnement
"""

import os
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Tuple, Union

from dotenv import dotenv_values
from pydantic import ValidationError

from src.errors import ManifestIOError
from src.models.schemas import PipelineConfig


def _floats(raw: str) -> Tuple[float, ...]:
    return tuple(float(part) for part in raw.split(",") if part.strip())


def _ints(raw: str) -> Tuple[int, ...]:
    return tuple(int(part) for part in raw.split(",") if part.strip())


def _names(raw: str) -> List[str]:
    return [part.strip().lower() for part in raw.split(",") if part.strip()]


def _bool(raw: str) -> bool:
    return raw.strip().lower() in ("1", "true", "yes", "oui", "on")


class Config:
    """Configuration centralisée du pipeline"""

    # Clé -> (chemin dans PipelineConfig, convertisseur, description avec la valeur par défaut)
    KEYS: Dict[str, Tuple[Tuple[str, ...], Callable[[str], Any], str]] = {
        # Général
        "LOG_LEVEL": (("log_level",), str.upper, "Niveau de log (INFO)"),
        "SEED": (("seed",), int, "Graine maître (0)"),
        "WORKERS": (("workers",), int, "Threads pour le travail par clip (1)"),
        "CANONICAL_DURATION": (("canonical_duration",), float, "Durée uniforme des clips en s (5.0)"),
        "SPLIT_TRAIN_FRACTION": (("split_train_fraction",), float, "Part d'entraînement (0.8)"),
        "CV_REPEATS": (("cv_repeats",), int, "Répétitions de validation croisée (10)"),
        "CV_EVAL_FRACTION": (("cv_eval_fraction",), float, "Part d'évaluation par répétition (0.30)"),
        "MINORITY_AUGMENTATION": (("minority_augmentation",), _bool, "Augmenter les classes minoritaires (true)"),

        # Features
        "FEATURE_FRAMES": (("features", "frames"), int, "Lignes du volume (430)"),
        "FEATURE_BINS": (("features", "bins"), int, "Colonnes du volume et filtres mel (128)"),
        "FEATURE_CHANNELS": (("features", "channels"), _names, "Canaux (spectrogram,mfcc,log_mel)"),
        "FEATURE_WINDOW": (("features", "window"), str.lower, "Fenêtre d'analyse (hann)"),
        "SPECTROGRAM_RATE": (("features", "spectrogram_rate"), int, "Fréquence du spectrogramme en Hz (5490)"),
        "SPECTROGRAM_WINDOW": (("features", "spectrogram_window"), int, "Fenêtre du spectrogramme en échantillons (860)"),
        "MFCC_RATE": (("features", "mfcc_rate"), int, "Fréquence des MFCC en Hz (44100)"),
        "MFCC_WINDOW": (("features", "mfcc_window"), int, "Fenêtre des MFCC en échantillons (4096)"),
        "MFCC_COEFFS": (("features", "mfcc_coeffs"), int, "Coefficients DCT conservés (120)"),
        "LOG_MEL_RATE": (("features", "log_mel_rate"), int, "Fréquence des énergies log-mel en Hz (22100)"),
        "LOG_MEL_WINDOW_SECONDS": (("features", "log_mel_window_seconds"), float, "Fenêtre log-mel en s (0.71)"),
        "MEL_LOW_HZ": (("features", "mel_low_hz"), float, "Borne basse des filtres mel en Hz (0)"),
        "LOG_FLOOR": (("features", "log_floor"), float, "Plancher du logarithme (1e-10)"),

        # Augmentation
        "AUG_NOISE_AMP": (("augment", "noise_amp_range"), _floats, "Amplitude du bruit min,max (0.001,0.015)"),
        "AUG_STRETCH": (("augment", "stretch_range"), _floats, "Taux d'étirement min,max (0.8,1.25)"),
        "AUG_PITCH": (("augment", "pitch_range"), _floats, "Demi-tons min,max (-4,4)"),
        "AUG_SHIFT": (("augment", "shift_range"), _floats, "Décalage en fraction de clip min,max (-0.5,0.5)"),
        "AUG_VOCODER_FFT": (("augment", "vocoder_fft"), int, "Trame du vocodeur de phase (2048)"),
        "AUG_VOCODER_HOP": (("augment", "vocoder_hop"), int, "Pas du vocodeur de phase (512)"),

        # Modèle et entraînement
        "MODEL_CONV_FILTERS": (("model", "conv_filters"), _ints, "Filtres des six convolutions (64,64,128,128,256,256)"),
        "MODEL_DENSE_UNITS": (("model", "dense_units"), _ints, "Neurones des couches cachées (80,40)"),
        "MODEL_POOL": (("model", "pool"), int, "Taille et pas du max pooling (3)"),
        "TRAIN_EPOCHS": (("training", "epochs"), int, "Époques (50)"),
        "TRAIN_BATCH_SIZE": (("training", "batch_size"), int, "Taille de lot (16)"),
        "TRAIN_LR": (("training", "learning_rate"), float, "Pas d'apprentissage Adam (0.001)"),
        "TRAIN_PATIENCE": (("training", "patience"), int, "Patience de l'arrêt anticipé (8)"),
        "TRAIN_VALIDATION_FRACTION": (("training", "validation_fraction"), float, "Part de validation (0.1)"),
        "TRAIN_DTYPE": (("training", "dtype"), str.lower, "Précision (float32)"),
    }

    def __init__(self, path: Optional[Union[str, Path]] = None,
                 environ: Optional[Dict[str, str]] = None):
        self.path = Path(path) if path else None
        self.environ = os.environ if environ is None else environ
        self.raw: Dict[str, str] = {}
        self.unknown_keys: List[str] = []

        if self.path is not None:
            if not self.path.exists():
                raise ManifestIOError(f"Fichier de configuration introuvable: {self.path}")
            for key, value in dotenv_values(self.path).items():
                if key not in self.KEYS:
                    self.unknown_keys.append(key)
                elif value is not None:
                    self.raw[key] = value

        # Les variables d'environnement priment sur le fichier
        for key in self.KEYS:
            if key in self.environ:
                self.raw[key] = self.environ[key]

    def validate(self) -> list:
        """Valide la configuration et retourne les erreurs"""
        errors = [f"Clé inconnue: {key}" for key in self.unknown_keys]
        try:
            self._build()
        except ValueError as e:
            errors.append(str(e))
        return errors

    def pipeline_config(self, seed: Optional[int] = None) -> PipelineConfig:
        """Construit la configuration validée; --seed prime sur SEED"""
        config = self._build()
        if seed is not None:
            config = self.with_seed(config, seed)
        return config

    @staticmethod
    def with_seed(config: PipelineConfig, seed: int) -> PipelineConfig:
        """Propage la graine maître aux sous-configurations"""
        return config.model_copy(update={
            "seed": seed,
            "augment": config.augment.model_copy(update={"seed": seed}),
            "training": config.training.model_copy(update={"seed": seed}),
        })

    def _build(self) -> PipelineConfig:
        nested: Dict[str, Any] = {}
        for key, raw in self.raw.items():
            path, convert, _ = self.KEYS[key]
            try:
                value = convert(raw)
            except ValueError as e:
                raise ValueError(f"{key}: valeur invalide '{raw}' ({e})") from e
            target = nested
            for part in path[:-1]:
                target = target.setdefault(part, {})
            target[path[-1]] = value

        # La graine maître alimente l'augmentation et l'entraînement
        if "seed" in nested:
            nested.setdefault("augment", {})["seed"] = nested["seed"]
            nested.setdefault("training", {})["seed"] = nested["seed"]

        try:
            return PipelineConfig.model_validate(nested)
        except ValidationError as e:
            details = "; ".join(
                f"{'.'.join(str(p) for p in err['loc'])}: {err['msg']}" for err in e.errors())
            raise ValueError(f"Configuration invalide: {details}") from e

    @classmethod
    def describe(cls) -> str:
        """Documentation des clés, au format du fichier de configuration"""
        lines = []
        for key, (_, _, doc) in cls.KEYS.items():
            lines.append(f"# {doc}")
            lines.append(f"# {key}=")
        return "\n".join(lines)
