"""
Schémas de données pour le pipeline de classification audio d'incidents routiers
"""

import hashlib
import json
from enum import Enum
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator


class ClassLabel(str, Enum):
    """Classes d'événements sonores, dans l'ordre des indices du modèle"""
    URBAN = "urban"
    CRASH = "crash"
    SIREN = "siren"
    TIRE_SKID = "tire_skid"
    CAR_HORN = "car_horn"


class WindowKind(str, Enum):
    """Fenêtres d'analyse disponibles"""
    HANN = "hann"
    HAMMING = "hamming"
    RECTANGULAR = "rectangular"


class FeatureChannel(str, Enum):
    """Canaux du volume de features"""
    SPECTROGRAM = "spectrogram"
    MFCC = "mfcc"
    LOG_MEL = "log_mel"


class AugmentationType(str, Enum):
    """Variantes générées pour chaque clip minoritaire, dans l'ordre de sortie"""
    NOISE_MIX = "noise_mix"
    TIME_STRETCH = "time_stretch"
    PITCH_SHIFT_A = "pitch_shift_a"
    PITCH_SHIFT_B = "pitch_shift_b"
    PITCH_SHIFT_C = "pitch_shift_c"
    TIME_SHIFT = "time_shift"


class OriginKind(str, Enum):
    """Origine d'une entrée du manifeste"""
    ORIGINAL = "original"
    AUGMENTED = "augmented"


class LayerKind(str, Enum):
    """Types de couches du réseau"""
    CONV2D = "conv2d"
    MAXPOOL = "maxpool"
    BATCHNORM = "batchnorm"
    FLATTEN = "flatten"
    DENSE = "dense"


class Activation(str, Enum):
    """Fonctions d'activation"""
    RELU = "relu"
    SOFTMAX = "softmax"
    LINEAR = "linear"


class SignalFamily(str, Enum):
    """Familles de signaux du corpus synthétique"""
    TONE = "tone"
    CHIRP = "chirp"
    NOISE_BURST = "noise_burst"
    CLICK_TRAIN = "click_train"
    AM_TONE = "am_tone"


# Types numériques


class Waveform(BaseModel):
    """Signal mono x(i) et sa fréquence d'échantillonnage"""
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    samples: np.ndarray = Field(..., description="Amplitudes réelles, 1-D")
    sample_rate: int = Field(..., gt=0, description="Fréquence d'échantillonnage (Hz)")

    @field_validator("samples", mode="before")
    @classmethod
    def _as_finite_vector(cls, value: Any) -> np.ndarray:
        samples = np.asarray(value, dtype=np.float64).reshape(-1)
        if not np.all(np.isfinite(samples)):
            raise ValueError("échantillons non finis dans le signal")
        return samples

    @property
    def duration_seconds(self) -> float:
        return len(self.samples) / self.sample_rate

    def __len__(self) -> int:
        return len(self.samples)


class Window(BaseModel):
    """Fenêtre d'analyse w(n)"""
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    kind: WindowKind
    length: int = Field(..., ge=1)
    coefficients: np.ndarray


class Spectrogram(BaseModel):
    """Grille T × B de magnitudes |F(n, w)|"""
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    frames: np.ndarray = Field(..., description="Magnitudes, une ligne par trame")
    frame_hop: int = Field(..., ge=1)
    fft_size: int = Field(..., ge=1)
    sample_rate: int = Field(..., gt=0)

    @property
    def n_bins(self) -> int:
        return self.frames.shape[1]


class MelFilterbank(BaseModel):
    """Banc de filtres triangulaires équidistants sur l'échelle mel"""
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    n_filters: int
    weights: np.ndarray = Field(..., description="Matrice n_filters × B")
    low_hz: float
    high_hz: float
    fft_size: int
    sample_rate: int
    bin_points: List[int] = Field(..., description="Points des triangles, en indices de bins")


# Configuration


class FeatureConfig(BaseModel):
    """Paramètres d'extraction des trois canaux"""
    frames: int = Field(430, ge=2, description="Lignes T du volume")
    bins: int = Field(128, ge=2, description="Colonnes F du volume")
    channels: List[FeatureChannel] = Field(
        default_factory=lambda: [FeatureChannel.SPECTROGRAM, FeatureChannel.MFCC, FeatureChannel.LOG_MEL])
    window: WindowKind = WindowKind.HANN
    spectrogram_rate: int = Field(5490, gt=0)
    spectrogram_window: int = Field(860, ge=1)
    mfcc_rate: int = Field(44100, gt=0)
    mfcc_window: int = Field(4096, ge=1)
    mfcc_coeffs: int = Field(120, ge=1)
    log_mel_rate: int = Field(22100, gt=0)
    log_mel_window_seconds: float = Field(0.71, gt=0)
    mel_low_hz: float = Field(0.0, ge=0)
    log_floor: float = Field(1e-10, gt=0)

    @model_validator(mode="after")
    def _check(self) -> "FeatureConfig":
        if not self.channels:
            raise ValueError("au moins un canal de features est requis")
        if len(set(self.channels)) != len(self.channels):
            raise ValueError("canaux de features dupliqués")
        if self.mfcc_coeffs > self.bins:
            raise ValueError(
                f"MFCC_COEFFS ({self.mfcc_coeffs}) dépasse le nombre de filtres ({self.bins})")
        return self

    @property
    def shape(self) -> Tuple[int, int, int]:
        return (self.frames, self.bins, len(self.channels))


class AugmentSpec(BaseModel):
    """Plages de tirage des augmentations"""
    noise_amp_range: Tuple[float, float] = (0.001, 0.015)
    stretch_range: Tuple[float, float] = (0.8, 1.25)
    pitch_range: Tuple[float, float] = (-4.0, 4.0)
    shift_range: Tuple[float, float] = (-0.5, 0.5)
    seed: int = 0
    vocoder_fft: int = Field(2048, ge=16)
    vocoder_hop: int = Field(512, ge=1)

    @model_validator(mode="after")
    def _check_ranges(self) -> "AugmentSpec":
        for name in ("noise_amp_range", "stretch_range", "pitch_range", "shift_range"):
            low, high = getattr(self, name)
            if not low < high:
                raise ValueError(f"{name}: min ({low}) doit être < max ({high})")
        return self


class LayerSpec(BaseModel):
    """Une couche du réseau et ses hyperparamètres"""
    kind: LayerKind
    filters: Optional[int] = Field(None, ge=1)
    kernel: int = Field(3, ge=1)
    pool: int = Field(3, ge=1)
    stride: int = Field(3, ge=1)
    units: Optional[int] = Field(None, ge=1)
    activation: Activation = Activation.RELU

    @model_validator(mode="after")
    def _check(self) -> "LayerSpec":
        if self.kind == LayerKind.CONV2D and (self.filters is None or self.kernel % 2 == 0):
            raise ValueError("conv2d exige filters et un noyau impair (padding 'same')")
        if self.kind == LayerKind.DENSE and self.units is None:
            raise ValueError("dense exige units")
        return self


class ModelSpec(BaseModel):
    """Pile ordonnée de couches"""
    layers: List[LayerSpec]

    @property
    def n_classes(self) -> int:
        return self.layers[-1].units or 0

    @classmethod
    def default(cls, n_classes: int = 5,
                conv_filters: Tuple[int, ...] = (64, 64, 128, 128, 256, 256),
                dense_units: Tuple[int, ...] = (80, 40),
                pool: int = 3) -> "ModelSpec":
        """Architecture à neuf couches : pooling d'entrée, six convolutions, trois denses"""
        if len(conv_filters) != 6:
            raise ValueError("l'architecture par défaut compte six convolutions")

        def conv(filters: int) -> LayerSpec:
            return LayerSpec(kind=LayerKind.CONV2D, filters=filters, kernel=3)

        def maxpool() -> LayerSpec:
            return LayerSpec(kind=LayerKind.MAXPOOL, pool=pool, stride=pool)

        bn = LayerSpec(kind=LayerKind.BATCHNORM)
        layers = [
            maxpool(), conv(conv_filters[0]), conv(conv_filters[1]), maxpool(), bn,
            conv(conv_filters[2]), conv(conv_filters[3]), maxpool(), bn,
            conv(conv_filters[4]), conv(conv_filters[5]), bn,
            LayerSpec(kind=LayerKind.FLATTEN),
        ]
        layers += [LayerSpec(kind=LayerKind.DENSE, units=u) for u in dense_units]
        layers.append(LayerSpec(kind=LayerKind.DENSE, units=n_classes,
                                activation=Activation.SOFTMAX))
        return cls(layers=layers)


class ModelConfig(BaseModel):
    """Hyperparamètres d'architecture"""
    conv_filters: Tuple[int, ...] = (64, 64, 128, 128, 256, 256)
    dense_units: Tuple[int, ...] = (80, 40)
    pool: int = Field(3, ge=1)

    def to_spec(self, n_classes: int) -> ModelSpec:
        return ModelSpec.default(n_classes, self.conv_filters, self.dense_units, self.pool)


class TrainingConfig(BaseModel):
    """Hyperparamètres d'entraînement (Adam, mini-lots)"""
    epochs: int = Field(50, ge=1)
    batch_size: int = Field(16, ge=1)
    learning_rate: float = Field(1e-3, gt=0)
    beta1: float = Field(0.9, ge=0, lt=1)
    beta2: float = Field(0.999, ge=0, lt=1)
    epsilon: float = Field(1e-8, gt=0)
    patience: int = Field(8, ge=1)
    validation_fraction: float = Field(0.1, ge=0, lt=1)
    dtype: str = Field("float32", pattern="^float(32|64)$")
    seed: int = 0


class PipelineConfig(BaseModel):
    """Configuration complète du pipeline"""
    canonical_duration: float = Field(5.0, gt=0)
    features: FeatureConfig = Field(default_factory=FeatureConfig)
    augment: AugmentSpec = Field(default_factory=AugmentSpec)
    model: ModelConfig = Field(default_factory=ModelConfig)
    training: TrainingConfig = Field(default_factory=TrainingConfig)
    split_train_fraction: float = Field(0.8, gt=0, lt=1)
    cv_repeats: int = Field(10, ge=1)
    cv_eval_fraction: float = Field(0.30, gt=0, lt=1)
    minority_augmentation: bool = True
    seed: int = 0
    workers: int = Field(1, ge=1)
    log_level: str = "INFO"

    def feature_hash(self) -> str:
        """
        Empreinte des paramètres qui influencent les features
        Les réglages d'augmentation en font partie : une variante rejouée en dépend.
        La graine n'y est pas, elle change déjà les identifiants des variantes.
        """
        payload = {
            "canonical_duration": self.canonical_duration,
            "features": self.features.model_dump(mode="json"),
            "augment": self.augment.model_dump(mode="json", exclude={"seed"}),
        }
        canonical = json.dumps(payload, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


# Manifeste et corpus


class Provenance(BaseModel):
    """Traçabilité d'une variante augmentée"""
    parent_id: str
    aug_type: AugmentationType
    params: Dict[str, float] = Field(default_factory=dict)
    noise_id: Optional[str] = Field(None, description="Clip donneur du bruit de fond")


class ManifestEntry(BaseModel):
    """Une ligne du manifeste"""
    clip_id: str = Field(..., min_length=1)
    path: str = Field("", description="Chemin du WAV (vide pour une variante non matérialisée)")
    label: ClassLabel
    origin: OriginKind = OriginKind.ORIGINAL
    provenance: Optional[Provenance] = None

    @model_validator(mode="after")
    def _check_origin(self) -> "ManifestEntry":
        if self.origin == OriginKind.AUGMENTED and self.provenance is None:
            raise ValueError(f"variante {self.clip_id} sans provenance")
        if self.origin == OriginKind.ORIGINAL and self.provenance is not None:
            raise ValueError(f"original {self.clip_id} avec provenance")
        return self

    @property
    def root_id(self) -> str:
        """Identifiant de l'original dont dérive l'entrée"""
        return self.provenance.parent_id if self.provenance else self.clip_id


class SyntheticCorpusSpec(BaseModel):
    """Corpus synthétique séparable, substitut du jeu de données réel"""
    families: Dict[ClassLabel, SignalFamily] = Field(default_factory=lambda: {
        ClassLabel.URBAN: SignalFamily.AM_TONE,
        ClassLabel.CRASH: SignalFamily.NOISE_BURST,
        ClassLabel.SIREN: SignalFamily.TONE,
        ClassLabel.TIRE_SKID: SignalFamily.CHIRP,
        ClassLabel.CAR_HORN: SignalFamily.CLICK_TRAIN,
    })
    clips_per_class: int = Field(40, ge=10)
    duration: float = Field(5.0, gt=0)
    sample_rate: int = Field(22050, gt=0)
    seed: int = 7


# Entraînement et évaluation


class EpochRecord(BaseModel):
    """Historique d'une époque"""
    epoch: int
    train_loss: float
    train_accuracy: float
    val_loss: Optional[float] = None
    val_accuracy: Optional[float] = None
    val_macro_f1: Optional[float] = None


class AdamState(BaseModel):
    """Moments de l'optimiseur Adam, par nom de paramètre"""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    step: int = 0
    first_moment: Dict[str, np.ndarray] = Field(default_factory=dict)
    second_moment: Dict[str, np.ndarray] = Field(default_factory=dict)


class ModelState(BaseModel):
    """Instantané d'un modèle : paramètres, statistiques courantes, optimiseur"""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    parameters: Dict[str, np.ndarray] = Field(default_factory=dict)
    buffers: Dict[str, np.ndarray] = Field(default_factory=dict,
                                           description="Moyennes et variances courantes de batchnorm")
    optimizer: Optional[AdamState] = None
    train_mode: bool = False


class ConfusionMatrix(BaseModel):
    """Comptes K × K, lignes = classe réelle, colonnes = classe prédite"""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    counts: np.ndarray
    class_names: List[str]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def one_vs_rest(self, k: int) -> Tuple[int, int, int, int]:
        """(TP, FP, FN, TN) de la classe k contre toutes les autres"""
        tp = int(self.counts[k, k])
        fn = int(self.counts[k, :].sum()) - tp
        fp = int(self.counts[:, k].sum()) - tp
        tn = self.total - tp - fn - fp
        return tp, fp, fn, tn


class ClassMetrics(BaseModel):
    """Métriques un-contre-tous d'une classe"""
    label: str
    precision: float = Field(..., ge=0, le=1)
    recall: float = Field(..., ge=0, le=1)
    f1: float = Field(..., ge=0, le=1)
    false_positive_rate: float = Field(..., ge=0, le=1)
    accuracy: float = Field(..., ge=0, le=1)
    support: int = Field(..., description="Échantillons de test de la classe")
    tp: int
    fp: int
    fn: int
    tn: int
    degenerate: List[str] = Field(default_factory=list,
                                  description="Métriques à dénominateur nul, mises à 0")


class MetricsReport(BaseModel):
    """Rapport de métriques par classe et global"""
    classes: List[ClassMetrics]
    accuracy: float
    macro_precision: float
    macro_recall: float
    macro_f1: float
    macro_false_positive_rate: float
    total: int
    confusion: List[List[int]]
    class_names: List[str]


class QuartileSummary(BaseModel):
    """Résumé pour boîte à moustaches"""
    min: float
    q1: float
    median: float
    q3: float
    max: float


class CVSummary(BaseModel):
    """Synthèse des répétitions de validation croisée"""
    repeats: int
    seeds: List[int]
    metrics: Dict[str, QuartileSummary]


class ClassLabels:
    """Étiquettes reconnues et alias des catégories sonores"""

    DISPLAY_NAMES = {
        ClassLabel.URBAN: "Urban Sound",
        ClassLabel.CRASH: "Crash",
        ClassLabel.SIREN: "Siren",
        ClassLabel.TIRE_SKID: "Tire Skid",
        ClassLabel.CAR_HORN: "Car Horn",
    }

    # Sons de la ville regroupés dans la classe majoritaire
    ALIASES = {
        "urban_sound": ClassLabel.URBAN,
        "engine": ClassLabel.URBAN,
        "train": ClassLabel.URBAN,
        "helicopter": ClassLabel.URBAN,
        "airplane": ClassLabel.URBAN,
        "fireworks": ClassLabel.URBAN,
        "crying_baby": ClassLabel.URBAN,
        "sneezing": ClassLabel.URBAN,
        "clapping": ClassLabel.URBAN,
        "coughing": ClassLabel.URBAN,
        "footsteps": ClassLabel.URBAN,
        "laughing": ClassLabel.URBAN,
        "rain": ClassLabel.URBAN,
        "wind": ClassLabel.URBAN,
        "crash_sound": ClassLabel.CRASH,
        "car_crash": ClassLabel.CRASH,
        "tireskid": ClassLabel.TIRE_SKID,
        "skid": ClassLabel.TIRE_SKID,
        "horn": ClassLabel.CAR_HORN,
    }

    @classmethod
    def normalize(cls, raw: str) -> Optional[ClassLabel]:
        """Normalise une étiquette brute (trim, minuscules, alias)"""
        key = raw.strip().lower().replace("-", "_").replace(" ", "_")
        try:
            return ClassLabel(key)
        except ValueError:
            return cls.ALIASES.get(key)

    @classmethod
    def index_of(cls, label: ClassLabel) -> int:
        return list(ClassLabel).index(label)

    @classmethod
    def names(cls) -> List[str]:
        return [label.value for label in ClassLabel]

    @classmethod
    def display_name(cls, label: ClassLabel) -> str:
        return cls.DISPLAY_NAMES[label]

    @classmethod
    def minority(cls) -> List[ClassLabel]:
        """Classes augmentées (toutes sauf la classe urbaine)"""
        return [label for label in ClassLabel if label != ClassLabel.URBAN]


class AudioFormats:
    """Formats WAV pris en charge en lecture"""

    SUPPORTED_DTYPES = {
        "int16": "PCM 16 bits",
        "float32": "IEEE float 32 bits",
    }

    @classmethod
    def is_supported(cls, dtype: np.dtype) -> bool:
        return np.dtype(dtype).name in cls.SUPPORTED_DTYPES

    @classmethod
    def describe(cls, dtype: np.dtype) -> Optional[str]:
        return cls.SUPPORTED_DTYPES.get(np.dtype(dtype).name)
