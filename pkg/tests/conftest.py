"""
Fixtures partagées : signaux de test, configuration réduite, petit corpus synthétique
"""

import numpy as np
import pytest

from src.models.schemas import (
    Activation,
    FeatureConfig,
    LayerKind,
    LayerSpec,
    ModelConfig,
    ModelSpec,
    PipelineConfig,
    SyntheticCorpusSpec,
    TrainingConfig,
    Waveform,
)
from src.services.synthetic import generate_synthetic_corpus


def sine_wave(freq: float, duration: float = 1.0, rate: int = 8000, amp: float = 0.5) -> Waveform:
    t = np.arange(int(round(duration * rate))) / rate
    return Waveform(samples=amp * np.sin(2 * np.pi * freq * t), sample_rate=rate)


def dominant_frequency(samples: np.ndarray, rate: int) -> float:
    spectrum = np.abs(np.fft.rfft(samples * np.hanning(len(samples))))
    return float(np.argmax(spectrum) * rate / len(samples))


def build_small_config() -> PipelineConfig:
    """Clips d'une seconde, volume 16 × 16 × 3, réseau étroit"""
    return PipelineConfig(
        canonical_duration=1.0,
        features=FeatureConfig(frames=16, bins=16, mfcc_coeffs=12),
        model=ModelConfig(conv_filters=(4, 4, 4, 4, 4, 4), dense_units=(8, 8), pool=2),
        training=TrainingConfig(epochs=2, batch_size=8, validation_fraction=0.2),
        cv_repeats=2,
        workers=2,
    )


@pytest.fixture
def sine():
    return sine_wave


@pytest.fixture
def small_features() -> FeatureConfig:
    return build_small_config().features


@pytest.fixture
def small_config() -> PipelineConfig:
    return build_small_config()


@pytest.fixture
def tiny_spec() -> ModelSpec:
    """conv → pool → batchnorm → flatten → dense → softmax"""
    return ModelSpec(layers=[
        LayerSpec(kind=LayerKind.CONV2D, filters=4, kernel=3),
        LayerSpec(kind=LayerKind.MAXPOOL, pool=2, stride=2),
        LayerSpec(kind=LayerKind.BATCHNORM),
        LayerSpec(kind=LayerKind.FLATTEN),
        LayerSpec(kind=LayerKind.DENSE, units=32),
        LayerSpec(kind=LayerKind.DENSE, units=5, activation=Activation.SOFTMAX),
    ])


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory):
    """10 clips d'une seconde par classe"""
    root = tmp_path_factory.mktemp("corpus")
    return generate_synthetic_corpus(SyntheticCorpusSpec(clips_per_class=10, duration=1.0), root)
