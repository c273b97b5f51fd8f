"""
Service de checkpoints
Architecture, paramètres, statistiques de batchnorm et normalisation des features
"""

import logging
from pathlib import Path
from typing import List, NamedTuple, Optional, Union

from src.errors import IntegrityError
from src.models.schemas import FeatureConfig, ModelSpec
from src.services import container
from src.services.dsp import FeatureStandardizer
from src.services.nn import ConvNet

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"RICK"
CHECKPOINT_VERSION = 1

_STANDARDIZER_MEAN = "standardizer.mean"
_STANDARDIZER_STD = "standardizer.std"


class Checkpoint(NamedTuple):
    model: ConvNet
    standardizer: FeatureStandardizer
    feature_config: FeatureConfig
    feature_hash: str
    class_names: List[str]


def save_checkpoint(path: Union[str, Path], model: ConvNet, standardizer: FeatureStandardizer,
                    feature_config: FeatureConfig, feature_hash: str,
                    class_names: Optional[List[str]] = None) -> Path:
    if not standardizer.fitted:
        raise IntegrityError("normalisation non estimée: rien à figer dans le checkpoint")
    header = {
        "model_spec": model.spec.model_dump(mode="json"),
        "input_shape": list(model.input_shape),
        "feature_config": feature_config.model_dump(mode="json"),
        "feature_hash": feature_hash,
        "class_names": list(class_names or []),
    }
    tensors = {**model.named_parameters(), **model.named_buffers(),
               _STANDARDIZER_MEAN: standardizer.mean, _STANDARDIZER_STD: standardizer.std}
    path = container.write(path, CHECKPOINT_MAGIC, CHECKPOINT_VERSION, header, tensors)
    logger.info(f"💾 Checkpoint écrit: {path} ({len(tensors)} tenseurs)")
    return path


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    header, tensors = container.read(path, CHECKPOINT_MAGIC, CHECKPOINT_VERSION)
    try:
        spec = ModelSpec.model_validate(header["model_spec"])
        feature_config = FeatureConfig.model_validate(header["feature_config"])
        standardizer = FeatureStandardizer(tensors.pop(_STANDARDIZER_MEAN), tensors.pop(_STANDARDIZER_STD))
        model = ConvNet(spec, tuple(header["input_shape"]))
    except (KeyError, ValueError) as e:
        raise IntegrityError(f"{Path(path).name}: contenu du checkpoint incohérent ({e})") from e

    expected = set(model.named_parameters()) | set(model.named_buffers())
    if set(tensors) != expected:
        missing = sorted(expected - set(tensors))
        raise IntegrityError(f"{Path(path).name}: tenseurs manquants ou inattendus {missing[:3]}")
    for name, value in tensors.items():
        model.set_tensor(name, value)
    logger.info(f"📂 Checkpoint chargé: {path}")
    return Checkpoint(model, standardizer, feature_config, header["feature_hash"], header["class_names"])
