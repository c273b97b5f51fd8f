"""
Cache des volumes de features
Un fichier par clip, invalidé par l'empreinte de la configuration
"""

import hashlib
import logging
import re
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import numpy as np

from src.errors import StaleCacheError
from src.models.schemas import ManifestEntry
from src.services import container

logger = logging.getLogger(__name__)

CACHE_MAGIC = b"RFVC"
CACHE_VERSION = 1
CACHE_SUFFIX = ".fvc"

_UNSAFE = re.compile(r"[^A-Za-z0-9._-]")


class FeatureCache:
    """Volumes de features indexés par clip_id"""

    def __init__(self, root: Union[str, Path], config_hash: str):
        self.root = Path(root)
        self.config_hash = config_hash
        self.root.mkdir(parents=True, exist_ok=True)
        logger.info(f"✅ FeatureCache initialisé: {self.root} (config {config_hash[:12]})")

    def path_for(self, clip_id: str) -> Path:
        digest = hashlib.sha256(clip_id.encode("utf-8")).hexdigest()[:8]
        return self.root / f"{_UNSAFE.sub('_', clip_id)}-{digest}{CACHE_SUFFIX}"

    def contains(self, clip_id: str) -> bool:
        return self.path_for(clip_id).exists()

    def write(self, entry: ManifestEntry, volume: np.ndarray) -> Path:
        header = {
            "clip_id": entry.clip_id,
            "config_hash": self.config_hash,
            "shape": list(volume.shape),
            "label": entry.label.value,
            "provenance": entry.provenance.model_dump(mode="json") if entry.provenance else None,
        }
        return container.write(self.path_for(entry.clip_id), CACHE_MAGIC, CACHE_VERSION,
                               header, {"volume": volume})

    def read(self, clip_id: str) -> Tuple[np.ndarray, Dict[str, Any]]:
        """Volume et en-tête; refuse un volume calculé avec une autre configuration"""
        header, tensors = container.read(self.path_for(clip_id), CACHE_MAGIC, CACHE_VERSION)
        if header.get("config_hash") != self.config_hash:
            raise StaleCacheError(
                f"cache de features obsolète pour {clip_id} (configuration modifiée): "
                f"relancez la commande features")
        if header.get("clip_id") != clip_id:
            raise StaleCacheError(f"cache de {clip_id} contient {header.get('clip_id')}")
        return tensors["volume"], header

    def missing(self, clip_ids: List[str]) -> List[str]:
        return [clip_id for clip_id in clip_ids if not self.contains(clip_id)]

    def load_stack(self, clip_ids: List[str], shape: Optional[Tuple[int, ...]] = None) -> np.ndarray:
        """Empile les volumes de plusieurs clips (N, H, W, C)"""
        volumes = []
        for clip_id in clip_ids:
            volume, _ = self.read(clip_id)
            if shape is not None and tuple(volume.shape) != tuple(shape):
                raise StaleCacheError(
                    f"{clip_id}: forme {volume.shape}, attendu {shape}; relancez la commande features")
            volumes.append(volume)
        if not volumes:
            return np.zeros((0,) + tuple(shape or ()), dtype=np.float32)
        return np.stack(volumes)
