"""
Exceptions du pipeline de classification audio
Chaque erreur porte un code court, repris tel quel par la CLI
"""

from typing import Any, Dict, Optional


class PipelineError(Exception):
    """Erreur racine du pipeline"""

    code = "pipeline_error"

    def to_dict(self) -> Dict[str, str]:
        """Représentation une ligne, lisible par une machine"""
        return {"error": self.code, "message": str(self)}


class InvalidArgumentError(PipelineError, ValueError):
    """Argument hors domaine ou dimensions incompatibles"""

    code = "invalid_argument"


class DecodeError(PipelineError, ValueError):
    """Fichier WAV mal formé"""

    code = "decode_error"


class UnsupportedFormatError(PipelineError, ValueError):
    """Codec ou profondeur de bits non supportés"""

    code = "unsupported_format"


class ManifestIOError(PipelineError, OSError):
    """Fichier référencé par le manifeste introuvable"""

    code = "io_error"


class StaleCacheError(PipelineError):
    """Cache de features produit avec une autre configuration"""

    code = "stale_cache"


class IntegrityError(PipelineError):
    """Somme de contrôle ou version de format invalide"""

    code = "integrity_error"


class LeakageError(PipelineError):
    """Un échantillon d'évaluation a contaminé l'entraînement"""

    code = "leakage"


class TrainingDivergedError(PipelineError, RuntimeError):
    """Perte ou gradient non fini pendant l'entraînement"""

    code = "training_diverged"

    def __init__(self, message: str, last_good_state: Optional[Any] = None,
                 diagnostics: Optional[Dict[str, Any]] = None):
        super().__init__(message)
        self.last_good_state = last_good_state
        self.diagnostics = diagnostics or {}
        # Modèle restauré au dernier état sain, renseigné par le pipeline
        self.recovered: Optional[Any] = None
