"""
Conteneur binaire des artefacts (checkpoints, cache de features)
magic (4 octets) | version (u8) | taille de l'en-tête (u32 LE) | en-tête JSON | tenseurs float32 | SHA-256
"""

import hashlib
import json
import logging
import struct
from pathlib import Path
from typing import Any, Dict, Tuple, Union

import numpy as np

from src.errors import IntegrityError, ManifestIOError

logger = logging.getLogger(__name__)

_PREFIX = struct.Struct("<4sBI")
_DIGEST_SIZE = hashlib.sha256().digest_size
_TENSOR_DTYPE = np.dtype("<f4")


def encode(magic: bytes, version: int, header: Dict[str, Any], tensors: Dict[str, np.ndarray]) -> bytes:
    """Sérialisation déterministe : tenseurs dans l'ordre donné, JSON à clés triées"""
    index = []
    payload = bytearray()
    for name, array in tensors.items():
        data = np.ascontiguousarray(array, dtype=_TENSOR_DTYPE).tobytes()
        index.append({"name": name, "shape": list(np.shape(array)), "offset": len(payload), "nbytes": len(data)})
        payload += data
    header_bytes = json.dumps({**header, "tensors": index}, sort_keys=True,
                              separators=(",", ":")).encode("utf-8")
    body = _PREFIX.pack(magic, version, len(header_bytes)) + header_bytes + bytes(payload)
    return body + hashlib.sha256(body).digest()


def decode(blob: bytes, magic: bytes, version: int,
           source: str = "") -> Tuple[Dict[str, Any], Dict[str, np.ndarray]]:
    """Vérifie magic, version et somme de contrôle puis retourne (en-tête, tenseurs)"""
    if len(blob) < _PREFIX.size + _DIGEST_SIZE:
        raise IntegrityError(f"{source}: fichier tronqué ({len(blob)} octets)")
    found_magic, found_version, header_size = _PREFIX.unpack_from(blob)
    if found_magic != magic:
        raise IntegrityError(f"{source}: signature {found_magic!r}, attendu {magic!r}")
    if found_version != version:
        raise IntegrityError(f"{source}: version de format {found_version}, attendu {version}")
    body, digest = blob[:-_DIGEST_SIZE], blob[-_DIGEST_SIZE:]
    if hashlib.sha256(body).digest() != digest:
        raise IntegrityError(f"{source}: somme de contrôle invalide")

    start = _PREFIX.size
    try:
        header = json.loads(body[start:start + header_size].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise IntegrityError(f"{source}: en-tête illisible ({e})") from e
    payload = body[start + header_size:]

    tensors = {}
    for entry in header.pop("tensors", []):
        chunk = payload[entry["offset"]:entry["offset"] + entry["nbytes"]]
        if len(chunk) != entry["nbytes"]:
            raise IntegrityError(f"{source}: tenseur {entry['name']} tronqué")
        tensors[entry["name"]] = np.frombuffer(chunk, dtype=_TENSOR_DTYPE).reshape(entry["shape"]).copy()
    return header, tensors


def write(path: Union[str, Path], magic: bytes, version: int, header: Dict[str, Any],
          tensors: Dict[str, np.ndarray]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode(magic, version, header, tensors))
    return path


def read(path: Union[str, Path], magic: bytes, version: int) -> Tuple[Dict[str, Any], Dict[str, np.ndarray]]:
    path = Path(path)
    if not path.exists():
        raise ManifestIOError(f"Fichier introuvable: {path}")
    return decode(path.read_bytes(), magic, version, source=path.name)
