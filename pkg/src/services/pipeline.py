"""
Orchestration du pipeline
Manifeste, découpage avant augmentation, matérialisation, features, entraînement et évaluation
"""

import csv
import hashlib
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np

from src.errors import (
    InvalidArgumentError,
    IntegrityError,
    ManifestIOError,
    StaleCacheError,
    TrainingDivergedError,
)
from src.models.schemas import (
    AugmentationType,
    ClassLabel,
    ClassLabels,
    EpochRecord,
    ManifestEntry,
    MetricsReport,
    OriginKind,
    PipelineConfig,
    Provenance,
    Waveform,
)
from src.services.audio_io import load_canonical, pad_or_trim, read_wav, write_wav
from src.services.augment import apply_augmentation, derive_rng, plan_augmentations
from src.services.dsp import FeatureStandardizer, extract_feature_volume
from src.services.evaluation import (
    CVRun,
    audit_leakage,
    confusion,
    metrics,
    repeated_split_cv,
    stratified_split,
)
from src.services.feature_cache import FeatureCache
from src.services.nn import ConvNet
from src.services.training import predict_batch, train

logger = logging.getLogger(__name__)

REQUIRED_COLUMNS = ("clip_id", "path", "label")
PROVENANCE_COLUMNS = ("origin", "parent_id", "aug_type", "params", "noise_id")

ClipIndex = Dict[str, ManifestEntry]


# Manifeste


def _parse_provenance(row: Dict[str, str], row_number: int) -> Tuple[OriginKind, Optional[Provenance]]:
    origin = (row.get("origin") or OriginKind.ORIGINAL.value).strip().lower()
    try:
        origin = OriginKind(origin)
    except ValueError as e:
        raise InvalidArgumentError(f"ligne {row_number}: origine inconnue '{origin}'") from e
    if origin == OriginKind.ORIGINAL:
        return origin, None
    try:
        return origin, Provenance(
            parent_id=(row.get("parent_id") or "").strip(),
            aug_type=AugmentationType((row.get("aug_type") or "").strip()),
            params=json.loads(row.get("params") or "{}"),
            noise_id=(row.get("noise_id") or "").strip() or None,
        )
    except ValueError as e:
        raise InvalidArgumentError(f"ligne {row_number}: provenance invalide ({e})") from e


def load_manifest(path: Union[str, Path], check_files: bool = True) -> List[ManifestEntry]:
    """
    Lit un manifeste CSV (clip_id,path,label [+ colonnes de provenance])
    Chemins relatifs résolus depuis le dossier du manifeste
    """
    path = Path(path)
    if not path.exists():
        raise ManifestIOError(f"Manifeste introuvable: {path}")

    with path.open(newline="", encoding="utf-8") as handle:
        reader = csv.DictReader(handle)
        columns = [c.strip() for c in reader.fieldnames or []]
        missing = [c for c in REQUIRED_COLUMNS if c not in columns]
        if missing:
            raise InvalidArgumentError(f"{path.name}: colonnes manquantes {missing}")
        rows = list(reader)

    entries: List[ManifestEntry] = []
    seen = set()
    for row_number, row in enumerate(rows, start=2):
        row = {(k or "").strip(): v for k, v in row.items()}
        clip_id = (row.get("clip_id") or "").strip()
        if not clip_id:
            raise InvalidArgumentError(f"ligne {row_number}: clip_id vide")
        if clip_id in seen:
            raise InvalidArgumentError(f"ligne {row_number}: clip_id dupliqué '{clip_id}'")
        seen.add(clip_id)

        raw_label = row.get("label") or ""
        label = ClassLabels.normalize(raw_label)
        if label is None:
            raise InvalidArgumentError(f"ligne {row_number}: étiquette inconnue '{raw_label}'")

        origin, provenance = _parse_provenance(row, row_number)
        raw_path = (row.get("path") or "").strip()
        clip_path = str(path.parent / raw_path) if raw_path and not os.path.isabs(raw_path) else raw_path
        if check_files and (raw_path or origin == OriginKind.ORIGINAL) and not Path(clip_path).exists():
            raise ManifestIOError(f"ligne {row_number}: fichier introuvable '{clip_path}'")
        entries.append(ManifestEntry(clip_id=clip_id, path=clip_path, label=label,
                                     origin=origin, provenance=provenance))

    originals = {e.clip_id for e in entries if e.origin == OriginKind.ORIGINAL}
    for entry in entries:
        if entry.provenance and entry.provenance.parent_id not in originals:
            raise InvalidArgumentError(
                f"{entry.clip_id}: parent '{entry.provenance.parent_id}' absent des originaux")
    logger.info(f"📄 Manifeste {path.name}: {len(entries)} entrées")
    return entries


def write_manifest(entries: Sequence[ManifestEntry], path: Union[str, Path]) -> Path:
    """Écrit un manifeste CSV; chemins relatifs au dossier du manifeste"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(REQUIRED_COLUMNS + PROVENANCE_COLUMNS)
        for entry in entries:
            clip_path = os.path.relpath(entry.path, path.parent) if entry.path else ""
            p = entry.provenance
            writer.writerow([
                entry.clip_id, clip_path, entry.label.value, entry.origin.value,
                p.parent_id if p else "", p.aug_type.value if p else "",
                json.dumps(p.params, sort_keys=True) if p else "", (p.noise_id or "") if p else "",
            ])
    logger.info(f"📄 Manifeste écrit: {path} ({len(entries)} entrées)")
    return path


def index_originals(entries: Sequence[ManifestEntry]) -> ClipIndex:
    return {entry.clip_id: entry for entry in entries if entry.origin == OriginKind.ORIGINAL}


# Découpage et augmentation


def variant_id(provenance: Provenance) -> str:
    """Identifiant stable d'une variante, dérivé de toute sa provenance"""
    digest = hashlib.sha256(provenance.model_dump_json().encode("utf-8")).hexdigest()[:8]
    return f"{provenance.parent_id}__{provenance.aug_type.value}__{digest}"


def augment_entries(train_originals: Sequence[ManifestEntry], config: PipelineConfig) -> List[ManifestEntry]:
    """
    Originaux d'entraînement suivis des six variantes de chaque original minoritaire
    Le bruit de fond provient des originaux urbains d'entraînement
    """
    noise_pool = sorted(e.clip_id for e in train_originals if e.label == ClassLabel.URBAN)
    minority = set(ClassLabels.minority())
    entries = list(train_originals)
    if not config.minority_augmentation:
        return entries

    targets = [e for e in train_originals if e.label in minority]
    if targets and not noise_pool:
        raise InvalidArgumentError("aucun original urbain d'entraînement pour le bruit de fond")
    for original in targets:
        plan = plan_augmentations(config.augment, derive_rng(config.augment.seed, original.clip_id),
                                  len(noise_pool))
        for aug_type, params, noise_index in plan:
            provenance = Provenance(parent_id=original.clip_id, aug_type=aug_type, params=params,
                                    noise_id=noise_pool[noise_index] if noise_index is not None else None)
            entries.append(ManifestEntry(clip_id=variant_id(provenance), label=original.label,
                                         origin=OriginKind.AUGMENTED, provenance=provenance))
    return entries


class DatasetSplit(NamedTuple):
    train: List[ManifestEntry]
    test: List[ManifestEntry]


def split_then_augment(entries: Sequence[ManifestEntry], config: PipelineConfig) -> DatasetSplit:
    """Découpage stratifié des originaux, augmentation de la part d'entraînement seulement"""
    if any(entry.origin != OriginKind.ORIGINAL for entry in entries):
        raise InvalidArgumentError("le découpage ne prend que des originaux")
    labels = [ClassLabels.index_of(entry.label) for entry in entries]
    train_idx, test_idx = stratified_split(labels, 1.0 - config.split_train_fraction, config.seed)
    train_originals = [entries[i] for i in train_idx]
    test = [entries[i] for i in test_idx]
    train_set = augment_entries(train_originals, config)
    audit_leakage(train_set, test)
    logger.info(f"📊 Découpage: {len(train_originals)} originaux d'entraînement → {len(train_set)} "
                f"après augmentation, {len(test)} de test")
    return DatasetSplit(train_set, test)


def describe_dataset(train: Sequence[ManifestEntry], test: Sequence[ManifestEntry]) -> Dict[str, Dict[str, int]]:
    """Effectifs par classe avant et après augmentation"""
    table = {}
    for label in ClassLabel:
        train_originals = sum(1 for e in train if e.label == label and e.origin == OriginKind.ORIGINAL)
        tested = sum(1 for e in test if e.label == label)
        table[label.value] = {
            "originals": train_originals + tested,
            "train_originals": train_originals,
            "train_total": sum(1 for e in train if e.label == label),
            "test": tested,
        }
    return table


def format_dataset_table(table: Dict[str, Dict[str, int]]) -> str:
    lines = [f"{'Classe':<14}{'Originaux':>10}{'Entraîn.':>10}{'Augmenté':>10}{'Test':>8}"]
    for name, row in table.items():
        lines.append(f"{ClassLabels.display_name(ClassLabel(name)):<14}{row['originals']:>10}"
                     f"{row['train_originals']:>10}{row['train_total']:>10}{row['test']:>8}")
    return "\n".join(lines)


# Matérialisation


def materialize(entry: ManifestEntry, index: ClipIndex, config: PipelineConfig) -> Waveform:
    """Signal canonique d'une entrée; une variante sans fichier est rejouée depuis sa provenance"""
    if entry.origin == OriginKind.ORIGINAL:
        return load_canonical(entry.path, config.canonical_duration)
    if entry.path:
        return pad_or_trim(read_wav(entry.path), config.canonical_duration)

    provenance = entry.provenance
    if provenance.parent_id not in index:
        raise InvalidArgumentError(f"{entry.clip_id}: parent '{provenance.parent_id}' inconnu")
    parent = load_canonical(index[provenance.parent_id].path, config.canonical_duration)
    noise = None
    if provenance.noise_id is not None:
        if provenance.noise_id not in index:
            raise InvalidArgumentError(f"{entry.clip_id}: bruit '{provenance.noise_id}' inconnu")
        noise = load_canonical(index[provenance.noise_id].path, config.canonical_duration)
    return apply_augmentation(parent, provenance.aug_type, provenance.params, config.augment,
                              noise, config.canonical_duration)


def materialize_variants(entries: Sequence[ManifestEntry], index: ClipIndex, config: PipelineConfig,
                         output_dir: Union[str, Path]) -> List[ManifestEntry]:
    """Écrit les variantes en WAV et retourne les entrées avec leur chemin"""
    output_dir = Path(output_dir)
    pending = [e for e in entries if e.origin == OriginKind.AUGMENTED and not e.path]

    def render(entry: ManifestEntry) -> Tuple[str, str]:
        path = write_wav(output_dir / f"{entry.clip_id}.wav", materialize(entry, index, config))
        return entry.clip_id, str(path)

    with ThreadPoolExecutor(max_workers=config.workers) as executor:
        paths = dict(executor.map(render, pending))
    logger.info(f"📁 {len(paths)} variantes écrites dans {output_dir}")
    return [e.model_copy(update={"path": paths[e.clip_id]}) if e.clip_id in paths else e for e in entries]


# Features


def _is_fresh(cache: FeatureCache, clip_id: str) -> bool:
    if not cache.contains(clip_id):
        return False
    try:
        cache.read(clip_id)
    except (StaleCacheError, IntegrityError):
        return False
    return True


def compute_features(entries: Sequence[ManifestEntry], index: ClipIndex, config: PipelineConfig,
                     cache: FeatureCache) -> int:
    """Remplit le cache; les volumes déjà calculés avec la même configuration sont conservés"""
    pending = [e for e in entries if not _is_fresh(cache, e.clip_id)]
    logger.info(f"🔄 Extraction des features: {len(pending)} clips ({len(entries) - len(pending)} en cache)")

    def extract(entry: ManifestEntry) -> str:
        volume = extract_feature_volume(materialize(entry, index, config), config.features)
        cache.write(entry, volume)
        logger.debug(f"✅ {entry.clip_id}: volume {volume.shape}")
        return entry.clip_id

    with ThreadPoolExecutor(max_workers=config.workers) as executor:
        done = list(executor.map(extract, pending))
    return len(done)


def load_volumes(entries: Sequence[ManifestEntry], cache: FeatureCache,
                 config: PipelineConfig) -> Tuple[np.ndarray, np.ndarray]:
    """(volumes, étiquettes) depuis le cache; refuse un cache absent ou obsolète"""
    missing = cache.missing([e.clip_id for e in entries])
    if missing:
        raise StaleCacheError(f"{len(missing)} volume(s) absent(s) du cache (ex. {missing[0]}): "
                              f"relancez la commande features")
    volumes = cache.load_stack([e.clip_id for e in entries], config.features.shape)
    labels = np.array([ClassLabels.index_of(e.label) for e in entries], dtype=np.int64)
    return volumes, labels


# Entraînement et évaluation


class TrainedModel(NamedTuple):
    model: ConvNet
    standardizer: FeatureStandardizer
    history: List[EpochRecord]


def validation_holdout(entries: Sequence[ManifestEntry], fraction: float,
                       seed: int) -> Tuple[List[ManifestEntry], List[ManifestEntry]]:
    """Mise de côté stratifiée par original racine : une variante suit toujours son parent"""
    roots = sorted({e.root_id for e in entries})
    label_of = {e.root_id: e.label for e in entries}
    root_labels = [ClassLabels.index_of(label_of[r]) for r in roots]
    counts = np.bincount(root_labels, minlength=len(ClassLabel))
    if fraction <= 0 or np.any((counts > 0) & (counts < 2)):
        return list(entries), []
    present = int(np.count_nonzero(counts))
    n_val = int(np.ceil(fraction * len(roots)))
    if n_val < present or int(np.floor((1 - fraction) * len(roots))) < present:
        logger.warning(f"⚠️ {len(roots)} originaux: trop peu pour une validation stratifiée, arrêt anticipé désactivé")
        return list(entries), []
    _, val_idx = stratified_split(root_labels, fraction, seed)
    held = {roots[i] for i in val_idx}
    return [e for e in entries if e.root_id not in held], [e for e in entries if e.root_id in held]


def train_model(train_entries: Sequence[ManifestEntry], cache: FeatureCache,
                config: PipelineConfig) -> TrainedModel:
    fit_entries, val_entries = validation_holdout(train_entries, config.training.validation_fraction,
                                                  config.training.seed)
    volumes, labels = load_volumes(fit_entries, cache, config)
    standardizer = FeatureStandardizer().fit(volumes)
    volumes = standardizer.transform(volumes)
    validation = None
    if val_entries:
        val_volumes, val_labels = load_volumes(val_entries, cache, config)
        validation = (standardizer.transform(val_volumes), val_labels)

    spec = config.model.to_spec(len(ClassLabel))
    shape = config.features.shape
    model = ConvNet(spec, shape, seed=config.training.seed, dtype=config.training.dtype)
    summary = "\n".join(model.summary())
    logger.info(f"🚀 Modèle:\n{summary}")
    logger.info(f"📊 Entraînement sur {len(fit_entries)} volumes, validation sur {len(val_entries)}")
    try:
        _, history = train(model, volumes, labels, config.training, validation)
    except TrainingDivergedError as e:
        if e.last_good_state is not None:
            model.load_state(e.last_good_state)
            e.recovered = TrainedModel(model, standardizer, [])
        raise
    return TrainedModel(model, standardizer, history)


def evaluate_model(model: ConvNet, standardizer: FeatureStandardizer, entries: Sequence[ManifestEntry],
                   cache: FeatureCache, config: PipelineConfig) -> MetricsReport:
    volumes, labels = load_volumes(entries, cache, config)
    predictions = predict_batch(model, standardizer.transform(volumes), config.training.batch_size).argmax(axis=1)
    return metrics(confusion(labels, predictions, len(ClassLabel)))


def run_cross_validation(entries: Sequence[ManifestEntry], config: PipelineConfig,
                         cache: FeatureCache) -> Tuple[List[MetricsReport], List[int]]:
    """Répétitions 70/30 : augmentation, features et entraînement sur la part d'entraînement seulement"""
    originals = [e for e in entries if e.origin == OriginKind.ORIGINAL]
    index = index_originals(originals)

    def fit_predict(train_originals: List[ManifestEntry], held_out: List[ManifestEntry], seed: int) -> CVRun:
        repeat_config = config.model_copy(update={
            "training": config.training.model_copy(update={"seed": seed}),
        })
        train_set = augment_entries(train_originals, repeat_config)
        compute_features(list(train_set) + list(held_out), index, repeat_config, cache)
        trained = train_model(train_set, cache, repeat_config)
        volumes, _ = load_volumes(held_out, cache, repeat_config)
        probs = predict_batch(trained.model, trained.standardizer.transform(volumes), config.training.batch_size)
        return CVRun(train_entries=train_set, predictions=probs.argmax(axis=1))

    return repeated_split_cv(originals, fit_predict, config.cv_repeats, config.cv_eval_fraction, config.seed)


def predict_wav(model: ConvNet, standardizer: FeatureStandardizer, path: Union[str, Path],
                config: PipelineConfig) -> np.ndarray:
    """Probabilités des classes pour un fichier WAV"""
    clip = load_canonical(path, config.canonical_duration)
    volume = standardizer.transform(extract_feature_volume(clip, config.features))
    return predict_batch(model, volume[None])[0]
