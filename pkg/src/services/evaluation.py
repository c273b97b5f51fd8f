"""
Service d'évaluation
Matrice de confusion, métriques un-contre-tous, validation croisée répétée et rapports
"""

import logging
from pathlib import Path
from typing import Callable, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
from sklearn.model_selection import train_test_split

from src.errors import InvalidArgumentError, LeakageError
from src.models.schemas import (
    ClassLabel,
    ClassLabels,
    ClassMetrics,
    ConfusionMatrix,
    CVSummary,
    ManifestEntry,
    MetricsReport,
    QuartileSummary,
)

logger = logging.getLogger(__name__)

SUMMARY_METRICS = ("accuracy", "macro_precision", "macro_recall", "macro_f1", "macro_false_positive_rate")


def confusion(true_labels: Sequence[int], predicted_labels: Sequence[int], n_classes: int,
              class_names: Optional[List[str]] = None) -> ConfusionMatrix:
    """counts[vrai][prédit]"""
    true = np.asarray(true_labels, dtype=np.int64).reshape(-1)
    pred = np.asarray(predicted_labels, dtype=np.int64).reshape(-1)
    if true.shape != pred.shape:
        raise InvalidArgumentError(f"{len(true)} étiquettes vraies pour {len(pred)} prédictions")
    for name, labels in (("vraie", true), ("prédite", pred)):
        if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
            raise InvalidArgumentError(f"étiquette {name} hors de [0, {n_classes})")
    counts = np.bincount(true * n_classes + pred, minlength=n_classes * n_classes)
    names = class_names or (ClassLabels.names() if n_classes == len(ClassLabel)
                            else [str(k) for k in range(n_classes)])
    return ConfusionMatrix(counts=counts.reshape(n_classes, n_classes), class_names=names)


def f1_score(precision: float, recall: float) -> float:
    """Moyenne harmonique, 0 si précision et rappel sont nuls"""
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def _ratio(numerator: int, denominator: int, name: str, degenerate: List[str]) -> float:
    if denominator == 0:
        degenerate.append(name)
        return 0.0
    return numerator / denominator


def class_metrics(cm: ConfusionMatrix, k: int) -> ClassMetrics:
    tp, fp, fn, tn = cm.one_vs_rest(k)
    degenerate: List[str] = []
    precision = _ratio(tp, tp + fp, "precision", degenerate)
    recall = _ratio(tp, tp + fn, "recall", degenerate)
    if precision + recall == 0:
        degenerate.append("f1")
    return ClassMetrics(
        label=cm.class_names[k],
        precision=precision,
        recall=recall,
        f1=f1_score(precision, recall),
        false_positive_rate=_ratio(fp, fp + tn, "false_positive_rate", degenerate),
        accuracy=(tp + tn) / cm.total,
        support=tp + fn,
        tp=tp, fp=fp, fn=fn, tn=tn,
        degenerate=degenerate,
    )


def metrics(cm: ConfusionMatrix) -> MetricsReport:
    """Métriques par classe, exactitude globale trace/total, moyennes macro"""
    if cm.counts.ndim != 2 or cm.counts.shape[0] != cm.counts.shape[1]:
        raise InvalidArgumentError(f"matrice de confusion non carrée: {cm.counts.shape}")
    if cm.total == 0:
        raise InvalidArgumentError("matrice de confusion vide")
    classes = [class_metrics(cm, k) for k in range(cm.counts.shape[0])]
    return MetricsReport(
        classes=classes,
        accuracy=float(np.trace(cm.counts)) / cm.total,
        macro_precision=float(np.mean([c.precision for c in classes])),
        macro_recall=float(np.mean([c.recall for c in classes])),
        macro_f1=float(np.mean([c.f1 for c in classes])),
        macro_false_positive_rate=float(np.mean([c.false_positive_rate for c in classes])),
        total=cm.total,
        confusion=cm.counts.astype(int).tolist(),
        class_names=list(cm.class_names),
    )


# Découpages


def stratified_split(labels: Sequence[int], eval_fraction: float,
                     seed: int) -> Tuple[np.ndarray, np.ndarray]:
    """Indices (entraînement, évaluation) préservant les proportions de chaque classe"""
    if not 0.0 < eval_fraction < 1.0:
        raise InvalidArgumentError(f"fraction d'évaluation hors de ]0, 1[: {eval_fraction}")
    labels = np.asarray(labels)
    classes, counts = np.unique(labels, return_counts=True)
    if np.any(counts < 2):
        raise InvalidArgumentError(
            f"classe {classes[np.argmin(counts)]}: {counts.min()} original(aux), 2 au minimum")
    try:
        train_idx, eval_idx = train_test_split(np.arange(len(labels)), test_size=eval_fraction,
                                               stratify=labels, random_state=seed % 2 ** 32)
    except ValueError as e:
        raise InvalidArgumentError(f"découpage stratifié impossible: {e}") from e
    return np.sort(train_idx), np.sort(eval_idx)


def derive_seeds(seed: int, n: int) -> List[int]:
    """Graines indépendantes dérivées de la graine maître"""
    return [int(s) for s in np.random.default_rng(seed).integers(0, 2 ** 31 - 1, size=n)]


def split_memberships(labels: Sequence[int], n_repeats: int = 10, eval_fraction: float = 0.30,
                      seed: int = 0) -> List[Tuple[int, np.ndarray, np.ndarray]]:
    """(graine, indices d'entraînement, indices d'évaluation) de chaque répétition"""
    splits = []
    for repeat_seed in derive_seeds(seed, n_repeats):
        try:
            train_idx, eval_idx = stratified_split(labels, eval_fraction, repeat_seed)
        except InvalidArgumentError as e:
            raise InvalidArgumentError(f"répétition de graine {repeat_seed}: {e}") from e
        splits.append((repeat_seed, train_idx, eval_idx))
    return splits


def audit_leakage(train_entries: Sequence[ManifestEntry], eval_entries: Sequence[ManifestEntry]) -> None:
    """Aucune entrée d'entraînement ne doit provenir d'un clip d'évaluation"""
    eval_ids = {entry.clip_id for entry in eval_entries}
    eval_roots = {entry.root_id for entry in eval_entries} | eval_ids
    offenders = []
    for entry in train_entries:
        noise_id = entry.provenance.noise_id if entry.provenance else None
        if entry.clip_id in eval_ids or entry.root_id in eval_roots or noise_id in eval_ids:
            offenders.append(entry.clip_id)
    if offenders:
        shown = ", ".join(offenders[:5]) + ("..." if len(offenders) > 5 else "")
        raise LeakageError(f"{len(offenders)} entrée(s) d'entraînement issues de l'évaluation: {shown}")


# Validation croisée


class CVRun(NamedTuple):
    """Résultat d'une répétition : jeu d'entraînement effectif et prédictions sur l'évaluation"""
    train_entries: List[ManifestEntry]
    predictions: np.ndarray


FitPredict = Callable[[List[ManifestEntry], List[ManifestEntry], int], CVRun]


def repeated_split_cv(entries: Sequence[ManifestEntry], fit_predict: FitPredict,
                      n_repeats: int = 10, eval_fraction: float = 0.30,
                      seed: int = 0) -> Tuple[List[MetricsReport], List[int]]:
    """
    Répétitions indépendantes de découpages stratifiés 70/30 sur les originaux
    fit_predict augmente et entraîne sur la part d'entraînement uniquement; son jeu
    d'entraînement effectif est audité contre les fuites
    """
    originals = [entry for entry in entries if entry.provenance is None]
    if len(originals) != len(entries):
        raise InvalidArgumentError("la validation croisée ne prend que des originaux")
    labels = [ClassLabels.index_of(entry.label) for entry in originals]

    reports, seeds = [], []
    for repeat, (repeat_seed, train_idx, eval_idx) in enumerate(
            split_memberships(labels, n_repeats, eval_fraction, seed), start=1):
        train = [originals[i] for i in train_idx]
        held_out = [originals[i] for i in eval_idx]
        run = fit_predict(train, held_out, repeat_seed)
        audit_leakage(run.train_entries, held_out)

        report = metrics(confusion([labels[i] for i in eval_idx], run.predictions, len(ClassLabel)))
        reports.append(report)
        seeds.append(repeat_seed)
        logger.info(f"📊 Répétition {repeat}/{n_repeats} (graine {repeat_seed}): "
                    f"exactitude {report.accuracy:.3f}, F1 macro {report.macro_f1:.3f}")
    return reports, seeds


def summarize_cv(reports: Sequence[MetricsReport], seeds: Optional[Sequence[int]] = None) -> CVSummary:
    """Quartiles (min, q1, médiane, q3, max) de chaque métrique globale"""
    if not reports:
        raise InvalidArgumentError("aucun rapport à résumer")
    summary = {}
    for name in SUMMARY_METRICS:
        values = np.array([getattr(report, name) for report in reports], dtype=np.float64)
        q = np.percentile(values, [0, 25, 50, 75, 100])
        summary[name] = QuartileSummary(min=q[0], q1=q[1], median=q[2], q3=q[3], max=q[4])
    return CVSummary(repeats=len(reports), seeds=list(seeds or []), metrics=summary)


# Rapports


def _display(name: str) -> str:
    label = ClassLabels.normalize(name)
    return ClassLabels.display_name(label) if label is not None else name


def format_table(report: MetricsReport) -> str:
    """Tableau texte aligné : précision, rappel, F1, taux de faux positifs, effectif"""
    header = f"{'Classe':<14}{'Precision':>10}{'Recall':>10}{'F1':>10}{'FPR':>10}{'Count':>8}"
    lines = [header, "-" * len(header)]
    for c in report.classes:
        lines.append(f"{_display(c.label):<14}{c.precision:>10.2f}{c.recall:>10.2f}"
                     f"{c.f1:>10.2f}{c.false_positive_rate:>10.2f}{c.support:>8d}")
    lines.append("-" * len(header))
    lines.append(f"{'Macro':<14}{report.macro_precision:>10.2f}{report.macro_recall:>10.2f}"
                 f"{report.macro_f1:>10.2f}{report.macro_false_positive_rate:>10.2f}{report.total:>8d}")
    lines.append(f"Accuracy: {report.accuracy:.4f}")
    degenerate = [f"{_display(c.label)} ({', '.join(c.degenerate)})" for c in report.classes if c.degenerate]
    if degenerate:
        lines.append(f"Dénominateurs nuls (métriques mises à 0): {'; '.join(degenerate)}")
    return "\n".join(lines) + "\n"


def format_cv_table(summary: CVSummary) -> str:
    header = f"{'Metric':<28}{'min':>8}{'q1':>8}{'median':>8}{'q3':>8}{'max':>8}"
    lines = [header, "-" * len(header)]
    for name, q in summary.metrics.items():
        lines.append(f"{name:<28}{q.min:>8.3f}{q.q1:>8.3f}{q.median:>8.3f}{q.q3:>8.3f}{q.max:>8.3f}")
    return "\n".join(lines) + "\n"


def write_report(report: MetricsReport, output_dir: Union[str, Path], stem: str = "metrics") -> Tuple[Path, Path]:
    """Écrit <stem>.json et <stem>.txt; contenu déterministe, sans horodatage"""
    output_dir = Path(output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)
    json_path = output_dir / f"{stem}.json"
    table_path = output_dir / f"{stem}.txt"
    json_path.write_text(report.model_dump_json(indent=2) + "\n", encoding="utf-8")
    table_path.write_text(format_table(report), encoding="utf-8")
    logger.info(f"📄 Rapport écrit: {json_path}, {table_path}")
    return json_path, table_path


def write_cv_summary(summary: CVSummary, reports: Sequence[MetricsReport],
                     output_dir: Union[str, Path]) -> Tuple[Path, Path]:
    output_dir = Path(output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)
    for repeat, report in enumerate(reports, start=1):
        write_report(report, output_dir, stem=f"cv_{repeat:02d}")
    json_path = output_dir / "cv_summary.json"
    table_path = output_dir / "cv_summary.txt"
    json_path.write_text(summary.model_dump_json(indent=2) + "\n", encoding="utf-8")
    table_path.write_text(format_cv_table(summary), encoding="utf-8")
    logger.info(f"📄 Synthèse de validation croisée écrite: {json_path}")
    return json_path, table_path
