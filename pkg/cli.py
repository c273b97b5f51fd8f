#!/usr/bin/env python3
"""
Interface en ligne de commande du classifieur audio d'incidents routiers
Étapes : synth → augment → features → train → eval, predict sur un WAV
"""

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Callable, Dict, List, Optional

from src import __version__
from src.config import Config
from src.errors import InvalidArgumentError, PipelineError, StaleCacheError, TrainingDivergedError
from src.models.schemas import ClassLabels, ManifestEntry, PipelineConfig, SyntheticCorpusSpec
from src.services.checkpoint import CHECKPOINT_VERSION, Checkpoint, load_checkpoint, save_checkpoint
from src.services.evaluation import format_table, summarize_cv, write_cv_summary, write_report
from src.services.feature_cache import CACHE_VERSION, FeatureCache
from src.services.pipeline import (
    TrainedModel,
    compute_features,
    describe_dataset,
    evaluate_model,
    format_dataset_table,
    index_originals,
    load_manifest,
    materialize_variants,
    predict_wav,
    run_cross_validation,
    split_then_augment,
    train_model,
    write_manifest,
)
from src.services.synthetic import generate_synthetic_corpus

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_UNEXPECTED = 1
EXIT_PIPELINE_ERROR = 2


class PipelineCLI:
    """Commandes du pipeline, une méthode par sous-commande"""

    def __init__(self, args: argparse.Namespace):
        self.args = args
        settings = Config(args.config)
        errors = settings.validate()
        if errors:
            raise InvalidArgumentError("; ".join(errors))
        self.config: PipelineConfig = settings.pipeline_config(seed=args.seed)
        logging.getLogger().setLevel(self.config.log_level)
        logger.info(f"✅ Configuration validée (graine {self.config.seed}, "
                    f"volume {self.config.features.shape})")

    def _cache(self, feature_hash: Optional[str] = None) -> FeatureCache:
        return FeatureCache(self.args.cache, feature_hash or self.config.feature_hash())

    def _checkpoint(self) -> Checkpoint:
        """Checkpoint compatible avec la configuration courante (durée, features, augmentation)"""
        checkpoint = load_checkpoint(self.args.checkpoint)
        if checkpoint.feature_hash != self.config.feature_hash():
            raise StaleCacheError("le checkpoint a été entraîné avec une autre configuration de features: "
                                  "relancez la commande features puis train")
        return checkpoint

    def _manifests(self, paths: List[str]) -> List[ManifestEntry]:
        entries: List[ManifestEntry] = []
        for path in paths:
            entries.extend(load_manifest(path))
        return entries

    def synth(self) -> int:
        spec = SyntheticCorpusSpec(clips_per_class=self.args.clips, seed=self.args.corpus_seed)
        corpus = generate_synthetic_corpus(spec, self.args.out)
        print(json.dumps({"manifest": str(corpus.manifest_path), "clips": len(corpus.entries),
                          "oracle_accuracy": round(corpus.oracle_accuracy, 4)}))
        return EXIT_OK

    def augment(self) -> int:
        entries = load_manifest(self.args.manifest)
        split = split_then_augment(entries, self.config)
        out = Path(self.args.out)
        train = materialize_variants(split.train, index_originals(entries), self.config, out / "wav")
        write_manifest(train, out / "train.csv")
        write_manifest(split.test, out / "test.csv")
        table = describe_dataset(train, split.test)
        (out / "dataset.json").write_text(json.dumps(table, indent=2) + "\n", encoding="utf-8")
        logger.info(f"📊 Répartition des classes:\n{format_dataset_table(table)}")
        return EXIT_OK

    def features(self) -> int:
        entries = self._manifests(self.args.manifest)
        computed = compute_features(entries, index_originals(entries), self.config, self._cache())
        logger.info(f"✅ {computed} volumes calculés, cache {self.args.cache}")
        return EXIT_OK

    def _save(self, trained: TrainedModel) -> Path:
        return save_checkpoint(self.args.out, trained.model, trained.standardizer, self.config.features,
                               self.config.feature_hash(), ClassLabels.names())

    def train(self) -> int:
        entries = load_manifest(self.args.manifest)
        try:
            trained = train_model(entries, self._cache(), self.config)
        except TrainingDivergedError as e:
            if e.recovered is not None:
                path = self._save(e.recovered)
                logger.warning(f"⚠️ Entraînement divergent, dernier état sain sauvegardé: {path}")
            raise
        path = self._save(trained)
        history_path = path.with_suffix(".history.json")
        history_path.write_text(json.dumps([r.model_dump() for r in trained.history], indent=2) + "\n",
                                encoding="utf-8")
        logger.info(f"📄 Historique écrit: {history_path}")
        return EXIT_OK

    def eval(self) -> int:
        if self.args.cv:
            entries = load_manifest(self.args.manifest)
            reports, seeds = run_cross_validation(entries, self.config, self._cache())
            write_cv_summary(summarize_cv(reports, seeds), reports, self.args.out)
            return EXIT_OK

        if not self.args.checkpoint:
            raise InvalidArgumentError("eval sans --cv exige --checkpoint")
        checkpoint = self._checkpoint()
        entries = load_manifest(self.args.manifest)
        report = evaluate_model(checkpoint.model, checkpoint.standardizer, entries,
                                self._cache(checkpoint.feature_hash), self.config)
        write_report(report, self.args.out)
        logger.info(f"📊 Résultats:\n{format_table(report)}")
        return EXIT_OK

    def predict(self) -> int:
        checkpoint = self._checkpoint()
        probabilities = predict_wav(checkpoint.model, checkpoint.standardizer, self.args.wav, self.config)
        names = checkpoint.class_names or ClassLabels.names()
        print(json.dumps({
            "probabilities": {name: round(float(p), 6) for name, p in zip(names, probabilities)},
            "label": names[int(probabilities.argmax())],
        }))
        return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cli.py", description="Classifieur audio d'incidents routiers")
    parser.add_argument("--version", action="version",
                        version=f"%(prog)s {__version__} (cache v{CACHE_VERSION}, checkpoint v{CHECKPOINT_VERSION})")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="Fichier de configuration KEY=valeur")
    common.add_argument("--seed", type=int, help="Graine maître (prime sur SEED)")
    commands = parser.add_subparsers(dest="command", required=True)

    synth = commands.add_parser("synth", parents=[common], help="Génère le corpus synthétique")
    synth.add_argument("--out", required=True)
    synth.add_argument("--clips", type=int, default=40, help="Clips par classe")
    synth.add_argument("--corpus-seed", type=int, default=7)

    augment = commands.add_parser("augment", parents=[common], help="Découpage 80/20 puis augmentation")
    augment.add_argument("--manifest", required=True)
    augment.add_argument("--out", required=True)

    features = commands.add_parser("features", parents=[common], help="Remplit le cache de features")
    features.add_argument("--manifest", required=True, nargs="+")
    features.add_argument("--cache", required=True)

    train = commands.add_parser("train", parents=[common], help="Entraîne le modèle")
    train.add_argument("--manifest", required=True)
    train.add_argument("--cache", required=True)
    train.add_argument("--out", required=True, help="Chemin du checkpoint")

    evaluate = commands.add_parser("eval", parents=[common], help="Évalue un checkpoint ou lance la validation croisée")
    evaluate.add_argument("--manifest", required=True)
    evaluate.add_argument("--cache", required=True)
    evaluate.add_argument("--out", required=True, help="Dossier des rapports")
    evaluate.add_argument("--checkpoint")
    evaluate.add_argument("--cv", action="store_true", help="Validation croisée 70/30 répétée")

    predict = commands.add_parser("predict", parents=[common], help="Classe un fichier WAV")
    predict.add_argument("--checkpoint", required=True)
    predict.add_argument("wav")
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    """Point d'entrée principal"""
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO, stream=sys.stderr,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        cli = PipelineCLI(args)
        handlers: Dict[str, Callable[[], int]] = {
            "synth": cli.synth, "augment": cli.augment, "features": cli.features,
            "train": cli.train, "eval": cli.eval, "predict": cli.predict,
        }
        logger.info(f"🚀 Commande {args.command}")
        return handlers[args.command]()
    except PipelineError as e:
        logger.error(f"❌ {e}")
        print(json.dumps(e.to_dict(), ensure_ascii=False), file=sys.stderr)
        return EXIT_PIPELINE_ERROR
    except Exception:
        logger.exception("❌ Erreur inattendue")
        return EXIT_UNEXPECTED


if __name__ == "__main__":
    sys.exit(main())
