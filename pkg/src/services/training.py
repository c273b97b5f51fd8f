"""
Service d'entraînement
Optimiseur Adam, boucle par mini-lots avec arrêt anticipé, prédiction
"""

import logging
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from src.errors import InvalidArgumentError, TrainingDivergedError
from src.models.schemas import AdamState, EpochRecord, ModelState, TrainingConfig
from src.services.evaluation import confusion, metrics
from src.services.nn import ConvNet, cross_entropy, one_hot, softmax, softmax_cross_entropy_grad

logger = logging.getLogger(__name__)


def adam_step(params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray], state: AdamState,
              lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
              epsilon: float = 1e-8) -> AdamState:
    """Mise à jour Adam avec correction du biais, appliquée en place à chaque tenseur"""
    for name, grad in grads.items():
        if not np.all(np.isfinite(grad)):
            raise TrainingDivergedError(
                f"gradient non fini pour {name} (pas {state.step + 1})",
                diagnostics={"tensor": name, "step": state.step + 1})

    state.step += 1
    correction1 = 1.0 - beta1 ** state.step
    correction2 = 1.0 - beta2 ** state.step
    for name, grad in grads.items():
        param = params[name]
        m = state.first_moment.get(name)
        v = state.second_moment.get(name)
        if m is None:
            m = np.zeros_like(param)
            v = np.zeros_like(param)
        m = beta1 * m + (1.0 - beta1) * grad
        v = beta2 * v + (1.0 - beta2) * grad * grad
        state.first_moment[name] = m
        state.second_moment[name] = v
        param -= (lr * (m / correction1) / (np.sqrt(v / correction2) + epsilon)).astype(param.dtype)
    return state


def predict(model: ConvNet, volume: np.ndarray) -> np.ndarray:
    """Vecteur de probabilités d'un volume (H, W, C), modèle en mode inférence"""
    if volume.ndim != 3:
        raise InvalidArgumentError(f"volume (H, W, C) attendu, reçu {volume.shape}")
    return model.predict_proba(volume[None])[0]


def predict_batch(model: ConvNet, volumes: np.ndarray, batch_size: int = 16) -> np.ndarray:
    """Probabilités (N, classes) par lots"""
    if len(volumes) == 0:
        return np.zeros((0, model.n_classes))
    return np.concatenate([model.predict_proba(volumes[start:start + batch_size])
                           for start in range(0, len(volumes), batch_size)])


def evaluate_loss(model: ConvNet, volumes: np.ndarray, labels: np.ndarray,
                  batch_size: int = 16) -> Tuple[float, np.ndarray]:
    """Perte d'entropie croisée moyenne et prédictions en mode inférence"""
    probs = predict_batch(model, volumes, batch_size)
    loss = cross_entropy(probs, one_hot(labels, model.n_classes))
    return loss, probs.argmax(axis=1)


def _macro_f1(labels: np.ndarray, predictions: np.ndarray, n_classes: int) -> float:
    return metrics(confusion(labels, predictions, n_classes)).macro_f1


class Trainer:
    """Boucle d'entraînement d'un ConvNet"""

    def __init__(self, model: ConvNet, config: TrainingConfig):
        self.model = model
        self.config = config
        self.optimizer = AdamState()
        self.history: List[EpochRecord] = []
        self._rng = np.random.default_rng(config.seed)
        logger.info(f"✅ Trainer initialisé ({config.epochs} époques, lot {config.batch_size}, "
                    f"lr {config.learning_rate})")

    def _batches(self, n: int) -> List[np.ndarray]:
        order = self._rng.permutation(n)
        batches = [order[start:start + self.config.batch_size]
                   for start in range(0, n, self.config.batch_size)]
        # Un lot d'un seul échantillon est fusionné avec le précédent (batchnorm)
        if len(batches) > 1 and len(batches[-1]) == 1:
            batches[-2] = np.concatenate([batches[-2], batches.pop()])
        return batches

    def _snapshot(self) -> ModelState:
        state = self.model.state(train_mode=True)
        state.optimizer = AdamState(
            step=self.optimizer.step,
            first_moment={k: v.copy() for k, v in self.optimizer.first_moment.items()},
            second_moment={k: v.copy() for k, v in self.optimizer.second_moment.items()},
        )
        return state

    def run_epoch(self, volumes: np.ndarray, labels: np.ndarray, last_good: ModelState) -> Tuple[float, float]:
        n_classes = self.model.n_classes
        total_loss = 0.0
        correct = 0
        for batch in self._batches(len(volumes)):
            x = np.asarray(volumes[batch], dtype=self.model.dtype)
            y = one_hot(labels[batch], n_classes, dtype=np.float64)
            try:
                logits = self.model.forward(x, train=True)
            except TrainingDivergedError as e:
                raise TrainingDivergedError(str(e), last_good_state=last_good,
                                            diagnostics=e.diagnostics) from e
            probs = softmax(logits.astype(np.float64))
            loss = cross_entropy(probs, y)
            if not np.isfinite(loss):
                raise TrainingDivergedError(
                    f"perte non finie au pas {self.optimizer.step + 1}",
                    last_good_state=last_good, diagnostics={"step": self.optimizer.step + 1})
            self.model.backward(softmax_cross_entropy_grad(probs, y))
            try:
                adam_step(self.model.named_parameters(), self.model.named_grads(), self.optimizer,
                          self.config.learning_rate, self.config.beta1, self.config.beta2,
                          self.config.epsilon)
            except TrainingDivergedError as e:
                raise TrainingDivergedError(str(e), last_good_state=last_good,
                                            diagnostics=e.diagnostics) from e
            total_loss += loss * len(batch)
            correct += int((probs.argmax(axis=1) == labels[batch]).sum())
        return total_loss / len(volumes), correct / len(volumes)

    def fit(self, volumes: np.ndarray, labels: np.ndarray,
            validation: Optional[Tuple[np.ndarray, np.ndarray]] = None) -> Tuple[ModelState, List[EpochRecord]]:
        labels = np.asarray(labels, dtype=np.int64)
        if len(volumes) == 0:
            raise InvalidArgumentError("jeu d'entraînement vide")
        if len(volumes) != len(labels):
            raise InvalidArgumentError(f"{len(volumes)} volumes pour {len(labels)} étiquettes")
        if validation is not None and len(validation[0]) == 0:
            validation = None

        best_loss = np.inf
        best_state: Optional[ModelState] = None
        wait = 0
        last_good = self._snapshot()
        for epoch in range(1, self.config.epochs + 1):
            train_loss, train_accuracy = self.run_epoch(volumes, labels, last_good)
            record = EpochRecord(epoch=epoch, train_loss=train_loss, train_accuracy=train_accuracy)

            if validation is not None:
                val_volumes, val_labels = validation
                val_labels = np.asarray(val_labels, dtype=np.int64)
                try:
                    val_loss, val_predictions = evaluate_loss(self.model, val_volumes, val_labels,
                                                              self.config.batch_size)
                except TrainingDivergedError as e:
                    raise TrainingDivergedError(str(e), last_good_state=last_good,
                                                diagnostics=e.diagnostics) from e
                record.val_loss = val_loss
                record.val_accuracy = float((val_predictions == val_labels).mean())
                record.val_macro_f1 = _macro_f1(val_labels, val_predictions, self.model.n_classes)

            self.history.append(record)
            last_good = self._snapshot()
            logger.info(f"🔄 Époque {epoch}/{self.config.epochs}: perte {train_loss:.4f}, "
                        f"précision {train_accuracy:.3f}"
                        + (f", validation {record.val_loss:.4f}" if record.val_loss is not None else ""))

            if record.val_loss is None:
                continue
            if record.val_loss < best_loss:
                best_loss, best_state, wait = record.val_loss, last_good, 0
            else:
                wait += 1
                if wait >= self.config.patience:
                    logger.info(f"⏹️ Arrêt anticipé à l'époque {epoch} (patience {self.config.patience})")
                    break

        if best_state is not None:
            self.model.load_state(best_state)
            logger.info(f"✅ Meilleur modèle restauré (validation {best_loss:.4f})")
        final = self.model.state(train_mode=False)
        final.optimizer = last_good.optimizer
        return final, self.history


def train(model: ConvNet, volumes: np.ndarray, labels: Sequence[int], config: TrainingConfig,
          validation: Optional[Tuple[np.ndarray, np.ndarray]] = None) -> Tuple[ModelState, List[EpochRecord]]:
    """Entraîne le modèle en place; retourne l'état final et l'historique par époque"""
    return Trainer(model, config).fit(volumes, np.asarray(labels), validation)


def moving_average(values: Sequence[float], window: int = 5) -> np.ndarray:
    """Moyenne glissante, utilisée pour suivre la tendance de la perte"""
    values = np.asarray(values, dtype=np.float64)
    if len(values) < window:
        return values.copy()
    return np.convolve(values, np.ones(window) / window, mode="valid")
