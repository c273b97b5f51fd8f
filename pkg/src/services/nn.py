"""
Réseau convolutif minimal
Opérations avant/arrière des couches, pile de couches décrite par un ModelSpec
Tenseurs : tableaux numpy NHWC, finis à chaque étape
"""

import logging
from typing import Dict, List, Optional, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from src.errors import InvalidArgumentError, TrainingDivergedError
from src.models.schemas import Activation, LayerKind, LayerSpec, ModelSpec, ModelState

logger = logging.getLogger(__name__)

BN_EPSILON = 1e-5
BN_MOMENTUM = 0.9
CE_CLAMP = 1e-12
# Gain de l'initialisation de la couche softmax : sorties quasi uniformes à l'initialisation
SOFTMAX_INIT_GAIN = 0.1

Shape = Tuple[int, ...]


def ensure_finite(array: np.ndarray, name: str) -> np.ndarray:
    if not np.all(np.isfinite(array)):
        raise TrainingDivergedError(f"valeurs non finies dans {name}",
                                    diagnostics={"tensor": name, "shape": list(array.shape)})
    return array


# Opérations élémentaires


def _pad_same(x: np.ndarray, kh: int, kw: int) -> np.ndarray:
    ph, pw = (kh - 1) // 2, (kw - 1) // 2
    return np.pad(x, ((0, 0), (ph, ph), (pw, pw), (0, 0)))


def conv2d_forward(x: np.ndarray, kernel: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """
    Corrélation croisée 'same' : out[n,y,x,f] = b[f] + Σ K[k,l,c,f] · x_pad[n,y+k,x+l,c]
    x : (N, H, W, C), kernel : (kh, kw, C, F), bias : (F,)
    """
    if x.ndim != 4 or kernel.ndim != 4:
        raise InvalidArgumentError(f"formes invalides: entrée {x.shape}, noyau {kernel.shape}")
    kh, kw, channels, filters = kernel.shape
    if x.shape[3] != channels:
        raise InvalidArgumentError(f"canaux incompatibles: entrée {x.shape[3]}, noyau {channels}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise InvalidArgumentError(f"noyau {kh}×{kw}: taille impaire requise")
    if bias.shape != (filters,):
        raise InvalidArgumentError(f"biais {bias.shape}, attendu ({filters},)")

    windows = sliding_window_view(_pad_same(x, kh, kw), (kh, kw), axis=(1, 2))
    return np.tensordot(windows, kernel, axes=([4, 5, 3], [0, 1, 2])) + bias


def conv2d_backward(grad_out: np.ndarray, x: np.ndarray,
                    kernel: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients (entrée, noyau, biais) de conv2d_forward"""
    kh, kw, channels, filters = kernel.shape
    if grad_out.shape != x.shape[:3] + (filters,):
        raise InvalidArgumentError(f"gradient {grad_out.shape} incompatible avec l'entrée {x.shape}")

    windows = sliding_window_view(_pad_same(x, kh, kw), (kh, kw), axis=(1, 2))
    grad_kernel = np.tensordot(windows, grad_out, axes=([0, 1, 2], [0, 1, 2])).transpose(1, 2, 0, 3)
    grad_bias = grad_out.sum(axis=(0, 1, 2))
    # Corrélation du gradient avec le noyau retourné, canaux échangés
    flipped = np.ascontiguousarray(kernel[::-1, ::-1].transpose(0, 1, 3, 2))
    grad_input = conv2d_forward(grad_out, flipped, np.zeros(channels, dtype=grad_out.dtype))
    return grad_input, grad_kernel, grad_bias


def maxpool_forward(x: np.ndarray, pool: int = 3, stride: int = 3) -> Tuple[np.ndarray, np.ndarray]:
    """Max par fenêtre pool×pool, fenêtres partielles ignorées; indices plats des maxima"""
    n, h, w, c = x.shape
    ho = (h - pool) // stride + 1 if h >= pool else 0
    wo = (w - pool) // stride + 1 if w >= pool else 0
    if ho == 0 or wo == 0:
        return np.zeros((n, ho, wo, c), dtype=x.dtype), np.zeros((n, ho, wo, c), dtype=np.int64)

    windows = sliding_window_view(x, (pool, pool), axis=(1, 2))[:, ::stride, ::stride][:, :ho, :wo]
    flat = windows.reshape(n, ho, wo, c, pool * pool)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    ki, kj = np.divmod(arg, pool)
    rows = np.arange(ho)[None, :, None, None] * stride + ki
    cols = np.arange(wo)[None, None, :, None] * stride + kj
    batch = np.arange(n)[:, None, None, None]
    channel = np.arange(c)[None, None, None, :]
    indices = ((batch * h + rows) * w + cols) * c + channel
    return out, indices


def maxpool_backward(grad_out: np.ndarray, indices: np.ndarray, input_shape: Shape) -> np.ndarray:
    """Le gradient ne remonte qu'aux positions des maxima"""
    size = int(np.prod(input_shape))
    grad = np.bincount(indices.ravel(), weights=grad_out.ravel(), minlength=size)
    return grad.reshape(input_shape).astype(grad_out.dtype)


def batchnorm_forward(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray,
                      running_mean: np.ndarray, running_var: np.ndarray, train: bool,
                      momentum: float = BN_MOMENTUM, eps: float = BN_EPSILON):
    """
    Normalisation par canal (dernier axe)
    Retourne (sortie, cache, nouvelle moyenne courante, nouvelle variance courante)
    """
    axes = tuple(range(x.ndim - 1))
    if train:
        if x.shape[0] < 2:
            raise InvalidArgumentError("batchnorm en entraînement exige un lot d'au moins 2")
        mean = x.mean(axis=axes)
        var = x.var(axis=axes)
        running_mean = momentum * running_mean + (1 - momentum) * mean
        running_var = momentum * running_var + (1 - momentum) * var
    else:
        mean, var = running_mean, running_var
    inv_std = 1.0 / np.sqrt(var + eps)
    x_hat = (x - mean) * inv_std
    return gamma * x_hat + beta, (x_hat, inv_std, gamma, train), running_mean, running_var


def batchnorm_backward(grad_out: np.ndarray, cache) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients (entrée, gamma, beta)"""
    x_hat, inv_std, gamma, train = cache
    axes = tuple(range(grad_out.ndim - 1))
    grad_gamma = (grad_out * x_hat).sum(axis=axes)
    grad_beta = grad_out.sum(axis=axes)
    grad_x_hat = grad_out * gamma
    if not train:
        return grad_x_hat * inv_std, grad_gamma, grad_beta
    m = grad_out.size // grad_out.shape[-1]
    grad_input = (inv_std / m) * (m * grad_x_hat - grad_x_hat.sum(axis=axes)
                                  - x_hat * (grad_x_hat * x_hat).sum(axis=axes))
    return grad_input, grad_gamma, grad_beta


def dense_forward(x: np.ndarray, weights: np.ndarray, bias: np.ndarray) -> np.ndarray:
    if x.ndim != 2 or x.shape[1] != weights.shape[0]:
        raise InvalidArgumentError(f"entrée {x.shape} incompatible avec les poids {weights.shape}")
    return x @ weights + bias


def dense_backward(grad_out: np.ndarray, x: np.ndarray,
                   weights: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    return grad_out @ weights.T, x.T @ grad_out, grad_out.sum(axis=0)


def relu(z: np.ndarray) -> np.ndarray:
    return np.maximum(z, 0)


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = x - x.max(axis=axis, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=axis, keepdims=True)


def cross_entropy(probs: np.ndarray, onehot: np.ndarray) -> float:
    """−Σ y · ln(p), moyenne sur le lot, logarithme borné à 1e-12"""
    return float(-(onehot * np.log(np.maximum(probs, CE_CLAMP))).sum() / probs.shape[0])


def softmax_cross_entropy_grad(probs: np.ndarray, onehot: np.ndarray) -> np.ndarray:
    """Gradient fusionné softmax + entropie croisée par rapport aux logits"""
    return (probs - onehot) / probs.shape[0]


def one_hot(labels: np.ndarray, n_classes: int, dtype=np.float64) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise InvalidArgumentError(f"étiquettes hors de [0, {n_classes})")
    return np.eye(n_classes, dtype=dtype)[labels]


# Couches


class Layer:
    """Couche avec paramètres nommés et gradients associés"""

    kind: LayerKind

    def __init__(self):
        self.params: Dict[str, np.ndarray] = {}
        self.grads: Dict[str, np.ndarray] = {}
        self.buffers: Dict[str, np.ndarray] = {}

    def forward(self, x: np.ndarray, train: bool) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> np.ndarray:
        raise NotImplementedError


def _he_uniform(rng: np.random.Generator, shape: Shape, fan_in: int, dtype, gain: float = 1.0):
    limit = gain * np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


class Conv2D(Layer):
    kind = LayerKind.CONV2D

    def __init__(self, in_channels: int, filters: int, kernel: int, rng: np.random.Generator,
                 dtype=np.float32, activation: Activation = Activation.RELU):
        super().__init__()
        self.activation = activation
        self.params["kernel"] = _he_uniform(rng, (kernel, kernel, in_channels, filters),
                                            kernel * kernel * in_channels, dtype)
        self.params["bias"] = np.zeros(filters, dtype=dtype)
        self._x: Optional[np.ndarray] = None
        self._mask: Optional[np.ndarray] = None

    def forward(self, x, train):
        z = conv2d_forward(x, self.params["kernel"], self.params["bias"])
        self._x = x
        if self.activation == Activation.RELU:
            self._mask = z > 0
            return z * self._mask
        return z

    def backward(self, grad):
        if self._mask is not None and self.activation == Activation.RELU:
            grad = grad * self._mask
        grad_input, self.grads["kernel"], self.grads["bias"] = conv2d_backward(
            grad, self._x, self.params["kernel"])
        return grad_input


class MaxPool2D(Layer):
    kind = LayerKind.MAXPOOL

    def __init__(self, pool: int, stride: int):
        super().__init__()
        self.pool, self.stride = pool, stride
        self._indices: Optional[np.ndarray] = None
        self._shape: Shape = ()

    def forward(self, x, train):
        out, self._indices = maxpool_forward(x, self.pool, self.stride)
        self._shape = x.shape
        return out

    def backward(self, grad):
        return maxpool_backward(grad, self._indices, self._shape)


class BatchNorm(Layer):
    kind = LayerKind.BATCHNORM

    def __init__(self, channels: int, dtype=np.float32):
        super().__init__()
        self.params["gamma"] = np.ones(channels, dtype=dtype)
        self.params["beta"] = np.zeros(channels, dtype=dtype)
        self.buffers["running_mean"] = np.zeros(channels, dtype=dtype)
        self.buffers["running_var"] = np.ones(channels, dtype=dtype)
        self._cache = None

    def forward(self, x, train):
        out, self._cache, mean, var = batchnorm_forward(
            x, self.params["gamma"], self.params["beta"],
            self.buffers["running_mean"], self.buffers["running_var"], train)
        self.buffers["running_mean"] = mean.astype(x.dtype)
        self.buffers["running_var"] = var.astype(x.dtype)
        return out.astype(x.dtype)

    def backward(self, grad):
        grad_input, self.grads["gamma"], self.grads["beta"] = batchnorm_backward(grad, self._cache)
        return grad_input


class Flatten(Layer):
    kind = LayerKind.FLATTEN

    def __init__(self):
        super().__init__()
        self._shape: Shape = ()

    def forward(self, x, train):
        self._shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, grad):
        return grad.reshape(self._shape)


class Dense(Layer):
    """Couche dense; la tête softmax renvoie des logits, la softmax est appliquée par la perte"""

    kind = LayerKind.DENSE

    def __init__(self, in_features: int, units: int, rng: np.random.Generator,
                 dtype=np.float32, activation: Activation = Activation.RELU):
        super().__init__()
        self.activation = activation
        if activation == Activation.SOFTMAX:
            # LeCun uniforme atténué
            weights = _he_uniform(rng, (in_features, units), 2 * in_features, dtype, SOFTMAX_INIT_GAIN)
        else:
            weights = _he_uniform(rng, (in_features, units), in_features, dtype)
        self.params["weights"] = weights
        self.params["bias"] = np.zeros(units, dtype=dtype)
        self._x: Optional[np.ndarray] = None
        self._mask: Optional[np.ndarray] = None

    def forward(self, x, train):
        self._x = x
        z = dense_forward(x, self.params["weights"], self.params["bias"])
        if self.activation == Activation.RELU:
            self._mask = z > 0
            return z * self._mask
        return z

    def backward(self, grad):
        if self.activation == Activation.RELU:
            grad = grad * self._mask
        grad_input, self.grads["weights"], self.grads["bias"] = dense_backward(
            grad, self._x, self.params["weights"])
        return grad_input


# Modèle


def infer_shapes(spec: ModelSpec, input_shape: Shape) -> List[Shape]:
    """Forme de sortie de chaque couche (sans l'axe du lot)"""
    if len(input_shape) != 3:
        raise InvalidArgumentError(f"entrée (H, W, C) attendue, reçu {input_shape}")
    shapes: List[Shape] = []
    current: Shape = tuple(int(d) for d in input_shape)
    for index, layer in enumerate(spec.layers):
        if layer.kind in (LayerKind.CONV2D, LayerKind.MAXPOOL) and len(current) != 3:
            raise InvalidArgumentError(f"couche {index} ({layer.kind.value}) après aplatissement")
        if layer.kind == LayerKind.CONV2D:
            current = (current[0], current[1], layer.filters)
        elif layer.kind == LayerKind.MAXPOOL:
            h = (current[0] - layer.pool) // layer.stride + 1 if current[0] >= layer.pool else 0
            w = (current[1] - layer.pool) // layer.stride + 1 if current[1] >= layer.pool else 0
            if h < 1 or w < 1:
                raise InvalidArgumentError(
                    f"couche {index}: max pooling {layer.pool}×{layer.pool} sur une carte {current[:2]}")
            current = (h, w, current[2])
        elif layer.kind == LayerKind.FLATTEN:
            current = (int(np.prod(current)),)
        elif layer.kind == LayerKind.DENSE:
            if len(current) != 1:
                raise InvalidArgumentError(f"couche {index}: dense sans aplatissement préalable")
            current = (layer.units,)
        shapes.append(current)
    if spec.layers and spec.layers[-1].kind != LayerKind.DENSE:
        raise InvalidArgumentError("la dernière couche doit être dense")
    return shapes


def count_parameters(spec: ModelSpec, input_shape: Shape) -> int:
    """Nombre de paramètres entraînables, constant pour une spec et une entrée données"""
    total = 0
    current: Shape = tuple(input_shape)
    for layer, out_shape in zip(spec.layers, infer_shapes(spec, input_shape)):
        if layer.kind == LayerKind.CONV2D:
            total += layer.kernel * layer.kernel * current[-1] * layer.filters + layer.filters
        elif layer.kind == LayerKind.BATCHNORM:
            total += 2 * current[-1]
        elif layer.kind == LayerKind.DENSE:
            total += current[0] * layer.units + layer.units
        current = out_shape
    return total


class ConvNet:
    """Pile de couches construite depuis un ModelSpec"""

    def __init__(self, spec: ModelSpec, input_shape: Shape, seed: int = 0, dtype: str = "float32"):
        self.spec = spec
        self.input_shape: Shape = tuple(int(d) for d in input_shape)
        self.dtype = np.dtype(dtype)
        self.shapes = infer_shapes(spec, self.input_shape)
        rng = np.random.default_rng(seed)

        self.layers: List[Layer] = []
        current = self.input_shape
        for layer_spec, out_shape in zip(spec.layers, self.shapes):
            self.layers.append(self._build(layer_spec, current, rng))
            current = out_shape

    def _build(self, layer: LayerSpec, in_shape: Shape, rng: np.random.Generator) -> Layer:
        if layer.kind == LayerKind.CONV2D:
            return Conv2D(in_shape[-1], layer.filters, layer.kernel, rng, self.dtype, layer.activation)
        if layer.kind == LayerKind.MAXPOOL:
            return MaxPool2D(layer.pool, layer.stride)
        if layer.kind == LayerKind.BATCHNORM:
            return BatchNorm(in_shape[-1], self.dtype)
        if layer.kind == LayerKind.FLATTEN:
            return Flatten()
        return Dense(in_shape[0], layer.units, rng, self.dtype, layer.activation)

    @property
    def n_classes(self) -> int:
        return self.shapes[-1][0]

    def _name(self, index: int, key: str) -> str:
        return f"{index:02d}_{self.layers[index].kind.value}.{key}"

    def named_parameters(self) -> Dict[str, np.ndarray]:
        return {self._name(i, k): v for i, layer in enumerate(self.layers) for k, v in layer.params.items()}

    def named_grads(self) -> Dict[str, np.ndarray]:
        return {self._name(i, k): v for i, layer in enumerate(self.layers) for k, v in layer.grads.items()}

    def named_buffers(self) -> Dict[str, np.ndarray]:
        return {self._name(i, k): v for i, layer in enumerate(self.layers) for k, v in layer.buffers.items()}

    def set_tensor(self, name: str, value: np.ndarray) -> None:
        """Remplace un paramètre ou un tampon par son nom"""
        prefix, key = name.split(".", 1)
        layer = self.layers[int(prefix.split("_", 1)[0])]
        store = layer.params if key in layer.params else layer.buffers
        if key not in store:
            raise InvalidArgumentError(f"tenseur inconnu: {name}")
        if store[key].shape != value.shape:
            raise InvalidArgumentError(f"{name}: forme {value.shape}, attendu {store[key].shape}")
        store[key] = np.asarray(value, dtype=self.dtype).copy()

    def state(self, train_mode: bool = False) -> ModelState:
        """Copie des paramètres et statistiques courantes"""
        return ModelState(
            parameters={k: v.copy() for k, v in self.named_parameters().items()},
            buffers={k: v.copy() for k, v in self.named_buffers().items()},
            train_mode=train_mode,
        )

    def load_state(self, state: ModelState) -> None:
        for name, value in {**state.parameters, **state.buffers}.items():
            self.set_tensor(name, value)

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        """Logits (N, classes)"""
        if x.ndim != 4 or tuple(x.shape[1:]) != self.input_shape:
            raise InvalidArgumentError(f"entrée {x.shape[1:]}, attendu {self.input_shape}")
        out = x.astype(self.dtype, copy=False)
        for layer in self.layers:
            out = layer.forward(out, train)
        return ensure_finite(out, "logits")

    def backward(self, grad_logits: np.ndarray) -> np.ndarray:
        grad = grad_logits.astype(self.dtype, copy=False)
        for layer in reversed(self.layers):
            grad = layer.backward(grad)
        return grad

    def predict_proba(self, x: np.ndarray) -> np.ndarray:
        return softmax(self.forward(x, train=False).astype(np.float64))

    def summary(self) -> List[str]:
        lines = [f"entrée {self.input_shape}"]
        for layer, shape in zip(self.spec.layers, self.shapes):
            lines.append(f"{layer.kind.value:<10} -> {shape}")
        lines.append(f"paramètres: {count_parameters(self.spec, self.input_shape)}")
        return lines


def default_model(input_shape: Shape = (430, 128, 3), n_classes: int = 5,
                  seed: int = 0, dtype: str = "float32") -> ConvNet:
    return ConvNet(ModelSpec.default(n_classes), input_shape, seed, dtype)
