"""
layers.py
Schicht-Bibliothek für die beiden Netze (T60-Schätzer und LSTM-Dereverberator).

- LayerSpec: Art + Hyperparameter, validiert pro Art
- Layer-Klassen mit benannten Parametern und Puffern (BatchNorm-Statistiken)
- Sequential: geordnete Schichtfolge mit Präfix-Namen (für Checkpoints)
- forward() / grad_check() als freie Funktionen
"""

from dataclasses import dataclass, field
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

import autodiff as ad
from autodiff import Tensor
from config import InvalidArgumentError, ShapeError


LAYER_KINDS = (
    "conv2d", "batchnorm2d", "batchnorm1d", "maxpool2x2", "avgpool",
    "fully_connected", "lstm", "dropout", "relu", "leaky_relu", "softmax",
)

# Pflicht-Hyperparameter pro Art (Defaults werden ergänzt)
_REQUIRED = {
    "conv2d": ("in_channels", "out_channels"),
    "batchnorm2d": ("channels",),
    "batchnorm1d": ("channels",),
    "maxpool2x2": (),
    "avgpool": ("kernel", "stride"),
    "fully_connected": ("in_features", "out_features"),
    "lstm": ("input_size", "hidden"),
    "dropout": ("rate",),
    "relu": (),
    "leaky_relu": (),
    "softmax": (),
}

_DEFAULTS = {
    "conv2d": {"kernel": 3, "padding": "same"},
    "batchnorm2d": {"momentum": 0.1, "eps": 1e-5},
    "batchnorm1d": {"momentum": 0.1, "eps": 1e-5},
    "leaky_relu": {"slope": 0.1},
}

MODES = ("train", "eval")


# ============================================================
# 1. LayerSpec
# ============================================================

@dataclass
class LayerSpec:
    """
    Beschreibung einer Schicht.

    Attributes:
        kind: eine der LAYER_KINDS
        params: Hyperparameter (channels, kernel, hidden, slope, rate, ...)
    """
    kind: str
    params: Dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise InvalidArgumentError(f"Unknown layer kind {self.kind!r}, expected one of {LAYER_KINDS}")
        self.params = {**_DEFAULTS.get(self.kind, {}), **self.params}
        self.validate()

    def validate(self):
        p = self.params
        for key in _REQUIRED[self.kind]:
            if key not in p:
                raise InvalidArgumentError(f"{self.kind} needs hyperparameter {key!r}")
        for key in ("in_channels", "out_channels", "channels", "in_features", "out_features",
                    "input_size", "hidden", "kernel", "stride"):
            if key in p and (not isinstance(p[key], (int, np.integer)) or p[key] <= 0):
                raise InvalidArgumentError(f"{self.kind}.{key} must be a positive integer, got {p[key]!r}")
        if self.kind == "conv2d":
            if p["kernel"] % 2 == 0:
                raise InvalidArgumentError(f"conv2d kernel must be odd for 'same' padding, got {p['kernel']}")
            if p["padding"] != "same":
                raise InvalidArgumentError(f"conv2d supports only 'same' padding, got {p['padding']!r}")
        if self.kind == "dropout" and not 0.0 <= p["rate"] < 1.0:
            raise InvalidArgumentError(f"dropout rate must be in [0, 1), got {p['rate']}")
        if self.kind == "leaky_relu" and not 0.0 <= p["slope"] < 1.0:
            raise InvalidArgumentError(f"leaky_relu slope must be in [0, 1), got {p['slope']}")

    def to_dict(self) -> dict:
        return {"kind": self.kind, "params": dict(self.params)}

    @classmethod
    def from_dict(cls, data: dict) -> "LayerSpec":
        return cls(data["kind"], dict(data.get("params", {})))


# ============================================================
# 2. Schichten
# ============================================================

class Layer:
    """Basisklasse: Parameter (trainierbar) und Puffer (nicht trainierbar) nach Namen."""

    def __init__(self, spec: LayerSpec):
        self.spec = spec
        self.params: Dict[str, Tensor] = {}
        self.buffers: Dict[str, np.ndarray] = {}

    def __call__(self, x, train: bool = False, rng: Optional[np.random.Generator] = None, **kwargs) -> Tensor:
        raise NotImplementedError

    def __repr__(self):
        return f"{type(self).__name__}({self.spec.params})"


def _uniform(rng: np.random.Generator, shape, bound: float, dtype) -> np.ndarray:
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Conv2d(Layer):
    def __init__(self, spec, rng, dtype=np.float64):
        super().__init__(spec)
        p = spec.params
        fan_in = p["in_channels"] * p["kernel"] ** 2
        bound = 1.0 / np.sqrt(fan_in)
        shape = (p["out_channels"], p["in_channels"], p["kernel"], p["kernel"])
        self.params["weight"] = ad.parameter(_uniform(rng, shape, bound, dtype), "weight")
        self.params["bias"] = ad.parameter(_uniform(rng, (p["out_channels"],), bound, dtype), "bias")

    def __call__(self, x, train=False, rng=None, **kwargs):
        x = ad.as_tensor(x)
        if x.ndim != 4 or x.shape[1] != self.spec.params["in_channels"]:
            raise ShapeError(f"conv2d expects (N, {self.spec.params['in_channels']}, H, W), got {x.shape}")
        return ad.conv2d(x, self.params["weight"], self.params["bias"])


class BatchNorm(Layer):
    """BatchNorm über (N, C) oder (N, C, H, W); laufende Statistiken als Puffer."""

    def __init__(self, spec, rng=None, dtype=np.float64):
        super().__init__(spec)
        c = spec.params["channels"]
        self.params["gamma"] = ad.parameter(np.ones(c, dtype=dtype), "gamma")
        self.params["beta"] = ad.parameter(np.zeros(c, dtype=dtype), "beta")
        self.buffers["running_mean"] = np.zeros(c, dtype=dtype)
        self.buffers["running_var"] = np.ones(c, dtype=dtype)

    def __call__(self, x, train=False, rng=None, **kwargs):
        x = ad.as_tensor(x)
        expected = 4 if self.spec.kind == "batchnorm2d" else 2
        if x.ndim != expected:
            raise ShapeError(f"{self.spec.kind} expects a {expected}-d input, got {x.shape}")
        return ad.batchnorm(x, self.params["gamma"], self.params["beta"],
                            self.buffers["running_mean"], self.buffers["running_var"], train,
                            momentum=self.spec.params["momentum"], eps=self.spec.params["eps"])


class MaxPool2x2(Layer):
    def __call__(self, x, train=False, rng=None, **kwargs):
        return ad.maxpool2x2(x)


class AvgPool(Layer):
    def __call__(self, x, train=False, rng=None, **kwargs):
        return ad.avgpool2d(x, self.spec.params["kernel"], self.spec.params["stride"])


class Dense(Layer):
    """Voll verbundene Schicht y = x W + b."""

    def __init__(self, spec, rng, dtype=np.float64):
        super().__init__(spec)
        n_in, n_out = spec.params["in_features"], spec.params["out_features"]
        bound = 1.0 / np.sqrt(n_in)
        self.params["weight"] = ad.parameter(_uniform(rng, (n_in, n_out), bound, dtype), "weight")
        self.params["bias"] = ad.parameter(_uniform(rng, (n_out,), bound, dtype), "bias")

    def __call__(self, x, train=False, rng=None, **kwargs):
        x = ad.as_tensor(x)
        if x.ndim != 2 or x.shape[1] != self.spec.params["in_features"]:
            raise ShapeError(
                f"fully_connected expects (N, {self.spec.params['in_features']}), got {x.shape}")
        return ad.matmul(x, self.params["weight"]) + self.params["bias"]


class LSTM(Layer):
    """
    LSTM-Schicht (N, T, D) → (N, T, H).
    Optionaler Kontext-Eingang (N, P) über eine separate Matrix "weight_ext",
    die erst durch extend_context() angelegt wird.
    """

    def __init__(self, spec, rng, dtype=np.float64):
        super().__init__(spec)
        d, h = spec.params["input_size"], spec.params["hidden"]
        weight = _uniform(rng, (1 + d + h, 4 * h), 1.0 / np.sqrt(h), dtype)
        weight[0] = 0.0
        self.params["weight"] = ad.parameter(weight, "weight")

    @property
    def context_dim(self) -> int:
        ext = self.params.get("weight_ext")
        return 0 if ext is None else ext.shape[0]

    def extend_context(self, dim: int):
        """Legt null-initialisierte Kontext-Gewichte an (Ausgabe bleibt unverändert)."""
        if dim <= 0:
            raise InvalidArgumentError(f"context dimension must be positive, got {dim}")
        h = self.spec.params["hidden"]
        dtype = self.params["weight"].dtype
        self.params["weight_ext"] = ad.parameter(np.zeros((dim, 4 * h), dtype=dtype), "weight_ext")

    def __call__(self, x, train=False, rng=None, context=None, **kwargs):
        x = ad.as_tensor(x)
        if x.ndim != 3 or x.shape[2] != self.spec.params["input_size"]:
            raise ShapeError(f"lstm expects (N, T, {self.spec.params['input_size']}), got {x.shape}")
        if context is None:
            return ad.lstm(x, self.params["weight"])
        if self.context_dim == 0:
            raise ShapeError(f"lstm got context {ad.as_tensor(context).shape} but has no context weights")
        return ad.lstm(x, self.params["weight"], context, self.params["weight_ext"])


class Dropout(Layer):
    def __call__(self, x, train=False, rng=None, **kwargs):
        return ad.dropout(x, self.spec.params["rate"], rng, train)


class Activation(Layer):
    def __call__(self, x, train=False, rng=None, **kwargs):
        kind = self.spec.kind
        if kind == "relu":
            return ad.relu(x)
        if kind == "leaky_relu":
            return ad.leaky_relu(x, self.spec.params["slope"])
        return ad.softmax(x, axis=-1)


_LAYER_CLASSES = {
    "conv2d": Conv2d,
    "batchnorm2d": BatchNorm,
    "batchnorm1d": BatchNorm,
    "maxpool2x2": MaxPool2x2,
    "avgpool": AvgPool,
    "fully_connected": Dense,
    "lstm": LSTM,
    "dropout": Dropout,
    "relu": Activation,
    "leaky_relu": Activation,
    "softmax": Activation,
}


def build_layer(spec: LayerSpec, rng: Optional[np.random.Generator] = None, dtype=np.float64) -> Layer:
    """Erzeugt eine initialisierte Schicht; rng ist für Schichten mit Gewichten Pflicht."""
    cls = _LAYER_CLASSES[spec.kind]
    if cls in (Conv2d, Dense, LSTM):
        if rng is None:
            raise InvalidArgumentError(f"{spec.kind} initialization needs a random generator")
        return cls(spec, rng, dtype)
    if cls is BatchNorm:
        return cls(spec, dtype=dtype)
    return cls(spec)


def forward(layer: Layer, x, mode: str = "eval", rng: Optional[np.random.Generator] = None, **kwargs) -> Tensor:
    """
    Führt eine Schicht im Modus "train" oder "eval" aus.

    Raises:
        InvalidArgumentError: unbekannter Modus
        ShapeError: Eingabe passt nicht zur Schicht
    """
    if mode not in MODES:
        raise InvalidArgumentError(f"mode must be one of {MODES}, got {mode!r}")
    return layer(x, train=(mode == "train"), rng=rng, **kwargs)


# ============================================================
# 3. Sequential
# ============================================================

class Sequential:
    """Geordnete Schichtfolge; Parameter heißen "<index>.<name>"."""

    def __init__(self, layers: Sequence[Layer]):
        self.layers: List[Layer] = list(layers)

    @classmethod
    def from_specs(cls, specs: Sequence[LayerSpec], rng, dtype=np.float64) -> "Sequential":
        return cls([build_layer(s, rng, dtype) for s in specs])

    @property
    def specs(self) -> List[LayerSpec]:
        return [layer.spec for layer in self.layers]

    def __call__(self, x, train=False, rng=None) -> Tensor:
        for layer in self.layers:
            x = layer(x, train=train, rng=rng)
        return x

    def __len__(self):
        return len(self.layers)

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        for i, layer in enumerate(self.layers):
            for name, tensor in layer.params.items():
                yield f"{prefix}{i}.{name}", tensor

    def named_buffers(self, prefix: str = "") -> Iterator[Tuple[str, np.ndarray]]:
        for i, layer in enumerate(self.layers):
            for name, array in layer.buffers.items():
                yield f"{prefix}{i}.{name}", array


def zero_grads(params: Dict[str, Tensor]):
    for tensor in params.values():
        tensor.zero_grad()


# ============================================================
# 4. Gradienten-Check
# ============================================================

GRAD_CHECK_EPS = 1e-5


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Normweiser relativer Fehler max|a - n| / max(max|a|, max|n|)."""
    scale = max(np.max(np.abs(analytic)), np.max(np.abs(numeric)), 1e-12)
    return float(np.max(np.abs(analytic - numeric)) / scale)


def check_gradients(loss_fn: Callable[[], Tensor], tensors: Dict[str, Tensor],
                    eps: float = GRAD_CHECK_EPS) -> Dict[str, float]:
    """
    Vergleicht backward() mit zentralen Differenzen für jedes Element jedes Tensors.

    loss_fn muss bei jedem Aufruf denselben Graphen neu aufbauen (z.B. Dropout
    mit frisch geseedetem Generator).

    Returns:
        {Name: relativer Fehler}
    """
    for tensor in tensors.values():
        tensor.data = np.ascontiguousarray(tensor.data)
        tensor.requires_grad = True
        tensor.zero_grad()
    ad.backward(loss_fn())
    errors = {}
    for name, tensor in tensors.items():
        analytic = np.zeros_like(tensor.data) if tensor.grad is None else tensor.grad.copy()
        numeric = np.zeros_like(tensor.data)
        flat = tensor.data.reshape(-1)
        for i in range(flat.size):
            original = flat[i]
            flat[i] = original + eps
            plus = float(loss_fn().data)
            flat[i] = original - eps
            minus = float(loss_fn().data)
            flat[i] = original
            numeric.reshape(-1)[i] = (plus - minus) / (2.0 * eps)
        errors[name] = relative_error(analytic, numeric)
    return errors


def _away_from_zero(values: np.ndarray) -> np.ndarray:
    return np.sign(values) * (0.1 + np.abs(values))


def grad_check(spec: LayerSpec, input_shape: Tuple[int, ...], rng_seed: int = 0,
               mode: str = "train") -> float:
    """
    Finite-Differenzen-Check einer einzelnen Schicht in doppelter Genauigkeit.

    Verlust = Σ out · R mit festem Zufallsgewicht R; Eingaben werden von 0
    weggeschoben, damit ReLU-Knicke nicht getroffen werden.

    Returns:
        maximaler relativer Fehler über Eingabe und alle Parameter
    """
    rng = np.random.default_rng(rng_seed)
    layer = build_layer(spec, rng, np.float64)
    x = Tensor(_away_from_zero(rng.standard_normal(input_shape)), requires_grad=True)
    if spec.kind == "maxpool2x2":
        # Abstand zwischen Werten, damit argmax unter ±eps stabil bleibt
        x.data = rng.permutation(np.arange(x.size, dtype=np.float64)).reshape(input_shape) * 0.01 + 0.1
    out_shape = forward(layer, x, mode, rng=np.random.default_rng(rng_seed + 1)).shape
    weights = rng.standard_normal(out_shape)
    buffers = {k: v.copy() for k, v in layer.buffers.items()}

    def loss_fn():
        # BatchNorm-Puffer vor jedem Durchlauf zurücksetzen
        for key, value in buffers.items():
            layer.buffers[key][...] = value
        out = forward(layer, x, mode, rng=np.random.default_rng(rng_seed + 1))
        return (out * weights).sum()

    tensors = {"input": x, **layer.params}
    return max(check_gradients(loss_fn, tensors).values())
