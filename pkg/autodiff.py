"""
autodiff.py
Minimale Reverse-Mode-Autodiff für DerevKit.

- Tensor mit Graph-Verweisen und Gradienten-Puffer
- backward(): deterministische topologische Ordnung (iterativ, ohne Rekursion)
- Elementare Operationen mit Broadcasting (nur so viel wie die Netze brauchen)
- Fusionierte Operationen: conv2d, maxpool2x2, avgpool2d, batchnorm,
  softmax, cross_entropy, dropout, lstm
"""

from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from config import InvalidArgumentError, ShapeError


# ============================================================
# 1. Tensor
# ============================================================

class Tensor:
    """
    N-dimensionaler Wert im Rechengraphen.

    Attributes:
        data: numpy-Array (float64 oder float32)
        requires_grad: ob Gradienten gesammelt werden
        grad: akkumulierter Gradient (gleiche Form) oder None
    """

    # ndarray <op> Tensor landet bei den r-Operatoren des Tensors
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False, _parents: Tuple["Tensor", ...] = (),
                 _backward: Optional[Callable] = None, name: str = ""):
        self.data = np.asarray(data) if isinstance(data, np.ndarray) else np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents = _parents
        self._backward = _backward
        self.name = name

    # --- Eigenschaften ---
    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self):
        backward(self)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag}{', name=' + self.name if self.name else ''})"

    # --- Operatoren ---
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent: float):
        return pow_scalar(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(np.asarray(value, dtype=np.float64))


def parameter(data, name: str = "") -> Tensor:
    """Trainierbarer Blatt-Tensor."""
    return Tensor(np.array(data), requires_grad=True, name=name)


def _node(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    """Erzeugt einen Graph-Knoten; ohne gradientenpflichtige Eltern wird kein Graph gespeichert."""
    if any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, _parents=tuple(parents), _backward=backward_fn)
    return Tensor(data)


# ============================================================
# 2. Backward
# ============================================================

def _topological_order(root: Tensor) -> List[Tensor]:
    """Postorder-DFS ohne Rekursion; Reihenfolge hängt nur von der Graphstruktur ab."""
    order: List[Tensor] = []
    visited = set()
    stack: List[Tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in reversed(node._parents):
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))
    return order


def backward(loss: Tensor):
    """
    Reverse-Mode-Differentiation ab einem skalaren Verlust.

    Blätter mit requires_grad erhalten ihren Gradienten in .grad (akkumulierend).

    Raises:
        InvalidArgumentError: Verlust ist nicht skalar
    """
    if loss.size != 1:
        raise InvalidArgumentError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = _topological_order(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        parent_grads = node._backward(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


# ============================================================
# 3. Elementare Operationen
# ============================================================

def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Summiert einen Gradienten auf die Form eines gebroadcasteten Operanden zurück."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    return _node(out, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _node(-a.data, (a,), lambda g: (-g,))


def pow_scalar(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    return _node(a.data ** exponent, (a,), lambda g: (g * exponent * a.data ** (exponent - 1),))


def matmul(a, b) -> Tensor:
    """2-D Matrixprodukt (N, D) @ (D, O)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    return _node(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def sum_(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def _back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)
    return _node(out, (a,), _back)


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    count = a.size if axis is None else int(np.prod([a.shape[ax] for ax in np.atleast_1d(axis)]))
    return sum_(a, axis, keepdims) * (1.0 / count)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    inverse = None if axes is None else tuple(np.argsort(axes))
    return _node(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),))


def getitem(a, index) -> Tensor:
    a = as_tensor(a)

    def _back(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)
    return _node(a.data[index], (a,), _back)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    return _node(np.concatenate([t.data for t in tensors], axis=axis), tensors,
                 lambda g: tuple(np.split(g, splits, axis=axis)))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    return _node(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _node(out, (a,), lambda g: (g * 0.5 / out,))


def abs_(a) -> Tensor:
    a = as_tensor(a)
    return _node(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = _sigmoid(a.data)
    return _node(out, (a,), lambda g: (g * out * (1.0 - out),))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _node(out, (a,), lambda g: (g * (1.0 - out ** 2),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _node(np.where(mask, a.data, 0.0).astype(a.dtype, copy=False), (a,), lambda g: (g * mask,))


def leaky_relu(a, slope: float = 0.1) -> Tensor:
    a = as_tensor(a)
    factor = np.where(a.data > 0, 1.0, slope).astype(a.dtype, copy=False)
    return _node(a.data * factor, (a,), lambda g: (g * factor,))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (np.tanh(0.5 * x) + 1.0)


# ============================================================
# 4. Fusionierte Operationen
# ============================================================

def conv2d(x, w, b) -> Tensor:
    """
    2-D Faltung, Stride 1, "same" Zero-Padding.

    Args:
        x: (N, C, H, W)
        w: (O, C, k, k), k ungerade
        b: (O,)
    """
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d shape mismatch: input {x.shape}, weight {w.shape}")
    k = w.shape[2]
    if k % 2 == 0 or w.shape[3] != k:
        raise ShapeError(f"conv2d needs square odd kernels, got {w.shape}")
    pad = k // 2
    n, c, h, width = x.shape
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    windows = sliding_window_view(xp, (k, k), axis=(2, 3))
    out = np.einsum("nchwij,ocij->nohw", windows, w.data, optimize=True) + b.data[None, :, None, None]

    def _back(g):
        dw = np.einsum("nchwij,nohw->ocij", windows, g, optimize=True)
        db = g.sum(axis=(0, 2, 3))
        dxp = np.zeros_like(xp)
        for i in range(k):
            for j in range(k):
                dxp[:, :, i:i + h, j:j + width] += np.einsum("nohw,oc->nchw", g, w.data[:, :, i, j], optimize=True)
        return dxp[:, :, pad:pad + h, pad:pad + width], dw, db
    return _node(out, (x, w, b), _back)


def maxpool2x2(x) -> Tensor:
    """2×2 Max-Pooling, Stride 2, Abrunden ungerader Ränder."""
    x = as_tensor(x)
    if x.ndim != 4 or x.shape[2] < 2 or x.shape[3] < 2:
        raise ShapeError(f"maxpool2x2 needs (N, C, H>=2, W>=2), got {x.shape}")
    n, c, h, w = x.shape
    h2, w2 = h // 2, w // 2
    blocks = x.data[:, :, :2 * h2, :2 * w2].reshape(n, c, h2, 2, w2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h2, w2, 4)
    idx = np.argmax(blocks, axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]

    def _back(g):
        gb = np.zeros_like(blocks)
        np.put_along_axis(gb, idx[..., None], g[..., None], axis=-1)
        gx = np.zeros_like(x.data)
        gx[:, :, :2 * h2, :2 * w2] = gb.reshape(n, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, 2 * h2, 2 * w2)
        return (gx,)
    return _node(out, (x,), _back)


def avgpool2d(x, kernel: int, stride: int) -> Tensor:
    """k×k Average-Pooling mit Stride s, ohne Padding (Abrunden)."""
    x = as_tensor(x)
    if x.ndim != 4 or x.shape[2] < kernel or x.shape[3] < kernel:
        raise ShapeError(f"avgpool2d kernel {kernel} does not fit input {x.shape}")
    n, c, h, w = x.shape
    ho, wo = (h - kernel) // stride + 1, (w - kernel) // stride + 1
    windows = sliding_window_view(x.data, (kernel, kernel), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    out = windows.mean(axis=(-2, -1))
    scale = 1.0 / (kernel * kernel)

    def _back(g):
        gx = np.zeros_like(x.data)
        for i in range(kernel):
            for j in range(kernel):
                gx[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += g * scale
        return (gx,)
    return _node(out, (x,), _back)


def batchnorm(x, gamma, beta, running_mean: np.ndarray, running_var: np.ndarray,
              train: bool, momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """
    Batch-Normalisierung über alle Achsen außer der Kanal-Achse 1 (2-D: (N, C), 4-D: (N, C, H, W)).

    Im Trainingsmodus werden die laufenden Statistiken in-place aktualisiert
    (Varianz unverzerrt), im Eval-Modus werden sie verwendet.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if x.ndim not in (2, 4) or x.shape[1] != gamma.shape[0]:
        raise ShapeError(f"batchnorm expects (N, C[, H, W]) with C={gamma.shape[0]}, got {x.shape}")
    axes = (0,) if x.ndim == 2 else (0, 2, 3)
    bshape = (1, -1) if x.ndim == 2 else (1, -1, 1, 1)
    count = int(np.prod([x.shape[a] for a in axes]))

    if train:
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        running_mean *= (1.0 - momentum)
        running_mean += momentum * mu
        running_var *= (1.0 - momentum)
        running_var += momentum * var * (count / max(count - 1, 1))
    else:
        mu, var = running_mean, running_var

    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu.reshape(bshape)) * inv_std.reshape(bshape)
    out = gamma.data.reshape(bshape) * xhat + beta.data.reshape(bshape)

    def _back(g):
        dgamma = (g * xhat).sum(axis=axes)
        dbeta = g.sum(axis=axes)
        dxhat = g * gamma.data.reshape(bshape)
        if train:
            dx = (inv_std.reshape(bshape) / count) * (
                count * dxhat
                - dxhat.sum(axis=axes).reshape(bshape)
                - xhat * (dxhat * xhat).sum(axis=axes).reshape(bshape))
        else:
            dx = dxhat * inv_std.reshape(bshape)
        return dx, dgamma, dbeta
    return _node(out, (x, gamma, beta), _back)


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)
    return _node(out, (x,), lambda g: (out * (g - (g * out).sum(axis=axis, keepdims=True)),))


def cross_entropy(logits, targets: np.ndarray) -> Tensor:
    """Mittlere Kreuzentropie aus Logits (N, H) und Klassenindizes (N,)."""
    logits = as_tensor(logits)
    targets = np.asarray(targets, dtype=np.int64)
    if logits.ndim != 2 or targets.shape != (logits.shape[0],):
        raise ShapeError(f"cross_entropy expects logits (N, H) and targets (N,), got {logits.shape} and {targets.shape}")
    n = logits.shape[0]
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_p = shifted - log_z
    loss = -log_p[np.arange(n), targets].mean()

    def _back(g):
        grad = np.exp(log_p)
        grad[np.arange(n), targets] -= 1.0
        return (grad * (g / n),)
    return _node(np.asarray(loss, dtype=logits.dtype), (logits,), _back)


def dropout(x, rate: float, rng: Optional[np.random.Generator], train: bool) -> Tensor:
    """Inverted Dropout; im Eval-Modus (oder rate 0) die Identität."""
    x = as_tensor(x)
    if not train or rate <= 0.0:
        return x
    if rng is None:
        raise InvalidArgumentError("dropout in train mode needs a random generator")
    mask = (rng.random(x.shape) >= rate).astype(x.dtype) / (1.0 - rate)
    return _node(x.data * mask, (x,), lambda g: (g * mask,))


def lstm(x, weight, feat=None, weight_ext=None) -> Tensor:
    """
    Unidirektionale LSTM-Schicht, Batch-first.

    Gewichtsmatrix (1 + D + H, 4H) mit Bias in Zeile 0; Gate-Reihenfolge
    [Kandidat (tanh), Input, Forget, Output (sigmoid)].
    Optional ein Kontext-Vektor pro Sequenz (feat: (N, P)) mit eigener
    Gewichtsmatrix (P, 4H), der in jedem Zeitschritt addiert wird.

    Args:
        x: (N, T, D)
        weight: (1 + D + H, 4H)

    Returns:
        Tensor (N, T, H)
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 3:
        raise ShapeError(f"lstm expects input (N, T, D), got {x.shape}")
    n, steps, d = x.shape
    hidden = weight.shape[1] // 4
    if weight.shape != (1 + d + hidden, 4 * hidden):
        raise ShapeError(f"lstm weight {weight.shape} does not match input {x.shape} and hidden {hidden}")
    parents = [x, weight]
    ext = 0.0
    if feat is not None:
        feat, weight_ext = as_tensor(feat), as_tensor(weight_ext)
        if feat.shape[0] != n or weight_ext.shape != (feat.shape[1], 4 * hidden):
            raise ShapeError(f"lstm context {feat.shape} does not match weight {weight_ext.shape} / batch {n}")
        ext = feat.data @ weight_ext.data
        parents += [feat, weight_ext]

    dtype = np.result_type(x.dtype, weight.dtype)
    h3 = 3 * hidden
    xs = np.transpose(x.data, (1, 0, 2))
    hin = np.zeros((steps, n, 1 + d + hidden), dtype=dtype)
    ifog = np.zeros((steps, n, 4 * hidden), dtype=dtype)
    ifogf = np.zeros_like(ifog)
    cell = np.zeros((steps, n, hidden), dtype=dtype)
    cell_t = np.zeros_like(cell)
    hout = np.zeros_like(cell)
    for t in range(steps):
        hin[t, :, 0] = 1.0
        hin[t, :, 1:1 + d] = xs[t]
        if t > 0:
            hin[t, :, 1 + d:] = hout[t - 1]
        ifog[t] = hin[t] @ weight.data + ext
        ifogf[t, :, :hidden] = np.tanh(ifog[t, :, :hidden])
        ifogf[t, :, hidden:] = _sigmoid(ifog[t, :, hidden:])
        cell[t] = ifogf[t, :, :hidden] * ifogf[t, :, hidden:2 * hidden]
        if t > 0:
            cell[t] += ifogf[t, :, 2 * hidden:h3] * cell[t - 1]
        cell_t[t] = np.tanh(cell[t])
        hout[t] = cell_t[t] * ifogf[t, :, h3:]

    def _back(g):
        dhout = np.transpose(g, (1, 0, 2)).copy()
        difogf = np.zeros_like(ifogf)
        difog = np.zeros_like(ifog)
        dcell = np.zeros_like(cell)
        dweight = np.zeros_like(weight.data)
        dx = np.zeros((steps, n, d), dtype=dtype)
        dext = np.zeros((n, 4 * hidden), dtype=dtype)
        for t in reversed(range(steps)):
            difogf[t, :, h3:] = cell_t[t] * dhout[t]
            dcell[t] += (1.0 - cell_t[t] ** 2) * (ifogf[t, :, h3:] * dhout[t])
            if t > 0:
                difogf[t, :, 2 * hidden:h3] = dcell[t] * cell[t - 1]
                dcell[t - 1] += dcell[t] * ifogf[t, :, 2 * hidden:h3]
            difogf[t, :, :hidden] = dcell[t] * ifogf[t, :, hidden:2 * hidden]
            difogf[t, :, hidden:2 * hidden] = dcell[t] * ifogf[t, :, :hidden]
            difog[t, :, :hidden] = (1.0 - ifogf[t, :, :hidden] ** 2) * difogf[t, :, :hidden]
            y = ifogf[t, :, hidden:]
            difog[t, :, hidden:] = y * (1.0 - y) * difogf[t, :, hidden:]
            dweight += hin[t].T @ difog[t]
            dext += difog[t]
            dhin = difog[t] @ weight.data.T
            dx[t] = dhin[:, 1:1 + d]
            if t > 0:
                dhout[t - 1] += dhin[:, 1 + d:]
        grads = [np.transpose(dx, (1, 0, 2)), dweight]
        if feat is not None:
            grads += [dext @ weight_ext.data.T, feat.data.T @ dext]
        return tuple(grads)
    return _node(np.transpose(hout, (1, 0, 2)).copy(), parents, _back)
