"""
optim.py
RMSprop (T60-Vortraining) und Adam (Dereverberation, Fine-Tuning).
"""

from dataclasses import dataclass, field
from typing import Dict

import numpy as np

from autodiff import Tensor
from config import InvalidArgumentError, InvalidStateError

OPTIMIZER_KINDS = ("rmsprop", "adam")


@dataclass
class OptimizerState:
    """
    Zustand eines Optimierers.

    Attributes:
        kind: "rmsprop" oder "adam"
        lr: Lernrate
        slots: pro Parametername {"v": ..., "m": ...} in Parameterform
        step: Schrittzähler (Adam-Bias-Korrektur)
    """
    kind: str
    lr: float = 1e-3
    rho: float = 0.99
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    slots: Dict[str, Dict[str, np.ndarray]] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in OPTIMIZER_KINDS:
            raise InvalidArgumentError(f"Unknown optimizer {self.kind!r}, expected one of {OPTIMIZER_KINDS}")
        if self.lr <= 0:
            raise InvalidArgumentError(f"learning rate must be positive, got {self.lr}")

    def hyperparameters(self) -> dict:
        return {"kind": self.kind, "lr": self.lr, "rho": self.rho, "beta1": self.beta1,
                "beta2": self.beta2, "eps": self.eps, "step": self.step}

    def slot_arrays(self) -> Dict[str, np.ndarray]:
        """Flache Sicht "opt/<param>/<slot>" für den Checkpoint."""
        return {f"opt/{name}/{slot}": arr
                for name, slots in self.slots.items() for slot, arr in slots.items()}

    @classmethod
    def restore(cls, hyper: dict, arrays: Dict[str, np.ndarray]) -> "OptimizerState":
        state = cls(**hyper)
        for key, arr in arrays.items():
            if not key.startswith("opt/"):
                continue
            name, slot = key[4:].rsplit("/", 1)
            state.slots.setdefault(name, {})[slot] = np.array(arr)
        return state


def make_optimizer(kind: str, lr: float) -> OptimizerState:
    return OptimizerState(kind=kind, lr=lr)


def optimizer_step(state: OptimizerState, params: Dict[str, Tensor]) -> Dict[str, Tensor]:
    """
    Ein Optimierungsschritt in-place auf den Parametern.

    rmsprop: v ← ρv + (1−ρ)g², θ ← θ − lr·g/(√v + ε)
    adam:    m̂, v̂ bias-korrigiert, θ ← θ − lr·m̂/(√v̂ + ε)

    Raises:
        InvalidStateError: ein Parameter hat keinen Gradienten
    """
    missing = [name for name, p in params.items() if p.grad is None]
    if missing:
        raise InvalidStateError(f"optimizer step without gradient for: {', '.join(missing)}")

    state.step += 1
    for name, p in params.items():
        g = p.grad
        slots = state.slots.setdefault(name, {})
        if state.kind == "rmsprop":
            v = slots.setdefault("v", np.zeros_like(p.data))
            v *= state.rho
            v += (1.0 - state.rho) * g * g
            p.data -= (state.lr * g / (np.sqrt(v) + state.eps)).astype(p.dtype, copy=False)
        else:
            m = slots.setdefault("m", np.zeros_like(p.data))
            v = slots.setdefault("v", np.zeros_like(p.data))
            m *= state.beta1
            m += (1.0 - state.beta1) * g
            v *= state.beta2
            v += (1.0 - state.beta2) * g * g
            m_hat = m / (1.0 - state.beta1 ** state.step)
            v_hat = v / (1.0 - state.beta2 ** state.step)
            p.data -= (state.lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(p.dtype, copy=False)
    return params
