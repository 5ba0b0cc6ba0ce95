"""White-box evasion attacks: FGSM and the iterative BIM/MIM/PGD family.

All attacks work in raw pixel space on inputs in [0, 1]; any normalization
the target model applies is part of its forward graph, so gradients arrive
in pixel units and the budget means the same thing for every dataset. After
every step the perturbation is projected back into the L-infinity ball and
the pixel range.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as tz
from .losses import PROB_CLAMP
from .model import RsgMode, _BaseModel
from .tensor import Tensor

ATTACK_KINDS = ("fgsm", "bim", "mim", "pgd")
RSG_HANDLINGS = ("identity", "fresh_per_step", "fixed_draw")


@dataclass(frozen=True)
class AttackSpec:
    """Attack parameters; epsilon and step_size are in raw pixel units."""

    kind: str
    epsilon: float
    step_size: float = 2.0 / 255.0
    iterations: int = 1
    momentum_decay: float = 1.0          # mim only
    random_start: bool = False           # pgd only
    rsg_handling: str = "fresh_per_step"
    descend: bool = False                # flips to the descent sign convention

    def __post_init__(self):
        if self.kind not in ATTACK_KINDS:
            raise ValueError(f"unknown attack kind {self.kind!r}, expected one of {ATTACK_KINDS}")
        if not 0.0 < self.epsilon <= 1.0:
            raise ValueError(f"epsilon must be in (0, 1], got {self.epsilon}")
        if self.step_size <= 0:
            raise ValueError(f"step_size must be positive, got {self.step_size}")
        if self.iterations < 1:
            raise ValueError(f"iterations must be >= 1, got {self.iterations}")
        if self.rsg_handling not in RSG_HANDLINGS:
            raise ValueError(f"unknown rsg handling {self.rsg_handling!r}, "
                             f"expected one of {RSG_HANDLINGS}")

    def describe(self) -> dict:
        return {"kind": self.kind, "epsilon": self.epsilon, "step_size": self.step_size,
                "iterations": self.iterations, "momentum_decay": self.momentum_decay,
                "random_start": self.random_start, "rsg_handling": self.rsg_handling,
                "descend": self.descend}


@dataclass
class AdversarialBatch:
    """Perturbed images plus bookkeeping; the success mask flags samples the
    model now misclassifies."""

    x_adv: np.ndarray
    x_clean: np.ndarray
    spec: AttackSpec
    success: np.ndarray
    trace: list = field(default_factory=list, repr=False)

    def max_perturbation(self) -> float:
        return float(np.abs(self.x_adv - self.x_clean).max())


def _resolve_rsg(handling: str, n_experts: int, rng: np.random.Generator | None) -> RsgMode:
    if handling == "identity" or n_experts < 2:
        return RsgMode.identity()
    if rng is None:
        raise ValueError(f"rsg handling {handling!r} requires an rng")
    # Both randomized handlings draw a concrete permutation now; the caller
    # decides whether to re-resolve per step (fresh) or reuse it (fixed).
    return RsgMode.fixed(rng.permutation(n_experts))


def attack_gradient(model: _BaseModel, x: np.ndarray, labels: np.ndarray,
                    rsg_handling: str = "identity",
                    rng: np.random.Generator | None = None,
                    step_index: int = 0) -> np.ndarray:
    """Gradient of the mixture cross-entropy w.r.t. the pixel input.

    ``rsg_handling`` may also be a concrete RsgMode when the caller manages
    the permutation lifetime itself.
    """
    rsg = rsg_handling if isinstance(rsg_handling, RsgMode) else \
        _resolve_rsg(rsg_handling, model.n_experts, rng)
    xt = Tensor(np.asarray(x, dtype=np.float64), requires_grad=True)
    record = model.forward(xt, rsg=rsg)
    loss = -tz.gather_rows(record.mixture, np.asarray(labels)).clamp_min(PROB_CLAMP).log().sum()
    tz.backward(loss)
    grad = np.zeros_like(xt.data) if xt.grad is None else xt.grad
    if not np.all(np.isfinite(grad)):
        raise FloatingPointError(f"non-finite attack gradient at step {step_index}")
    return grad


def project_linf(x_adv: np.ndarray, x_ref: np.ndarray, epsilon: float) -> np.ndarray:
    """Clamp into the epsilon ball around x_ref, then into pixel range."""
    if x_adv.shape != x_ref.shape:
        raise ValueError(f"project_linf: shapes {x_adv.shape} vs {x_ref.shape}")
    ball = np.clip(x_adv, x_ref - epsilon, x_ref + epsilon)
    return np.clip(ball, 0.0, 1.0)


def _predict_success(model, x_adv, labels, spec, rng) -> np.ndarray:
    rsg = _resolve_rsg(spec.rsg_handling, model.n_experts,
                       rng if spec.rsg_handling != "identity" else None)
    return model.predict(x_adv, rsg=rsg) != np.asarray(labels)


def fgsm(model: _BaseModel, x: np.ndarray, labels: np.ndarray, spec: AttackSpec,
         rng: np.random.Generator | None = None) -> AdversarialBatch:
    """Single step of size epsilon along the gradient sign, then range clip."""
    if spec.kind != "fgsm":
        raise ValueError(f"fgsm called with spec kind {spec.kind!r}")
    x_ref = np.asarray(x, dtype=np.float64)
    if rng is None:
        rng = np.random.default_rng(0)
    rsg = RsgMode.identity() if spec.rsg_handling == "identity" else \
        _resolve_rsg(spec.rsg_handling, model.n_experts, rng)
    grad = attack_gradient(model, x_ref, labels, rsg)
    direction = -1.0 if spec.descend else 1.0
    x_adv = np.clip(x_ref + direction * spec.epsilon * np.sign(grad), 0.0, 1.0)
    success = _predict_success(model, x_adv, labels, spec,
                               rng if spec.rsg_handling != "identity" else None)
    return AdversarialBatch(x_adv, x_ref, spec, success)


def iterative_attack(model: _BaseModel, x: np.ndarray, labels: np.ndarray,
                     spec: AttackSpec, rng: np.random.Generator | None = None,
                     keep_trace: bool = False) -> AdversarialBatch:
    """BIM, MIM, or PGD depending on the spec.

    PGD may start from a uniform draw inside the ball; MIM accumulates an
    L1-normalized gradient momentum and steps along its sign. Projection to
    the ball and range runs after every iteration.
    """
    if spec.kind not in ("bim", "mim", "pgd"):
        raise ValueError(f"iterative_attack called with spec kind {spec.kind!r}")
    x_ref = np.asarray(x, dtype=np.float64)
    labels = np.asarray(labels)
    if rng is None:
        rng = np.random.default_rng(0)

    fixed_rsg = None
    if spec.rsg_handling == "fixed_draw":
        fixed_rsg = _resolve_rsg(spec.rsg_handling, model.n_experts, rng)

    x_adv = x_ref.copy()
    if spec.kind == "pgd" and spec.random_start:
        x_adv = project_linf(x_ref + rng.uniform(-spec.epsilon, spec.epsilon, x_ref.shape),
                             x_ref, spec.epsilon)

    direction = -1.0 if spec.descend else 1.0
    momentum = np.zeros_like(x_ref)
    trace = []
    for step in range(spec.iterations):
        if fixed_rsg is not None:
            rsg = fixed_rsg
        elif spec.rsg_handling == "identity":
            rsg = RsgMode.identity()
        else:
            rsg = _resolve_rsg("fresh_per_step", model.n_experts, rng)
        grad = attack_gradient(model, x_adv, labels, rsg, step_index=step)
        if spec.kind == "mim":
            norms = np.abs(grad).sum(axis=tuple(range(1, grad.ndim)), keepdims=True)
            scaled = np.divide(grad, norms, out=np.zeros_like(grad), where=norms > 0)
            momentum = spec.momentum_decay * momentum + scaled
            step_dir = np.sign(momentum)
        else:
            step_dir = np.sign(grad)
        x_adv = project_linf(x_adv + direction * spec.step_size * step_dir,
                             x_ref, spec.epsilon)
        if keep_trace:
            trace.append(x_adv.copy())

    success = _predict_success(model, x_adv, labels, spec,
                               rng if spec.rsg_handling != "identity" else None)
    return AdversarialBatch(x_adv, x_ref, spec, success, trace)


def run_attack(model: _BaseModel, x: np.ndarray, labels: np.ndarray, spec: AttackSpec,
               rng: np.random.Generator | None = None) -> AdversarialBatch:
    """Dispatch on the spec kind."""
    if spec.kind == "fgsm":
        return fgsm(model, x, labels, spec, rng)
    return iterative_attack(model, x, labels, spec, rng)
