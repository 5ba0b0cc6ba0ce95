"""Training loops, SGD, evaluation, and the heatmap-based robustness
metrics.

Standard mode trains on clean batches; adversarial mode first runs the
configured inner attack against the frozen current parameters and then
optimizes the full objective on the perturbed batch. Heatmap diagnostics
(the diversity and stability terms) are computed and logged every batch
even when their coefficients are zero, so ablation runs stay comparable.
"""

from __future__ import annotations

import os
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import tensor as tz
from .attacks import AttackSpec, run_attack
from .data import Dataset, augment
from .gradcam import expert_heatmaps, heatmaps_for_batch
from .losses import (LossBreakdown, cross_entropy_loss, mass_centers,
                     mutual_info_loss, position_stability_loss, total_loss)
from .model import RsgMode, _BaseModel
from .tensor import Tensor

DEFAULT_INNER_ATTACK = AttackSpec(kind="pgd", epsilon=8 / 255, step_size=2 / 255,
                                  iterations=10, random_start=True,
                                  rsg_handling="identity")


def worker_count() -> int:
    """Worker cap for parallel sections; IMMUNITY_THREADS overrides the
    machine core count."""
    raw = os.environ.get("IMMUNITY_THREADS")
    if raw is None:
        return os.cpu_count() or 1
    try:
        value = int(raw)
    except ValueError:
        raise ValueError(f"IMMUNITY_THREADS must be an integer, got {raw!r}") from None
    if value < 1:
        raise ValueError(f"IMMUNITY_THREADS must be >= 1, got {value}")
    return value


@dataclass(frozen=True)
class TrainConfig:
    # Desk-scale defaults: the position-stability term is quartic in center
    # coordinates and diverges under a hotter optimizer at small image sizes.
    learning_rate: float = 0.001
    weight_decay: float = 5e-4
    momentum: float = 0.5
    epochs: int = 20
    batch_size: int = 32
    alpha: float = 1.0
    beta: float = 1.0
    gamma: float = 0.1
    mode: str = "standard"               # standard | adversarial
    inner_attack: AttackSpec | None = None
    seed: int = 0
    rsg_train_mode: str = "identity"
    rsg_eval_mode: str = "fresh_permutation"
    augment: bool = False

    def __post_init__(self):
        problems = self.problems()
        if problems:
            raise ValueError("invalid training config: " + "; ".join(problems))

    def problems(self) -> list[str]:
        out = []
        if self.learning_rate <= 0:
            out.append(f"learning_rate must be positive, got {self.learning_rate}")
        if self.batch_size < 2:
            out.append(f"batch_size must be >= 2, got {self.batch_size}")
        if self.epochs < 1:
            out.append(f"epochs must be >= 1, got {self.epochs}")
        if self.mode not in ("standard", "adversarial"):
            out.append(f"mode must be standard or adversarial, got {self.mode!r}")
        if min(self.alpha, self.beta, self.gamma) < 0:
            out.append("loss coefficients must be non-negative")
        for name in ("rsg_train_mode", "rsg_eval_mode"):
            if getattr(self, name) not in (RsgMode.IDENTITY, RsgMode.FRESH):
                out.append(f"{name} must be identity or fresh_permutation")
        return out

    def resolved_inner_attack(self) -> AttackSpec:
        return self.inner_attack if self.inner_attack is not None else DEFAULT_INNER_ATTACK

    def describe(self) -> dict:
        d = {k: getattr(self, k) for k in ("learning_rate", "weight_decay", "momentum",
                                           "epochs", "batch_size", "alpha", "beta", "gamma",
                                           "mode", "seed", "rsg_train_mode", "rsg_eval_mode",
                                           "augment")}
        if self.mode == "adversarial":
            d["inner_attack"] = self.resolved_inner_attack().describe()
        return d


class SGD:
    """Plain SGD with momentum and additive weight decay:

        v <- momentum * v + grad + weight_decay * param
        param <- param - lr * v
    """

    def __init__(self, params, lr: float, weight_decay: float = 0.0, momentum: float = 0.0):
        self.params = list(params)
        self.lr = lr
        self.weight_decay = weight_decay
        self.momentum = momentum
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        for i, p in enumerate(self.params):
            grad = p.grad if p.grad is not None else 0.0
            self.velocity[i] = self.momentum * self.velocity[i] + grad \
                + self.weight_decay * p.data
            p.data = p.data - self.lr * self.velocity[i]
            if not np.all(np.isfinite(p.data)):
                raise RuntimeError(f"non-finite update for parameter {i} "
                                   f"(shape {p.data.shape}); training halted")

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def batch_diagnostics(model: _BaseModel, record, labels: np.ndarray):
    """Per-batch diversity and stability terms as graph tensors.

    Single-expert models short-circuit to exact zeros: with one expert the
    diversity sum is identically 0 and there are no center pairs.
    """
    if model.n_experts < 2:
        return None, Tensor(0.0)
    maps = expert_heatmaps(record, labels, model.input_shape[1:])
    mi = mutual_info_loss(maps)
    centers = [mass_centers(h) for h in maps]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        ps = position_stability_loss([c[0] for c in centers], [c[1] for c in centers])
    return mi, ps


def train_epoch(model: _BaseModel, dataset: Dataset, config: TrainConfig,
                optimizer: SGD, data_rng: np.random.Generator,
                attack_rng: np.random.Generator,
                rsg_rng: np.random.Generator) -> list[LossBreakdown]:
    """One pass over the dataset; returns the per-batch loss stream."""
    history: list[LossBreakdown] = []
    train_rsg = RsgMode.parse(config.rsg_train_mode)
    for x, y in dataset.batches(config.batch_size, rng=data_rng):
        if config.augment:
            x = np.stack([augment(img, int(lab), data_rng)[0] for img, lab in zip(x, y)])
        if config.mode == "adversarial":
            x = run_attack(model, x, y, config.resolved_inner_attack(), attack_rng).x_adv
        record = model.forward(x, rsg=train_rsg, rng=rsg_rng)
        mi, ps = batch_diagnostics(model, record, y)
        ce = cross_entropy_loss(record.mixture, record.expert_probs, y, config.alpha)
        total, breakdown = total_loss(ce, mi, ps, config.alpha, config.beta, config.gamma,
                                      model.n_experts, len(y))
        model.zero_grad()
        tz.backward(total)
        optimizer.step()
        history.append(breakdown)
    return history


def train_model(model: _BaseModel, dataset: Dataset, config: TrainConfig,
                log_fn=None) -> list[list[LossBreakdown]]:
    """Run the configured number of epochs; returns per-epoch loss streams.

    All randomness derives from config.seed through independent streams, so
    equal seeds and configs reproduce training bit for bit.
    """
    streams = np.random.SeedSequence(config.seed).spawn(3)
    data_rng = np.random.default_rng(streams[0])
    attack_rng = np.random.default_rng(streams[1])
    rsg_rng = np.random.default_rng(streams[2])
    optimizer = SGD(model.parameters(), config.learning_rate,
                    config.weight_decay, config.momentum)
    epochs: list[list[LossBreakdown]] = []
    step = 0
    for _ in range(config.epochs):
        batch_history = train_epoch(model, dataset, config, optimizer,
                                    data_rng, attack_rng, rsg_rng)
        epochs.append(batch_history)
        if log_fn is not None:
            for breakdown in batch_history:
                log_fn(breakdown.log_entry(step))
                step += 1
        else:
            step += len(batch_history)
    return epochs


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def evaluate(model: _BaseModel, dataset: Dataset, attack: AttackSpec | None = None,
             rsg_eval_mode: str = "fresh_permutation",
             rng: np.random.Generator | None = None, batch_size: int = 128) -> float:
    """Accuracy of argmax predictions, optionally after a per-batch attack.

    Ties resolve to the lowest class index. Clean evaluation fans batches out
    over worker threads (model reads are side-effect free); permutations are
    pre-drawn sequentially so the thread count never changes the result.
    """
    if len(dataset) == 0:
        raise ValueError("evaluate: empty dataset")
    if rng is None:
        rng = np.random.default_rng(0)
    mode = RsgMode.parse(rsg_eval_mode)
    batches = list(dataset.batches(batch_size))

    def resolve(m: RsgMode) -> RsgMode:
        if m.kind == RsgMode.FRESH and model.n_experts >= 2:
            return RsgMode.fixed(rng.permutation(model.n_experts))
        return RsgMode.identity() if m.kind == RsgMode.FRESH else m

    correct = 0
    if attack is None:
        modes = [resolve(mode) for _ in batches]
        workers = min(worker_count(), len(batches))

        def run(pair):
            (x, y), m = pair
            return int(np.sum(model.predict(x, rsg=m) == y))

        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                correct = sum(pool.map(run, zip(batches, modes)))
        else:
            correct = sum(run(pair) for pair in zip(batches, modes))
    else:
        for x, y in batches:
            adv = run_attack(model, x, y, attack, rng)
            correct += int(np.sum(model.predict(adv.x_adv, rsg=resolve(mode)) == y))
    return correct / len(dataset)


def _pair_square_sums(heatmaps: np.ndarray) -> np.ndarray:
    """Per-sample sum over ordered expert pairs of squared cell differences;
    ``heatmaps`` is (n_experts, batch, H, W)."""
    diffs = heatmaps[:, None] - heatmaps[None, :]            # (N, N, B, H, W)
    return (diffs ** 2).sum(axis=(-2, -1)).sum(axis=(0, 1))  # (B,)


def iscore_from_heatmaps(heatmaps: np.ndarray) -> float:
    """Mean over samples of the ordered-pair squared heatmap differences,
    normalized by N(N-1). ``heatmaps`` is (n_experts, batch, H, W)."""
    n = heatmaps.shape[0]
    if n < 2:
        return 0.0
    return float(_pair_square_sums(heatmaps).mean() / (n * (n - 1)))


def iscore(model: _BaseModel, dataset: Dataset, rng: np.random.Generator,
           sample_size: int = 256, batch_size: int = 64) -> float:
    """Heatmap-divergence score on a random evaluation subsample."""
    n = model.n_experts
    if n < 2:
        return 0.0
    idx = rng.permutation(len(dataset))[:sample_size]
    sample = dataset.subset(idx)
    values = [_pair_square_sums(heatmaps_for_batch(model, x, y))
              for x, y in sample.batches(batch_size)]
    return float(np.concatenate(values).mean() / (n * (n - 1)))


def cscore(model: _BaseModel, dataset: Dataset, rng: np.random.Generator,
           sample_size: int = 256, batch_size: int = 32) -> float:
    """Focus-geometry variance score: per batch, the stability loss over
    that batch divided by its size, averaged across batches."""
    if model.n_experts < 2:
        return 0.0
    idx = rng.permutation(len(dataset))[:sample_size]
    sample = dataset.subset(idx)
    values = []
    for x, y in sample.batches(batch_size):
        if len(y) < 2:
            warnings.warn(f"cscore: skipping batch of {len(y)} samples "
                          "(variance needs at least 2)", stacklevel=2)
            continue
        maps = heatmaps_for_batch(model, x, y)
        centers = [mass_centers(Tensor(m)) for m in maps]
        ps = position_stability_loss([c[0] for c in centers], [c[1] for c in centers])
        values.append(ps.item() / len(y))
    return float(np.mean(values)) if values else 0.0


@dataclass
class EvalReport:
    """One evaluation run: clean and per-attack accuracy plus heatmap
    metrics, with the fully resolved configuration echoed alongside."""

    clean_accuracy: float
    attack_accuracies: dict = field(default_factory=dict)
    iscore: float | None = None
    cscore: float | None = None
    config: dict = field(default_factory=dict)
    seed: int = 0

    def to_dict(self) -> dict:
        return {"clean_accuracy": self.clean_accuracy,
                "attack_accuracies": dict(self.attack_accuracies),
                "iscore": self.iscore, "cscore": self.cscore,
                "config": self.config, "seed": self.seed}
