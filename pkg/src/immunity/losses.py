"""Training objectives: classification, heatmap-diversity, and
position-stability losses, plus their weighted combination.

The diversity loss drives each heatmap away from the pooled heatmap mass;
it is minimized when expert saliency supports are disjoint and maximal
(N ln N) when all heatmaps coincide. The stability loss penalizes, across a
mini-batch, the variance of squared distances between expert focus points.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import tensor as tz
from .tensor import ShapeError, Tensor

PROB_CLAMP = 1e-12


@dataclass(frozen=True)
class MassCenter:
    """Saliency-weighted mean cell coordinate of one heatmap (0-based)."""

    x_c: float
    y_c: float
    expert_index: int = 0
    sample_index: int = 0


@dataclass(frozen=True)
class LossBreakdown:
    """Per-batch loss components; ce and mi are batch sums, total is the
    exact combination the optimizer consumed."""

    ce: float
    mi: float
    ps: float
    total: float
    alpha: float
    beta: float
    gamma: float
    mb: int
    n_experts: int

    def log_entry(self, step: int) -> dict:
        return {"step": step, "ce": self.ce, "mi": self.mi, "ps": self.ps, "total": self.total}


def cross_entropy_loss(mixture: Tensor, expert_probs: list[Tensor],
                       labels: np.ndarray, alpha: float) -> Tensor:
    """Per-sample loss: -log p_mix[label] - alpha * sum_i log p_i[label].

    Probabilities are clamped at 1e-12 before the log so early training never
    produces non-finite values. Returns a (batch,) tensor.
    """
    labels = np.asarray(labels)
    if labels.min(initial=0) < 0 or labels.max(initial=-1) >= mixture.shape[1]:
        raise IndexError(f"label out of range for {mixture.shape[1]} classes")
    loss = -tz.gather_rows(mixture, labels).clamp_min(PROB_CLAMP).log()
    for probs in expert_probs:
        loss = loss - alpha * tz.gather_rows(probs, labels).clamp_min(PROB_CLAMP).log()
    return loss


def mutual_info_loss(heatmaps: list[Tensor]) -> Tensor:
    """Per-sample diversity loss over N normalized (batch, H, W) heatmaps:

        -sum_i sum_cells h_i * log(h_i / sum_j h_j)      (natural log)

    Returns a (batch,) tensor, differentiable in every heatmap cell.
    """
    grids = {tuple(h.shape[1:]) for h in heatmaps}
    if len(grids) != 1:
        raise ShapeError(f"mutual_info_loss: heatmap grids differ: {sorted(grids)}")
    pooled = heatmaps[0]
    for h in heatmaps[1:]:
        pooled = pooled + h
    # The 1e-300 floor realizes the 0*log(0) := 0 convention for cells with
    # exactly zero mass; floored production heatmaps never reach it.
    log_pooled = pooled.clamp_min(1e-300).log()
    loss = None
    for h in heatmaps:
        term = (h * (h.clamp_min(1e-300).log() - log_pooled)).sum(axis=(-2, -1))
        loss = term if loss is None else loss + term
    return -loss


def center_of_mass(heatmap) -> MassCenter:
    """Focus point of a single non-negative 2-D heatmap."""
    grid = heatmap.data if isinstance(heatmap, Tensor) else np.asarray(heatmap, dtype=np.float64)
    if grid.ndim != 2:
        raise ShapeError(f"center_of_mass: expected a 2-D heatmap, got {grid.shape}")
    total = grid.sum()
    if total <= 0:
        raise ValueError("center_of_mass: heatmap has no mass")
    rows = np.arange(grid.shape[0])[:, None]
    cols = np.arange(grid.shape[1])[None, :]
    return MassCenter(float((rows * grid).sum() / total), float((cols * grid).sum() / total))


def mass_centers(heatmap: Tensor) -> tuple[Tensor, Tensor]:
    """Differentiable batched centers of a (batch, H, W) heatmap: two
    (batch,) tensors of row and column coordinates."""
    if heatmap.data.ndim != 3:
        raise ShapeError(f"mass_centers: expected (batch, H, W), got {heatmap.shape}")
    h, w = heatmap.shape[-2:]
    rows = Tensor(np.broadcast_to(np.arange(h, dtype=np.float64)[:, None], (h, w)).copy())
    cols = Tensor(np.broadcast_to(np.arange(w, dtype=np.float64)[None, :], (h, w)).copy())
    total = heatmap.sum(axis=(-2, -1))
    return ((heatmap * rows).sum(axis=(-2, -1)) / total,
            (heatmap * cols).sum(axis=(-2, -1)) / total)


def position_stability_loss(centers_x: list[Tensor], centers_y: list[Tensor]) -> Tensor:
    """Variance, over the batch, of squared pairwise center distances, summed
    over ordered expert pairs.

    With fewer than 2 samples the variance is degenerate: warns and returns 0.
    """
    n = len(centers_x)
    if n != len(centers_y):
        raise ShapeError(f"position_stability_loss: {n} x-centers vs {len(centers_y)} y-centers")
    mb = centers_x[0].shape[0] if centers_x else 0
    if mb < 2:
        warnings.warn("position stability needs at least 2 samples per batch; returning 0",
                      stacklevel=2)
        return Tensor(0.0)
    loss = None
    for i in range(n):
        for j in range(i + 1, n):
            dx = centers_x[i] - centers_x[j]
            dy = centers_y[i] - centers_y[j]
            d2 = dx * dx + dy * dy
            dev = d2 - d2.mean()
            term = (dev * dev).sum()
            loss = term if loss is None else loss + term
    if loss is None:
        return Tensor(0.0)
    return loss * 2.0  # ordered pairs: (i, j) and (j, i) contribute equally


def total_loss(ce: Tensor, mi: Tensor | None, ps: Tensor, alpha: float, beta: float,
               gamma: float, n_experts: int, mb: int) -> tuple[Tensor, LossBreakdown]:
    """Combine per-sample ce and mi vectors with the batch ps scalar:

        (1/mb) * ( sum ce + (beta/N) * sum mi + (gamma/(N(N-1))) * ps )

    Returns the scalar graph tensor the optimizer consumes plus the logged
    breakdown.
    """
    if min(alpha, beta, gamma) < 0:
        raise ValueError(f"loss coefficients must be non-negative, got "
                         f"alpha={alpha}, beta={beta}, gamma={gamma}")
    ce_sum = ce.sum()
    total = ce_sum
    mi_sum = Tensor(0.0) if mi is None else mi.sum()
    if beta != 0.0:
        total = total + (beta / n_experts) * mi_sum
    if gamma != 0.0 and n_experts > 1:
        total = total + (gamma / (n_experts * (n_experts - 1))) * ps
    total = total * (1.0 / mb)
    breakdown = LossBreakdown(ce=ce_sum.item(), mi=mi_sum.item(), ps=ps.item(),
                              total=total.item(), alpha=alpha, beta=beta, gamma=gamma,
                              mb=mb, n_experts=n_experts)
    return total, breakdown
