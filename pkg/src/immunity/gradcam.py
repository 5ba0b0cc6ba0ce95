"""Gradient-weighted class activation heatmaps.

For each expert, the gradient of its label-class logit w.r.t. the CAM-layer
activations is spatially averaged into per-channel weights; the ReLU of the
weighted channel sum is the raw heatmap. Raw heatmaps are interpolated to
input resolution, floored, and normalized into per-sample distributions.

Channel weights are detached constants, so loss gradients reach parameters
only through the activations: training needs first-order autodiff only.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tz
from .model import ForwardRecord, _BaseModel
from .tensor import ShapeError, Tensor

EPS_FLOOR = 1e-8


@dataclass
class Heatmap:
    """A non-negative 2-D saliency grid for one expert on one sample."""

    grid: np.ndarray
    normalized: bool
    expert_index: int

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=np.float64)
        if self.grid.ndim != 2:
            raise ShapeError(f"heatmap grid must be 2-D, got {self.grid.shape}")
        if np.any(self.grid < 0):
            raise ValueError("heatmap entries must be non-negative")
        if self.normalized:
            total = self.grid.sum()
            if abs(total - 1.0) > 1e-9:
                raise ValueError(f"normalized heatmap sums to {total}, expected 1")

    @property
    def resolution(self) -> tuple[int, int]:
        return self.grid.shape


def channel_weights(grad_of_activations: np.ndarray) -> np.ndarray:
    """Spatial mean of a (batch, channels, h, w) activation gradient."""
    g = np.asarray(grad_of_activations, dtype=np.float64)
    if g.ndim != 4:
        raise ShapeError(f"channel_weights: expected 4-D gradient, got {g.shape}")
    if g.shape[2] == 0 or g.shape[3] == 0:
        raise ShapeError(f"channel_weights: empty spatial extent in {g.shape}")
    return g.mean(axis=(2, 3))


def gradcam(activations: Tensor, weights: np.ndarray) -> Tensor:
    """Raw heatmap: ReLU of the weight-averaged channel sum.

    ``activations`` is (batch, channels, h, w) and stays graph-linked;
    ``weights`` is a constant (batch, channels) array.
    """
    weights = np.asarray(weights, dtype=np.float64)
    if weights.ndim == 1:
        weights = weights[None, :]
    if activations.data.ndim != 4 or weights.shape != activations.shape[:2]:
        raise ShapeError(f"gradcam: activations {activations.shape} vs weights {weights.shape}")
    weighted = activations * Tensor(weights[:, :, None, None])
    return weighted.sum(axis=1).relu()


def to_input_heatmap(raw: Tensor, input_resolution: tuple[int, int],
                     eps_floor: float = EPS_FLOOR) -> Tensor:
    """Resize a raw (batch, h, w) heatmap to input resolution and normalize
    each sample into a distribution; the floor keeps log terms finite even
    for all-zero maps."""
    h, w = input_resolution
    resized = tz.bilinear_resize(raw, h, w) + eps_floor
    return resized / resized.sum(axis=(-2, -1), keepdims=True)


def cam_target_score(expert_logits: Tensor, labels: np.ndarray) -> Tensor:
    """Batch sum of each sample's label-class logit, the score whose
    activation gradient defines the channel weights."""
    return tz.gather_rows(expert_logits, labels).sum()


def expert_heatmaps(record: ForwardRecord, labels: np.ndarray,
                    input_resolution: tuple[int, int],
                    eps_floor: float = EPS_FLOOR) -> list[Tensor]:
    """Normalized per-expert heatmaps, (batch, H, W) each, graph-linked
    through the CAM activations.

    Runs one backward pass per expert to obtain channel weights, then clears
    every gradient it deposited: callers always see clean parameter grads.
    """
    labels = np.asarray(labels)
    maps: list[Tensor] = []
    touched: list[Tensor] = []
    for logits, act in zip(record.expert_logits, record.cam_activations):
        tz.backward(cam_target_score(logits, labels), stop_at=[act])
        alpha = channel_weights(act.grad)
        act.grad = None
        touched.append(logits)
        maps.append(to_input_heatmap(gradcam(act, alpha), input_resolution, eps_floor))
    _clear_subtree_grads(touched)
    return maps


def _clear_subtree_grads(roots: list[Tensor]) -> None:
    seen: set[int] = set()
    stack = list(roots)
    while stack:
        t = stack.pop()
        if id(t) in seen:
            continue
        seen.add(id(t))
        t.grad = None
        for parent, _ in t._parents:
            stack.append(parent)


def heatmaps_for_batch(model: _BaseModel, x: np.ndarray, labels: np.ndarray,
                       rsg=None, rng=None, eps_floor: float = EPS_FLOOR) -> np.ndarray:
    """Convenience wrapper: (n_experts, batch, H, W) normalized heatmap values
    for a pixel-space batch."""
    record = model.forward(x, rsg=rsg, rng=rng)
    res = model.input_shape[1:]
    maps = expert_heatmaps(record, labels, res, eps_floor)
    return np.stack([m.data for m in maps], axis=0)


def heatmap_objects(model: _BaseModel, x: np.ndarray, labels: np.ndarray,
                    eps_floor: float = EPS_FLOOR) -> list[list[Heatmap]]:
    """Per-sample, per-expert Heatmap records (used by explanation export)."""
    grids = heatmaps_for_batch(model, x, labels, eps_floor=eps_floor)
    out = []
    for q in range(grids.shape[1]):
        out.append([Heatmap(grids[i, q], normalized=True, expert_index=i)
                    for i in range(grids.shape[0])])
    return out


# ---------------------------------------------------------------------------
# export formats
# ---------------------------------------------------------------------------

def write_pgm(grid: np.ndarray, path: str) -> None:
    """Plain-text PGM (P2), values rescaled to 0..255 by the grid maximum."""
    grid = np.asarray(grid, dtype=np.float64)
    peak = grid.max()
    scaled = np.zeros_like(grid, dtype=np.int64) if peak <= 0 else \
        np.rint(grid / peak * 255).astype(np.int64)
    h, w = grid.shape
    lines = ["P2", f"{w} {h}", "255"]
    lines += [" ".join(str(v) for v in row) for row in scaled]
    with open(path, "w", encoding="ascii") as fh:
        fh.write("\n".join(lines) + "\n")


def write_csv(grid: np.ndarray, path: str) -> None:
    """Raw float values, one row per line, comma separated."""
    grid = np.asarray(grid, dtype=np.float64)
    with open(path, "w", encoding="ascii") as fh:
        for row in grid:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")
