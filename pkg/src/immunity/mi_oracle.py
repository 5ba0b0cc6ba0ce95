"""Brute-force information-theoretic verification engine.

Everything here is exact, stateless numpy over discrete distributions: the
direct mutual-information definition, its per-expert ratio decomposition,
the identity tying the diversity loss to MI under a uniform expert prior,
and an exhaustive simplex search showing the MI maximizer is a point mass
on the cell where the other experts' pooled mass is smallest.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import combinations

import numpy as np

from .losses import mutual_info_loss
from .tensor import Tensor


@dataclass
class ConditionalTable:
    """N cell distributions p(c | E=i) plus an expert prior p(e)."""

    rows: np.ndarray
    prior: np.ndarray | None = None

    def __post_init__(self):
        self.rows = np.asarray(self.rows, dtype=np.float64)
        if self.rows.ndim != 2:
            raise ValueError(f"rows must be 2-D (experts x cells), got {self.rows.shape}")
        n = self.rows.shape[0]
        if self.prior is None:
            self.prior = np.full(n, 1.0 / n)
        else:
            self.prior = np.asarray(self.prior, dtype=np.float64)
        if self.prior.shape != (n,):
            raise ValueError(f"prior shape {self.prior.shape} does not match {n} rows")
        if np.any(self.rows < 0) or np.any(self.prior < 0):
            raise ValueError("distributions must be non-negative")
        if np.max(np.abs(self.rows.sum(axis=1) - 1.0)) > 1e-12:
            raise ValueError("each row must sum to 1 within 1e-12")
        if abs(self.prior.sum() - 1.0) > 1e-12:
            raise ValueError("prior must sum to 1 within 1e-12")

    @property
    def n_experts(self) -> int:
        return self.rows.shape[0]

    def has_uniform_prior(self) -> bool:
        return bool(np.max(np.abs(self.prior - 1.0 / self.n_experts)) <= 1e-12)


def _xlogy(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """x * log(y) with the 0 * log(0) := 0 convention."""
    out = np.zeros_like(x, dtype=np.float64)
    mask = x > 0
    out[mask] = x[mask] * np.log(y[mask])
    return out


def mutual_information_exact(table: ConditionalTable) -> float:
    """I(C, E) in nats by direct summation of p(c,e) log(p(c,e)/(p(c)p(e)))."""
    joint = table.prior[:, None] * table.rows
    p_c = joint.sum(axis=0)
    p_e = table.prior
    ratio = np.ones_like(joint)
    mask = joint > 0
    ratio[mask] = joint[mask] / (p_c[None, :] * p_e[:, None])[mask]
    return float(_xlogy(joint, ratio).sum())


def mutual_information_ratio_form(table: ConditionalTable) -> float:
    """I(C, E) via the per-expert decomposition

        (1/N) sum_i sum_c p(c|i) log( N p(c|i) / sum_j p(c|j) )

    which holds only for a uniform prior; other priors are rejected.
    """
    if not table.has_uniform_prior():
        raise ValueError("ratio-form MI requires a uniform expert prior")
    n = table.n_experts
    pooled = table.rows.sum(axis=0)
    ratio = np.ones_like(table.rows)
    mask = table.rows > 0
    ratio[mask] = n * table.rows[mask] / np.broadcast_to(pooled, table.rows.shape)[mask]
    return float(_xlogy(table.rows, ratio).sum() / n)


def loss_identity_residual(heatmaps: np.ndarray) -> float:
    """| loss_mi - N (ln N - I(C,E)) | for normalized heatmaps as table rows,
    with I computed by the independent brute-force route."""
    rows = np.asarray(heatmaps, dtype=np.float64).reshape(len(heatmaps), -1)
    table = ConditionalTable(rows)
    n = table.n_experts
    i_exact = mutual_information_exact(table)
    loss = mutual_info_loss([Tensor(r.reshape(1, 1, -1)) for r in rows]).item()
    return abs(loss - n * (np.log(n) - i_exact))


# ---------------------------------------------------------------------------
# exhaustive simplex search
# ---------------------------------------------------------------------------

def simplex_grid(n_cells: int, resolution: float) -> np.ndarray:
    """All probability vectors over ``n_cells`` cells on a grid of step
    ``resolution``; the step must divide 1 exactly."""
    steps = round(1.0 / resolution)
    if steps < 1 or abs(steps * resolution - 1.0) > 1e-9:
        raise ValueError(f"resolution {resolution} does not divide 1")
    if n_cells > 4:
        raise ValueError(f"simplex enumeration is capped at 4 cells, got {n_cells}")
    # Stars and bars: place n_cells-1 dividers among steps+n_cells-1 slots.
    out = np.empty((0, n_cells))
    chunks = []
    for dividers in combinations(range(steps + n_cells - 1), n_cells - 1):
        bounds = (-1,) + dividers + (steps + n_cells - 1,)
        counts = [bounds[k + 1] - bounds[k] - 1 for k in range(n_cells)]
        chunks.append(counts)
    out = np.asarray(chunks, dtype=np.float64) / steps
    return out


@dataclass
class OptimalitySearchResult:
    maximizer: np.ndarray
    best_mi: float
    argmin_cell: int
    pooled_fixed: np.ndarray = field(repr=False)


def optimality_search(fixed_rows: np.ndarray, resolution: float) -> OptimalitySearchResult:
    """Enumerate the first expert's distribution over the simplex and return
    the MI maximizer (uniform prior, the other rows held fixed).

    Verifies the claimed optimum: the maximizer must lie within one grid step
    (L-infinity) of a point mass on some cell minimizing the other experts'
    pooled mass. Raises if the claim fails.
    """
    fixed_rows = np.asarray(fixed_rows, dtype=np.float64)
    if fixed_rows.ndim != 2 or fixed_rows.shape[0] < 1:
        raise ValueError(f"need at least one fixed row, got shape {fixed_rows.shape}")
    if np.max(np.abs(fixed_rows.sum(axis=1) - 1.0)) > 1e-9:
        raise ValueError("fixed rows must each sum to 1")
    g = fixed_rows.shape[1]
    n = fixed_rows.shape[0] + 1
    candidates = simplex_grid(g, resolution)

    pooled_fixed = fixed_rows.sum(axis=0)
    pooled = candidates + pooled_fixed[None, :]         # (n_cand, G)
    cand_term = _xlogy(candidates, np.where(candidates > 0, n * candidates / pooled, 1.0)).sum(axis=1)
    fixed_term = np.zeros(len(candidates))
    for row in fixed_rows:
        rb = np.broadcast_to(row, pooled.shape)
        fixed_term += _xlogy(rb, np.where(rb > 0, n * rb / pooled, 1.0)).sum(axis=1)
    mi = (cand_term + fixed_term) / n

    best = int(np.argmax(mi))
    maximizer = candidates[best]

    min_mass = pooled_fixed.min()
    tied = np.flatnonzero(pooled_fixed <= min_mass + 1e-12)
    argmin_cell = int(tied[0])
    step = resolution + 1e-9
    ok = any(np.max(np.abs(maximizer - np.eye(g)[k])) <= step for k in tied)
    if not ok:
        raise AssertionError(
            f"MI maximizer {maximizer} is not within one grid step of a point mass "
            f"on any minimal-pooled-mass cell {tied.tolist()}")
    return OptimalitySearchResult(maximizer, float(mi[best]), argmin_cell, pooled_fixed)
