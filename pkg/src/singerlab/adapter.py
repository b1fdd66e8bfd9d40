"""Low-rank refinement adapter with nullspace initialisation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .nullspace import NullReport
from .tensor import Tensor
from .vit import FeatureMap, truncated_normal


@dataclass
class AdapterPair:
    layer: int
    b_down: Tensor  # (D, r)
    b_up: Tensor  # (r, D)

    @property
    def rank(self) -> int:
        return self.b_down.shape[1]

    @property
    def dim(self) -> int:
        return self.b_down.shape[0]

    def parameters(self) -> list[Tensor]:
        return [self.b_down, self.b_up]


def zeros(layer: int, dim: int, rank: int) -> AdapterPair:
    if not 1 <= rank < dim:
        raise ValueError(f"adapter rank must satisfy 1 <= r < {dim}, got {rank}")
    return AdapterPair(layer, Tensor(np.zeros((dim, rank), np.float32)), Tensor(np.zeros((rank, dim), np.float32)))


def init_nullspace(adapter: AdapterPair, report: NullReport) -> AdapterPair:
    """B_down = N, B_up = N^T for the report's approximate null basis."""
    if report.layer != adapter.layer:
        raise ValueError(f"report is for layer {report.layer}, adapter for layer {adapter.layer}")
    N = report.null_basis
    if N.shape != (adapter.dim, adapter.rank):
        raise ValueError(f"basis shape {N.shape} does not match adapter ({adapter.dim}, {adapter.rank})")
    dtype = adapter.b_down.dtype
    return AdapterPair(
        adapter.layer,
        Tensor(N.astype(dtype), requires_grad=True),
        Tensor(N.T.astype(dtype), requires_grad=True),
    )


def init_random(adapter: AdapterPair, seed: int, std: float = 0.02) -> AdapterPair:
    """Control initialisation: both factors from a seeded truncated normal."""
    rng = np.random.default_rng([seed, adapter.layer])
    return AdapterPair(
        adapter.layer,
        Tensor(truncated_normal(rng, (adapter.dim, adapter.rank), std), requires_grad=True),
        Tensor(truncated_normal(rng, (adapter.rank, adapter.dim), std), requires_grad=True),
    )


def refine(F, adapter: AdapterPair) -> tuple[Tensor, Tensor]:
    """Return (F + delta, delta) with delta = (F @ B_down) @ B_up.

    Accepts a FeatureMap or a token tensor of shape (..., N, D).
    """
    tokens = F.tokens if isinstance(F, FeatureMap) else T.as_tensor(F)
    if tokens.shape[-1] != adapter.dim:
        raise ValueError(f"feature width {tokens.shape[-1]} does not match adapter width {adapter.dim}")
    delta = (tokens @ adapter.b_down) @ adapter.b_up
    return tokens + delta, delta


def refine_map(F: FeatureMap, adapter: AdapterPair) -> tuple[FeatureMap, Tensor]:
    hat, delta = refine(F, adapter)
    return FeatureMap(F.layer, hat, F.cls), delta


def _energy(phi: np.ndarray, basis: np.ndarray) -> float:
    total = np.linalg.norm(phi)
    if total == 0:
        raise ValueError("alignment energy of a zero matrix")
    return float(np.linalg.norm(phi @ basis) / total)


def alignment_energies(adapter: AdapterPair, report: NullReport) -> dict[str, float]:
    """Normalised Frobenius alignment of B_up and B_down^T with the principal and null bases."""
    up = adapter.b_up.data.astype(np.float64)
    down_t = adapter.b_down.data.astype(np.float64).T
    P, N = report.principal_basis, report.null_basis
    return {
        "E_prob_up": _energy(up, P),
        "E_safe_up": _energy(up, N),
        "E_prob_down": _energy(down_t, P),
        "E_safe_down": _energy(down_t, N),
    }
