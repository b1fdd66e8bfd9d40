"""Linearised-FFN spectra, approximate null bases and the sublayer diagnostics."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .linalg import svd
from .vit import VitModel, basis_layer, forward_block_instrumented, forward_tokens, linearized_ffn

DIV_EPS = 1e-8


class BasisError(ValueError):
    pass


@dataclass(frozen=True)
class NullReport:
    layer: int  # distillation layer the basis serves
    source_layer: int  # block whose linearised FFN was decomposed
    w_tilde: np.ndarray
    sigma: np.ndarray
    U: np.ndarray
    null_basis: np.ndarray  # (D, r), last r left singular vectors
    principal_basis: np.ndarray  # (D, r), first r left singular vectors
    rank: int
    rho: float
    eps: float
    k_energy: int
    k_eps: int
    r_eps: int

    @property
    def null_bound(self) -> float:
        """Largest of the r smallest singular values."""
        return float(self.sigma[len(self.sigma) - self.rank])


def cumulative_energy(sigma) -> np.ndarray:
    """E(k) for k = 1..d (index k-1)."""
    s2 = np.asarray(sigma, dtype=np.float64) ** 2
    total = s2.sum()
    if total == 0:
        return np.ones_like(s2)
    return np.cumsum(s2) / total


def k_energy(sigma, rho: float) -> int:
    """Smallest 1-based k with E(k) >= rho."""
    if not 0.0 < rho < 1.0:
        raise ValueError("rho must lie in (0, 1)")
    E = cumulative_energy(sigma)
    return int(np.argmax(E >= rho)) + 1


def k_eps(sigma, eps: float) -> int:
    """Smallest 1-based k with sigma_k <= eps; d+1 when none qualifies."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    sigma = np.asarray(sigma)
    hits = np.nonzero(sigma <= eps)[0]
    return int(hits[0]) + 1 if hits.size else len(sigma) + 1


def r_eps(sigma, eps: float) -> int:
    d = len(sigma)
    k = k_eps(sigma, eps)
    return 0 if k == d + 1 else d - k + 1


def linearize_ffn(model: VitModel, layer: int) -> np.ndarray:
    return linearized_ffn(model, layer)


def report_from_matrix(w_tilde: np.ndarray, rank: int, rho: float = 0.999, eps: float = 0.05,
                       layer: int = -1, source_layer: int = -1) -> NullReport:
    d = w_tilde.shape[0]
    if not 1 <= rank < d:
        raise ValueError(f"rank must satisfy 1 <= r < {d}, got {rank}")
    if not 0.0 < rho < 1.0:
        raise ValueError("rho must lie in (0, 1)")
    if eps <= 0:
        raise ValueError("eps must be positive")
    res = svd(w_tilde)
    return NullReport(
        layer=layer,
        source_layer=source_layer,
        w_tilde=w_tilde,
        sigma=res.sigma,
        U=res.U,
        null_basis=res.U[:, d - rank :].copy(),
        principal_basis=res.U[:, :rank].copy(),
        rank=rank,
        rho=rho,
        eps=eps,
        k_energy=k_energy(res.sigma, rho),
        k_eps=k_eps(res.sigma, eps),
        r_eps=r_eps(res.sigma, eps),
    )


def null_report(model: VitModel, layer: int, r: int, rho: float = 0.999, eps: float = 0.05,
                strict: bool = False) -> NullReport:
    """Basis for an adapter at ``layer`` from the next block's linearised FFN.

    With ``strict`` the last layer is rejected; otherwise it falls back to its
    own block (no next block exists there).
    """
    if strict and layer + 1 >= model.spec.depth:
        raise ValueError(f"layer {layer} has no next block")
    src = basis_layer(model, layer)
    return report_from_matrix(linearized_ffn(model, src), r, rho, eps, layer=layer, source_layer=src)


def spectrum_rows(report: NullReport) -> list[tuple[int, int, float, float]]:
    E = cumulative_energy(report.sigma)
    return [(report.source_layer, i + 1, float(s), float(e)) for i, (s, e) in enumerate(zip(report.sigma, E))]


# -- sublayer change ratios ---------------------------------------------------


def _ratio(num: np.ndarray, den: np.ndarray) -> np.ndarray:
    """Per-patch ||num|| / ||den|| averaged over patches, one value per image."""
    n = np.linalg.norm(num.astype(np.float64), axis=-1)
    d = np.linalg.norm(den.astype(np.float64), axis=-1)
    return (n / np.maximum(d, 1e-30)).mean(axis=-1)


def sublayer_ratios(model: VitModel, layer: int, x_in) -> dict[str, np.ndarray]:
    """Per-image Delta_SA, Delta_FFN, G_FFN1, G_FFN2 for one block (CLS excluded)."""
    with T.no_grad():
        parts = forward_block_instrumented(model, layer, x_in)
    p = {k: v.data[..., 1:, :] for k, v in parts.items()}
    return {
        "delta_sa": _ratio(p["x_SA"] - p["x_in"], p["x_in"]),
        "delta_ffn": _ratio(p["x_out"] - p["x_SA"], p["x_SA"]),
        "g_ffn1": _ratio(p["a1"], p["h1"]),
        "g_ffn2": _ratio(p["z2"], p["a1"]),
    }


def summarize(values: np.ndarray) -> dict[str, float]:
    v = np.asarray(values, dtype=np.float64)
    return {"mean": float(v.mean()), "median": float(np.median(v)), "p95": float(np.quantile(v, 0.95))}


def sublayer_deltas(model: VitModel, layer: int, images, batch: int = 128) -> dict[str, dict[str, float]]:
    """Distribution summary (mean/median/p95 over images) of the four ratios at ``layer``."""
    images = np.asarray(images)
    if len(images) == 0:
        raise ValueError("sublayer_deltas needs at least one image")
    per = {k: [] for k in ("delta_sa", "delta_ffn", "g_ffn1", "g_ffn2")}
    for i in range(0, len(images), batch):
        chunk = images[i : i + batch]
        with T.no_grad():
            if layer == 0:
                from .vit import embed

                x_in = embed(model, chunk)
            else:
                x_in = forward_tokens(model, chunk, [layer - 1])[layer - 1]
        for k, v in sublayer_ratios(model, layer, x_in).items():
            per[k].append(v)
    return {k: summarize(np.concatenate(v)) for k, v in per.items()}


# -- subspace energy ------------------------------------------------------------


def _check_orthonormal(U: np.ndarray, tol: float = 1e-4) -> None:
    r = U.shape[1]
    if np.abs(U.T @ U - np.eye(r)).max() > tol:
        raise BasisError("basis columns are not orthonormal")


def subspace_energy(F, U) -> np.ndarray:
    """Share of each patch's squared norm captured by span(U), shape (..., N)."""
    X = np.asarray(getattr(getattr(F, "tokens", F), "data", getattr(F, "tokens", F)), dtype=np.float64)
    U = np.asarray(U, dtype=np.float64)
    _check_orthonormal(U)
    proj = X @ U
    return (proj * proj).sum(-1) / ((X * X).sum(-1) + DIV_EPS)


def norm_energy_correlation(F, U) -> float:
    """Pearson correlation between patch norms and subspace energy over patches."""
    X = np.asarray(getattr(getattr(F, "tokens", F), "data", getattr(F, "tokens", F)), dtype=np.float64)
    if X.ndim != 2:
        raise ValueError("norm_energy_correlation takes one image's (N, D) tokens")
    if X.shape[0] < 3:
        raise ValueError("need at least 3 patches")
    e = subspace_energy(X, U)
    n = np.linalg.norm(X, axis=-1)
    if np.std(n) < 1e-12 or np.std(e) < 1e-12:
        raise ValueError("correlation undefined: zero variance")
    c = np.corrcoef(n, e)[0, 1]
    if not math.isfinite(c):
        raise ValueError("correlation undefined")
    return float(c)
