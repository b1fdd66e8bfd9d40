"""One-sided Jacobi SVD and the empirical quantile used by the outlier loss."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

MAX_SWEEPS = 64
OFF_DIAGONAL_TOL = 1e-10
MAX_DIM = 4096


class ConvergenceError(ArithmeticError):
    pass


@dataclass(frozen=True)
class SvdResult:
    U: np.ndarray  # (d, d), columns are left singular vectors
    sigma: np.ndarray  # (d,), descending
    Vt: np.ndarray  # (d, d), rows are right singular vectors

    def reconstruct(self) -> np.ndarray:
        return (self.U * self.sigma) @ self.Vt


def _round_robin(n: int) -> list[np.ndarray]:
    """Tournament schedule: n-1 rounds of n/2 disjoint column pairs (n even)."""
    players = list(range(n))
    rounds = []
    for _ in range(n - 1):
        pairs = [(players[i], players[n - 1 - i]) for i in range(n // 2)]
        rounds.append(np.array([sorted(p) for p in pairs], dtype=np.int64))
        players = [players[0]] + [players[-1]] + players[1:-1]
    return rounds


def _complete_orthonormal(Q: np.ndarray, keep: np.ndarray) -> np.ndarray:
    """Re-orthonormalise columns of Q in order; rebuild columns not in ``keep``.

    Columns flagged False in ``keep`` (zero singular values) are replaced by
    the first canonical axes that are independent of everything before them.
    """
    d = Q.shape[0]
    out = np.zeros_like(Q)
    filled = 0
    candidates = iter(np.eye(d))
    for j in range(Q.shape[1]):
        v = Q[:, j].copy() if keep[j] else None
        threshold = 0.5
        while True:
            if v is None:
                v = next(candidates).copy()
                threshold = 1e-6
            for _ in range(2):
                v -= out[:, :filled] @ (out[:, :filled].T @ v)
            nv = np.linalg.norm(v)
            if nv > threshold:
                break
            v = None
        out[:, filled] = v / nv
        filled += 1
    return out


def _fix_signs(U: np.ndarray, Vt: np.ndarray) -> None:
    """Make the largest-magnitude entry of each left singular vector positive."""
    idx = np.argmax(np.abs(U), axis=0)
    signs = np.sign(U[idx, np.arange(U.shape[1])])
    signs[signs == 0] = 1.0
    U *= signs
    Vt *= signs[:, None]


def svd(m) -> SvdResult:
    """Singular value decomposition of a square matrix by one-sided Jacobi.

    Rotations are applied to the columns of ``m.T`` in a fixed round-robin
    order, so the accumulated rotation is exactly the left factor of ``m``.
    Arithmetic is float64 throughout. Singular values are sorted descending
    with ties kept in column order, and signs follow :func:`_fix_signs`.
    """
    a = np.array(getattr(m, "data", m), dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"svd expects a square matrix, got shape {a.shape}")
    d = a.shape[0]
    if d > MAX_DIM:
        raise ValueError(f"svd supports d <= {MAX_DIM}, got {d}")
    if not np.isfinite(a).all():
        raise ValueError("svd input contains non-finite values")

    norm_m = np.linalg.norm(a)
    if norm_m == 0.0:
        eye = np.eye(d)
        return SvdResult(eye, np.zeros(d), eye.copy())

    # pad to an even column count so every round pairs all columns
    n = d + (d % 2)
    B = np.zeros((d, n))
    B[:, :d] = a.T
    J = np.eye(n)
    rounds = _round_robin(n) if n > 1 else []

    tol = OFF_DIAGONAL_TOL * norm_m
    off = np.inf
    for _sweep in range(MAX_SWEEPS):
        gram = B.T @ B
        np.fill_diagonal(gram, 0.0)
        off = np.linalg.norm(gram) / norm_m
        if off <= tol:
            break
        for pairs in rounds:
            p, q = pairs[:, 0], pairs[:, 1]
            bp, bq = B[:, p], B[:, q]
            alpha = np.einsum("ij,ij->j", bp, bp)
            beta = np.einsum("ij,ij->j", bq, bq)
            gamma = np.einsum("ij,ij->j", bp, bq)
            active = np.abs(gamma) > 1e-300 + 1e-16 * np.sqrt(alpha * beta)
            if not active.any():
                continue
            g = np.where(active, gamma, 1.0)
            zeta = (beta - alpha) / (2.0 * g)
            t = np.sign(zeta) / (np.abs(zeta) + np.sqrt(1.0 + zeta * zeta))
            t = np.where(zeta == 0, 1.0, t)
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = c * t
            c = np.where(active, c, 1.0)
            s = np.where(active, s, 0.0)
            B[:, p], B[:, q] = c * bp - s * bq, s * bp + c * bq
            jp, jq = J[:, p], J[:, q]
            J[:, p], J[:, q] = c * jp - s * jq, s * jp + c * jq
    else:
        raise ConvergenceError(
            f"Jacobi SVD did not converge in {MAX_SWEEPS} sweeps; off-diagonal residual {off:.3e}"
        )

    B = B[:, :d]
    J = J[:d, :d]
    sig = np.linalg.norm(B, axis=0)
    order = np.argsort(-sig, kind="stable")
    sig = sig[order]
    U = J[:, order]
    B = B[:, order]
    keep = sig > 1e-12 * sig[0]
    Q = np.where(keep, B / np.where(keep, sig, 1.0), 0.0)
    V = _complete_orthonormal(Q, keep)
    sig = np.where(keep, sig, 0.0)
    Vt = V.T
    _fix_signs(U, Vt)
    return SvdResult(U=U, sigma=sig, Vt=Vt)


def quantile(values, alpha: float, method: str = "linear") -> float:
    """Empirical ``alpha``-quantile of a vector.

    ``method="linear"`` interpolates between order statistics (Hyndman-Fan
    type 7); "lower", "higher" and "nearest" select an order statistic.
    """
    v = np.asarray(getattr(values, "data", values), dtype=np.float64).ravel()
    if v.size == 0:
        raise ValueError("quantile of an empty vector")
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")
    if not np.isfinite(v).all():
        raise ValueError("quantile input contains non-finite values")
    return float(np.quantile(v, alpha, method=method))


def row_quantiles(values: np.ndarray, alpha: float, method: str = "linear") -> np.ndarray:
    """Quantile along the last axis, one value per leading index."""
    v = np.asarray(values, dtype=np.float64)
    if v.shape[-1] == 0:
        raise ValueError("quantile of an empty vector")
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")
    return np.quantile(v, alpha, axis=-1, method=method)
