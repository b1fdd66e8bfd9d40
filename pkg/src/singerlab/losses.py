"""Distillation objective: feature matching, outlier suppression, Gram preservation.

Conventions: every MSE is the mean over all entries (batch, patches and
channels); per-image quantities are averaged over the batch.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from . import tensor as T
from .linalg import row_quantiles
from .tensor import Tensor
from .vit import FeatureMap, truncated_normal


class LossError(ValueError):
    pass


@dataclass
class Projection:
    """Bias-free linear map from student width to teacher width."""

    layer: int
    weight: Tensor  # (D_S, D_T)

    def __call__(self, x) -> Tensor:
        tokens = x.tokens if isinstance(x, FeatureMap) else T.as_tensor(x)
        return tokens @ self.weight


def make_projection(layer: int, d_student: int, d_teacher: int, seed: int) -> Projection:
    rng = np.random.default_rng([seed, 7919, layer])
    return Projection(layer, Tensor(truncated_normal(rng, (d_student, d_teacher)), requires_grad=True))


def _tokens(x) -> Tensor:
    return x.tokens if isinstance(x, FeatureMap) else T.as_tensor(x)


@dataclass
class LossBreakdown:
    kd: float
    outlier: float
    info: float
    total: float
    per_layer: dict[int, dict[str, float]] = field(default_factory=dict)
    outlier_term: float = 0.0
    inlier_term: float = 0.0
    tensor: Tensor | None = field(default=None, repr=False)


# -- knowledge distillation --------------------------------------------------


def layer_kd(f_hat, f_s, projection: Projection) -> Tensor:
    target = _tokens(f_hat)
    pred = projection(f_s)
    if pred.shape != target.shape:
        raise LossError(f"projected student {pred.shape} does not match teacher {target.shape}")
    return T.mse(target, pred)


def kd_loss(f_hat: Mapping[int, object], f_s: Mapping[int, object], projections: Mapping[int, Projection]) -> Tensor:
    """Sum over layers of MSE(refined teacher, projected student)."""
    if set(f_hat) != set(f_s) or set(f_hat) != set(projections):
        raise LossError(f"layer keys differ: {sorted(f_hat)} / {sorted(f_s)} / {sorted(projections)}")
    terms = [layer_kd(f_hat[l], f_s[l], projections[l]) for l in sorted(f_hat)]
    return _sum(terms)


def _sum(terms: list[Tensor]) -> Tensor:
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total


def partition_kd(f_t, f_s, projection: Projection | None, outlier_idx) -> tuple[float, float]:
    """Split the per-patch feature loss into outlier and inlier sums, each over N.

    ``outlier_idx`` is a set of patch indices (single image) or a boolean mask
    of shape (..., N). With a batch the terms are averaged over images.
    ``projection=None`` means ``f_s`` is already in teacher width.
    """
    t = np.asarray(_tokens(f_t).data, dtype=np.float64)
    s = _tokens(f_s) if projection is None else projection(f_s)
    s = np.asarray(s.data, dtype=np.float64)
    if t.shape != s.shape:
        raise LossError(f"shape mismatch {t.shape} vs {s.shape}")
    N = t.shape[-2]
    if isinstance(outlier_idx, np.ndarray) and outlier_idx.dtype == bool:
        mask = np.broadcast_to(outlier_idx, t.shape[:-1])
    else:
        idx = np.asarray(sorted(outlier_idx), dtype=np.int64)
        if idx.size and (idx.min() < 0 or idx.max() >= N):
            raise LossError(f"outlier index out of range [0, {N})")
        mask = np.zeros(t.shape[:-1], bool)
        mask[..., idx] = True
    per_patch = ((t - s) ** 2).sum(-1)
    out = (per_patch * mask).sum(-1) / N
    inl = (per_patch * ~mask).sum(-1) / N
    return float(np.mean(out)), float(np.mean(inl))


# -- outlier suppression -------------------------------------------------------


def outlier_thresholds(f_hat, alpha: float, method: str = "linear") -> np.ndarray:
    """Per-image alpha-quantile of patch norms of the refined features."""
    if not 0.0 < alpha < 1.0:
        raise LossError(f"alpha must lie in (0, 1), got {alpha}")
    x = _tokens(f_hat).data.astype(np.float64)
    return row_quantiles(np.linalg.norm(x, axis=-1), alpha, method)


def layer_outlier(f_hat, alpha: float, thresholds: np.ndarray | None = None, method: str = "linear") -> Tensor:
    """Mean over images of (1/|O|) sum_{i in O} (||f_i|| - q)^2, q held constant.

    O holds the patches whose norm exceeds the per-image quantile q; images
    with an empty O contribute zero.
    """
    if not 0.0 < alpha < 1.0:
        raise LossError(f"alpha must lie in (0, 1), got {alpha}")
    tokens = _tokens(f_hat)
    if thresholds is None:
        thresholds = outlier_thresholds(tokens, alpha, method)
    q = np.asarray(thresholds, dtype=np.float64)
    norms = T.row_norm(tokens)
    mask = norms.data > q[..., None]
    count = np.maximum(mask.sum(-1), 1)
    dtype = tokens.dtype
    excess = norms - Tensor(np.broadcast_to(q[..., None], norms.shape).astype(dtype))
    weighted = excess * excess * Tensor((mask / count[..., None]).astype(dtype))
    per_image = T.sum_(weighted, axis=-1)
    return T.mean(per_image)


def outlier_loss(f_hats: Mapping[int, object], alpha: float = 0.95, thresholds: Mapping[int, np.ndarray] | None = None,
                 method: str = "linear") -> Tensor:
    terms = [
        layer_outlier(f_hats[l], alpha, None if thresholds is None else thresholds[l], method) for l in sorted(f_hats)
    ]
    return _sum(terms)


# -- information preservation --------------------------------------------------


def gram_matrix(x: Tensor, normalize: bool = True) -> Tensor:
    """Patch Gram matrix F F^T, optionally of row-normalised features."""
    if normalize:
        n = T.row_norm(x, eps=1e-12)
        x = x / n.reshape(*n.shape, 1)
    return x @ T.swapaxes(x, -1, -2)


def layer_info(f_hat_cmp, f_cmp, normalize: bool = True) -> Tensor:
    """MSE between Gram matrices of the refined and reference features."""
    a, b = _tokens(f_hat_cmp), _tokens(f_cmp)
    if a.shape != b.shape:
        raise LossError(f"shape mismatch {a.shape} vs {b.shape}")
    return T.mse(gram_matrix(a, normalize), gram_matrix(b, normalize))


def info_loss(f_hat: Mapping[int, object], f: Mapping[int, object], final_layer: int,
              f_hat_next: Mapping[int, object] | None = None, f_next: Mapping[int, object] | None = None,
              normalize: bool = True) -> Tensor:
    """Sum of Gram-matching terms over layers.

    The final layer compares refined and original features directly; every
    other layer compares the next block's outputs on refined vs. original
    input, which the caller supplies in ``f_hat_next`` / ``f_next``.
    """
    terms = []
    for l in sorted(f_hat):
        if l == final_layer:
            terms.append(layer_info(f_hat[l], f[l], normalize))
        else:
            if f_hat_next is None or f_next is None or l not in f_hat_next or l not in f_next:
                raise LossError(f"missing next-block features for intermediate layer {l}")
            terms.append(layer_info(f_hat_next[l], f_next[l], normalize))
    return _sum(terms)


# -- combination ---------------------------------------------------------------


def total_loss(kd: Tensor, outlier: Tensor | float, info: Tensor | float, lambda_out: float = 1.0,
               lambda_info: float = 1.0, per_layer: dict | None = None, outlier_term: float = 0.0,
               inlier_term: float = 0.0) -> LossBreakdown:
    """Weighted sum kd + lambda_out * outlier + lambda_info * info."""
    total = T.as_tensor(kd)
    if lambda_out:
        total = total + T.as_tensor(outlier) * lambda_out
    if lambda_info:
        total = total + T.as_tensor(info) * lambda_info
    vals = [float(np.asarray(getattr(v, "data", v))) for v in (kd, outlier, info)]
    for v in vals:
        if not np.isfinite(v):
            raise T.NonFiniteError("loss component is not finite")
    return LossBreakdown(
        kd=vals[0],
        outlier=vals[1],
        info=vals[2],
        total=vals[0] + lambda_out * vals[1] + lambda_info * vals[2],
        per_layer=per_layer or {},
        outlier_term=outlier_term,
        inlier_term=inlier_term,
        tensor=total,
    )
