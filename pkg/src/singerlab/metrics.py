"""Representation metrics: Gram distance, linear CKA, patch cosine, norm tables, linear probe."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .linalg import row_quantiles

NORM_QUANTILES = {"min": 0.0, "median": 0.5, "p90": 0.9, "p95": 0.95, "p99": 0.99, "max": 1.0}


class MetricError(ValueError):
    pass


def _arr(F) -> np.ndarray:
    x = getattr(F, "tokens", F)
    return np.asarray(getattr(x, "data", x), dtype=np.float64)


def summary(values) -> dict[str, float]:
    v = np.asarray(values, dtype=np.float64).ravel()
    return {"mean": float(v.mean()), "std": float(v.std()), "median": float(np.median(v))}


@dataclass
class MetricReport:
    gram_distance: dict[str, float] = field(default_factory=dict)
    cka: float | None = None
    cosine: dict[str, float] = field(default_factory=dict)
    norm_summary: dict[str, dict[str, float]] = field(default_factory=dict)
    probe_accuracy: float | None = None
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def gram(F) -> np.ndarray:
    """Raw Gram matrix F F^T over patches, (..., N, N)."""
    x = _arr(F)
    return x @ np.swapaxes(x, -1, -2)


def gram_distance(F1, F2) -> np.ndarray:
    """Frobenius distance between raw Gram matrices; one value per image."""
    a, b = _arr(F1), _arr(F2)
    if a.shape[:-1] != b.shape[:-1]:
        raise MetricError(f"patch layouts differ: {a.shape} vs {b.shape}")
    d = gram(a) - gram(b)
    return np.sqrt((d * d).sum(axis=(-1, -2)))


def cka(F1, F2) -> np.ndarray:
    """Linear CKA with column centring; one value per image."""
    a, b = _arr(F1), _arr(F2)
    if a.shape[:-1] != b.shape[:-1]:
        raise MetricError(f"patch layouts differ: {a.shape} vs {b.shape}")
    if a.shape[-2] < 2:
        raise MetricError("CKA needs at least two patches")
    a = a - a.mean(axis=-2, keepdims=True)
    b = b - b.mean(axis=-2, keepdims=True)
    cross = np.swapaxes(a, -1, -2) @ b
    aa = np.swapaxes(a, -1, -2) @ a
    bb = np.swapaxes(b, -1, -2) @ b
    na = np.sqrt((aa * aa).sum(axis=(-1, -2)))
    nb = np.sqrt((bb * bb).sum(axis=(-1, -2)))
    if np.any(na == 0) or np.any(nb == 0):
        raise MetricError("CKA undefined for zero-variance features")
    return (cross * cross).sum(axis=(-1, -2)) / (na * nb)


def patch_cosine(F1, F2) -> tuple[np.ndarray, int]:
    """Per-image mean cosine over matched patches; zero-norm patches skipped.

    Returns the per-image means and the number of skipped patches.
    """
    a, b = _arr(F1), _arr(F2)
    if a.shape != b.shape:
        raise MetricError(f"shape mismatch {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[None], b[None]
    na = np.linalg.norm(a, axis=-1)
    nb = np.linalg.norm(b, axis=-1)
    valid = (na > 0) & (nb > 0)
    cos = (a * b).sum(-1) / np.where(valid, na * nb, 1.0)
    counts = valid.sum(-1)
    per_image = np.where(counts > 0, (cos * valid).sum(-1) / np.maximum(counts, 1), np.nan)
    per_image = per_image[counts > 0]
    return np.clip(per_image, -1.0, 1.0), int((~valid).sum())


def patch_cosine_stats(F1, F2) -> dict[str, float]:
    per_image, skipped = patch_cosine(F1, F2)
    out = summary(per_image)
    out["skipped"] = skipped
    return out


def norm_stats(F, alpha: float = 0.95) -> dict:
    """Patch-norm quantile table (pooled over images) and per-image outlier flags.

    A patch is flagged when its norm exceeds its own image's alpha-quantile.
    """
    x = _arr(F)
    if x.ndim == 2:
        x = x[None]
    norms = np.linalg.norm(x, axis=-1)
    pooled = norms.ravel()
    table = {k: float(np.quantile(pooled, q)) for k, q in NORM_QUANTILES.items()}
    q = row_quantiles(norms, alpha)
    flags = norms > q[:, None]
    return {"quantiles": table, "threshold": q, "flags": flags, "norms": norms}


def norm_map(F, grid: int) -> np.ndarray:
    """Patch norms laid out on the (grid, grid) patch lattice."""
    x = _arr(F)
    return np.linalg.norm(x, axis=-1).reshape(*x.shape[:-2], grid, grid)


def cross_similarity_map(F1, F2, index: int, grid: int) -> np.ndarray:
    """Cosine between patch ``index`` of F1 and every patch of F2, on the patch lattice."""
    a, b = _arr(F1), _arr(F2)
    q = a[..., index, :]
    num = (b * q[..., None, :]).sum(-1)
    den = np.linalg.norm(b, axis=-1) * np.linalg.norm(q, axis=-1)[..., None]
    return (num / np.maximum(den, 1e-30)).reshape(*b.shape[:-2], grid, grid)


# -- linear probe -----------------------------------------------------------------


def _softmax_regression(x: np.ndarray, y: np.ndarray, classes: int, epochs: int, lr: float) -> np.ndarray:
    W = np.zeros((x.shape[1] + 1, classes))
    xb = np.hstack([x, np.ones((len(x), 1))])
    onehot = np.eye(classes)[y]
    for _ in range(epochs):
        z = xb @ W
        z -= z.max(axis=1, keepdims=True)
        p = np.exp(z)
        p /= p.sum(axis=1, keepdims=True)
        W -= lr * xb.T @ (p - onehot) / len(x)
    return W


def linear_probe(features, labels, folds: int = 5, epochs: int = 200, lr: float = 0.1, seed: int = 0,
                 classes: int | None = None) -> float:
    """Held-out accuracy of a softmax-regression probe, averaged over k folds.

    Features are standardised with training-fold statistics, then the probe
    is fit by full-batch gradient descent without regularisation.
    """
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if x.ndim != 2 or len(x) != len(y):
        raise MetricError("features must be (M, D) with one label per row")
    classes = int(classes or (y.max() + 1))
    if len(np.unique(y)) < 2:
        raise MetricError("linear probe needs at least two distinct labels")
    if len(x) < 10 * classes:
        raise MetricError(f"need at least {10 * classes} samples for {classes} classes, got {len(x)}")
    order = np.random.default_rng(seed).permutation(len(x))
    splits = np.array_split(order, folds)
    accs = []
    for k in range(folds):
        test = splits[k]
        train = np.concatenate([splits[j] for j in range(folds) if j != k])
        mu = x[train].mean(axis=0)
        sd = x[train].std(axis=0)
        sd = np.where(sd > 1e-12, sd, 1.0)
        W = _softmax_regression((x[train] - mu) / sd, y[train], classes, epochs, lr)
        xt = np.hstack([(x[test] - mu) / sd, np.ones((len(test), 1))])
        accs.append(float(np.mean(np.argmax(xt @ W, axis=1) == y[test])))
    return float(np.mean(accs))
