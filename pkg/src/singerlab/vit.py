"""Desk-scale Pre-LN Vision Transformer with an instrumented block and artifact injection."""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .tensor import Tensor


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class ModelSpec:
    depth: int = 8
    dim: int = 64
    heads: int = 4
    mlp_ratio: int = 4
    patch: int = 4
    image: int = 32
    num_classes: int = 8
    channels: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.depth < 1:
            raise ModelError("depth must be >= 1")
        if self.dim % self.heads:
            raise ModelError(f"dim {self.dim} is not divisible by heads {self.heads}")
        if self.image % self.patch:
            raise ModelError(f"image {self.image} is not divisible by patch {self.patch}")

    @property
    def grid(self) -> int:
        return self.image // self.patch

    @property
    def num_patches(self) -> int:
        return self.grid**2

    @property
    def hidden(self) -> int:
        return self.mlp_ratio * self.dim


@dataclass(frozen=True)
class ArtifactPlan:
    layers: tuple[int, ...]
    fraction: float
    gain: float
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(sorted(set(int(l) for l in self.layers))))
        if not 0.0 < self.fraction < 1.0:
            raise ModelError("artifact fraction must lie in (0, 1)")
        if self.gain <= 1.0:
            raise ModelError("artifact gain must exceed 1")

    def count(self, num_patches: int) -> int:
        return max(1, math.ceil(self.fraction * num_patches - 1e-9))


@dataclass
class FeatureMap:
    """Patch tokens of one layer; ``tokens`` is (..., N, D) with CLS removed."""

    layer: int
    tokens: Tensor
    cls: Tensor

    def __getitem__(self, i) -> FeatureMap:
        return FeatureMap(self.layer, self.tokens[i], self.cls[i])

    def numpy(self) -> np.ndarray:
        return self.tokens.data


def truncated_normal(rng: np.random.Generator, shape, std: float = 0.02, bound: float = 2.0) -> np.ndarray:
    out = rng.standard_normal(shape)
    bad = np.abs(out) > bound
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > bound
    return (out * std).astype(np.float32)


def _param_shapes(spec: ModelSpec) -> list[tuple[str, tuple[int, ...], str]]:
    D, H, P = spec.dim, spec.hidden, spec.channels * spec.patch**2
    shapes = [
        ("patch_embed.weight", (P, D), "normal"),
        ("patch_embed.bias", (D,), "zeros"),
        ("cls_token", (1, 1, D), "normal"),
        ("pos_embed", (1, 1 + spec.num_patches, D), "normal"),
    ]
    for l in range(spec.depth):
        b = f"blocks.{l}."
        shapes += [
            (b + "ln1.weight", (D,), "ones"),
            (b + "ln1.bias", (D,), "zeros"),
        ]
        for name in ("wq", "wk", "wv", "wo"):
            shapes += [(b + f"attn.{name}", (D, D), "normal"), (b + f"attn.b{name[1]}", (D,), "zeros")]
        shapes += [
            (b + "ln2.weight", (D,), "ones"),
            (b + "ln2.bias", (D,), "zeros"),
            (b + "ffn.w1", (D, H), "normal"),
            (b + "ffn.b1", (H,), "zeros"),
            (b + "ffn.w2", (H, D), "normal"),
            (b + "ffn.b2", (D,), "zeros"),
        ]
    shapes += [
        ("norm.weight", (D,), "ones"),
        ("norm.bias", (D,), "zeros"),
        ("head.weight", (D, spec.num_classes), "normal"),
        ("head.bias", (spec.num_classes,), "zeros"),
    ]
    return shapes


@dataclass
class VitModel:
    spec: ModelSpec
    params: dict[str, Tensor]
    artifact_plan: ArtifactPlan | None = None
    artifact_dirs: dict[int, np.ndarray] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def p(self, name: str) -> Tensor:
        return self.params[name]

    def requires_grad_(self, flag: bool = True) -> VitModel:
        for t in self.params.values():
            t.requires_grad = flag
        return self

    def trainable(self) -> list[Tensor]:
        return [t for t in self.params.values() if t.requires_grad]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}

    def copy(self) -> VitModel:
        params = {k: Tensor(v.data.copy()) for k, v in self.params.items()}
        return VitModel(self.spec, params, self.artifact_plan, dict(self.artifact_dirs), dict(self.meta))

    def astype(self, dtype) -> VitModel:
        params = {k: Tensor(v.data.astype(dtype)) for k, v in self.params.items()}
        dirs = {k: v.copy() for k, v in self.artifact_dirs.items()}
        return VitModel(self.spec, params, self.artifact_plan, dirs, dict(self.meta))


def build(spec: ModelSpec) -> VitModel:
    """Initialise weights from a truncated normal (std 0.02), zero biases, unit LN gains."""
    rng = np.random.default_rng(spec.seed)
    params = {}
    for name, shape, kind in _param_shapes(spec):
        if kind == "normal":
            arr = truncated_normal(rng, shape)
        elif kind == "ones":
            arr = np.ones(shape, np.float32)
        else:
            arr = np.zeros(shape, np.float32)
        params[name] = Tensor(arr)
    return VitModel(spec, params)


def from_state(spec: ModelSpec, state: dict[str, np.ndarray]) -> VitModel:
    expected = {n: s for n, s, _ in _param_shapes(spec)}
    missing = set(expected) - set(state)
    if missing:
        raise ModelError(f"state is missing tensors: {sorted(missing)[:5]}")
    params = {}
    for name, shape in expected.items():
        arr = np.asarray(state[name])
        if arr.shape != shape:
            raise ModelError(f"{name}: expected shape {shape}, got {arr.shape}")
        params[name] = Tensor(arr)
    return VitModel(spec, params)


# -- forward pieces -----------------------------------------------------------


def patchify(images: np.ndarray, patch: int) -> np.ndarray:
    """(B, C, H, W) -> (B, N, C*patch*patch) in row-major patch order."""
    B, C, H, W = images.shape
    g_h, g_w = H // patch, W // patch
    x = images.reshape(B, C, g_h, patch, g_w, patch)
    x = x.transpose(0, 2, 4, 1, 3, 5)
    return x.reshape(B, g_h * g_w, C * patch * patch)


def embed(model: VitModel, images) -> Tensor:
    spec = model.spec
    images = np.asarray(getattr(images, "data", images))
    if images.ndim != 4 or images.shape[1:] != (spec.channels, spec.image, spec.image):
        raise ModelError(
            f"expected images of shape (B, {spec.channels}, {spec.image}, {spec.image}), got {images.shape}"
        )
    dtype = model.p("patch_embed.weight").dtype
    patches = Tensor(patchify(images, spec.patch).astype(dtype))
    x = patches @ model.p("patch_embed.weight") + model.p("patch_embed.bias")
    cls = model.p("cls_token") + Tensor(np.zeros((len(images), 1, spec.dim), dtype))
    x = T.concat([cls, x], axis=1)
    return x + model.p("pos_embed")


def attention(model: VitModel, layer: int, h: Tensor) -> Tensor:
    spec = model.spec
    pre = f"blocks.{layer}.attn."
    B, S, D = h.shape
    nh, dh = spec.heads, D // spec.heads

    def heads(t: Tensor) -> Tensor:
        return T.transpose(t.reshape(B, S, nh, dh), (0, 2, 1, 3))

    q = heads(h @ model.p(pre + "wq") + model.p(pre + "bq"))
    k = heads(h @ model.p(pre + "wk") + model.p(pre + "bk"))
    v = heads(h @ model.p(pre + "wv") + model.p(pre + "bv"))
    scores = (q @ T.swapaxes(k, -1, -2)) * (1.0 / math.sqrt(dh))
    ctx = T.softmax(scores, axis=-1) @ v
    ctx = T.transpose(ctx, (0, 2, 1, 3)).reshape(B, S, D)
    return ctx @ model.p(pre + "wo") + model.p(pre + "bo")


def _check_layer(model: VitModel, layer: int) -> None:
    if not 0 <= layer < model.spec.depth:
        raise ModelError(f"layer {layer} out of range [0, {model.spec.depth})")


def forward_block_instrumented(model: VitModel, layer: int, x_in) -> dict[str, Tensor]:
    """One Pre-LN block with every intermediate exposed.

    ``x_in`` holds CLS plus patch tokens, shape (..., 1+N, D).
    """
    _check_layer(model, layer)
    x_in = T.as_tensor(x_in)
    squeeze = x_in.ndim == 2
    if squeeze:
        x_in = x_in.reshape(1, *x_in.shape)
    b = f"blocks.{layer}."
    h0 = T.layernorm(x_in, model.p(b + "ln1.weight"), model.p(b + "ln1.bias"))
    x_sa = x_in + attention(model, layer, h0)
    h1 = T.layernorm(x_sa, model.p(b + "ln2.weight"), model.p(b + "ln2.bias"))
    z1 = h1 @ model.p(b + "ffn.w1") + model.p(b + "ffn.b1")
    a1 = T.gelu(z1)
    z2 = a1 @ model.p(b + "ffn.w2") + model.p(b + "ffn.b2")
    x_out = x_sa + z2
    out = {"x_in": x_in, "x_SA": x_sa, "h1": h1, "z1": z1, "a1": a1, "z2": z2, "x_out": x_out}
    if squeeze:
        out = {k: v[0] for k, v in out.items()}
    return out


def block(model: VitModel, layer: int, x) -> Tensor:
    return forward_block_instrumented(model, layer, x)["x_out"]


def image_keys(images: np.ndarray) -> np.ndarray:
    """Content hash per image; keys the artifact position draw."""
    images = np.ascontiguousarray(np.asarray(images, dtype=np.float32))
    return np.array([zlib.crc32(img.tobytes()) for img in images], dtype=np.uint64)


def forward_tokens(
    model: VitModel, images, taps, keys: np.ndarray | None = None, inject: bool = True
) -> dict[int, Tensor]:
    """Full token tensors (B, 1+N, D) after each tapped block."""
    taps = sorted(set(int(t) for t in taps))
    for t in taps:
        _check_layer(model, t)
    x = embed(model, images)
    plan = model.artifact_plan if inject else None
    if plan is not None and keys is None:
        keys = image_keys(np.asarray(getattr(images, "data", images)))
    out = {}
    last = taps[-1] if taps else -1
    for l in range(last + 1):
        x = block(model, l, x)
        if plan is not None and l in plan.layers:
            x = apply_artifacts(model, l, x, keys)
        if l in taps:
            out[l] = x
    return out


def forward_features(model: VitModel, images, taps) -> dict[int, FeatureMap]:
    tokens = forward_tokens(model, images, taps)
    return {l: FeatureMap(l, x[:, 1:], x[:, 0]) for l, x in tokens.items()}


def classify(model: VitModel, images) -> Tensor:
    """Logits from the final-norm CLS token."""
    x = forward_tokens(model, images, [model.spec.depth - 1])[model.spec.depth - 1]
    x = T.layernorm(x, model.p("norm.weight"), model.p("norm.bias"))
    return x[:, 0] @ model.p("head.weight") + model.p("head.bias")


def pooled_features(model: VitModel, images, batch: int = 256) -> np.ndarray:
    """Mean-pooled final-norm patch tokens, (B, D)."""
    last = model.spec.depth - 1
    outs = []
    with T.no_grad():
        for i in range(0, len(images), batch):
            x = forward_tokens(model, images[i : i + batch], [last])[last]
            x = T.layernorm(x, model.p("norm.weight"), model.p("norm.bias"))
            outs.append(x.data[:, 1:].mean(axis=1))
    return np.concatenate(outs).astype(np.float64)


# -- artifacts ---------------------------------------------------------------


def linearized_ffn(model: VitModel, layer: int) -> np.ndarray:
    """W1 @ W2 of one block, float64, row-vector convention."""
    _check_layer(model, layer)
    w1 = model.p(f"blocks.{layer}.ffn.w1").data.astype(np.float64)
    w2 = model.p(f"blocks.{layer}.ffn.w2").data.astype(np.float64)
    return w1 @ w2


def basis_layer(model: VitModel, layer: int) -> int:
    """Block whose linearised FFN defines the basis used at ``layer``.

    The next block when it exists, the block itself for the last layer.
    """
    _check_layer(model, layer)
    return layer + 1 if layer + 1 < model.spec.depth else layer


def inject_artifacts(model: VitModel, plan: ArtifactPlan) -> VitModel:
    """Return a model whose forward plants high-norm tokens per ``plan``.

    Weights are shared with ``model``. At each planned layer the selected patch
    tokens are pushed along the leading left singular vector of the
    linearised FFN that consumes them, until their norm is ``plan.gain`` times
    the median patch norm of that image.
    """
    from .linalg import svd

    for l in plan.layers:
        if not 0 <= l < model.spec.depth:
            raise ModelError(f"artifact layer {l} is not a model layer")
        if plan.count(model.spec.num_patches) >= model.spec.num_patches:
            raise ModelError("artifact plan would corrupt every patch token")
    dirs = {}
    for l in plan.layers:
        res = svd(linearized_ffn(model, basis_layer(model, l)))
        dirs[l] = res.U[:, 0].copy()
    return VitModel(model.spec, model.params, plan, dirs, dict(model.meta))


def artifact_positions(plan: ArtifactPlan, layer: int, key: int, num_patches: int) -> np.ndarray:
    rng = np.random.default_rng([plan.seed, layer, int(key)])
    return np.sort(rng.choice(num_patches, size=plan.count(num_patches), replace=False))


def apply_artifacts(model: VitModel, layer: int, x: Tensor, keys: np.ndarray) -> Tensor:
    plan = model.artifact_plan
    u = model.artifact_dirs[layer]
    tokens = x.data[:, 1:].astype(np.float64)
    B, N, D = tokens.shape
    offset = np.zeros(x.shape, dtype=np.float64)
    for b in range(B):
        pos = artifact_positions(plan, layer, keys[b], N)
        norms = np.linalg.norm(tokens[b], axis=-1)
        rest = np.delete(norms, pos)
        # the planted tokens land above the median, so count them as +inf
        target = plan.gain * np.median(np.concatenate([rest, np.full(len(pos), np.inf)]))
        for p in pos:
            t = tokens[b, p]
            tu = t @ u
            disc = tu * tu - t @ t + target * target
            c = -tu + math.sqrt(max(disc, 0.0))
            offset[b, 1 + p] = c * u
    return x + Tensor(offset.astype(x.dtype))


def planted_mask(model: VitModel, images: np.ndarray, layer: int) -> np.ndarray:
    """Boolean (B, N) mask of the tokens planted at ``layer``."""
    plan = model.artifact_plan
    N = model.spec.num_patches
    keys = image_keys(images)
    mask = np.zeros((len(images), N), bool)
    if plan is None or layer not in plan.layers:
        return mask
    for b, k in enumerate(keys):
        mask[b, artifact_positions(plan, layer, k, N)] = True
    return mask


def without_artifacts(model: VitModel) -> VitModel:
    return replace(model, artifact_plan=None, artifact_dirs={})
