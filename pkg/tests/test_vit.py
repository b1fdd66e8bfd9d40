import math

import numpy as np
import pytest

from singerlab import tensor as T
from singerlab.data import generate
from singerlab.vit import (
    ArtifactPlan,
    ModelError,
    ModelSpec,
    attention,
    build,
    embed,
    forward_block_instrumented,
    forward_features,
    forward_tokens,
    inject_artifacts,
    linearized_ffn,
    planted_mask,
    without_artifacts,
)

SMALL = ModelSpec(depth=3, dim=16, heads=2, mlp_ratio=2, patch=4, image=16, num_classes=8, seed=3)


@pytest.fixture(scope="module")
def images():
    return generate(0, 16).images[:, :, :16, :16].copy()


def test_spec_invariants():
    assert ModelSpec().num_patches == 64
    with pytest.raises(ModelError):
        ModelSpec(dim=30, heads=4)
    with pytest.raises(ModelError):
        ModelSpec(image=30, patch=4)
    with pytest.raises(ModelError):
        ModelSpec(depth=0)


def test_build_is_deterministic_and_shaped():
    a, b = build(SMALL), build(SMALL)
    for k in a.params:
        assert a.params[k].data.tobytes() == b.params[k].data.tobytes()
    assert a.p("blocks.0.ffn.w1").shape == (16, 32)
    assert a.p("blocks.0.ffn.w2").shape == (32, 16)
    assert np.all(a.p("blocks.1.ffn.b1").data == 0)
    w = a.p("blocks.0.attn.wq").data
    assert np.abs(w).max() <= 0.04 + 1e-7
    assert 0.01 < w.std() < 0.03


def test_forward_features_shapes(images):
    m = build(SMALL)
    out = forward_features(m, images, {SMALL.depth - 1})
    assert list(out) == [2]
    assert out[2].tokens.shape == (16, 16, 16)
    assert out[2].cls.shape == (16, 16)
    with pytest.raises(ModelError):
        forward_features(m, images, {3})
    with pytest.raises(ModelError):
        forward_features(m, images[:, :, :8], {0})


def test_zero_image_zero_pos_embed_gives_identical_tokens():
    m = build(SMALL)
    m.params["pos_embed"] = T.Tensor(np.zeros_like(m.p("pos_embed").data))
    out = forward_features(m, np.zeros((1, 1, 16, 16), np.float32), range(3))
    for fm in out.values():
        tok = fm.tokens.data[0]
        assert np.allclose(tok, tok[0], atol=1e-6)


def test_instrumented_block_reproduces_forward(images):
    m = build(SMALL)
    toks = forward_tokens(m, images, [0, 1])
    parts = forward_block_instrumented(m, 1, toks[0])
    assert np.abs(parts["x_out"].data - toks[1].data).max() <= 1e-6
    # residual identity holds exactly
    assert np.array_equal((parts["x_out"] - parts["x_SA"]).data, parts["z2"].data) or np.abs(
        parts["x_out"].data - parts["x_SA"].data - parts["z2"].data
    ).max() <= 1e-6


def test_instrumented_attention_and_gelu_recomputed(images):
    m = build(SMALL).astype(np.float64)
    x = embed(m, images[:2])
    parts = forward_block_instrumented(m, 0, x)
    h0 = T.layernorm(x, m.p("blocks.0.ln1.weight"), m.p("blocks.0.ln1.bias"))
    # attention recomputed head by head with plain numpy
    hd = h0.data
    D, nh = SMALL.dim, SMALL.heads
    dh = D // nh
    p = lambda n: m.p(f"blocks.0.attn.{n}").data
    q, k, v = hd @ p("wq") + p("bq"), hd @ p("wk") + p("bk"), hd @ p("wv") + p("bv")
    ctx = np.zeros_like(hd)
    for b in range(hd.shape[0]):
        for h in range(nh):
            sl = slice(h * dh, (h + 1) * dh)
            s = q[b, :, sl] @ k[b, :, sl].T / math.sqrt(dh)
            s = np.exp(s - s.max(axis=1, keepdims=True))
            s /= s.sum(axis=1, keepdims=True)
            ctx[b, :, sl] = s @ v[b, :, sl]
    mha = ctx @ p("wo") + p("bo")
    assert np.abs(parts["x_SA"].data - x.data - mha).max() <= 1e-6
    z1 = parts["z1"].data
    scalar = np.vectorize(T.gelu_scalar)(z1)
    assert np.abs(parts["a1"].data - scalar).max() <= 1e-9
    # single-sequence input is accepted
    single = forward_block_instrumented(m, 0, x[0])
    assert np.abs(single["x_out"].data - parts["x_out"].data[0]).max() <= 1e-12


def test_block_permutation_equivariance():
    m = build(SMALL)
    rng = np.random.default_rng(0)
    x = rng.standard_normal((1, 17, 16)).astype(np.float32)
    perm = rng.permutation(17)
    out = forward_block_instrumented(m, 0, x)["x_out"].data
    out_p = forward_block_instrumented(m, 0, x[:, perm])["x_out"].data
    assert np.abs(out[:, perm] - out_p).max() <= 1e-5


def test_linearized_ffn_matches_loop_product():
    from .oracles import loop_matmul

    m = build(SMALL)
    w1 = m.p("blocks.1.ffn.w1").data.astype(np.float64)
    w2 = m.p("blocks.1.ffn.w2").data.astype(np.float64)
    np.testing.assert_allclose(linearized_ffn(m, 1), loop_matmul(w1, w2), rtol=1e-10, atol=1e-14)


# -- artifacts -----------------------------------------------------------------------


def _norm_ratio(model, images, layer):
    toks = forward_tokens(model, images, [layer])[layer].data[:, 1:].astype(np.float64)
    norms = np.linalg.norm(toks, axis=-1)
    mask = planted_mask(model, images, layer)
    return norms, mask


def test_single_token_plan_count():
    plan = ArtifactPlan(layers=(1,), fraction=1 / 64, gain=10.0)
    assert plan.count(64) == 1
    assert ArtifactPlan(layers=(1,), fraction=0.05, gain=10.0).count(64) == 4


def test_plan_validation():
    with pytest.raises(ModelError):
        ArtifactPlan(layers=(1,), fraction=0.0, gain=10.0)
    with pytest.raises(ModelError):
        ArtifactPlan(layers=(1,), fraction=0.1, gain=1.0)
    with pytest.raises(ModelError):
        inject_artifacts(build(SMALL), ArtifactPlan(layers=(5,), fraction=0.1, gain=10.0))


def test_injected_norm_ratio_on_100_images():
    spec = ModelSpec(depth=3, dim=32, heads=2, mlp_ratio=2, seed=1)
    m = inject_artifacts(build(spec), ArtifactPlan(layers=(1,), fraction=1 / 64, gain=10.0, seed=4))
    imgs = generate(5, 100).images
    norms, mask = _norm_ratio(m, imgs, 1)
    assert mask.sum(axis=1).tolist() == [1] * 100
    ratio = norms[mask] / np.median(norms, axis=1)
    assert ratio.min() >= 9.5 and ratio.max() <= 10.5


def test_injected_tokens_exceed_quantile_at_gain_3():
    spec = ModelSpec(depth=3, dim=32, heads=2, mlp_ratio=2, seed=1)
    m = inject_artifacts(build(spec), ArtifactPlan(layers=(1,), fraction=0.05, gain=3.0, seed=0))
    imgs = generate(6, 100).images
    norms, mask = _norm_ratio(m, imgs, 1)
    q = np.quantile(norms, 0.95, axis=1)
    assert np.all(norms[mask] > q.repeat(mask.sum(1)))


def test_injection_direction_is_top_singular_vector_of_next_ffn():
    from singerlab.linalg import svd

    m = inject_artifacts(build(SMALL), ArtifactPlan(layers=(0,), fraction=0.1, gain=5.0))
    u = svd(linearized_ffn(m, 1)).U[:, 0]
    assert np.allclose(m.artifact_dirs[0], u)


def test_injection_deterministic_and_removable(images):
    plan = ArtifactPlan(layers=(1,), fraction=0.1, gain=5.0, seed=2)
    base = build(SMALL)
    a = forward_tokens(inject_artifacts(base, plan), images, [2])[2].data
    b = forward_tokens(inject_artifacts(build(SMALL), plan), images, [2])[2].data
    assert a.tobytes() == b.tobytes()
    clean = forward_tokens(without_artifacts(inject_artifacts(base, plan)), images, [2])[2].data
    assert clean.tobytes() == forward_tokens(base, images, [2])[2].data.tobytes()
    assert not np.allclose(a, clean)


def test_clean_forward_independent_of_plan_seed(images):
    base = build(SMALL)
    x = forward_tokens(without_artifacts(inject_artifacts(base, ArtifactPlan((1,), 0.1, 5.0, seed=1))), images, [2])
    y = forward_tokens(without_artifacts(inject_artifacts(base, ArtifactPlan((1,), 0.1, 5.0, seed=9))), images, [2])
    assert x[2].data.tobytes() == y[2].data.tobytes()


def test_attention_output_shape():
    m = build(SMALL)
    h = T.Tensor(np.ones((2, 17, 16), np.float32))
    assert attention(m, 0, h).shape == (2, 17, 16)
