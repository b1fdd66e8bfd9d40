import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from singerlab import tensor as T
from singerlab.losses import (
    LossError,
    Projection,
    gram_matrix,
    info_loss,
    kd_loss,
    layer_info,
    layer_outlier,
    make_projection,
    outlier_loss,
    partition_kd,
    total_loss,
)
from singerlab.tensor import Tensor
from singerlab.vit import FeatureMap

from .oracles import type7_quantile

rng = np.random.default_rng(0)


def _t(a):
    return Tensor(np.asarray(a, dtype=np.float64), dtype=np.float64)


def _identity(layer, d):
    return Projection(layer, _t(np.eye(d)))


def test_kd_perfect_match_and_offset():
    f = rng.standard_normal((2, 5, 4))
    assert float(kd_loss({3: _t(f)}, {3: _t(f)}, {3: _identity(3, 4)}).data) == 0.0
    got = float(kd_loss({3: _t(f + 0.7)}, {3: _t(f)}, {3: _identity(3, 4)}).data)
    assert got == pytest.approx(0.49, abs=1e-12)


def test_kd_matches_per_patch_loop():
    f_hat = {1: rng.standard_normal((6, 8)), 3: rng.standard_normal((6, 8))}
    f_s = {1: rng.standard_normal((6, 4)), 3: rng.standard_normal((6, 4))}
    projs = {l: Projection(l, _t(rng.standard_normal((4, 8)))) for l in f_hat}
    got = float(kd_loss({l: _t(v) for l, v in f_hat.items()}, {l: _t(v) for l, v in f_s.items()}, projs).data)
    want = 0.0
    for l in f_hat:
        P = projs[l].weight.data
        for i in range(6):
            diff = f_hat[l][i] - f_s[l][i] @ P
            want += float(diff @ diff) / (6 * 8)
    assert got == pytest.approx(want, rel=1e-12)


def test_kd_key_and_shape_errors():
    with pytest.raises(LossError):
        kd_loss({1: _t(np.ones((2, 4)))}, {2: _t(np.ones((2, 4)))}, {1: _identity(1, 4)})
    with pytest.raises(LossError):
        kd_loss({1: _t(np.ones((2, 4)))}, {1: _t(np.ones((2, 3)))}, {1: _identity(1, 3)})


def test_kd_gradient_wrt_projected_student():
    f_hat = rng.standard_normal((5, 6))
    ps = Tensor(rng.standard_normal((5, 6)), requires_grad=True, dtype=np.float64)
    loss = kd_loss({0: _t(f_hat)}, {0: ps}, {0: _identity(0, 6)})
    loss.backward()
    np.testing.assert_allclose(ps.grad, 2.0 / ps.data.size * (ps.data - f_hat), atol=1e-12)


def test_kd_accepts_feature_maps():
    f = rng.standard_normal((3, 4))
    fm = FeatureMap(0, _t(f), _t(np.zeros(4)))
    assert float(kd_loss({0: fm}, {0: fm}, {0: _identity(0, 4)}).data) == 0.0


def test_projection_init():
    p = make_projection(5, 32, 64, seed=0)
    assert p.weight.shape == (32, 64) and p.weight.requires_grad
    assert np.abs(p.weight.data).max() <= 0.04 + 1e-7
    assert make_projection(5, 32, 64, 0).weight.data.tobytes() == p.weight.data.tobytes()


# -- partition ---------------------------------------------------------------------


def test_partition_sums_to_kd_and_edge_sets():
    ft, fs = rng.standard_normal((8, 5)), rng.standard_normal((8, 5))
    kd = float(T.mse(_t(ft), _t(fs)).data) * 5  # entry-mean times D gives the per-patch mean
    o, i = partition_kd(ft, fs, None, {1, 4})
    assert o + i == pytest.approx(kd, rel=1e-12)
    assert partition_kd(ft, fs, None, set())[0] == 0.0
    assert partition_kd(ft, fs, None, set(range(8)))[1] == 0.0
    with pytest.raises(LossError):
        partition_kd(ft, fs, None, {8})


def test_partition_with_projection_and_mask():
    ft = rng.standard_normal((2, 6, 4))
    fs = rng.standard_normal((2, 6, 3))
    P = Projection(0, _t(rng.standard_normal((3, 4))))
    mask = np.zeros((2, 6), bool)
    mask[:, 0] = True
    o, i = partition_kd(ft, fs, P, mask)
    per = ((ft - fs @ P.weight.data) ** 2).sum(-1)
    assert o == pytest.approx(per[:, 0].sum() / 6 / 2)
    assert i == pytest.approx(per[:, 1:].sum() / 6 / 2)


# -- outlier loss ------------------------------------------------------------------


def test_outlier_constant_norms_zero():
    f = np.tile(np.array([[3.0, 4.0]]), (10, 1))
    assert float(layer_outlier(_t(f), 0.95).data) == 0.0


def test_outlier_hand_example():
    # norms (1,1,1,1,11): put each norm on the first axis
    f = np.zeros((5, 3))
    f[:, 0] = [1, 1, 1, 1, 11]
    q = type7_quantile([1, 1, 1, 1, 11], 0.75)
    assert q == 1.0
    assert float(layer_outlier(_t(f), 0.75).data) == pytest.approx((11 - q) ** 2)


def test_outlier_threshold_is_not_differentiated():
    f = Tensor(np.array([[1.0, 0.0], [2.0, 0.0], [3.0, 0.0], [10.0, 0.0]]), requires_grad=True, dtype=np.float64)
    loss = layer_outlier(f, 0.5)
    loss.backward()
    q = 2.5
    # only the patches above q receive gradient: d/dx (x - q)^2 / |O| with |O| = 2
    np.testing.assert_allclose(f.grad[:, 0], [0, 0, (3 - q), (10 - q)], atol=1e-12)


def test_outlier_sum_over_layers_and_alpha_errors():
    a = np.zeros((4, 2))
    a[:, 0] = [1, 1, 1, 5]
    total = float(outlier_loss({0: _t(a), 1: _t(a)}, alpha=0.5).data)
    assert total == pytest.approx(2 * float(layer_outlier(_t(a), 0.5).data))
    with pytest.raises(LossError):
        layer_outlier(_t(a), 1.0)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(0.1, 50), min_size=4, max_size=20), st.floats(0.5, 0.95))
def test_outlier_zero_iff_nothing_above_quantile(norms, alpha):
    f = np.zeros((len(norms), 2))
    f[:, 1] = norms
    loss = float(layer_outlier(_t(f), alpha).data)
    q = type7_quantile(norms, alpha)
    if max(norms) <= q:
        assert loss == 0.0
    else:
        assert loss > 0.0


# -- info loss ------------------------------------------------------------------


def test_info_identity_and_scale_invariance():
    f = rng.standard_normal((2, 6, 4))
    assert float(layer_info(_t(f), _t(f)).data) == 0.0
    assert float(layer_info(_t(2 * f), _t(f)).data) == pytest.approx(0.0, abs=1e-14)
    scales = rng.uniform(0.5, 3.0, (2, 6, 1))
    assert float(layer_info(_t(f * scales), _t(f)).data) == pytest.approx(0.0, abs=1e-14)
    assert float(layer_info(_t(2 * f), _t(f), normalize=False).data) > 0


def test_info_matches_gram_loop():
    a, b = rng.standard_normal((5, 3)), rng.standard_normal((5, 3))
    an = a / np.linalg.norm(a, axis=1, keepdims=True)
    bn = b / np.linalg.norm(b, axis=1, keepdims=True)
    total = 0.0
    for i in range(5):
        for j in range(5):
            total += (an[i] @ an[j] - bn[i] @ bn[j]) ** 2
    assert float(layer_info(_t(a), _t(b)).data) == pytest.approx(total / 25, rel=1e-12)
    np.testing.assert_allclose(gram_matrix(_t(a), normalize=False).data, a @ a.T)


def test_info_loss_routes_intermediate_layers():
    f = {1: rng.standard_normal((4, 3)), 3: rng.standard_normal((4, 3))}
    nxt = rng.standard_normal((4, 3))
    got = info_loss({l: _t(v) for l, v in f.items()}, {l: _t(v) for l, v in f.items()}, final_layer=3,
                    f_hat_next={1: _t(nxt)}, f_next={1: _t(nxt + 1.0)})
    assert float(got.data) == pytest.approx(float(layer_info(_t(nxt), _t(nxt + 1.0)).data))
    with pytest.raises(LossError):
        info_loss({1: _t(f[1])}, {1: _t(f[1])}, final_layer=3)


def test_losses_permutation_equivariant():
    perm = rng.permutation(6)
    a, b = rng.standard_normal((6, 4)), rng.standard_normal((6, 4))
    a[2] *= 8
    P = _identity(0, 4)
    assert float(kd_loss({0: _t(a)}, {0: _t(b)}, {0: P}).data) == pytest.approx(
        float(kd_loss({0: _t(a[perm])}, {0: _t(b[perm])}, {0: P}).data))
    assert float(layer_outlier(_t(a), 0.8).data) == pytest.approx(float(layer_outlier(_t(a[perm]), 0.8).data))
    assert float(layer_info(_t(a), _t(b)).data) == pytest.approx(float(layer_info(_t(a[perm]), _t(b[perm])).data))


# -- total -------------------------------------------------------------------------


def test_total_loss_weights():
    kd, out, info = _t(2.0), _t(3.0), _t(5.0)
    assert total_loss(kd, out, info).total == pytest.approx(10.0)
    assert total_loss(kd, out, info, 0.0, 0.0).total == 2.0
    one = total_loss(kd, out, info, 1.0, 0.0).total - 2.0
    two = total_loss(kd, out, info, 2.0, 0.0).total - 2.0
    assert two == 2 * one
    b = total_loss(kd, out, info, 0.5, 0.25)
    assert abs(b.total - (b.kd + 0.5 * b.outlier + 0.25 * b.info)) <= 1e-6
    assert float(b.tensor.data) == pytest.approx(b.total)
