import numpy as np
import pytest

from singerlab.adapter import AdapterPair, alignment_energies, init_nullspace, init_random, refine, zeros
from singerlab.linalg import svd
from singerlab.nullspace import report_from_matrix
from singerlab.tensor import Tensor

D, R = 12, 3


@pytest.fixture(scope="module")
def report():
    rng = np.random.default_rng(0)
    return report_from_matrix(rng.standard_normal((D, D)), R, layer=2, source_layer=3)


def _null_adapter(report):
    return init_nullspace(zeros(2, D, R), report)


def test_nullspace_init_is_exact(report):
    a = _null_adapter(report)
    np.testing.assert_array_equal(a.b_down.data, report.null_basis.astype(np.float32))
    np.testing.assert_array_equal(a.b_up.data, report.null_basis.T.astype(np.float32))
    assert np.abs(a.b_down.data.T @ a.b_down.data - np.eye(R)).max() < 1e-5


def test_init_mismatch_errors(report):
    with pytest.raises(ValueError):
        init_nullspace(zeros(1, D, R), report)
    with pytest.raises(ValueError):
        init_nullspace(zeros(2, D, R + 1), report)
    with pytest.raises(ValueError):
        zeros(0, D, D)


def test_delta_rows_obey_null_bound(report):
    a = _null_adapter(report)
    F = np.random.default_rng(1).standard_normal((20, D))
    _, delta = refine(F, a)
    d = delta.data.astype(np.float64)
    bound = report.sigma[D - R]
    assert np.linalg.norm(d @ report.w_tilde) <= bound * np.linalg.norm(d) * (1 + 1e-5)
    # orthogonal projection: delta N N^T = delta
    N = report.null_basis
    assert np.abs(d @ N @ N.T - d).max() < 1e-5


def test_refine_zero_up_is_identity():
    a = AdapterPair(0, Tensor(np.ones((D, R), np.float32)), Tensor(np.zeros((R, D), np.float32)))
    F = np.random.default_rng(2).standard_normal((5, D)).astype(np.float32)
    hat, _ = refine(F, a)
    np.testing.assert_array_equal(hat.data, F)


def test_row_orthogonal_to_null_basis_unchanged(report):
    a = _null_adapter(report)
    row = report.principal_basis[:, 0].astype(np.float32)[None]
    _, delta = refine(row, a)
    assert np.abs(delta.data).max() < 1e-6


def test_refine_matches_loop_oracle():
    rng = np.random.default_rng(3)
    a = init_random(zeros(0, D, R), seed=5, std=0.3)
    F = rng.standard_normal((4, D)).astype(np.float32)
    _, delta = refine(F, a)
    bd, bu = a.b_down.data.astype(np.float64), a.b_up.data.astype(np.float64)
    want = np.zeros((4, D))
    for i in range(4):
        z = [sum(F[i, k] * bd[k, j] for k in range(D)) for j in range(R)]
        for c in range(D):
            want[i, c] = sum(z[j] * bu[j, c] for j in range(R))
    assert np.abs(delta.data - want).max() <= 1e-6


def test_delta_rank_at_most_r():
    a = init_random(zeros(0, D, R), seed=1, std=1.0)
    F = np.random.default_rng(4).standard_normal((30, D))
    _, delta = refine(F, a)
    assert np.sum(svd(delta.data.T @ delta.data).sigma > 1e-6 * svd(delta.data.T @ delta.data).sigma[0]) <= R


def test_refine_width_mismatch():
    with pytest.raises(ValueError):
        refine(np.ones((3, D + 1)), zeros(0, D, R))


def test_random_init_is_seeded_truncated_normal():
    a = init_random(zeros(4, 64, 16), seed=0)
    b = init_random(zeros(4, 64, 16), seed=0)
    assert a.b_down.data.tobytes() == b.b_down.data.tobytes()
    assert np.abs(a.b_up.data).max() <= 0.04 + 1e-7
    assert 0.015 < a.b_up.data.std() < 0.025
    c = init_random(zeros(5, 64, 16), seed=0)
    assert a.b_down.data.tobytes() != c.b_down.data.tobytes()


def test_energies_after_nullspace_init(report):
    e = alignment_energies(_null_adapter(report), report)
    assert e["E_safe_up"] == pytest.approx(1.0, abs=1e-6)
    assert e["E_prob_up"] == pytest.approx(0.0, abs=1e-6)
    assert e["E_safe_down"] == pytest.approx(1.0, abs=1e-6)


def test_energies_two_column_construction(report):
    p, n = report.principal_basis[:, 0], report.null_basis[:, 0]
    phi = np.stack([p, n])  # two rows of a (2, D) up-matrix
    a = AdapterPair(2, Tensor(phi.T.copy()), Tensor(phi.copy()))
    e = alignment_energies(a, report)
    assert e["E_prob_up"] == pytest.approx(np.sqrt(0.5), abs=1e-6)
    assert e["E_safe_up"] == pytest.approx(np.sqrt(0.5), abs=1e-6)


def test_energies_rotation_invariant(report):
    from dataclasses import replace

    a = init_random(zeros(2, D, R), seed=3, std=0.5)
    q = svd(np.random.default_rng(5).standard_normal((R, R))).U
    rotated = replace(report, null_basis=report.null_basis @ q, principal_basis=report.principal_basis @ q)
    e1, e2 = alignment_energies(a, report), alignment_energies(a, rotated)
    for k in e1:
        assert e1[k] == pytest.approx(e2[k], abs=1e-6)
        assert 0.0 <= e1[k] <= 1 + 1e-6


def test_energies_reject_zero():
    with pytest.raises(ValueError):
        alignment_energies(zeros(2, D, R), report_from_matrix(np.eye(D) + np.diag(np.arange(D)), R, layer=2))
