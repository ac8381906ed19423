"""Alignment penalty: hand-computed values, mode products, and gradient checks.

Expected values are worked out on paper for tiny inputs; gradients are
checked against central finite differences of the value function alone,
so a bug would have to corrupt both paths identically to pass.
"""

import numpy as np
import pytest

from modelpipe.reuse import (
    DimensionMismatch,
    TransformSet,
    mode_product,
    reuse_penalty_tensor,
    reuse_penalty_tensor_grads,
    reuse_penalty_vec,
    reuse_penalty_vec_grads,
)

I2 = np.eye(2)


def numeric_grad(value_fn, arr, eps=1e-6):
    """Central finite differences of value_fn() w.r.t. arr, mutated in place."""
    grad = np.zeros_like(arr, dtype=np.float64)
    flat = arr.ravel()
    gflat = grad.ravel()
    for i in range(flat.size):
        saved = flat[i]
        flat[i] = saved + eps
        plus = value_fn()
        flat[i] = saved - eps
        minus = value_fn()
        flat[i] = saved
        gflat[i] = (plus - minus) / (2.0 * eps)
    return grad


# --- hand-computed values ----------------------------------------------------------


def test_vector_penalty_single_source_by_hand():
    # resid = [1,3] - I @ [1,2] = [0,1]; squared norm 1.
    value = reuse_penalty_vec([1.0, 2.0], [[1.0, 3.0]], [I2], [1.0])
    assert value == pytest.approx(1.0, abs=1e-15)


def test_vector_penalty_two_sources_by_hand():
    # Each residual is [±1, ±1] with squared norm 2; weights halve them.
    value = reuse_penalty_vec(
        [1.0, 1.0],
        [[0.0, 0.0], [2.0, 2.0]],
        [I2, I2],
        [0.5, 0.5],
    )
    assert value == pytest.approx(2.0, abs=1e-15)


def test_vector_penalty_zero_iff_exact():
    rng = np.random.default_rng(0)
    v = rng.normal(size=(3, 4))
    zt = rng.normal(size=(5, 4))
    assert reuse_penalty_vec(zt, [zt @ v.T], [v], [1.0]) == pytest.approx(0.0, abs=1e-18)
    assert reuse_penalty_vec(zt, [zt @ v.T + 0.01], [v], [1.0]) > 0.0


def test_vector_penalty_sums_over_batch():
    rng = np.random.default_rng(1)
    v = rng.normal(size=(3, 4))
    zt = rng.normal(size=(6, 4))
    zs = rng.normal(size=(6, 3))
    whole = reuse_penalty_vec(zt, [zs], [v], [1.0])
    per_row = sum(reuse_penalty_vec(zt[i], [zs[i]], [v], [1.0]) for i in range(6))
    assert whole == pytest.approx(per_row, rel=1e-12)


def test_tensor_penalty_two_mode_by_hand():
    # mode_product(I, (2I, I)) = 2I exactly cancels the source, so zero.
    value = reuse_penalty_tensor(I2, [2.0 * I2], [(2.0 * I2, I2)], [1.0])
    assert value == pytest.approx(0.0, abs=1e-15)
    # Dropping the scaling leaves resid = 2I - I = I with squared norm 2.
    value = reuse_penalty_tensor(I2, [2.0 * I2], [(I2, I2)], [1.0])
    assert value == pytest.approx(2.0, abs=1e-15)


def test_single_mode_tensor_equals_vector_path():
    rng = np.random.default_rng(2)
    zt = rng.normal(size=(7, 5))
    zs = [rng.normal(size=(7, 3)), rng.normal(size=(7, 4))]
    vs = [rng.normal(size=(3, 5)), rng.normal(size=(4, 5))]
    alpha = [0.7, 1.3]
    vec = reuse_penalty_vec(zt, zs, vs, alpha)
    ten = reuse_penalty_tensor(zt, zs, [(v,) for v in vs], alpha)
    assert ten == pytest.approx(vec, rel=1e-12)


def test_penalty_is_never_negative():
    rng = np.random.default_rng(3)
    for _ in range(25):
        zt = rng.normal(size=(4, 3))
        zs = rng.normal(size=(4, 5))
        v = rng.normal(size=(5, 3))
        assert reuse_penalty_vec(zt, [zs], [v], [rng.uniform(0, 2)]) >= 0.0


# --- mode products -----------------------------------------------------------------


def test_mode_product_order_one_is_matmul():
    rng = np.random.default_rng(4)
    z = rng.normal(size=(6, 4))
    v = rng.normal(size=(3, 4))
    np.testing.assert_allclose(mode_product(z, (v,)), z @ v.T, rtol=1e-14)


def test_mode_product_order_two_matches_loop():
    rng = np.random.default_rng(5)
    z = rng.normal(size=(5, 3, 4))
    v1 = rng.normal(size=(2, 3))
    v2 = rng.normal(size=(6, 4))
    want = np.stack([v1 @ z[n] @ v2.T for n in range(5)])
    np.testing.assert_allclose(mode_product(z, (v1, v2)), want, rtol=1e-13)


def test_mode_product_rejects_order_three():
    with pytest.raises(DimensionMismatch):
        mode_product(np.zeros((1, 2, 2, 2)), (I2, I2, I2))


# --- shape policing ----------------------------------------------------------------


def test_vector_penalty_rejects_bad_map_shape():
    with pytest.raises(DimensionMismatch):
        reuse_penalty_vec([1.0, 2.0], [[1.0, 2.0, 3.0]], [np.zeros((2, 2))], [1.0])


def test_vector_penalty_rejects_batch_mismatch():
    with pytest.raises(DimensionMismatch):
        reuse_penalty_vec(np.zeros((3, 2)), [np.zeros((4, 2))], [I2], [1.0])


def test_penalty_rejects_weight_count_mismatch():
    with pytest.raises(DimensionMismatch):
        reuse_penalty_vec([1.0, 2.0], [[1.0, 2.0]], [I2], [0.5, 0.5])


def test_penalty_rejects_negative_weights():
    with pytest.raises(ValueError):
        reuse_penalty_vec([1.0, 2.0], [[1.0, 2.0]], [I2], [-1.0])


def test_tensor_penalty_rejects_mixed_orders():
    zs = [np.zeros((1, 2)), np.zeros((1, 2, 2))]
    with pytest.raises(DimensionMismatch):
        reuse_penalty_tensor(np.zeros((1, 2)), zs, [(I2,), (I2, I2)], [1.0, 1.0])


def test_tensor_penalty_rejects_no_sources():
    with pytest.raises(DimensionMismatch):
        reuse_penalty_tensor(np.zeros((1, 2)), [], [], [])


# --- gradient checks ---------------------------------------------------------------


def test_vector_gradients_match_finite_differences():
    rng = np.random.default_rng(6)
    zt = rng.normal(size=(3, 4))
    zs = [rng.normal(size=(3, 2)), rng.normal(size=(3, 5))]
    vs = [rng.normal(size=(2, 4)), rng.normal(size=(5, 4))]
    alpha = [0.8, 1.7]
    value, dz, dvs = reuse_penalty_vec_grads(zt, zs, vs, alpha)
    assert value == pytest.approx(reuse_penalty_vec(zt, zs, vs, alpha), rel=1e-14)
    np.testing.assert_allclose(
        dz, numeric_grad(lambda: reuse_penalty_vec(zt, zs, vs, alpha), zt),
        rtol=1e-6, atol=1e-8,
    )
    for m in range(2):
        np.testing.assert_allclose(
            dvs[m], numeric_grad(lambda: reuse_penalty_vec(zt, zs, vs, alpha), vs[m]),
            rtol=1e-6, atol=1e-8,
        )


def test_tensor_gradients_match_finite_differences():
    rng = np.random.default_rng(7)
    zt = rng.normal(size=(2, 3, 4))
    zs = [rng.normal(size=(2, 2, 5))]
    mats = [(rng.normal(size=(2, 3)), rng.normal(size=(5, 4)))]
    alpha = [1.2]
    value, dz, dvs = reuse_penalty_tensor_grads(zt, zs, mats, alpha)
    assert value == pytest.approx(reuse_penalty_tensor(zt, zs, mats, alpha), rel=1e-14)
    np.testing.assert_allclose(
        dz, numeric_grad(lambda: reuse_penalty_tensor(zt, zs, mats, alpha), zt),
        rtol=1e-6, atol=1e-8,
    )
    for q in range(2):
        np.testing.assert_allclose(
            dvs[0][q],
            numeric_grad(lambda: reuse_penalty_tensor(zt, zs, mats, alpha), mats[0][q]),
            rtol=1e-6, atol=1e-8,
        )


def test_single_mode_tensor_gradients_match_vector_gradients():
    rng = np.random.default_rng(8)
    zt = rng.normal(size=(4, 3))
    zs = [rng.normal(size=(4, 2))]
    v = rng.normal(size=(2, 3))
    _, dz_vec, dvs_vec = reuse_penalty_vec_grads(zt, zs, [v], [0.9])
    _, dz_ten, dvs_ten = reuse_penalty_tensor_grads(zt, zs, [(v,)], [0.9])
    np.testing.assert_allclose(dz_ten, dz_vec, rtol=1e-13)
    np.testing.assert_allclose(dvs_ten[0][0], dvs_vec[0], rtol=1e-13)


def test_unbatched_input_matches_batch_of_one():
    rng = np.random.default_rng(9)
    zt = rng.normal(size=4)
    zs = [rng.normal(size=3)]
    v = rng.normal(size=(3, 4))
    single_value, single_dz, _ = reuse_penalty_vec_grads(zt, zs, [v], [1.0])
    batch_value, batch_dz, _ = reuse_penalty_vec_grads(zt[None], [zs[0][None]], [v], [1.0])
    assert single_value == pytest.approx(batch_value, rel=1e-15)
    assert single_dz.shape == (4,)
    np.testing.assert_allclose(single_dz, batch_dz[0], rtol=1e-15)


# --- transform bookkeeping ---------------------------------------------------------


def test_transform_set_copy_is_deep():
    mats = TransformSet([[(I2.copy(),), (I2.copy(), I2.copy())]])
    dup = mats.copy()
    dup.mats[0][0][0][0, 0] = 99.0
    assert mats.mats[0][0][0][0, 0] == 1.0
    assert mats.order(0, 0) == 1
    assert mats.order(0, 1) == 2
