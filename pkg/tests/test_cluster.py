import math

import numpy as np
import pytest

from spgra2seq.cluster import ClusterError, ClusterState, assign, assign_labels, init_centroids, update


def cones(K, d, n_per, rng, spread=0.05):
    """K nearly orthogonal axes and n_per noisy members around each."""
    axes = np.linalg.qr(rng.normal(size=(d, K)))[0].T
    pts = np.concatenate([a + spread * rng.normal(size=(n_per, d)) for a in axes])
    return axes, pts


def test_assign_equal_to_centroid():
    state = ClusterState(np.eye(4, dtype=np.float32))
    assert assign_labels(np.array([[0, 0, 0, 1.0]]), state)[0] == 3


def test_assign_hand_example():
    state = ClusterState(np.array([[1, 0], [0, 1]], np.float32))
    q = assign(np.array([[0.6, 0.8]]), state)
    np.testing.assert_array_equal(q, [[0, 1]])  # the second cluster (cos 0.8 > 0.6)


def test_assign_scale_invariant_and_ties():
    rng = np.random.default_rng(0)
    state = ClusterState(rng.normal(size=(5, 3)).astype(np.float32))
    v = rng.normal(size=(20, 3))
    np.testing.assert_array_equal(assign_labels(v, state), assign_labels(v * 13.7, state))
    tie = ClusterState(np.array([[1, 0], [1, 0]], np.float32))
    assert assign_labels(np.array([[2.0, 0.0]]), tie)[0] == 0


def test_zero_embedding_goes_to_cluster_zero_and_is_excluded():
    state = ClusterState(np.array([[1, 0], [0, 1]], np.float32))
    v = np.array([[0.0, 0.0], [0.0, 2.0]])
    q = assign(v, state)
    assert q[0].argmax() == 0
    new = update(v, q, state)
    np.testing.assert_array_equal(new.centroids[0], state.centroids[0])


def test_zero_centroid_never_wins():
    state = ClusterState(np.array([[0, 0], [3, 0]], np.float32))
    assert assign_labels(np.array([[3.0, 4.0]]), state)[0] == 1


def test_uninitialised_state_rejected():
    with pytest.raises(ClusterError):
        assign(np.ones((2, 2)), None)


def test_update_full_replacement_with_eta_one():
    state = ClusterState(np.array([[1, 0], [0, 1]], np.float32), eta=1.0)
    v = np.array([[0.2, 0.9]])
    new = update(v, assign(v, state), state)
    np.testing.assert_allclose(new.centroids[1], [0.2, 0.9], rtol=1e-6)


def test_update_ema_arithmetic():
    state = ClusterState(np.array([[1, 0]], np.float32), eta=0.05)
    q = np.ones((1, 1))
    new = update(np.array([[0.0, 1.0]]), q, state)
    np.testing.assert_allclose(new.centroids[0], [0.95, 0.05], rtol=1e-6)
    assert new.tau == state.tau + 1


def test_empty_cluster_bitwise_unchanged():
    cents = np.array([[1, 0], [0, 1], [0.3, -0.7]], np.float32)
    state = ClusterState(cents.copy())
    v = np.array([[1.0, 0.1], [0.9, 0.0]])
    new = update(v, assign(v, state), state)
    assert new.centroids[1].tobytes() == cents[1].tobytes()
    assert new.centroids[2].tobytes() == cents[2].tobytes()


def test_update_excludes_flagged_rows():
    state = ClusterState(np.array([[1, 0]], np.float32), eta=1.0)
    v = np.array([[0.0, 1.0], [1.0, 1.0]])
    new = update(v, np.ones((2, 1)), state, exclude=[True, False])
    np.testing.assert_allclose(new.centroids[0], [1, 1])


def test_ema_contraction_halves_error():
    eta = 0.05
    state = ClusterState(np.array([[1.0, 0.0]], np.float32), eta=eta)
    target = np.array([[0.0, 1.0]])
    q = np.ones((1, 1))
    half = math.ceil(math.log(2) / eta)
    assert half == 14
    err0 = np.linalg.norm(state.centroids[0] - target[0])
    for _ in range(half):
        state = update(target, q, state)
    err = np.linalg.norm(state.centroids[0] - target[0])
    assert err <= err0 / 2
    assert err == pytest.approx(err0 * (1 - eta) ** half, rel=1e-4)


def test_init_k1_is_a_batch_member():
    v = np.random.default_rng(0).normal(size=(10, 4))
    state = init_centroids(v, 1, seed=3)
    assert any(np.allclose(state.centroids[0], row, atol=1e-6) for row in v)


def test_init_exhausts_orthogonal_set():
    v = np.eye(5)
    state = init_centroids(v, 5, seed=1)
    assert not state.padded
    np.testing.assert_array_equal(np.sort(state.centroids.argmax(axis=1)), np.arange(5))
    np.testing.assert_allclose(np.abs(state.centroids).sum(axis=1), 1)


def test_init_deterministic_and_pads_duplicates():
    v = np.random.default_rng(2).normal(size=(30, 6))
    a = init_centroids(v, 4, seed=9)
    b = init_centroids(v, 4, seed=9)
    np.testing.assert_array_equal(a.centroids, b.centroids)
    dup = np.repeat(np.eye(3)[:2], 5, axis=0)
    padded = init_centroids(dup, 4, seed=0)
    assert padded.padded and padded.centroids.shape == (4, 3)
    assert np.isfinite(padded.centroids).all()


def test_init_rejects_all_zero_batch():
    with pytest.raises(ClusterError):
        init_centroids(np.zeros((4, 3)), 2)


def test_state_dict_roundtrip():
    state = ClusterState(np.random.default_rng(0).normal(size=(3, 4)).astype(np.float32), 0.05, 17)
    d = state.state_dict()
    assert set(d) == {"cluster/centroid/0", "cluster/centroid/1", "cluster/centroid/2", "cluster/tau", "cluster/eta"}
    back = ClusterState.from_state_dict(d)
    np.testing.assert_array_equal(back.centroids, state.centroids)
    assert back.tau == 17 and back.eta == 0.05


def test_cone_recovery_short():
    rng = np.random.default_rng(4)
    axes, _ = cones(3, 8, 1, rng)
    state = init_centroids(np.concatenate([a + 0.05 * rng.normal(size=(4, 8)) for a in axes]), 3, seed=0)
    for _ in range(100):
        batch = np.concatenate([a + 0.05 * rng.normal(size=(8, 8)) for a in axes])
        state = update(batch, assign(batch, state), state)
    unit = state.centroids / np.linalg.norm(state.centroids, axis=1, keepdims=True)
    assert (np.abs(unit @ axes.T).max(axis=1) >= 0.98).all()


def test_no_nan_for_finite_inputs():
    rng = np.random.default_rng(8)
    state = init_centroids(rng.normal(size=(20, 5)), 6, seed=0)
    for _ in range(50):
        batch = rng.normal(size=(16, 5)) * rng.uniform(0, 100)
        batch[::5] = 0
        state = update(batch, assign(batch, state), state)
        assert np.isfinite(state.centroids).all()
