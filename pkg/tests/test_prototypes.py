import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.stats import special_ortho_group

from crl.prototypes import PrototypeSet, compute_prototypes, cosine_knowledge, ncm_predict


def brute_force_nearest(q, vectors, ids):
    best, best_d = None, None
    for v, c in sorted(zip(vectors, ids), key=lambda t: t[1]):
        d = sum((a - b) ** 2 for a, b in zip(q, v))
        if best_d is None or d < best_d:
            best, best_d = c, d
    return best


def test_single_member_prototype_is_member():
    ps = compute_prototypes({3: [[0.2, 0.4]], 7: [[1.0, -1.0]]})
    np.testing.assert_array_equal(ps.vectors, [[0.2, 0.4], [1.0, -1.0]])
    assert ps.class_ids == [3, 7] and ps.counts.tolist() == [1, 1]


def test_prototype_is_mean():
    ps = compute_prototypes({0: [[1.0, 0.0], [0.0, 1.0]]})
    np.testing.assert_array_equal(ps.vectors[0], [0.5, 0.5])


def test_prototypes_match_naive_accumulation(rng):
    members = {c: rng.normal(size=(5, 4)) for c in range(3)}
    ps = compute_prototypes(members)
    for c, rows in members.items():
        acc = [0.0] * 4
        for r in rows:
            for j in range(4):
                acc[j] += r[j]
        np.testing.assert_allclose(ps.vectors[c], np.array(acc) / len(rows), atol=1e-12)


def test_empty_class_rejected():
    with pytest.raises(ValueError):
        compute_prototypes({0: np.zeros((0, 2))})


def test_cosine_orthogonal_and_opposite():
    a = cosine_knowledge(np.array([[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0]]))
    np.testing.assert_array_equal(np.diag(a), 1.0)
    assert a[0, 1] == 0.0 and a[0, 2] == -1.0


def test_cosine_zero_norm_rejected():
    with pytest.raises(ValueError):
        cosine_knowledge(np.array([[0.0, 0.0], [1.0, 0.0]]))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_cosine_symmetric_and_scale_invariant(seed):
    rng = np.random.default_rng(seed)
    p = rng.normal(size=(5, 3))
    a = cosine_knowledge(p)
    assert np.max(np.abs(a - a.T)) <= 1e-9
    assert np.max(np.abs(np.diag(a) - 1)) <= 1e-9
    scales = rng.uniform(0.01, 100, size=(5, 1))
    assert np.max(np.abs(cosine_knowledge(p * scales) - a)) <= 1e-9
    p7 = p.copy(); p7[2] *= 7
    assert np.max(np.abs(cosine_knowledge(p7) - a)) <= 1e-9


def test_ncm_examples():
    ps = PrototypeSet([0, 1], np.array([[1.0, 0.0], [0.0, 1.0]]), np.array([1, 1]))
    assert ncm_predict(np.array([0.9, 0.1]), ps) == 0
    single = PrototypeSet([4], np.array([[0.3, 0.3]]), np.array([2]))
    assert ncm_predict(np.array([-5.0, 9.0]), single) == 4


def test_ncm_tie_goes_to_smallest_id():
    ps = PrototypeSet([9, 2], np.array([[1.0, 0.0], [-1.0, 0.0]]), np.array([1, 1]))
    assert ncm_predict(np.array([0.0, 1.0]), ps) == 2


def test_ncm_agrees_with_brute_force(rng):
    vecs = rng.normal(size=(10, 4))
    ids = list(rng.permutation(50)[:10])
    ps = PrototypeSet(ids, vecs, np.ones(10, int))
    queries = rng.normal(size=(100, 4))
    pred = ncm_predict(queries, ps)
    assert all(pred[i] == brute_force_nearest(q, vecs, ids) for i, q in enumerate(queries))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 4))
def test_ncm_rotation_invariant(seed, d):
    rng = np.random.default_rng(seed)
    vecs = rng.normal(size=(6, d))
    ps = PrototypeSet(list(range(6)), vecs, np.ones(6, int))
    R = special_ortho_group.rvs(d, random_state=seed)
    q = rng.normal(size=(20, d))
    rotated = PrototypeSet(list(range(6)), vecs @ R.T, np.ones(6, int))
    np.testing.assert_array_equal(ncm_predict(q, ps), ncm_predict(q @ R.T, rotated))


def test_ncm_prototype_maps_to_itself(rng):
    vecs = rng.normal(size=(8, 3))
    ps = PrototypeSet(list(range(8)), vecs, np.ones(8, int))
    assert ncm_predict(vecs, ps).tolist() == list(range(8))


def test_ncm_dimension_mismatch():
    ps = PrototypeSet([0], np.zeros((1, 3)), np.array([1]))
    with pytest.raises(ValueError):
        ncm_predict(np.zeros(2), ps)
