import math
import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from geoanchor.features import LocalFeatureSet
from oracles import naive_vlad

from geoanchor.vlad import (
    DEFAULT_N_C,
    DegenerateDescriptorWarning,
    VladDescriptor,
    Vocabulary,
    build_vocabulary,
    encode,
    kmeans,
    load_vocabulary,
    save_vocabulary,
    similarity,
)


def random_instance(rng):
    n_c = int(rng.integers(2, 5))
    d = int(rng.integers(2, 6))
    n = int(rng.integers(1, 21))
    vocab = Vocabulary(rng.normal(size=(n_c, d)))
    return LocalFeatureSet(rng.normal(size=(n, d))), vocab


def test_corner_square_recovered():
    pts = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])
    vocab = build_vocabulary([LocalFeatureSet(pts)], n_c=4, seed=0)
    assert sorted(map(tuple, vocab.centroids)) == sorted(map(tuple, pts))
    assert vocab.inertia_history[-1] == 0.0


def test_two_blobs_sample_mean_oracle():
    rng = np.random.default_rng(2)
    sigma, m = 0.5, 200
    means = np.array([[0.0, 0.0, 0.0], [20.0, 0.0, 0.0]])
    blobs = [rng.normal(mu, sigma, (m, 3)) for mu in means]
    vocab = build_vocabulary([LocalFeatureSet(b) for b in blobs], n_c=2, seed=1)
    got = vocab.centroids[np.argsort(vocab.centroids[:, 0])]
    for c, blob, mu in zip(got, blobs, means):
        # separated blobs split exactly, so each centroid is its blob's sample mean
        assert np.allclose(c, blob.mean(axis=0), atol=1e-6)
        assert np.all(np.abs(c - mu) < 3 * sigma / math.sqrt(m))


def test_default_n_c():
    assert DEFAULT_N_C == 32


@given(st.integers(0, 10_000))
def test_inertia_monotone_and_deterministic(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(int(rng.integers(10, 60)), 3))
    k = int(rng.integers(2, 8))
    c1, l1, h1 = kmeans(x, k, seed)
    c2, l2, h2 = kmeans(x, k, seed)
    assert np.array_equal(c1, c2) and h1 == h2
    assert all(b <= a + 1e-9 for a, b in zip(h1, h1[1:]))


def test_empty_cluster_reseeded():
    # Duplicate-heavy data makes k-means++ and Lloyd produce empty clusters regularly.
    rng = np.random.default_rng(0)
    x = np.concatenate([np.zeros((30, 2)), rng.normal(5, 1, (8, 2))])
    for seed in range(20):
        c, labels, hist = kmeans(x, 5, seed)
        assert all(b <= a + 1e-9 for a, b in zip(hist, hist[1:]))
        assert np.all(np.isfinite(c))


def test_build_errors():
    with pytest.raises(ValueError, match="insufficient"):
        build_vocabulary([LocalFeatureSet(np.eye(3))], n_c=4)
    with pytest.raises(ValueError, match="inconsistent"):
        build_vocabulary([LocalFeatureSet(np.eye(3)), LocalFeatureSet(np.eye(4))], n_c=2)
    with pytest.raises(ValueError, match="distinct"):
        build_vocabulary([LocalFeatureSet(np.ones((10, 3)))], n_c=2)
    with pytest.raises(ValueError):
        Vocabulary(np.ones((2, 3)))


def test_zero_residual_is_degenerate():
    vocab = Vocabulary(np.array([[0.0, 0.0], [1.0, 0.0]]))
    desc = encode(LocalFeatureSet(np.array([[1.0, 0.0]] * 5)), vocab)
    assert desc.degenerate and not np.any(desc.values)
    with pytest.warns(DegenerateDescriptorWarning):
        assert similarity(desc, desc) == 0.0


def test_single_feature_unit_block():
    vocab = Vocabulary(np.array([[0.0, 0.0], [4.0, 0.0]]))
    desc = encode(LocalFeatureSet(np.array([[4.0, 3.0]])), vocab)
    assert desc.values.tolist() == [0.0, 0.0, 0.0, 1.0]


def test_ten_features_match_oracle():
    rng = np.random.default_rng(10)
    vocab = Vocabulary(rng.normal(size=(4, 5)))
    fs = LocalFeatureSet(rng.normal(size=(10, 5)))
    assert np.allclose(encode(fs, vocab).values, naive_vlad(fs.features.tolist(), vocab.centroids.tolist()), atol=1e-9, rtol=0)


@given(st.integers(0, 100_000))
def test_oracle_permutation_and_norm(seed):
    rng = np.random.default_rng(seed)
    fs, vocab = random_instance(rng)
    desc = encode(fs, vocab)
    oracle = naive_vlad(fs.features.tolist(), vocab.centroids.tolist())
    assert np.allclose(desc.values, oracle, atol=1e-9, rtol=0)
    shuffled = LocalFeatureSet(fs.features[rng.permutation(len(fs))])
    assert np.array_equal(encode(shuffled, vocab).values, desc.values)
    if not desc.degenerate:
        assert abs(np.linalg.norm(desc.values) - 1.0) < 1e-6


def test_dimension_mismatch():
    with pytest.raises(ValueError):
        encode(LocalFeatureSet(np.ones((3, 4))), Vocabulary(np.eye(3)))


def test_similarity_examples():
    rng = np.random.default_rng(4)
    vocab = Vocabulary(rng.normal(size=(3, 4)))
    a = encode(LocalFeatureSet(rng.normal(size=(12, 4))), vocab)
    b = encode(LocalFeatureSet(rng.normal(size=(12, 4))), vocab)
    assert similarity(a, a) == pytest.approx(1.0, abs=1e-12)
    assert similarity(a, -a) == pytest.approx(-1.0, abs=1e-12)
    assert similarity(a, b) == pytest.approx(float(np.dot(a.values, b.values)), abs=1e-9)
    with pytest.raises(ValueError):
        similarity(a, VladDescriptor(np.zeros(6), 2, 3))


def test_vocabulary_round_trip(tmp_path):
    rng = np.random.default_rng(8)
    vocab = build_vocabulary([LocalFeatureSet(rng.normal(size=(100, 6)))], n_c=5, seed=42)
    save_vocabulary(tmp_path / "v.flvb", vocab)
    raw = (tmp_path / "v.flvb").read_bytes()
    assert raw[:4] == b"FLVB" and len(raw) == 4 + 4 + 4 + 8 + 5 * 6 * 4
    back = load_vocabulary(tmp_path / "v.flvb")
    assert np.array_equal(back.centroids, vocab.centroids)
    assert back.build_seed == 42 and back.fingerprint == vocab.fingerprint
    (tmp_path / "bad.flvb").write_bytes(b"NOPE" + raw[4:])
    with pytest.raises(ValueError):
        load_vocabulary(tmp_path / "bad.flvb")
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        assert build_vocabulary([LocalFeatureSet(rng.normal(size=(100, 6)))], n_c=5, seed=1).fingerprint != vocab.fingerprint
