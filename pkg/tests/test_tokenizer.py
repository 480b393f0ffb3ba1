import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from structalign.synthgen import GeneratorConfig, generate, ideal_helix, random_rotation
from structalign.tokenizer import (
    DESCRIPTOR_DIM,
    Codebook,
    assign,
    descriptor,
    descriptors,
    fit_codebook,
    fit_corpus_codebook,
    kmeans_objective,
    nearest_partners,
    tokenize,
)


@pytest.fixture(scope="module")
def corpus():
    return generate(GeneratorConfig(n_proteins=60, seed=4))


def brute_nearest(x, i):
    best, arg = np.inf, None
    for j in range(len(x)):
        if abs(i - j) < 2:
            continue
        d = round(float(np.linalg.norm(x[i] - x[j])), 6)
        if d < best:
            best, arg = d, j
    return arg


def test_helix_interior_partner_is_three_apart():
    x = ideal_helix(20)
    for i in range(4, 16):
        j = brute_nearest(x, i)
        assert abs(j - i) == 3
        assert nearest_partners(x)[i] == j


def test_nearest_partner_matches_brute_force(corpus):
    x = corpus[0].coords
    np.testing.assert_array_equal(nearest_partners(x), [brute_nearest(x, i) for i in range(len(x))])


def test_descriptor_rigid_invariance_and_ends(corpus):
    x = corpus[1].coords
    R = random_rotation(np.random.default_rng(3))
    y = x @ R.T + 4.0
    np.testing.assert_allclose(descriptors(x), descriptors(y), atol=1e-9)
    d0 = descriptor(x, 0)
    assert d0.shape == (DESCRIPTOR_DIM,) and np.isfinite(d0).all()
    assert np.isfinite(descriptor(x, len(x) - 1)).all()


def test_descriptor_errors():
    with pytest.raises(ValueError):
        descriptors(ideal_helix(3))
    with pytest.raises(IndexError):
        descriptor(ideal_helix(6), 6)


def test_k_equal_m_has_zero_error():
    x = np.random.default_rng(0).normal(size=(7, 3))
    cb = fit_codebook(x, K=7, seed=0)
    assert kmeans_objective(x, cb.centroids) == pytest.approx(0.0, abs=1e-20)


def test_fit_errors():
    with pytest.raises(ValueError):
        fit_codebook(np.zeros((3, 2)), K=4)
    with pytest.raises(ValueError):
        fit_codebook(np.zeros((10, 2)), K=3)  # fewer distinct points than K


@given(st.integers(0, 10_000), st.integers(2, 8))
@settings(max_examples=25, deadline=None)
def test_objective_non_increasing(seed, K):
    x = np.random.default_rng(seed).normal(size=(60, 4))
    hist = []
    fit_codebook(x, K=K, seed=seed, history=hist)
    assert all(b <= a + 1e-9 for a, b in zip(hist, hist[1:]))


def test_assign_ties_go_to_lower_id():
    c = np.array([[1.0, 0.0], [-1.0, 0.0]])
    assert assign(np.array([[0.0, 0.0]]), c).tolist() == [0]
    assert assign(np.array([[0.0, 0.0]]), c[::-1]).tolist() == [0]


def test_descriptor_at_centroid_maps_to_it(corpus):
    cb = fit_corpus_codebook(corpus[:20], K=20, seed=0)
    d = descriptors(corpus[0].coords)
    cb2 = Codebook(np.vstack([d[5], cb.centroids[1:]]))
    assert tokenize(corpus[0].coords, cb2)[5] == 0


def test_tokenize_invariance_determinism_and_balance(corpus):
    cb = fit_corpus_codebook(corpus, K=20, seed=0)
    x = corpus[2].coords
    R = random_rotation(np.random.default_rng(8))
    np.testing.assert_array_equal(tokenize(x, cb), tokenize(x @ R.T - 2.0, cb))
    np.testing.assert_array_equal(tokenize(x, cb), tokenize(x, cb))
    all_tokens = np.concatenate([tokenize(r.coords, cb) for r in corpus])
    assert np.bincount(all_tokens).max() / len(all_tokens) < 0.6


def test_ideal_helix_interior_is_a_constant_run(corpus):
    cb = fit_corpus_codebook(corpus, K=20, seed=0)
    x = ideal_helix(24)
    tok = tokenize(x, cb)
    # interior: partner found one turn back, and neither residue nor partner is a chain end
    partner = nearest_partners(x)
    keep = [i for i in range(1, 23) if 0 < partner[i] < i]
    assert len(keep) >= 16
    interior = tok[keep]
    assert np.bincount(interior).max() == len(interior)


def test_identical_neighborhoods_identical_tokens(corpus):
    cb = fit_corpus_codebook(corpus, K=20, seed=0)
    tok = tokenize(ideal_helix(30), cb)
    assert tok[10] == tok[11]


def test_dim_mismatch():
    with pytest.raises(ValueError):
        tokenize(ideal_helix(10), Codebook(np.eye(3)))


def test_codebook_roundtrip(tmp_path, corpus):
    cb = fit_corpus_codebook(corpus[:10], K=20, seed=2)
    cb.save(tmp_path / "cb.json")
    back = Codebook.load(tmp_path / "cb.json")
    np.testing.assert_array_equal(back.centroids, cb.centroids)
    assert back.K == 20 and back.dim == DESCRIPTOR_DIM and back.fit_seed == 2


def test_codebook_sizes_from_the_ablation(corpus):
    descs = np.vstack([descriptors(r.coords) for r in corpus])
    for K in (20, 512):
        cb = fit_codebook(descs, K=K, seed=0)
        assert cb.K == K
        assert len(np.unique(cb.centroids, axis=0)) == K
