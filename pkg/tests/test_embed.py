import hashlib

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st
from scipy.optimize import brentq

from cloudremoval.embed import (
    AlexNetExtractor,
    EmbeddingPoint,
    GridHistogram,
    HistogramExtractor,
    TsneConfig,
    extract_features,
    grid_histogram,
    kl_divergence,
    kl_gradient,
    make_extractor,
    pairwise_affinities,
    read_feature_cache,
    read_selection,
    render_heatmap,
    tsne_embed,
    uniform_sample,
    write_feature_cache,
    write_selection,
)
from cloudremoval.embed.features import FeatureVector
from cloudremoval.embed.sampling import heatmap_pixels
from cloudremoval.embed.tsne import conditional_probabilities, low_dim_affinities, row_entropies, squared_distances
from cloudremoval.raster_io import BandImage


def _oracle_affinities(X, perplexity):
    """Root-find each row's sigma directly on the entropy equation."""
    n = len(X)
    target = np.log2(perplexity)
    P = np.zeros((n, n))
    for i in range(n):
        d = np.array([np.sum((X[i] - X[j]) ** 2) for j in range(n) if j != i])

        def row(log_sigma):
            w = np.exp(-(d - d.min()) / (2 * np.exp(log_sigma) ** 2))
            return w / w.sum()

        def gap(log_sigma):
            p = row(log_sigma)
            p = p[p > 0]
            return -np.sum(p * np.log2(p)) - target

        s = brentq(gap, -20, 20, xtol=1e-14)
        P[i, [j for j in range(n) if j != i]] = row(s)
    return (P + P.T) / (2 * n)


def test_affinities_two_points():
    P = pairwise_affinities(np.array([[0.0, 0.0], [3.0, 4.0]]), perplexity=1.5)
    assert np.allclose(P, [[0, 0.5], [0.5, 0]])


def test_affinities_equidistant_uniform():
    X = np.eye(4)
    P_cond, _ = conditional_probabilities(squared_distances(X), 2.0)
    off = ~np.eye(4, dtype=bool)
    assert np.allclose(P_cond[off], 1 / 3)


def test_affinities_match_oracle(rng):
    X = rng.normal(size=(10, 5))
    P = pairwise_affinities(X, perplexity=5.0)
    assert np.allclose(P, P.T)
    assert abs(P.sum() - 1) < 1e-12
    assert np.all(np.diag(P) == 0)
    assert np.max(np.abs(P - _oracle_affinities(X, 5.0))) < 1e-3
    P_cond, _ = conditional_probabilities(squared_distances(X), 5.0)
    assert np.max(np.abs(row_entropies(P_cond) - np.log2(5.0))) < 1e-3


def test_affinities_equidistant_up_to_rounding():
    # equilateral triangle distances differ only by floating-point rounding
    X = np.array([[0.0, 0.0], [1.0, 0.0], [0.5, np.sqrt(3) / 2]])
    assert np.allclose(pairwise_affinities(X, 2.0)[~np.eye(3, dtype=bool)], 1 / 6, atol=1e-15)


def test_row_entropy_calibrated(rng):
    X = rng.normal(size=(60, 8))
    P_cond, _ = conditional_probabilities(squared_distances(X), 10.0)
    assert np.max(np.abs(row_entropies(P_cond) - np.log2(10.0))) < 1e-3


def test_perplexity_range_checked(rng):
    with pytest.raises(ValueError):
        pairwise_affinities(rng.normal(size=(5, 2)), perplexity=5)


def test_kl_two_points_closed_form():
    # two points: p12 = q12 = 1/2 over ordered pairs, whatever the distance
    P = np.array([[0, 0.5], [0.5, 0]])
    for dist in (0.1, 1.0, 7.0):
        Y = np.array([[0.0, 0.0], [dist, 0.0]])
        assert np.allclose(low_dim_affinities(Y), P)
        assert abs(kl_divergence(P, Y)) < 1e-15
        assert np.allclose(kl_gradient(P, Y), 0, atol=1e-15)


def test_kl_against_direct_sum(rng):
    P = pairwise_affinities(rng.normal(size=(6, 3)), 2.0)
    Y = rng.normal(size=(6, 2))
    num = np.array([[0 if i == j else 1 / (1 + np.sum((Y[i] - Y[j]) ** 2)) for j in range(6)] for i in range(6)])
    Q = num / num.sum()
    want = sum(P[i, j] * np.log(P[i, j] / Q[i, j]) for i in range(6) for j in range(6) if i != j)
    assert abs(kl_divergence(P, Y) - want) < 1e-12


def test_kl_gradient_finite_difference(rng):
    P = pairwise_affinities(rng.normal(size=(5, 4)), 2.5)
    Y = rng.normal(size=(5, 2))
    grad = kl_gradient(P, Y)
    fd = np.zeros_like(Y)
    h = 1e-6
    for idx in np.ndindex(*Y.shape):
        up, dn = Y.copy(), Y.copy()
        up[idx] += h
        dn[idx] -= h
        fd[idx] = (kl_divergence(P, up) - kl_divergence(P, dn)) / (2 * h)
    assert np.max(np.abs(grad - fd)) / np.max(np.abs(fd)) < 1e-4


def test_three_point_symmetry():
    X = np.array([[0.0, 0.0], [1.0, 0.0], [0.5, np.sqrt(3) / 2]])
    P = pairwise_affinities(X, perplexity=2.0)
    Y = tsne_embed(P, TsneConfig(perplexity=2.0, seed=2)).embedding
    d = np.sqrt(squared_distances(Y)[np.triu_indices(3, 1)])
    assert (d.max() - d.min()) / d.mean() < 1e-2


def _clusters(rng, n_per=30):
    centers = np.array([[0.0] * 10, [10.0] + [0.0] * 9, [0.0, 10.0] + [0.0] * 8])
    X = np.concatenate([c + rng.normal(size=(n_per, 10)) for c in centers])
    return X, np.repeat(np.arange(3), n_per)


def _purity(Y, labels):
    centroids = np.array([Y[labels == k].mean(0) for k in range(3)])
    nearest = np.argmin(((Y[:, None] - centroids[None]) ** 2).sum(-1), axis=1)
    return np.mean(nearest == labels)


def test_clusters_separate(rng):
    X, labels = _clusters(rng)
    res = tsne_embed(pairwise_affinities(X, 15.0), TsneConfig(iterations=400, seed=1))
    assert _purity(res.embedding, labels) >= 0.9


@pytest.mark.parametrize("seed", [0, 1])
def test_kl_monotone_after_exaggeration(seed):
    X = np.random.default_rng(seed).normal(size=(200, 5))
    cfg = TsneConfig(seed=seed)
    kl = tsne_embed(pairwise_affinities(X, cfg.perplexity), cfg).kl_history
    for s in range(cfg.exaggeration_iters, len(kl) - 10, 10):
        assert kl[s + 10] <= kl[s] + 10 * 1e-6


def test_tsne_deterministic(rng):
    P = pairwise_affinities(rng.normal(size=(20, 3)), 5.0)
    cfg = TsneConfig(perplexity=5.0, iterations=150, exaggeration_iters=50, seed=4)
    assert np.array_equal(tsne_embed(P, cfg).embedding, tsne_embed(P, cfg).embedding)


def _points(coords):
    return [EmbeddingPoint(f"t{i}", tuple(c)) for i, c in enumerate(coords)]


def test_grid_single_point():
    hist = grid_histogram(_points([(3.0, 4.0)]), 5)
    assert hist.total == 1 and hist.counts[0, 0] == 1


def test_grid_corners():
    hist = grid_histogram(_points([(0, 0), (1, 0), (0, 1), (1, 1)]), 2)
    assert hist.counts.tolist() == [[1, 1], [1, 1]]


def test_grid_boundary_goes_low():
    hist = grid_histogram(_points([(0, 0), (1, 0), (0, 1), (1, 1), (0.5, 0.5)]), 2)
    # rows follow y, columns x; the midpoint goes to the lower cell
    assert hist.counts.tolist() == [[2, 1], [1, 1]]
    assert hist.cell_of()["t1"] == (0, 1) and hist.cell_of()["t2"] == (1, 0)


def test_grid_conserves_points(rng):
    hist = grid_histogram(_points(rng.normal(size=(1000, 2))), 45)
    assert hist.total == 1000
    assert sorted(hist.cell_of()) == sorted(f"t{i}" for i in range(1000))


def _hist(counts):
    g = len(counts)
    cells = [[[f"c{r}_{c}_{i}" for i in range(counts[r][c])] for c in range(g)] for r in range(g)]
    return GridHistogram(g, (0, 0, 1, 1), cells)


def _draws(hist, selected):
    cell = hist.cell_of()
    out = np.zeros_like(hist.counts)
    for tid in selected:
        out[cell[tid]] += 1
    return out


def test_sampler_round_robin_example():
    hist = _hist([[100, 100], [100, 1]])
    sel = uniform_sample(hist, 13, seed=0)
    assert _draws(hist, sel).ravel().tolist() == [4, 4, 4, 1]
    assert len(set(sel)) == 13


def test_sampler_edges():
    hist = _hist([[3, 0], [0, 2]])
    assert uniform_sample(hist, 0) == []
    assert sorted(uniform_sample(hist, 5)) == sorted(hist.cell_of())
    with pytest.raises(ValueError):
        uniform_sample(hist, 6)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(0, 12), min_size=9, max_size=9), st.integers(0, 2**32 - 1), st.data())
def test_sampler_fairness(counts, seed, data):
    hist = _hist([counts[0:3], counts[3:6], counts[6:9]])
    k = data.draw(st.integers(0, hist.total))
    drawn = _draws(hist, uniform_sample(hist, k, seed))
    assert drawn.sum() == k
    assert np.all(drawn <= hist.counts)
    open_cells = drawn[drawn < hist.counts]
    if open_cells.size:
        assert open_cells.max() - open_cells.min() <= 1
        # no cell got ahead of a cell that still had tiles
        assert drawn.max() <= open_cells.min() + 1


def test_sampler_deterministic():
    hist = _hist([[10, 7], [5, 9]])
    assert uniform_sample(hist, 12, seed=3) == uniform_sample(hist, 12, seed=3)
    assert uniform_sample(hist, 12, seed=3) != uniform_sample(hist, 12, seed=4)


def test_selection_roundtrip(tmp_path):
    hist = _hist([[2, 1], [0, 3]])
    sel = uniform_sample(hist, 4, seed=1)
    write_selection(tmp_path / "sel.json", sel, hist)
    assert read_selection(tmp_path / "sel.json") == sel


def test_heatmap_all_zero():
    px = heatmap_pixels(_hist([[0, 0], [0, 0]]), cell_px=3)
    assert px.shape == (6, 6, 3)
    assert len(np.unique(px.reshape(-1, 3), axis=0)) == 1


def test_heatmap_single_hot_cell(tmp_path):
    hist = _hist([[0, 0, 0], [0, 5, 0], [0, 0, 0]])
    px = heatmap_pixels(hist, cell_px=2)
    hot = px[2:4, 2:4].reshape(-1, 3)
    cold = np.delete(px.reshape(3, 2, 3, 2, 3).transpose(0, 2, 1, 3, 4).reshape(9, -1, 3), 4, axis=0)
    assert len(np.unique(hot, axis=0)) == 1
    assert not np.any(np.all(cold == hot[0], axis=-1))
    path = render_heatmap(hist, tmp_path / "h.png")
    assert path.stat().st_size > 0


def test_heatmap_golden():
    # viridis endpoints and midpoint, as 8-bit RGB
    px = heatmap_pixels(_hist([[0, 2], [4, 0]]), cell_px=1)
    assert px[0, 0].tolist() == [68, 1, 84]
    assert px[1, 0].tolist() == [253, 231, 37]
    assert px[0, 1].tolist() == [33, 145, 140]


def test_histogram_features(rng):
    ext = HistogramExtractor()
    img = BandImage(rng.integers(0, 256, (32, 32, 3)), 8)
    a, b = ext(img), ext(img)
    assert a.shape == (ext.dimension,) == (112,)
    assert np.array_equal(a, b)
    flat = ext(BandImage(np.full((16, 16, 3), 128), 8))
    assert np.count_nonzero(flat[:32]) == 1 and not flat[96:].any()


def test_alexnet_dimension(tmp_path, rng):
    from torchvision.models import alexnet

    torch.manual_seed(0)
    weights = tmp_path / "alexnet.pth"
    torch.save(alexnet(weights=None).state_dict(), weights)
    ext = make_extractor("alexnet", str(weights))
    assert isinstance(ext, AlexNetExtractor)
    vec = extract_features("t", BandImage(rng.integers(0, 256, (64, 64, 3)), 8), ext)
    assert vec.values.shape == (4096,)
    with pytest.raises(FileNotFoundError):
        make_extractor("alexnet", str(tmp_path / "missing.pth"))


def test_feature_rejects_nan():
    with pytest.raises(ValueError):
        FeatureVector("t", np.array([1.0, np.nan]))


def test_feature_cache_roundtrip(tmp_path, rng):
    vecs = [FeatureVector(f"t{i}", rng.normal(size=7).astype(np.float32)) for i in range(4)]
    write_feature_cache(tmp_path / "f.f32", vecs, "histogram")
    index, matrix = read_feature_cache(tmp_path / "f.f32")
    assert index["tile_ids"] == ["t0", "t1", "t2", "t3"]
    assert np.array_equal(np.asarray(matrix), np.stack([v.values for v in vecs]))
    raw = (tmp_path / "f.f32").read_bytes()
    assert hashlib.sha256(raw).hexdigest() == hashlib.sha256(
        np.stack([v.values for v in vecs]).astype("<f4").tobytes()).hexdigest()
