import json

import numpy as np
import pytest

from graphleak import autodiff as ad
from graphleak.autodiff import Tensor
from graphleak.graph import (
    Graph,
    IngestionError,
    drop_edge,
    generate_sbm,
    gumbel_noise,
    gumbel_perturb,
    load_dataset,
    make_split,
    normalize_adjacency,
    perturb_features,
    sample_bernoulli_edges,
    save_dataset,
)
from graphleak.evaluate import homophily
from graphleak.rng import RngStream


def write_dir(tmp_path, edges="0\t1\n1\t2\n", labels="0\n1\n0\n", meta=None, features=None):
    d = tmp_path / "ds"
    d.mkdir(exist_ok=True)
    (d / "edges.tsv").write_text(edges)
    (d / "labels.tsv").write_text(labels)
    (d / "meta.json").write_text(json.dumps(meta or {"name": "t", "n": 3, "d": None, "C": 2}))
    if features is not None:
        (d / "features.tsv").write_text(features)
    return d


class TestLoad:
    def test_cora_statistics(self, cora):
        assert (cora.n_nodes, cora.n_edges, cora.num_classes, cora.x.shape[1]) == (2708, 5278, 7, 1433)

    def test_featureless_gets_identity(self, tmp_path):
        g = load_dataset(write_dir(tmp_path))
        assert not g.has_features
        assert np.array_equal(g.x, np.eye(3))

    def test_empty_edges(self, tmp_path):
        g = load_dataset(write_dir(tmp_path, edges=""))
        assert g.n_edges == 0

    def test_out_of_range_reports_line(self, tmp_path):
        with pytest.raises(IngestionError, match="line 2"):
            load_dataset(write_dir(tmp_path, edges="0\t1\n1\t7\n"))

    def test_duplicate_reports_line(self, tmp_path):
        with pytest.raises(IngestionError, match="line 2.*line 1"):
            load_dataset(write_dir(tmp_path, edges="0\t1\n1\t0\n"))

    def test_feature_row_mismatch(self, tmp_path):
        with pytest.raises(IngestionError, match="features.tsv"):
            load_dataset(write_dir(tmp_path, features="1\t0\n0\t1\n"))

    def test_label_count_mismatch(self, tmp_path):
        with pytest.raises(IngestionError, match="labels.tsv"):
            load_dataset(write_dir(tmp_path, labels="0\n1\n"))

    def test_roundtrip(self, tmp_path, sbm):
        save_dataset(sbm, tmp_path / "a")
        again = load_dataset(tmp_path / "a")
        assert again.same_as(sbm)
        save_dataset(again, tmp_path / "b")
        assert load_dataset(tmp_path / "b").same_as(again)


class TestNormalize:
    def test_isolated_node(self):
        assert normalize_adjacency(np.zeros((1, 1))).value.tolist() == [[1.0]]

    def test_single_edge(self):
        out = normalize_adjacency(np.array([[0.0, 1.0], [1.0, 0.0]])).value
        assert np.allclose(out, 0.5, atol=1e-15)

    def test_symmetric_nonnegative_and_contracting(self, sbm):
        rng = np.random.default_rng(0)
        for a in (sbm.adjacency(), np.triu(rng.uniform(size=(30, 30)), 1)):
            a = a + a.T if not np.allclose(a, a.T) else a
            psi = normalize_adjacency(a).value
            assert np.max(np.abs(psi - psi.T)) <= 1e-12
            assert psi.min() >= 0
            v = rng.normal(size=psi.shape[0])
            for _ in range(500):
                v = psi @ v
                lam = np.linalg.norm(v)
                v /= lam
            assert lam <= 1 + 1e-6

    def test_gradient(self):
        a = Tensor(np.random.default_rng(1).uniform(size=(4, 4)))
        w = Tensor(np.random.default_rng(2).normal(size=(4, 4)))
        assert ad.grad_check(lambda a: ad.reduce_sum(normalize_adjacency(a) * w), [a]) < 1e-4


class TestDropEdge:
    def test_p0_identity(self, sbm):
        assert np.array_equal(drop_edge(sbm, 0.0, RngStream(1)).edges, sbm.edges)

    def test_p1_empty(self, sbm):
        assert drop_edge(sbm, 1.0, RngStream(1)).n_edges == 0

    def test_subset_and_unchanged_nodes(self, sbm):
        out = drop_edge(sbm, 0.4, RngStream(3))
        keys = set(map(tuple, sbm.edges.tolist()))
        assert all(tuple(e) in keys for e in out.edges.tolist())
        assert out.labels is sbm.labels and out.features is sbm.features
        assert np.array_equal(sbm.adjacency(), sbm.adjacency().T)

    def test_monte_carlo_fraction(self):
        n = 20
        iu = np.triu_indices(n, 1)
        edges = np.stack(iu, axis=1)[:100]
        g = Graph(n, edges, np.zeros(n, dtype=int), 1)
        gen = RngStream(0).stream("dropedge")
        fr = np.mean([drop_edge(g, 0.5, gen).n_edges / 100 for _ in range(10_000)])
        assert abs(fr - 0.5) < 0.02


class TestGumbel:
    def test_noise_zero_at_inverse_e(self):
        assert -np.log(-np.log(np.exp(-1.0))) == pytest.approx(0.0, abs=1e-15)

    def test_monotone_in_p(self):
        rng = RngStream(5)
        lo = gumbel_perturb(np.full((6, 6), 0.2) - np.diag([0.2] * 6), rng).value
        hi = gumbel_perturb(np.full((6, 6), 0.7) - np.diag([0.7] * 6), rng).value
        off = ~np.eye(6, dtype=bool)
        assert np.all(hi[off] > lo[off])

    def test_exceedance_probability(self):
        noise = gumbel_noise((1, 100_000), RngStream(9).stream("gumbel"))
        frac = np.mean(noise > 0)
        expected = 1 - np.exp(-1)
        sd = np.sqrt(expected * (1 - expected) / noise.size)
        assert abs(frac - expected) < max(3 * sd, 0.01)

    def test_symmetric_zero_diagonal(self):
        p = np.random.default_rng(0).uniform(size=(7, 7))
        p = np.triu(p, 1)
        p = p + p.T
        out = gumbel_perturb(p, RngStream(2)).value
        assert np.array_equal(out, out.T)
        assert np.all(np.diag(out) == 0)
        assert out.min() >= 0 and out.max() <= 1


class TestBernoulli:
    def test_zero_and_one(self):
        assert not sample_bernoulli_edges(np.zeros((5, 5)), RngStream(0)).any()
        full = sample_bernoulli_edges(np.ones((5, 5)), RngStream(0))
        assert np.array_equal(full, np.ones((5, 5)) - np.eye(5))

    def test_density(self):
        n, trials, p = 50, 1000, 0.3
        gen = RngStream(4).stream("bernoulli")
        m = n * (n - 1) // 2
        dens = [sample_bernoulli_edges(np.full((n, n), p), gen)[np.triu_indices(n, 1)].mean() for _ in range(trials)]
        sd = np.sqrt(p * (1 - p) / (m * trials))
        assert abs(np.mean(dens) - p) < 3 * sd

    def test_symmetric(self):
        s = sample_bernoulli_edges(np.full((9, 9), 0.5), RngStream(1))
        assert np.array_equal(s, s.T) and not np.diag(s).any()


class TestFeatures:
    def test_p0_identity(self):
        x = np.random.default_rng(0).normal(size=(4, 3))
        assert np.array_equal(perturb_features(x, 0.0, RngStream(0)).value, x)

    def test_p1_zero(self):
        assert not perturb_features(np.ones((4, 3)), 1.0, RngStream(0)).value.any()

    def test_unbiased(self):
        x = np.random.default_rng(0).uniform(1, 2, size=(5, 4))
        gen = RngStream(7).stream("features")
        mean = np.mean([perturb_features(x, 0.3, gen).value for _ in range(10_000)], axis=0)
        assert np.max(np.abs(mean - x) / x) < 0.02


class TestSplit:
    def test_all_train(self, sbm):
        g = make_split(sbm, (1, 0, 0), RngStream(0))
        assert len(g.train_idx) == sbm.n_nodes

    def test_counts(self):
        g = Graph(1000, np.zeros((0, 2)), np.arange(1000) % 4, 4)
        g = make_split(g, (0.1, 0.1, 0.8), RngStream(0))
        assert (len(g.train_idx), len(g.val_idx), len(g.test_idx)) == (100, 100, 800)

    def test_deterministic(self, sbm):
        a = make_split(sbm, (0.2, 0.2, 0.6), RngStream(11))
        b = make_split(sbm, (0.2, 0.2, 0.6), RngStream(11))
        assert np.array_equal(a.split, b.split)

    def test_tiny_class_falls_back(self):
        g = Graph(10, np.zeros((0, 2)), [0] * 9 + [1], 2)
        with pytest.warns(UserWarning, match="unstratified"):
            out = make_split(g, (0.5, 0.2, 0.3), RngStream(0))
        assert len(out.train_idx) == 5

    def test_bad_fractions(self, sbm):
        with pytest.raises(ValueError):
            make_split(sbm, (0.5, 0.6, -0.1), RngStream(0))


class TestSbm:
    def test_no_inter_block_edges(self):
        g = generate_sbm(60, 3, 0.3, 0.0, 5, RngStream(0))
        assert homophily(g)[0] == 1.0

    def test_equal_probabilities(self):
        vals = [homophily(generate_sbm(120, 4, 0.1, 0.1, 4, RngStream(s)))[0] for s in range(10)]
        assert abs(np.mean(vals) - (30 * 29 / 2 * 4) / (120 * 119 / 2)) < 0.03

    def test_assortative(self):
        g = generate_sbm(120, 4, 0.3, 0.02, 8, RngStream(0))
        assert homophily(g)[0] > 0.8
