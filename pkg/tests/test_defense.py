import numpy as np
import pytest

from graphleak import autodiff as ad
from graphleak import metrics as M
from graphleak.autodiff import Tensor
from graphleak.defense import (
    DefenseConfig,
    DefenseConfigError,
    baseline_dp_sgd,
    baseline_output_noise,
    defense_objective,
    init_readouts,
    train_defended,
)
from graphleak.evaluate import accuracy, audit_auc
from graphleak.gnn import TrainConfig, default_model, forward, predict, train_standard
from graphleak.graph import generate_sbm
from graphleak.optim import clip_grad_norm, global_grad_norm
from graphleak.rng import RngStream


def model_for(g, seed=0, hidden=8):
    return default_model("gcn", g, hidden=hidden, rng=RngStream(seed))


class TestConfig:
    def test_defaults(self):
        cfg = DefenseConfig()
        assert (cfg.beta_p, cfg.beta_c, cfg.metric, cfg.drop_edge_p) == ([1.3, 1.3, 1.7], [1.4, 1.5], "kde", 0.5)

    def test_depth_mismatch(self, sbm):
        with pytest.raises(DefenseConfigError, match="beta_p"):
            train_defended(model_for(sbm), sbm, DefenseConfig(beta_p=[1.0] * 5, epochs=1))

    def test_negative_beta(self):
        with pytest.raises(DefenseConfigError):
            DefenseConfig(beta_p=[-1, 0, 0])

    def test_unknown_metric(self):
        with pytest.raises(DefenseConfigError):
            DefenseConfig(metric="mutual")


class TestObjective:
    def test_zero_beta_is_cross_entropy(self, sbm):
        model = model_for(sbm)
        tr = forward(model, sbm.adjacency(), sbm.x)
        cfg = DefenseConfig(beta_p=[0, 0, 0], beta_c=[0])
        loss, _ = defense_objective(tr, sbm, cfg, model, init_readouts(model, RngStream(0)))
        assert loss.item() == ad.cross_entropy(tr.logits, sbm.labels, sbm.train_idx).item()

    def test_hetero_only_without_hetero_edges(self):
        g = generate_sbm(40, 2, 0.3, 0.0, 4, RngStream(1))
        model = model_for(g)
        tr = forward(model, g.adjacency(), g.x)
        cfg = DefenseConfig(beta_p=[1, 1, 1], beta_c=[0], metric="hsic", hetero_only=True)
        _, values = defense_objective(tr, g, cfg, model, init_readouts(model, RngStream(0)))
        assert not any(k.startswith("priv") for k in values)

    def test_term_sum(self, sbm):
        model = model_for(sbm, 3)
        readouts = init_readouts(model, RngStream(3))
        tr = forward(model, sbm.adjacency(), sbm.x)
        cfg = DefenseConfig(beta_p=[1, 1, 1], beta_c=[0.5], metric="hsic")
        loss, _ = defense_objective(tr, sbm, cfg, model, readouts)
        a = sbm.adjacency()
        layers = [*tr.hidden, tr.logits]
        expected = ad.cross_entropy(tr.logits, sbm.labels, sbm.train_idx).item()
        for i in range(2):
            expected += ad.cross_entropy(readouts[i](layers[i]), sbm.labels, sbm.train_idx).item()
        expected += sum(M.hsic(a, h.value).item() for h in layers)
        expected += 0.5 * M.hsic(layers[0].value, layers[1].value).item()
        assert loss.item() == pytest.approx(expected, abs=1e-10)


GRAD_CASES = ["dp", "hsic", "cka", "kde", "kl", "mse"]


@pytest.mark.parametrize("metric", GRAD_CASES)
def test_defense_grad_check(metric):
    g = generate_sbm(10, 2, 0.4, 0.1, 3, RngStream(2), split_fractions=(0.6, 0.2, 0.2))
    model = model_for(g, 2, hidden=3)
    readouts = init_readouts(model, RngStream(2))
    bw = 1.0 if metric == "kde" else None
    cfg = DefenseConfig(beta_p=[0.7, 1.1, 0.9], beta_c=[1.3], metric=metric, bandwidth=bw)
    params = model.parameters() + [p for r in readouts for p in (r.weight, r.bias)]

    def f(*ps):
        return defense_objective(forward(model, g.adjacency(), g.x), g, cfg, model, readouts)[0]

    assert ad.grad_check(f, params) < 1e-4


class TestTraining:
    def test_degenerate_trajectory_identical(self, sbm):
        cfg = DefenseConfig(beta_p=[0, 0, 0], beta_c=[0], drop_edge_p=0.0, epochs=30)
        a, ra = train_defended(model_for(sbm, 4), sbm, cfg, RngStream(4))
        b, rb = train_standard(model_for(sbm, 4), sbm, TrainConfig(epochs=30), RngStream(4))
        assert ra.column("loss")[:-1] == rb.column("loss")[:-1]
        assert all(np.array_equal(p, q) for p, q in zip(a.state_arrays(), b.state_arrays()))

    def test_graph_restored(self, sbm):
        before = sbm.edges.copy()
        train_defended(model_for(sbm), sbm, DefenseConfig(metric="hsic", epochs=5), RngStream(0))
        assert np.array_equal(before, sbm.edges)

    def test_terms_recorded(self, sbm):
        _, report = train_defended(model_for(sbm), sbm, DefenseConfig(metric="hsic", epochs=3), RngStream(0))
        assert {"ce", "acc1", "acc2", "priv1", "priv2", "priv3", "comp1", "comp2"} <= set(report.rows[0])

    def test_privacy_weight_lowers_leakage(self):
        """Averaged over seeds, turning the privacy weight on lowers the audit AUC of the last layer."""
        off, on = [], []
        for s in range(10):
            g = generate_sbm(100, 4, 0.15, 0.01, 8, RngStream(s))
            for betas, sink in (([0, 0, 0], off), ([13, 13, 17], on)):
                cfg = DefenseConfig(beta_p=betas, beta_c=[0], metric="hsic", drop_edge_p=0.5, epochs=60)
                model, _ = train_defended(model_for(g, s), g, cfg, RngStream(s))
                sink.append(audit_auc(predict(model, g).hidden[-1], g).auc)
        assert np.mean(on) < np.mean(off)


@pytest.fixture(scope="module")
def trained():
    g = generate_sbm(200, 4, 0.15, 0.01, 8, RngStream(0))
    model, _ = train_standard(model_for(g), g, TrainConfig(epochs=60), RngStream(0))
    return g, model


class TestOutputNoise:
    def test_zero_sigma_identical(self, trained):
        g, model = trained
        assert np.array_equal(baseline_output_noise(model, 0.0).predict(g).logits.value, predict(model, g).logits.value)

    def test_large_sigma_chance(self, trained):
        g, model = trained
        accs = [accuracy(baseline_output_noise(model, 1e4, RngStream(s)).predict(g).logits, g) for s in range(20)]
        assert abs(np.mean(accs) - 0.25) <= 0.05

    def test_weights_untouched(self, trained):
        g, model = trained
        before = model.state_arrays()
        baseline_output_noise(model, 3.0).predict(g)
        assert all(np.array_equal(p, q) for p, q in zip(before, model.state_arrays()))

    def test_noise_lowers_audit(self, trained):
        g, model = trained
        clean = audit_auc(predict(model, g).logits, g).auc
        noisy = [audit_auc(baseline_output_noise(model, 2.0, RngStream(s)).predict(g).logits, g).auc for s in range(20)]
        assert np.mean(noisy) <= clean

    def test_negative_sigma(self, trained):
        with pytest.raises(ValueError):
            baseline_output_noise(trained[1], -1.0)


class TestDpSgd:
    def test_no_noise_no_clip_matches_standard(self, sbm):
        a, ra = baseline_dp_sgd(model_for(sbm, 5), sbm, float("inf"), 0.0, RngStream(5), TrainConfig(epochs=20))
        b, rb = train_standard(model_for(sbm, 5), sbm, TrainConfig(epochs=20), RngStream(5))
        assert ra.column("loss")[:-1] == rb.column("loss")[:-1]
        assert all(np.array_equal(p, q) for p, q in zip(a.state_arrays(), b.state_arrays()))

    def test_large_noise_collapses(self):
        g = generate_sbm(200, 4, 0.15, 0.01, 8, RngStream(0))
        _, clean = train_standard(model_for(g), g, TrainConfig(epochs=60), RngStream(0))
        _, noisy = baseline_dp_sgd(model_for(g), g, 0.1, 1e3, RngStream(0), TrainConfig(epochs=60))
        assert noisy.summary["test_acc"] < clean.summary["test_acc"] - 0.3

    def test_clip_bound(self):
        ps = [Tensor(np.ones((3, 3)), requires_grad=True), Tensor(np.ones((1, 2)), requires_grad=True)]
        for p in ps:
            p.grad = np.full(p.value.shape, 7.0)
        clip_grad_norm(ps, 0.5)
        assert global_grad_norm(ps) <= 0.5 + 1e-9

    def test_invalid_clip(self, sbm):
        with pytest.raises(ValueError):
            baseline_dp_sgd(model_for(sbm), sbm, 0.0, 1.0)
