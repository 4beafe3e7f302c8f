"""Privacy-bottleneck training and two baseline defenses.

The defended loss adds, for every layer, a readout cross-entropy (keeps label
information) and a weighted dependency between the layer and the adjacency
(removes structure information), plus weighted dependencies between
consecutive layers (compression). DropEdge resamples the training graph every
epoch.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields

import numpy as np

from . import autodiff as ad
from . import metrics as M
from .autodiff import Tensor
from .gnn import ForwardTrace, GnnModel, TrainConfig, fit, forward
from .graph import Graph
from .report import ExperimentReport
from .rng import RngStream


class DefenseConfigError(ValueError):
    pass


@dataclass
class DefenseConfig:
    beta_p: list[float] = field(default_factory=lambda: [1.3, 1.3, 1.7])
    beta_c: list[float] = field(default_factory=lambda: [1.4, 1.5])
    metric: str = "kde"
    metric_privacy: str | None = None
    metric_complexity: str | None = None
    metric_accuracy: str = "ce"
    drop_edge_p: float = 0.5
    hetero_only: bool = False
    epochs: int = 200
    lr: float = 0.01
    weight_decay: float = 5e-4
    kernel: str = "linear"
    bandwidth: float | str | None = None
    accuracy_weight: float = 1.0

    def __post_init__(self):
        for name in ("metric", "metric_privacy", "metric_complexity"):
            v = getattr(self, name)
            if v is not None and v not in M.METRICS:
                raise DefenseConfigError(f"{name} must be one of {M.METRICS}, got {v!r}")
        if self.metric_accuracy != "ce":
            raise DefenseConfigError("metric_accuracy supports only 'ce' (readout cross-entropy)")
        if any(b < 0 for b in self.beta_p) or any(b < 0 for b in self.beta_c):
            raise DefenseConfigError("beta weights must be nonnegative")
        if not 0 <= self.drop_edge_p <= 1:
            raise DefenseConfigError("drop_edge_p must lie in [0, 1]")

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    @property
    def privacy_metric(self) -> str:
        return self.metric_privacy or self.metric

    @property
    def complexity_metric(self) -> str:
        return self.metric_complexity or self.metric

    def is_degenerate(self) -> bool:
        return not any(self.beta_p) and not any(self.beta_c)

    def check_depth(self, n_layers: int) -> None:
        if len(self.beta_p) not in (n_layers, n_layers + 1):
            raise DefenseConfigError(f"beta_p needs {n_layers + 1} entries (one per layer plus the head), got {len(self.beta_p)}")
        if len(self.beta_c) not in (n_layers - 1, n_layers):
            raise DefenseConfigError(
                f"beta_c needs {n_layers - 1} entries (or {n_layers} to include the head transition), got {len(self.beta_c)}"
            )

    def opts(self, metric: str) -> dict:
        if metric in ("hsic", "cka"):
            return {"kernel": self.kernel, "bandwidth": self.bandwidth}
        if metric == "kde":
            return {"bandwidth": self.bandwidth}
        return {}


# ---------------------------------------------------------------------------
# objective
# ---------------------------------------------------------------------------


@dataclass
class Readout:
    weight: Tensor
    bias: Tensor

    def __call__(self, h: Tensor) -> Tensor:
        ones = Tensor(np.ones((h.rows, 1)))
        return h @ self.weight + ones @ self.bias


def init_readouts(model: GnnModel, rng: RngStream) -> list[Readout]:
    gen = rng.stream("readout")
    out = []
    for i, d in enumerate(model.dims[1:], start=1):
        bound = np.sqrt(6.0 / (d + model.num_classes))
        w = Tensor(gen.uniform(-bound, bound, size=(d, model.num_classes)), requires_grad=True, name=f"R{i}")
        b = Tensor(np.zeros((1, model.num_classes)), requires_grad=True, name=f"r{i}")
        out.append(Readout(w, b))
    return out


def privacy_adjacency(g: Graph, hetero_only: bool) -> np.ndarray:
    a = g.adjacency()
    if hetero_only:
        same = g.labels[:, None] == g.labels[None, :]
        a = np.where(same, 0.0, a)
    return a


def _gram(h: Tensor) -> Tensor:
    return ad.sigmoid(h @ ad.transpose(h))


class DefenseTerms:
    """Builds the extra loss for one model and graph; caches the adjacency side."""

    def __init__(self, model: GnnModel, g: Graph, cfg: DefenseConfig, readouts: list[Readout]):
        cfg.check_depth(model.n_layers)
        self.model, self.g, self.cfg, self.readouts = model, g, cfg, readouts
        self.train_idx = g.train_idx
        a = privacy_adjacency(g, cfg.hetero_only)
        self.a_empty = not a.any()
        pm = cfg.privacy_metric
        self.a_side = None
        if any(cfg.beta_p) and not self.a_empty:
            self.a_side = Tensor(a) if pm in M.DISTANCES else M.prepare(pm, a, **cfg.opts(pm))

    def layers(self, trace: ForwardTrace) -> list[Tensor]:
        return [*trace.hidden, trace.logits]

    def _layer_side(self, t: Tensor, metric: str, cache: dict, key: int):
        """Differentiable per-epoch cache so each layer's kernel is built once."""
        if metric == "kde":
            if (key, metric) not in cache:
                cache[(key, metric)] = M.Prepared(t, kernel=M._kde_kernel(t, self.cfg.bandwidth))
            return cache[(key, metric)]
        return t

    def privacy(self, t: Tensor, cache: dict, key: int) -> Tensor:
        pm = self.cfg.privacy_metric
        if pm in M.DISTANCES:
            return M.dependency(pm, self.a_side, _gram(t))
        return M.dependency(pm, self.a_side, self._layer_side(t, pm, cache, key), **self.cfg.opts(pm))

    def complexity(self, t1: Tensor, t2: Tensor, cache: dict, k1: int, k2: int) -> Tensor:
        cm = self.cfg.complexity_metric
        if cm in M.DISTANCES and t1.shape != t2.shape:
            return M.dependency(cm, _gram(t1), _gram(t2))
        return M.dependency(cm, self._layer_side(t1, cm, cache, k1), self._layer_side(t2, cm, cache, k2), **self.cfg.opts(cm))

    def __call__(self, trace: ForwardTrace, epoch: int) -> tuple[Tensor | None, dict]:
        cfg = self.cfg
        if cfg.is_degenerate():
            return None, {}
        layers = self.layers(trace)
        L = self.model.n_layers
        cache: dict = {}
        total = None
        values: dict[str, float] = {}

        def add(name: str, weight: float, t: Tensor):
            nonlocal total
            values[name] = t.item()
            w = ad.scale(t, weight)
            total = w if total is None else total + w

        # label information in hidden layers; the head's cross-entropy is the base loss
        if cfg.accuracy_weight:
            for i in range(L):
                ce = ad.cross_entropy(self.readouts[i](layers[i]), self.g.labels, self.train_idx)
                add(f"acc{i + 1}", cfg.accuracy_weight, ce)
        if self.a_side is not None:
            for i, b in enumerate(cfg.beta_p):
                if b:
                    add(f"priv{i + 1}", b, self.privacy(layers[i], cache, i))
        for i, b in enumerate(cfg.beta_c):
            if b and i + 1 < len(layers):
                add(f"comp{i + 1}", b, self.complexity(layers[i], layers[i + 1], cache, i, i + 1))
        return total, values


def defense_objective(
    trace: ForwardTrace,
    g: Graph,
    cfg: DefenseConfig,
    model: GnnModel,
    readouts: list[Readout],
) -> tuple[Tensor, dict]:
    """Full defended loss (train cross-entropy plus the bottleneck terms) for one trace."""
    base = ad.cross_entropy(trace.logits, g.labels, g.train_idx)
    extra, values = DefenseTerms(model, g, cfg, readouts)(trace, 0)
    values = {"ce": base.item(), **values}
    return (base if extra is None else base + extra), values


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


def train_defended(model: GnnModel, g: Graph, cfg: DefenseConfig | None = None, rng=None, on_epoch=None):
    """DropEdge plus bottleneck training; returns the best-validation snapshot and its report."""
    cfg = cfg or DefenseConfig()
    rng = rng if isinstance(rng, RngStream) else RngStream(0 if rng is None else int(rng))
    cfg.check_depth(model.n_layers)
    tcfg = TrainConfig(lr=cfg.lr, weight_decay=cfg.weight_decay, epochs=cfg.epochs, drop_edge_p=cfg.drop_edge_p)
    if cfg.is_degenerate():
        return fit(model, g, tcfg, rng, on_epoch=on_epoch, kind="defense")
    readouts = init_readouts(model, rng)
    terms = DefenseTerms(model, g, cfg, readouts)
    extra_params = [p for r in readouts for p in (r.weight, r.bias)]
    return fit(model, g, tcfg, rng, extra_loss=terms, extra_params=extra_params, on_epoch=on_epoch, kind="defense")


class OutputNoiseModel:
    """Wraps a model so every query's logits receive fresh N(0, sigma^2) noise."""

    def __init__(self, model: GnnModel, sigma: float, rng=None):
        if sigma < 0:
            raise ValueError("sigma must be nonnegative")
        self.model = model
        self.sigma = float(sigma)
        rs = rng if isinstance(rng, RngStream) else RngStream(0 if rng is None else int(rng))
        self._gen = rs.stream("noise")

    def forward(self, a, x) -> ForwardTrace:
        trace = forward(self.model, a, x)
        if self.sigma == 0:
            return trace
        noise = self._gen.normal(scale=self.sigma, size=trace.logits.shape)
        return ForwardTrace(trace.hidden, trace.logits + Tensor(noise), trace.adjacency)

    def predict(self, g: Graph) -> ForwardTrace:
        with ad.no_grad():
            return self.forward(g.adjacency(), g.x)


def baseline_output_noise(model: GnnModel, sigma: float, rng=None) -> OutputNoiseModel:
    return OutputNoiseModel(model, sigma, rng)


def baseline_dp_sgd(
    model: GnnModel,
    g: Graph,
    clip: float,
    sigma: float,
    rng=None,
    cfg: TrainConfig | None = None,
) -> tuple[GnnModel, ExperimentReport]:
    """Training with global-norm gradient clipping and Gaussian gradient noise (std sigma * clip)."""
    if not clip > 0:
        raise ValueError("clip bound must be positive")
    if sigma < 0:
        raise ValueError("sigma must be nonnegative")
    base = cfg or TrainConfig()
    tcfg = TrainConfig(base.lr, base.weight_decay, base.epochs, base.drop_edge_p, clip=clip, grad_noise=sigma)
    rng = rng if isinstance(rng, RngStream) else RngStream(0 if rng is None else int(rng))
    return fit(model, g, tcfg, rng, kind="dp_sgd")
