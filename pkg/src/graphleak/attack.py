"""Graph reconstruction by matching the target's forward chain on a learned adjacency.

The attacker owns a distribution over adjacencies (one of three
parameterisations), pushes samples through the frozen target model and
maximises the dependency between the resulting intermediate variables and the
leaked ones, minus an entropy penalty on the edge probabilities.
"""

from __future__ import annotations

import time
import warnings
from dataclasses import dataclass, field, fields

import numpy as np

from . import autodiff as ad
from . import metrics as M
from .autodiff import Tensor
from .evaluate import one_hot
from .gnn import ForwardTrace, GnnModel, forward
from .graph import Graph, gumbel_noise, gumbel_perturb_triu, perturb_features
from .optim import OptimizerState, optimizer_step
from .report import ExperimentReport
from .rng import RngStream

FORMS = ("direct", "gaussian", "generator")
MODES = ("mcgra", "basic", "graphmi")
KNOWLEDGE = ("X", "H", "Yhat", "Y")


class AttackConfigError(ValueError):
    pass


@dataclass
class PriorKnowledge:
    """Leaked side information. Every array has one row per node."""

    features: np.ndarray | None = None
    h_layers: dict[int, np.ndarray] = field(default_factory=dict)
    y_logits: np.ndarray | None = None
    y_labels: np.ndarray | None = None
    num_classes: int | None = None
    extra: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def x_available(self) -> bool:
        return self.features is not None

    def __post_init__(self):
        n = self.n_nodes
        for name, arr in self.elements().items():
            if arr.shape[0] != n:
                raise AttackConfigError(f"prior element {name} has {arr.shape[0]} rows, expected {n}")

    @property
    def n_nodes(self) -> int | None:
        for arr in (self.features, self.y_logits, self.y_labels, *self.h_layers.values(), *self.extra.values()):
            if arr is not None:
                return arr.shape[0]
        return None

    def is_empty(self) -> bool:
        return not self.elements()

    def elements(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        if self.features is not None:
            out["X"] = self.features
        for i in sorted(self.h_layers):
            out[f"H{i}"] = self.h_layers[i]
        if self.y_logits is not None:
            out["Yhat"] = self.y_logits
        if self.y_labels is not None:
            out["Y"] = one_hot(self.y_labels, self.num_classes or int(self.y_labels.max()) + 1)
        out.update(self.extra)
        return out

    def restricted(self, keep: set[str]) -> "PriorKnowledge":
        return PriorKnowledge(
            self.features if "X" in keep else None,
            dict(self.h_layers) if "H" in keep else {},
            self.y_logits if "Yhat" in keep else None,
            self.y_labels if "Y" in keep else None,
            self.num_classes,
            dict(self.extra) if "extra" in keep else {},
        )


def build_prior(target: GnnModel, g: Graph, knowledge, h_layers=None) -> PriorKnowledge:
    """Forward ``target`` on the true graph and keep the requested elements."""
    knowledge = list(knowledge)
    for k in knowledge:
        if k not in KNOWLEDGE:
            raise AttackConfigError(f"unknown knowledge element {k!r}; expected a subset of {KNOWLEDGE}")
    trace = None
    if "H" in knowledge or "Yhat" in knowledge:
        with ad.no_grad():
            trace = forward(target, g.adjacency(), g.x)
    layers = [target.n_layers] if h_layers is None else [int(i) for i in h_layers]
    for i in layers:
        if not 1 <= i <= target.n_layers:
            raise AttackConfigError(f"hidden layer {i} outside 1..{target.n_layers}")
    return PriorKnowledge(
        features=g.x if "X" in knowledge else None,
        h_layers={i: trace.hidden[i - 1].value.copy() for i in layers} if "H" in knowledge else {},
        y_logits=trace.logits.value.copy() if "Yhat" in knowledge else None,
        y_labels=g.labels.copy() if "Y" in knowledge else None,
        num_classes=g.num_classes,
    )


@dataclass
class AttackConfig:
    mode: str = "mcgra"
    param_form: str = "direct"
    alpha_p: float = 0.0
    alpha_o: float = 0.0
    alpha_s: float = 0.0
    alpha_c: float = 0.0
    alpha_x: float = 0.0  # basic mode: weight of the X term
    alpha_extra: float = 1.0  # basic mode: weight of any extra prior element
    metric_p: str = "mse"
    metric_o: str = "mse"
    metric_s: str = "mse"
    kernel: str = "linear"
    bandwidth: float | str | None = None
    iterations: int = 1000
    lr: float = 0.01
    optimizer: str = "adam"
    normalize_grad: bool = False  # rescale the gradient to unit RMS before each step
    lr_decay: str = "none"  # or "sqrt": lr / sqrt(t + 1)
    gumbel: bool = True
    gumbel_temperature: float = 1.0
    gumbel_on: str = "logit"  # perturb the edge logit, or the probability itself ("prob")
    feature_perturb_p: float = 0.0
    init_logit: float = 0.0
    sigma_init: float = -3.0
    layer_weights: list[float] | None = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise AttackConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.param_form not in FORMS:
            raise AttackConfigError(f"param_form must be one of {FORMS}, got {self.param_form!r}")
        for name in ("alpha_p", "alpha_o", "alpha_s", "alpha_c", "alpha_x", "alpha_extra"):
            v = getattr(self, name)
            if v < 0:
                raise AttackConfigError(f"{name} must be nonnegative, got {v}")
            if v and not 1e-4 <= v <= 1e4:
                raise AttackConfigError(f"{name}={v} lies outside the search range [1e-4, 1e4]")
        for name in ("metric_p", "metric_o", "metric_s"):
            if getattr(self, name) not in M.METRICS:
                raise AttackConfigError(f"{name} must be one of {M.METRICS}, got {getattr(self, name)!r}")
        if self.iterations < 0:
            raise AttackConfigError("iterations must be nonnegative")
        if not self.lr > 0:
            raise AttackConfigError("lr must be positive")
        if not self.gumbel_temperature > 0:
            raise AttackConfigError("gumbel_temperature must be positive")
        if self.optimizer not in ("adam", "sgd"):
            raise AttackConfigError(f"optimizer must be 'adam' or 'sgd', got {self.optimizer!r}")
        if self.lr_decay not in ("none", "sqrt"):
            raise AttackConfigError(f"lr_decay must be 'none' or 'sqrt', got {self.lr_decay!r}")
        if self.gumbel_on not in ("logit", "prob"):
            raise AttackConfigError(f"gumbel_on must be 'logit' or 'prob', got {self.gumbel_on!r}")
        if not 0 <= self.feature_perturb_p <= 1:
            raise AttackConfigError("feature_perturb_p must lie in [0, 1]")

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    def metric_opts(self, metric: str) -> dict:
        if metric in ("hsic", "cka"):
            return {"kernel": self.kernel, "bandwidth": self.bandwidth}
        if metric == "kde":
            return {"bandwidth": self.bandwidth}
        return {}


@dataclass
class AttackState:
    form: str
    n: int
    params: list[Tensor]
    generator: GnnModel | None = None
    gen_features: Tensor | None = None
    optimizer: OptimizerState | None = None
    iteration: int = 0
    best_objective: float = -np.inf
    best_probs: np.ndarray | None = None  # upper-triangle edge probabilities


def init_attack(form: str, n: int, target: GnnModel | None = None, x=None, cfg: AttackConfig | None = None, rng=None) -> AttackState:
    """Initial attacker parameters; direct and gaussian start at edge probability sigmoid(init_logit)."""
    cfg = cfg or AttackConfig(param_form=form)
    m = n * (n - 1) // 2
    if form == "direct":
        params = [Tensor(np.full((1, m), cfg.init_logit), requires_grad=True, name="theta")]
        return AttackState(form, n, params)
    if form == "gaussian":
        mu = Tensor(np.full((1, m), cfg.init_logit), requires_grad=True, name="mu")
        sig = Tensor(np.full((1, m), cfg.sigma_init), requires_grad=True, name="sigma")
        return AttackState(form, n, [mu, sig])
    if form == "generator":
        if target is None or x is None:
            raise AttackConfigError("the generator form needs the target model and node features")
        gen = target.copy()
        for p in gen.parameters():
            p.requires_grad = True
        return AttackState(form, n, gen.parameters(), generator=gen, gen_features=ad.as_tensor(x))
    raise AttackConfigError(f"unknown parameterisation {form!r}")


def _logit(p: Tensor) -> Tensor:
    q = ad.add_scalar(ad.scale(p, 1.0 - 2e-12), 1e-12)
    return ad.log(q) - ad.log(ad.add_scalar(ad.scale(q, -1.0), 1.0))


def _probabilities(state: AttackState, gaussian_gen: np.random.Generator | None) -> tuple[Tensor, Tensor, Tensor | None]:
    """(noise-free probabilities, sampled probabilities, logits of the sample) as 1 x m rows."""
    n = state.n
    if state.form == "direct":
        p = ad.sigmoid(state.params[0])
        return p, p, state.params[0]
    if state.form == "gaussian":
        mu, sig = state.params
        mean = ad.sigmoid(mu)
        eps = gaussian_gen.standard_normal(mu.shape) if gaussian_gen is not None else np.zeros(mu.shape)
        return mean, ad.clamp01(mean + Tensor(eps) * ad.sigmoid(sig)), None
    gen = state.generator
    h = forward(gen, np.eye(n), state.gen_features).hidden[-1]
    scores = ad.triu_values(h @ ad.transpose(h))
    p = ad.sigmoid(scores)
    return p, p, scores


def sample_adjacency(state: AttackState, cfg: AttackConfig, gumbel_gen=None, gaussian_gen=None) -> tuple[Tensor, Tensor]:
    """Differentiable symmetric sample and the noise-free probability row it came from."""
    clean, p, logits = _probabilities(state, gaussian_gen)
    if cfg.gumbel and gumbel_gen is not None:
        noise = gumbel_noise(p.shape, gumbel_gen)
        if cfg.gumbel_on == "prob":
            p = gumbel_perturb_triu(p, None, cfg.gumbel_temperature, noise=noise)
        else:
            base = logits if logits is not None else _logit(p)
            p = gumbel_perturb_triu(base, None, cfg.gumbel_temperature, noise=noise)
    return ad.sym_from_triu(p, state.n), clean


def mean_adjacency(state: AttackState) -> np.ndarray:
    with ad.no_grad():
        clean, _, _ = _probabilities(state, None)
    return triu_to_dense(clean.value[0], state.n)


def triu_to_dense(vec: np.ndarray, n: int) -> np.ndarray:
    out = np.zeros((n, n))
    out[np.triu_indices(n, k=1)] = vec
    return out + out.T


# ---------------------------------------------------------------------------
# objectives
# ---------------------------------------------------------------------------


class PreparedPrior:
    """Constant-side metric caches for a prior under a config."""

    def __init__(self, prior: PriorKnowledge, cfg: AttackConfig):
        self.prior = prior
        self.h = {i: M.prepare(cfg.metric_p, h, **cfg.metric_opts(cfg.metric_p)) for i, h in prior.h_layers.items()}
        self.yhat = None if prior.y_logits is None else M.prepare(cfg.metric_o, prior.y_logits, **cfg.metric_opts(cfg.metric_o))
        self.y_onehot = None
        if prior.y_labels is not None:
            oh = one_hot(prior.y_labels, prior.num_classes or int(prior.y_labels.max()) + 1)
            self.y_onehot = oh if cfg.metric_s == "kl" else M.prepare(cfg.metric_s, oh, **cfg.metric_opts(cfg.metric_s))


def effective_prior(prior: PriorKnowledge, cfg: AttackConfig) -> PriorKnowledge:
    if cfg.mode == "graphmi":
        return prior.restricted({"X", "Y"})
    return prior


def active_terms(prior: PriorKnowledge, cfg: AttackConfig) -> list[str]:
    """Objective terms that will be computed for this prior and config."""
    prior = effective_prior(prior, cfg)
    terms = []
    if cfg.mode == "basic":
        if cfg.alpha_x and prior.features is not None:
            terms.append("x")
        if cfg.alpha_p and prior.h_layers:
            terms.append("prop")
        if cfg.alpha_o and prior.y_logits is not None:
            terms.append("out")
        if cfg.alpha_s and prior.y_labels is not None:
            terms.append("label")
        if cfg.alpha_extra and prior.extra:
            terms.append("extra")
    else:
        if cfg.alpha_p and prior.h_layers and cfg.mode == "mcgra":
            terms.append("prop")
        if cfg.alpha_o and prior.y_logits is not None and cfg.mode == "mcgra":
            terms.append("out")
        if cfg.alpha_s and prior.y_labels is not None:
            terms.append("label")
    if cfg.alpha_c:
        terms.append("entropy")
    return terms


def _label_term(logits: Tensor, prep: PreparedPrior, prior: PriorKnowledge, cfg: AttackConfig) -> Tensor:
    if cfg.metric_s == "kl":
        return ad.scale(ad.cross_entropy(logits, prior.y_labels), -1.0)
    return M.dependency(cfg.metric_s, prep.y_onehot, ad.row_softmax(logits), **cfg.metric_opts(cfg.metric_s))


def attack_objective(
    trace: ForwardTrace,
    prior: PriorKnowledge,
    probs: Tensor,
    cfg: AttackConfig,
    prepared: PreparedPrior | None = None,
) -> tuple[Tensor, dict[str, float]]:
    """Objective to maximise and the value of each term.

    ``probs`` is the noise-free edge probability matrix (or its upper-triangle
    row) entering the entropy penalty.
    """
    prior = effective_prior(prior, cfg)
    terms = active_terms(prior, cfg)
    if not terms:
        raise AttackConfigError("objective is empty: no prior element has a nonzero weight")
    prep = prepared or PreparedPrior(prior, cfg)
    total = None
    values: dict[str, float] = {}

    def add(name: str, weight: float, t: Tensor):
        nonlocal total
        values[name] = t.item()
        w = ad.scale(t, weight)
        total = w if total is None else total + w

    if "prop" in terms:
        layer_ids = sorted(prior.h_layers)
        weights = cfg.layer_weights or [1.0] * len(layer_ids)
        acc = None
        for w, i in zip(weights, layer_ids):
            if i > len(trace.hidden):
                raise AttackConfigError(f"prior has layer {i} but the target has {len(trace.hidden)} layers")
            s = ad.scale(M.dependency(cfg.metric_p, prep.h[i], trace.hidden[i - 1], **cfg.metric_opts(cfg.metric_p)), w)
            acc = s if acc is None else acc + s
        add("prop", cfg.alpha_p, acc)
    if "out" in terms:
        add("out", cfg.alpha_o, M.dependency(cfg.metric_o, prep.yhat, trace.logits, **cfg.metric_opts(cfg.metric_o)))
    if "label" in terms:
        add("label", cfg.alpha_s, _label_term(trace.logits, prep, prior, cfg))
    if "entropy" in terms:
        ent = M.adjacency_entropy(probs, triu=probs.rows == 1 and probs.cols != 1)
        add("entropy", -cfg.alpha_c, ent)
    return total, values


def basic_objective(a_hat: Tensor, prior: PriorKnowledge, cfg: AttackConfig, probs: Tensor | None = None) -> tuple[Tensor, dict[str, float]]:
    """Sum of weighted dependencies between the rows of the adjacency and each prior element.

    No forward pass through the target is involved.
    """
    terms = active_terms(prior, cfg)
    if prior.is_empty():
        raise AttackConfigError("basic objective needs a nonempty prior")
    values: dict[str, float] = {}
    total = Tensor(0.0)
    if not terms:
        return total, values

    def s(metric: str, k: np.ndarray) -> Tensor:
        if metric in ("kl", "mse") and k.shape != a_hat.shape:
            # distances need equal shapes: compare against the element's gram matrix
            k = 1.0 / (1.0 + np.exp(-(k @ k.T)))
        return M.dependency(metric, a_hat, Tensor(k), **cfg.metric_opts(metric))

    def add(name, weight, t):
        nonlocal total
        values[name] = t.item()
        total = total + ad.scale(t, weight)

    if "x" in terms:
        add("x", cfg.alpha_x, s(cfg.metric_p, prior.features))
    if "prop" in terms:
        acc = None
        for i in sorted(prior.h_layers):
            v = s(cfg.metric_p, prior.h_layers[i])
            acc = v if acc is None else acc + v
        add("prop", cfg.alpha_p, acc)
    if "out" in terms:
        add("out", cfg.alpha_o, s(cfg.metric_o, prior.y_logits))
    if "label" in terms:
        add("label", cfg.alpha_s, s(cfg.metric_s, one_hot(prior.y_labels, prior.num_classes or int(prior.y_labels.max()) + 1)))
    if "extra" in terms:
        acc = None
        for k in prior.extra.values():
            v = s(cfg.metric_p, k)
            acc = v if acc is None else acc + v
        add("extra", cfg.alpha_extra, acc)
    if "entropy" in terms and probs is not None:
        ent = M.adjacency_entropy(probs, triu=probs.rows == 1 and probs.cols != 1)
        add("entropy", -cfg.alpha_c, ent)
    return total, values


# ---------------------------------------------------------------------------
# optimisation loop
# ---------------------------------------------------------------------------


def _validate(prior: PriorKnowledge, cfg: AttackConfig, n: int) -> None:
    if prior.is_empty():
        raise AttackConfigError("prior knowledge is empty")
    if prior.n_nodes != n:
        raise AttackConfigError(f"prior covers {prior.n_nodes} nodes, graph has {n}")
    if cfg.mode != "basic" and not prior.x_available:
        raise AttackConfigError(f"{cfg.mode} mode forwards the target and needs X in the prior")
    if cfg.mode == "graphmi" and prior.y_labels is None:
        raise AttackConfigError("graphmi mode needs labels Y in the prior")
    if cfg.param_form == "generator" and cfg.mode == "basic":
        raise AttackConfigError("the generator form needs the target model; use direct or gaussian for basic mode")
    terms = active_terms(prior, cfg)
    if not terms:
        raise AttackConfigError("objective is empty: every prior element has zero weight")
    if terms == ["entropy"]:
        warnings.warn("all approximation weights are zero; only the entropy term is optimised", stacklevel=3)


def run_attack(
    target: GnnModel | None,
    g: Graph,
    prior: PriorKnowledge,
    cfg: AttackConfig,
    rng=None,
    log_every: int = 1,
    callback=None,
) -> tuple[np.ndarray, ExperimentReport]:
    """Optimise the attacker's distribution; return the best-objective mean adjacency and a trace.

    Only the node count, features and prior of ``g`` are read; its edges are never touched.
    """
    n = g.n_nodes
    _validate(prior, cfg, n)
    rng = rng if isinstance(rng, RngStream) else RngStream(0 if rng is None else int(rng))
    frozen = None
    if cfg.mode != "basic":
        if target is None:
            raise AttackConfigError(f"{cfg.mode} mode needs a target model")
        frozen = target.copy().freeze()
    x_np = prior.features if prior.features is not None else g.x
    state = init_attack(cfg.param_form, n, frozen, x_np, cfg, rng)
    state.optimizer = OptimizerState(cfg.optimizer, cfg.lr)
    gumbel_gen = rng.stream("gumbel") if cfg.gumbel else None
    gaussian_gen = rng.stream("gaussian")
    feat_gen = rng.stream("features")
    eff = effective_prior(prior, cfg)
    prep = PreparedPrior(eff, cfg) if cfg.mode != "basic" else None
    report = ExperimentReport("attack", config={k: getattr(cfg, k) for k in AttackConfig.field_names()})
    t0 = time.perf_counter()

    for it in range(cfg.iterations + 1):
        final = it == cfg.iterations
        if final:
            # score the final parameters without noise so the last update is not wasted
            with ad.no_grad():
                a_hat, clean = sample_adjacency(state, cfg, None, None)
                obj, terms = _evaluate(frozen, a_hat, clean, x_np, eff, cfg, prep, feat_gen=None)
        else:
            a_hat, clean = sample_adjacency(state, cfg, gumbel_gen, gaussian_gen)
            obj, terms = _evaluate(frozen, a_hat, clean, x_np, eff, cfg, prep, feat_gen)
        value = obj.item()
        if not np.isfinite(value):
            bad = [k for k, v in terms.items() if not np.isfinite(v)] or list(terms)
            raise FloatingPointError(f"attack objective became non-finite at iteration {it}; terms: {bad}")
        if value > state.best_objective:
            state.best_objective = value
            state.best_probs = clean.value[0].copy()
        if it % log_every == 0 or final:
            report.add_row(iteration=it, objective=value, best_objective=state.best_objective, **terms)
        if callback is not None:
            callback(it, state, value)
        if final:
            break
        if obj.requires_grad:
            ad.scale(obj, -1.0).backward()
        for p in state.params:
            if p.grad is None:
                p.grad = np.zeros_like(p.value)
        if cfg.normalize_grad:
            _normalize(state.params)
        if cfg.lr_decay == "sqrt":
            state.optimizer.learning_rate = cfg.lr / np.sqrt(it + 1.0)
        optimizer_step(state.optimizer, state.params)
        state.iteration += 1

    a_best = triu_to_dense(state.best_probs, n)
    report.summary = {
        "best_objective": state.best_objective,
        "iterations": cfg.iterations,
        "wall_time_s": time.perf_counter() - t0,
    }
    return a_best, report


def _normalize(params: list[Tensor]) -> None:
    size = sum(p.grad.size for p in params)
    rms = np.sqrt(sum(float(np.vdot(p.grad, p.grad)) for p in params) / size)
    if rms > 0:
        for p in params:
            p.grad = p.grad / rms


def _evaluate(frozen, a_hat, clean, x_np, prior, cfg, prep, feat_gen):
    if cfg.mode == "basic":
        return basic_objective(a_hat, prior, cfg, clean)
    if cfg.feature_perturb_p > 0 and feat_gen is not None:
        x = perturb_features(x_np, cfg.feature_perturb_p, feat_gen)
    else:
        x = Tensor(x_np)
    trace = forward(frozen, a_hat, x)
    return attack_objective(trace, prior, clean, cfg, prep)
