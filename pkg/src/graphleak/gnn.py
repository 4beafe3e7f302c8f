"""GCN, GAT and GraphSAGE forward models, standard training and model files."""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .graph import Graph, drop_edge, normalize_adjacency
from .optim import OptimizerState, clip_grad_norm, optimizer_step
from .report import ExperimentReport
from .rng import RngStream, as_generator

ARCHS = ("gcn", "gat", "sage")
MODEL_FILE_VERSION = 1


class ModelFileError(ValueError):
    pass


@dataclass
class GnnModel:
    arch: str
    dims: list[int]  # [d_in, h_1, ..., h_L]
    num_classes: int
    weights: list[Tensor]
    head_w: Tensor
    head_b: Tensor
    att_src: list[Tensor] = field(default_factory=list)
    att_dst: list[Tensor] = field(default_factory=list)
    activation: str = "relu"

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    def parameters(self) -> list[Tensor]:
        return [*self.weights, *self.att_src, *self.att_dst, self.head_w, self.head_b]

    def copy(self) -> "GnnModel":
        def c(ts):
            return [Tensor(t.value.copy(), requires_grad=t.requires_grad, name=t.name) for t in ts]

        return GnnModel(
            self.arch,
            list(self.dims),
            self.num_classes,
            c(self.weights),
            c([self.head_w])[0],
            c([self.head_b])[0],
            c(self.att_src),
            c(self.att_dst),
            self.activation,
        )

    def freeze(self) -> "GnnModel":
        for p in self.parameters():
            p.requires_grad = False
            p.grad = None
        return self

    def state_arrays(self) -> list[np.ndarray]:
        return [p.value.copy() for p in self.parameters()]

    def load_arrays(self, arrays: list[np.ndarray]) -> None:
        for p, a in zip(self.parameters(), arrays):
            p.value = a.copy()


@dataclass
class ForwardTrace:
    hidden: list[Tensor]
    logits: Tensor
    adjacency: Tensor


def _glorot(gen: np.random.Generator, m: int, n: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (m + n))
    return gen.uniform(-bound, bound, size=(m, n))


def init_model(
    arch: str,
    dims: list[int],
    num_classes: int,
    rng=None,
    activation: str = "relu",
    label: str = "init",
) -> GnnModel:
    """Glorot-uniform weights, zero head bias."""
    if arch not in ARCHS:
        raise ValueError(f"unknown architecture {arch!r}; expected one of {ARCHS}")
    if len(dims) < 2 or any(int(d) < 1 for d in dims) or num_classes < 1:
        raise ValueError(f"invalid dims {dims} / classes {num_classes}")
    if activation not in ("relu", "leaky_relu"):
        raise ValueError(f"unknown activation {activation!r}")
    gen = as_generator(rng, label)
    weights, att_src, att_dst = [], [], []
    for i in range(len(dims) - 1):
        weights.append(Tensor(_glorot(gen, dims[i], dims[i + 1]), requires_grad=True, name=f"W{i + 1}"))
        if arch == "gat":
            att_src.append(Tensor(_glorot(gen, dims[i + 1], 1), requires_grad=True, name=f"a_src{i + 1}"))
            att_dst.append(Tensor(_glorot(gen, dims[i + 1], 1), requires_grad=True, name=f"a_dst{i + 1}"))
    head_w = Tensor(_glorot(gen, dims[-1], num_classes), requires_grad=True, name="W_head")
    head_b = Tensor(np.zeros((1, num_classes)), requires_grad=True, name="b_head")
    return GnnModel(arch, [int(d) for d in dims], int(num_classes), weights, head_w, head_b, att_src, att_dst, activation)


def default_model(arch: str, g: Graph, hidden: int = 16, layers: int = 2, rng=None, activation: str = "relu") -> GnnModel:
    return init_model(arch, [g.x.shape[1]] + [hidden] * layers, g.num_classes, rng, activation)


# ---------------------------------------------------------------------------
# Layers
# ---------------------------------------------------------------------------


def _act(model: GnnModel, z: Tensor) -> Tensor:
    return ad.relu(z) if model.activation == "relu" else ad.leaky_relu(z, 0.2)


def row_normalize(a: Tensor) -> Tensor:
    """D^-1 A; rows with zero mass stay zero."""
    av = a.value
    deg = av.sum(axis=1)
    inv = np.where(deg > 0, 1.0 / np.where(deg > 0, deg, 1.0), 0.0)
    out = av * inv[:, None]

    def bw(g):
        # out_ij = a_ij / d_i
        gdeg = -(g * out).sum(axis=1) * inv
        return (g * inv[:, None] + gdeg[:, None],)

    return ad.custom_op(out, (a,), bw, "row_normalize")


def _gat_layer(model: GnnModel, i: int, a_tilde: Tensor, h: Tensor) -> Tensor:
    wh = h @ model.weights[i]
    s = wh @ model.att_src[i]
    t = wh @ model.att_dst[i]
    e = ad.leaky_relu(ad.outer_add(s, ad.transpose(t)), 0.2)
    # shift by the (detached) row max; the weighted softmax is invariant to it
    m = e.value.max(axis=1, keepdims=True)
    w = a_tilde * ad.exp(ad.sub(e, Tensor(np.broadcast_to(m, e.shape).copy())))
    att = ad.scale_rows(w, ad.power(ad.row_sum(w), -1.0))
    return att @ wh


def forward(model: GnnModel, a, x, kernel: Tensor | None = None) -> ForwardTrace:
    """Run the model on adjacency ``a`` (array or tensor, possibly soft) and features ``x``.

    ``kernel`` may carry a precomputed propagation matrix for ``a``.
    """
    a = ad.as_tensor(a)
    x = ad.as_tensor(x)
    if a.rows != a.cols or a.rows != x.rows:
        raise ad.ShapeError(f"adjacency {a.shape} and features {x.shape} disagree on node count")
    if x.cols != model.dims[0]:
        raise ad.ShapeError(f"features have {x.cols} columns, model expects {model.dims[0]}")
    if kernel is None:
        kernel = propagation_kernel(model.arch, a)
    h = x
    hidden = []
    for i in range(model.n_layers):
        if model.arch == "gcn":
            z = kernel @ (h @ model.weights[i])
        elif model.arch == "sage":
            hw = h @ model.weights[i]
            z = kernel @ hw + hw
        else:
            z = _gat_layer(model, i, kernel, h)
        h = _act(model, z)
        hidden.append(h)
    ones = Tensor(np.ones((x.rows, 1)))
    logits = h @ model.head_w + ones @ model.head_b
    return ForwardTrace(hidden, logits, a)


def propagation_kernel(arch: str, a) -> Tensor:
    """psi(A) for GCN, row-normalised A for SAGE, A + I for GAT."""
    a = ad.as_tensor(a)
    if arch == "gcn":
        return normalize_adjacency(a)
    if arch == "sage":
        return row_normalize(a)
    if arch == "gat":
        return ad.add(a, Tensor(np.eye(a.rows)))
    raise ValueError(f"unknown architecture {arch!r}")


def predict(model: GnnModel, g: Graph, adjacency: np.ndarray | None = None) -> ForwardTrace:
    with ad.no_grad():
        return forward(model, g.adjacency() if adjacency is None else adjacency, g.x)


def accuracy_of(logits: np.ndarray, labels: np.ndarray, idx: np.ndarray) -> float:
    if len(idx) == 0:
        raise ValueError("accuracy over an empty node set")
    return float(np.mean(np.argmax(logits[idx], axis=1) == labels[idx]))


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


@dataclass
class TrainConfig:
    lr: float = 0.01
    weight_decay: float = 5e-4
    epochs: int = 200
    drop_edge_p: float = 0.0
    clip: float | None = None
    grad_noise: float = 0.0


# extra_loss(trace, epoch) -> (loss tensor or None, {term: value})
ExtraLoss = Callable[[ForwardTrace, int], "tuple[Tensor | None, dict]"]
EpochHook = Callable[[int, ForwardTrace], None]


def fit(
    model: GnnModel,
    g: Graph,
    cfg: TrainConfig,
    rng: RngStream,
    extra_loss: ExtraLoss | None = None,
    extra_params: list[Tensor] | None = None,
    on_epoch: EpochHook | None = None,
    kind: str = "train",
) -> tuple[GnnModel, ExperimentReport]:
    """Minimise train cross-entropy (plus ``extra_loss``); keep the best-validation snapshot."""
    if g.split is None:
        raise ValueError("graph needs a train/val/test split before training")
    train_idx, val_idx, test_idx = g.train_idx, g.val_idx, g.test_idx
    params = model.parameters() + list(extra_params or [])
    for p in params:
        p.requires_grad = True
    state = OptimizerState("adam", cfg.lr, cfg.weight_decay)
    drop_gen = rng.stream("dropedge")
    noise_gen = rng.stream("noise")
    x = Tensor(g.x)
    a_full = g.adjacency()
    k_full = propagation_kernel(model.arch, a_full)
    report = ExperimentReport(kind)
    best = (-1.0, -1, model.state_arrays())
    t0 = time.perf_counter()

    def evaluate_snapshot(epoch: int, trace: ForwardTrace) -> dict:
        nonlocal best
        logits = trace.logits.value
        val_acc = accuracy_of(logits, g.labels, val_idx) if len(val_idx) else float("nan")
        score = val_acc if len(val_idx) else accuracy_of(logits, g.labels, train_idx)
        if score > best[0]:
            best = (score, epoch, model.state_arrays())
        if on_epoch is not None:
            on_epoch(epoch, trace)
        return {
            "train_acc": accuracy_of(logits, g.labels, train_idx),
            "val_acc": val_acc,
            "test_acc": accuracy_of(logits, g.labels, test_idx) if len(test_idx) else float("nan"),
        }

    for epoch in range(cfg.epochs + 1):
        final = epoch == cfg.epochs
        dropped = cfg.drop_edge_p > 0 and not final
        if dropped:
            g_used = drop_edge(g, cfg.drop_edge_p, drop_gen)
            a_used = g_used.adjacency()
            kernel = propagation_kernel(model.arch, a_used)
        else:
            a_used, kernel = a_full, k_full
        if final:
            with ad.no_grad():
                trace = forward(model, a_used, x, kernel)
            report.add_row(epoch=epoch, loss=float("nan"), **evaluate_snapshot(epoch, trace))
            break
        trace = forward(model, a_used, x, kernel)
        loss = ad.cross_entropy(trace.logits, g.labels, train_idx)
        terms = {"ce": loss.item()}
        if extra_loss is not None:
            extra, more = extra_loss(trace, epoch)
            terms.update(more)
            if extra is not None:
                loss = loss + extra
        value = loss.item()
        if not np.isfinite(value):
            bad = [k for k, v in terms.items() if not np.isfinite(v)]
            raise FloatingPointError(f"non-finite loss at epoch {epoch}; offending terms: {bad or list(terms)}")
        if dropped:
            with ad.no_grad():
                clean = forward(model, a_full, x, k_full)
        else:
            clean = trace
        row = {"epoch": epoch, "loss": value, **terms, **evaluate_snapshot(epoch, clean)}
        loss.backward()
        for p in params:
            if p.grad is None:
                p.grad = np.zeros_like(p.value)
        if cfg.clip is not None:
            row["grad_norm"] = clip_grad_norm(params, cfg.clip)
        if cfg.grad_noise > 0:
            bound = cfg.clip if cfg.clip is not None and np.isfinite(cfg.clip) else 1.0
            for p in params:
                p.grad = p.grad + noise_gen.normal(scale=cfg.grad_noise * bound, size=p.grad.shape)
        optimizer_step(state, params)
        report.add_row(**row)

    score, best_epoch, arrays = best
    model.load_arrays(arrays)
    final_trace = predict(model, g)
    report.summary = {
        "best_epoch": best_epoch,
        "val_acc": accuracy_of(final_trace.logits.value, g.labels, val_idx) if len(val_idx) else float("nan"),
        "test_acc": accuracy_of(final_trace.logits.value, g.labels, test_idx) if len(test_idx) else float("nan"),
        "wall_time_s": time.perf_counter() - t0,
    }
    return model, report


def train_standard(model: GnnModel, g: Graph, cfg: TrainConfig | None = None, rng=None, on_epoch: EpochHook | None = None):
    cfg = cfg or TrainConfig()
    rng = rng if isinstance(rng, RngStream) else RngStream(0 if rng is None else int(rng))
    return fit(model, g, cfg, rng, on_epoch=on_epoch, kind="train")


# ---------------------------------------------------------------------------
# Model files
# ---------------------------------------------------------------------------


def _encode(t: Tensor) -> dict:
    return {"shape": list(t.shape), "values": ["%.17g" % v for v in t.value.ravel()]}


def _decode(d: dict, expected: tuple[int, int], what: str) -> Tensor:
    shape = tuple(d["shape"])
    if shape != tuple(expected):
        raise ModelFileError(f"{what}: stored shape {shape} does not match expected {tuple(expected)}")
    vals = np.array([float(v) for v in d["values"]])
    if vals.size != shape[0] * shape[1]:
        raise ModelFileError(f"{what}: {vals.size} values for shape {shape}")
    return Tensor(vals.reshape(shape), name=what)


def save_model(model: GnnModel, path: str | Path) -> None:
    doc = {
        "format": "graphleak-model",
        "version": MODEL_FILE_VERSION,
        "arch": model.arch,
        "dims": model.dims,
        "num_classes": model.num_classes,
        "activation": model.activation,
        "weights": [_encode(w) for w in model.weights],
        "att_src": [_encode(w) for w in model.att_src],
        "att_dst": [_encode(w) for w in model.att_dst],
        "head_w": _encode(model.head_w),
        "head_b": _encode(model.head_b),
    }
    Path(path).write_text(json.dumps(doc, indent=1) + "\n", encoding="utf-8")


def load_model(path: str | Path, expect_arch: str | None = None) -> GnnModel:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ModelFileError(f"{path}: unreadable or truncated model file ({exc.msg} at line {exc.lineno})") from None
    if doc.get("format") != "graphleak-model":
        raise ModelFileError(f"{path}: not a model file")
    if doc.get("version") != MODEL_FILE_VERSION:
        raise ModelFileError(f"{path}: model file version {doc.get('version')} unsupported (expected {MODEL_FILE_VERSION})")
    arch = doc["arch"]
    if expect_arch is not None and arch != expect_arch:
        raise ModelFileError(f"{path}: file holds a {arch} model, expected {expect_arch}")
    dims = [int(d) for d in doc["dims"]]
    c = int(doc["num_classes"])
    L = len(dims) - 1
    if len(doc["weights"]) != L:
        raise ModelFileError(f"{path}: {len(doc['weights'])} weight matrices for {L} layers")
    weights = [_decode(w, (dims[i], dims[i + 1]), f"W{i + 1}") for i, w in enumerate(doc["weights"])]
    att_src = [_decode(w, (dims[i + 1], 1), f"a_src{i + 1}") for i, w in enumerate(doc.get("att_src", []))]
    att_dst = [_decode(w, (dims[i + 1], 1), f"a_dst{i + 1}") for i, w in enumerate(doc.get("att_dst", []))]
    if arch == "gat" and (len(att_src) != L or len(att_dst) != L):
        raise ModelFileError(f"{path}: GAT model is missing attention vectors")
    head_w = _decode(doc["head_w"], (dims[-1], c), "W_head")
    head_b = _decode(doc["head_b"], (1, c), "b_head")
    return GnnModel(arch, dims, c, weights, head_w, head_b, att_src, att_dst, doc.get("activation", "relu"))
