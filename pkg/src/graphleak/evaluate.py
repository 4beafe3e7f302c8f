"""Post-hoc measurements: AUC leakage audits, accuracy, homophily, probes, the information plane."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Iterable

import numpy as np
from scipy.special import expit

from . import autodiff as ad
from . import metrics as M
from .graph import Graph

FULL_PAIR_LIMIT = 4000


class AuditError(ValueError):
    pass


@dataclass
class AuditResult:
    variable: str
    auc: float
    auc_homogeneous: float
    auc_heterogeneous: float
    n_pos: int
    n_neg: int
    negative_sampling: str

    def row(self) -> dict:
        return {
            "variable": self.variable,
            "auc": self.auc,
            "auc_homo": self.auc_homogeneous,
            "auc_hetero": self.auc_heterogeneous,
            "n_pos": self.n_pos,
            "n_neg": self.n_neg,
        }


@dataclass
class PlanePoint:
    epoch: int
    layer: int
    privacy: float
    utility: float


def _auc_against(neg_sorted: np.ndarray, pos: np.ndarray) -> float:
    """Mann-Whitney AUC with midrank ties, negatives pre-sorted."""
    if pos.size == 0:
        return float("nan")
    lo = np.searchsorted(neg_sorted, pos, side="left")
    hi = np.searchsorted(neg_sorted, pos, side="right")
    wins = lo.sum(dtype=np.float64) + 0.5 * (hi - lo).sum(dtype=np.float64)
    return float(wins / (pos.size * neg_sorted.size))


def auc_from_scores(pos: np.ndarray, neg: np.ndarray) -> float:
    return _auc_against(np.sort(np.asarray(neg, dtype=float)), np.asarray(pos, dtype=float))


def _sample_non_edges(g: Graph, k: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    n = g.n_nodes
    gen = np.random.default_rng(seed)
    edge_keys = set((g.edges[:, 0] * n + g.edges[:, 1]).tolist())
    rows, cols, taken = [], [], set()
    while len(rows) < k:
        i = gen.integers(0, n, size=2 * k)
        j = gen.integers(0, n, size=2 * k)
        for a, b in zip(np.minimum(i, j), np.maximum(i, j)):
            key = int(a) * n + int(b)
            if a == b or key in edge_keys or key in taken:
                continue
            taken.add(key)
            rows.append(a)
            cols.append(b)
            if len(rows) == k:
                break
    return np.array(rows), np.array(cols)


def audit_scores(scores: np.ndarray, g: Graph, variable: str = "scores", sampling: str = "auto", seed: int = 0) -> AuditResult:
    """AUC of pair scores ``scores[i, j]`` (i < j) for separating edges from non-edges."""
    n = g.n_nodes
    if scores.shape != (n, n):
        raise AuditError(f"score matrix shape {scores.shape} does not match {n} nodes")
    if g.n_edges == 0:
        raise AuditError("cannot audit a graph with zero edges")
    ei, ej = g.edges[:, 0], g.edges[:, 1]
    pos = scores[ei, ej]
    use_full = sampling == "full" or (sampling == "auto" and n <= FULL_PAIR_LIMIT)
    if use_full:
        mask = np.ones((n, n), dtype=bool)
        mask[np.tril_indices(n)] = False
        mask[ei, ej] = False
        neg = scores[mask]
        label = "full"
    else:
        si, sj = _sample_non_edges(g, g.n_edges, seed)
        neg = scores[si, sj]
        label = f"sampled({len(neg)},{seed})"
    if neg.size == 0:
        raise AuditError("graph has no non-edges to compare against")
    neg = np.sort(neg)
    same = g.labels[ei] == g.labels[ej]
    return AuditResult(
        variable,
        _auc_against(neg, pos),
        _auc_against(neg, pos[same]),
        _auc_against(neg, pos[~same]),
        int(pos.size),
        int(neg.size),
        label,
    )


def _values(z) -> np.ndarray:
    if isinstance(z, ad.Tensor):
        return z.value
    return np.asarray(z, dtype=float)


def audit_auc(z, g: Graph, variable: str = "Z", sampling: str = "auto", seed: int = 0) -> AuditResult:
    """Audit the inner-product scores Z Z^T (the monotone sigmoid is skipped)."""
    zv = _values(z)
    if zv.shape[0] != g.n_nodes:
        raise AuditError(f"representation has {zv.shape[0]} rows for {g.n_nodes} nodes")
    return audit_scores(zv @ zv.T, g, variable, sampling, seed)


def audit_adjacency(a_hat, g: Graph, variable: str = "A_hat", sampling: str = "auto", seed: int = 0) -> AuditResult:
    return audit_scores(_values(a_hat), g, variable, sampling, seed)


def one_hot(labels: np.ndarray, num_classes: int) -> np.ndarray:
    return np.eye(num_classes)[labels]


def ensemble_scores(elements: Iterable[np.ndarray]) -> np.ndarray:
    mats = [_values(e) for e in elements]
    if not mats:
        raise AuditError("ensemble needs at least one prior element")
    acc = np.zeros((mats[0].shape[0],) * 2)
    for k in mats:
        acc += expit(k @ k.T)
    return acc / len(mats)


def ensemble_attack(prior, g: Graph, sampling: str = "auto") -> AuditResult:
    """Average sigma(K K^T) over the prior's elements and audit the result."""
    elements = prior.elements() if hasattr(prior, "elements") else dict(prior)
    if not elements:
        raise AuditError("ensemble needs a nonempty prior")
    return audit_adjacency(ensemble_scores(elements.values()), g, "ensemble{" + ",".join(elements) + "}", sampling)


def accuracy(logits, g: Graph, split: str = "test") -> float:
    idx = g.idx(split) if split != "all" else np.arange(g.n_nodes)
    if idx.size == 0:
        raise ValueError(f"split {split!r} is empty")
    lv = _values(logits)
    return float(np.mean(np.argmax(lv[idx], axis=1) == g.labels[idx]))


def homophily(g: Graph) -> tuple[float, float | None]:
    """(hard, soft): same-label edge fraction and mean endpoint feature cosine."""
    if g.n_edges == 0:
        raise ValueError("homophily is undefined without edges")
    ei, ej = g.edges[:, 0], g.edges[:, 1]
    hard = float(np.mean(g.labels[ei] == g.labels[ej]))
    if g.features is None:
        return hard, None
    x = g.features
    norms = np.linalg.norm(x, axis=1)
    safe = np.where(norms > 0, norms, 1.0)
    cos = (x[ei] * x[ej]).sum(axis=1) / (safe[ei] * safe[ej])
    return hard, float(np.mean(cos))


def ridge_probe_accuracy(h, g: Graph, lam: float = 1e-3, fit_on: str = "train", eval_on: str = "test") -> float:
    """Fit a ridge map from H (plus bias) to one-hot labels in closed form and score it."""
    hv = _values(h)
    feats = np.hstack([hv, np.ones((hv.shape[0], 1))])
    tr, te = g.idx(fit_on), g.idx(eval_on)
    yt = one_hot(g.labels[tr], g.num_classes)
    ht = feats[tr]
    w = np.linalg.solve(ht.T @ ht + lam * np.eye(ht.shape[1]), ht.T @ yt)
    pred = np.argmax(feats[te] @ w, axis=1)
    return float(np.mean(pred == g.labels[te]))


def plane_points(epoch: int, hidden: list, logits, g: Graph, lam: float = 1e-3) -> list[PlanePoint]:
    """Coordinates for every hidden layer plus the head (layer L + 1)."""
    pts = []
    for i, h in enumerate(hidden, start=1):
        pts.append(PlanePoint(epoch, i, audit_auc(h, g).auc, ridge_probe_accuracy(h, g, lam)))
    pts.append(PlanePoint(epoch, len(hidden) + 1, audit_auc(logits, g).auc, accuracy(logits, g, "test")))
    return pts


def information_plane(snapshots: Iterable[tuple[int, list, object]], g: Graph, lam: float = 1e-3) -> list[PlanePoint]:
    """``snapshots`` yields (epoch, hidden list, logits)."""
    out = []
    for epoch, hidden, logits in snapshots:
        out.extend(plane_points(epoch, hidden, logits, g, lam))
    return out


def plane_rows(points: Iterable[PlanePoint]) -> list[dict]:
    return [asdict(p) for p in points]


def chain_mi_profile(target, a_hat, g: Graph, metric: str = "cka", **opts) -> list[float]:
    """s(H_A^i, H_Ahat^i) for each hidden layer of ``target``."""
    from .gnn import forward

    with ad.no_grad():
        ori = forward(target, g.adjacency(), g.x)
        gra = forward(target, _values(a_hat), g.x)
        return [M.measure(metric, h_a, h_b, **opts).item() for h_a, h_b in zip(ori.hidden, gra.hidden)]
