"""Graph container, TSV ingestion, the GCN kernel and random perturbations."""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .rng import RngStream, as_generator

TRAIN, VAL, TEST = 0, 1, 2
SPLIT_NAMES = ("train", "val", "test")


class IngestionError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Graph:
    n_nodes: int
    edges: np.ndarray  # (m, 2) int64, rows (i, j) with i < j, lexicographically sorted
    labels: np.ndarray
    num_classes: int
    features: np.ndarray | None = None  # None means identity features
    split: np.ndarray | None = None
    name: str = "graph"

    def __post_init__(self):
        e = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        if e.size:
            lo, hi = np.minimum(e[:, 0], e[:, 1]), np.maximum(e[:, 0], e[:, 1])
            e = np.stack([lo, hi], axis=1)
            e = e[np.lexsort((e[:, 1], e[:, 0]))]
        object.__setattr__(self, "edges", e)
        object.__setattr__(self, "labels", np.asarray(self.labels, dtype=np.int64))
        validate_graph(self)

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    @property
    def has_features(self) -> bool:
        return self.features is not None

    @property
    def x(self) -> np.ndarray:
        """Feature matrix, identity when the dataset has none."""
        return self.features if self.features is not None else np.eye(self.n_nodes)

    def adjacency(self) -> np.ndarray:
        a = np.zeros((self.n_nodes, self.n_nodes))
        if self.n_edges:
            a[self.edges[:, 0], self.edges[:, 1]] = 1.0
            a[self.edges[:, 1], self.edges[:, 0]] = 1.0
        return a

    def idx(self, part: str) -> np.ndarray:
        if self.split is None:
            raise ValueError("graph has no split assigned")
        return np.flatnonzero(self.split == SPLIT_NAMES.index(part))

    @property
    def train_idx(self) -> np.ndarray:
        return self.idx("train")

    @property
    def val_idx(self) -> np.ndarray:
        return self.idx("val")

    @property
    def test_idx(self) -> np.ndarray:
        return self.idx("test")

    def with_edges(self, edges: np.ndarray) -> "Graph":
        return replace(self, edges=edges)

    def with_split(self, split: np.ndarray) -> "Graph":
        return replace(self, split=np.asarray(split, dtype=np.int8))

    def without_edges(self) -> "Graph":
        return replace(self, edges=np.zeros((0, 2), dtype=np.int64))

    def same_as(self, other: "Graph") -> bool:
        def eq(a, b):
            return (a is None and b is None) or (a is not None and b is not None and np.array_equal(a, b))

        return (
            self.n_nodes == other.n_nodes
            and self.num_classes == other.num_classes
            and np.array_equal(self.edges, other.edges)
            and np.array_equal(self.labels, other.labels)
            and eq(self.features, other.features)
            and eq(self.split, other.split)
        )


def validate_graph(g: Graph) -> None:
    n = g.n_nodes
    e = g.edges
    if e.size:
        if e.min() < 0 or e.max() >= n:
            raise IngestionError(f"edge endpoint out of range [0, {n})")
        if np.any(e[:, 0] == e[:, 1]):
            raise IngestionError("self-loops are not allowed")
        if len(np.unique(e[:, 0] * n + e[:, 1])) != len(e):
            raise IngestionError("duplicate edges")
    if g.labels.shape != (n,):
        raise IngestionError(f"expected {n} labels, got {g.labels.shape[0]}")
    if n and (g.labels.min() < 0 or g.labels.max() >= g.num_classes):
        raise IngestionError(f"labels must lie in [0, {g.num_classes})")
    if g.features is not None and g.features.shape[0] != n:
        raise IngestionError(f"features have {g.features.shape[0]} rows, expected {n}")
    if g.split is not None and (g.split.shape != (n,) or np.any((g.split < 0) | (g.split > 2))):
        raise IngestionError("every node needs a split tag in {train, val, test}")


# ---------------------------------------------------------------------------
# TSV ingestion
# ---------------------------------------------------------------------------


def _read_lines(path: Path) -> list[str]:
    text = path.read_text(encoding="utf-8")
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    return lines


def load_dataset(directory: str | Path, split_fractions=(0.1, 0.1, 0.8), seed: int = 0) -> Graph:
    """Read edges.tsv, labels.tsv, meta.json and the optional features.tsv / split.tsv.

    Without split.tsv a stratified split with ``split_fractions`` is drawn from
    ``seed``.
    """
    d = Path(directory)
    for req in ("edges.tsv", "labels.tsv", "meta.json"):
        if not (d / req).is_file():
            raise IngestionError(f"{d}: missing {req}")
    meta = json.loads((d / "meta.json").read_text(encoding="utf-8"))
    n = int(meta["n"])
    num_classes = int(meta["C"])

    labels = np.empty(len(_read_lines(d / "labels.tsv")), dtype=np.int64)
    for ln, line in enumerate(_read_lines(d / "labels.tsv"), start=1):
        try:
            labels[ln - 1] = int(line.strip())
        except ValueError:
            raise IngestionError(f"labels.tsv line {ln}: not an integer: {line!r}") from None
        if not 0 <= labels[ln - 1] < num_classes:
            raise IngestionError(f"labels.tsv line {ln}: class {labels[ln - 1]} outside [0, {num_classes})")
    if len(labels) != n:
        raise IngestionError(f"labels.tsv has {len(labels)} lines, meta.json says n={n}")

    edges = []
    seen: dict[tuple[int, int], int] = {}
    for ln, line in enumerate(_read_lines(d / "edges.tsv"), start=1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise IngestionError(f"edges.tsv line {ln}: expected two tab-separated ids")
        try:
            i, j = int(parts[0]), int(parts[1])
        except ValueError:
            raise IngestionError(f"edges.tsv line {ln}: non-integer id") from None
        if not (0 <= i < n and 0 <= j < n):
            raise IngestionError(f"edges.tsv line {ln}: id out of range [0, {n})")
        if i == j:
            raise IngestionError(f"edges.tsv line {ln}: self-loop on node {i}")
        key = (min(i, j), max(i, j))
        if key in seen:
            raise IngestionError(f"edges.tsv line {ln}: duplicate of line {seen[key]}")
        seen[key] = ln
        edges.append(key)

    features = None
    if (d / "features.tsv").is_file():
        rows = _read_lines(d / "features.tsv")
        if len(rows) != n:
            raise IngestionError(f"features.tsv has {len(rows)} lines, expected {n}")
        width = None
        features = np.empty((n, len(rows[0].split("\t")) if rows else 0))
        for ln, line in enumerate(rows, start=1):
            vals = line.split("\t")
            if width is None:
                width = len(vals)
            if len(vals) != width:
                raise IngestionError(f"features.tsv line {ln}: {len(vals)} columns, expected {width}")
            try:
                features[ln - 1] = np.array(vals, dtype=float)
            except ValueError:
                raise IngestionError(f"features.tsv line {ln}: non-numeric value") from None

    split = None
    if (d / "split.tsv").is_file():
        tags = _read_lines(d / "split.tsv")
        if len(tags) != n:
            raise IngestionError(f"split.tsv has {len(tags)} lines, expected {n}")
        split = np.empty(n, dtype=np.int8)
        for ln, tag in enumerate(tags, start=1):
            if tag.strip() not in SPLIT_NAMES:
                raise IngestionError(f"split.tsv line {ln}: unknown tag {tag!r}")
            split[ln - 1] = SPLIT_NAMES.index(tag.strip())

    g = Graph(n, np.array(edges, dtype=np.int64).reshape(-1, 2), labels, num_classes, features, split, meta.get("name", d.name))
    if split is None:
        g = make_split(g, split_fractions, RngStream(seed))
    return g


def _fmt(v: float) -> str:
    return str(int(v)) if float(v).is_integer() and abs(v) < 1e15 else repr(float(v))


def save_dataset(g: Graph, directory: str | Path, write_split: bool = True) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    with open(d / "edges.tsv", "w", encoding="utf-8", newline="\n") as fh:
        for i, j in g.edges:
            fh.write(f"{i}\t{j}\n")
    with open(d / "labels.tsv", "w", encoding="utf-8", newline="\n") as fh:
        for y in g.labels:
            fh.write(f"{y}\n")
    if g.features is not None:
        with open(d / "features.tsv", "w", encoding="utf-8", newline="\n") as fh:
            for row in g.features:
                fh.write("\t".join(_fmt(v) for v in row) + "\n")
    if write_split and g.split is not None:
        with open(d / "split.tsv", "w", encoding="utf-8", newline="\n") as fh:
            for s in g.split:
                fh.write(SPLIT_NAMES[s] + "\n")
    meta = {"name": g.name, "n": g.n_nodes, "d": None if g.features is None else g.features.shape[1], "C": g.num_classes}
    (d / "meta.json").write_text(json.dumps(meta, indent=2) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# Kernel and perturbations
# ---------------------------------------------------------------------------


def validate_adjacency(a: np.ndarray, symmetric: bool = True) -> None:
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"adjacency must be square, got {a.shape}")
    if np.any(a < 0) or np.any(a > 1):
        raise ValueError("adjacency entries must lie in [0, 1]")
    if np.any(np.diag(a) != 0):
        raise ValueError("adjacency must have a zero diagonal")
    if symmetric and not np.allclose(a, a.T, atol=1e-12, rtol=0):
        raise ValueError("adjacency is not symmetric")


def normalize_adjacency(a) -> Tensor:
    """psi(A) = D^-1/2 (A + I) D^-1/2 with D the degree of A + I.

    Differentiable in ``a`` when it is a tensor that requires grad.
    """
    a = ad.as_tensor(a)
    if a.rows != a.cols:
        raise ad.ShapeError(f"adjacency must be square, got {a.shape}")
    at = a.value + np.eye(a.rows)
    deg = at.sum(axis=1)
    r = 1.0 / np.sqrt(deg)
    out = at * r[:, None] * r[None, :]

    def bw(g):
        # out_ij = at_ij r_i r_j, r = deg^-1/2, deg_i = sum_j at_ij
        gr = (g * at * r[None, :]).sum(axis=1) + (g * at * r[:, None]).sum(axis=0)
        gdeg = gr * (-0.5) * r**3
        return (g * (r[:, None] * r[None, :]) + gdeg[:, None],)

    return ad.custom_op(out, (a,), bw, "normalize_adjacency")


def drop_edge(g: Graph, p: float, rng) -> Graph:
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"drop probability must be in [0, 1], got {p}")
    if p == 0.0 or g.n_edges == 0:
        return g
    keep = as_generator(rng, "dropedge").random(g.n_edges) >= p
    return g.with_edges(g.edges[keep])


def gumbel_noise(shape, rng) -> np.ndarray:
    eps = as_generator(rng, "gumbel").random(shape)
    eps = np.clip(eps, np.finfo(float).tiny, 1.0 - 1e-16)
    return -np.log(-np.log(eps))


def gumbel_perturb_triu(p: Tensor, rng, temperature: float = 1.0, noise: np.ndarray | None = None) -> Tensor:
    """Perturb a 1 x m row of upper-triangle entries: sigmoid((p - log(-log eps)) / tau)."""
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    if noise is None:
        noise = gumbel_noise(p.shape, rng)
    return ad.sigmoid(ad.scale(p + Tensor(noise), 1.0 / temperature))


def gumbel_perturb(p, rng, temperature: float = 1.0) -> Tensor:
    """Symmetric Gumbel perturbation of an n x n edge-probability matrix."""
    p = ad.as_tensor(p)
    n = p.rows
    return ad.sym_from_triu(gumbel_perturb_triu(ad.triu_values(p), rng, temperature), n)


def sample_bernoulli_edges(p, rng) -> np.ndarray:
    pv = p.value if isinstance(p, Tensor) else np.asarray(p, dtype=float)
    n = pv.shape[0]
    iu = np.triu_indices(n, k=1)
    draws = (as_generator(rng, "bernoulli").random(len(iu[0])) < pv[iu]).astype(float)
    out = np.zeros((n, n))
    out[iu] = draws
    return out + out.T


def perturb_features(x, p: float, rng) -> Tensor:
    """Inverted-dropout mask: keep each entry with probability 1 - p, rescale by 1 / (1 - p)."""
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"feature perturbation probability must be in [0, 1], got {p}")
    xv = x.value if isinstance(x, Tensor) else np.asarray(x, dtype=float)
    if p == 0.0:
        return Tensor(xv.copy())
    if p == 1.0:
        return Tensor(np.zeros_like(xv))
    keep = as_generator(rng, "features").random(xv.shape) >= p
    return Tensor(np.where(keep, xv / (1.0 - p), 0.0))


def make_split(g: Graph, fractions=(0.1, 0.1, 0.8), rng=None) -> Graph:
    """Stratified random train/val/test assignment."""
    fr = np.asarray(fractions, dtype=float)
    if fr.shape != (3,) or np.any(fr < 0) or not np.isclose(fr.sum(), 1.0):
        raise ValueError(f"split fractions must be three nonnegative values summing to 1, got {fractions}")
    gen = as_generator(rng, "split")
    split = np.empty(g.n_nodes, dtype=np.int8)

    def assign(nodes: np.ndarray) -> None:
        nodes = nodes[gen.permutation(len(nodes))]
        k = len(nodes)
        n_train = int(round(fr[0] * k))
        n_val = min(k - n_train, int(round(fr[1] * k)))
        split[nodes[:n_train]] = TRAIN
        split[nodes[n_train : n_train + n_val]] = VAL
        split[nodes[n_train + n_val :]] = TEST

    counts = np.bincount(g.labels, minlength=g.num_classes)
    present = counts[counts > 0]
    if present.size and present.min() < 3:
        warnings.warn("a class has fewer than 3 nodes; using an unstratified split", stacklevel=2)
        assign(np.arange(g.n_nodes))
    else:
        for c in range(g.num_classes):
            members = np.flatnonzero(g.labels == c)
            if members.size:
                assign(members)
    return g.with_split(split)


def generate_sbm(
    n: int,
    blocks: int,
    p_in: float,
    p_out: float,
    d: int,
    rng=None,
    noise: float = 1.0,
    split_fractions=(0.1, 0.1, 0.8),
) -> Graph:
    """Stochastic block model with one-hot-plus-Gaussian features and block labels."""
    if n < 1 or blocks < 1 or d < blocks:
        raise ValueError("need n >= 1, blocks >= 1 and d >= blocks")
    if not (0 <= p_in <= 1 and 0 <= p_out <= 1):
        raise ValueError("edge probabilities must lie in [0, 1]")
    stream = rng if isinstance(rng, RngStream) else RngStream(0 if rng is None else int(rng))
    gen = stream.stream("sbm")
    labels = np.arange(n) % blocks
    labels = labels[gen.permutation(n)]
    iu = np.triu_indices(n, k=1)
    same = labels[iu[0]] == labels[iu[1]]
    prob = np.where(same, p_in, p_out)
    keep = gen.random(len(prob)) < prob
    edges = np.stack([iu[0][keep], iu[1][keep]], axis=1)
    feats = np.zeros((n, d))
    feats[np.arange(n), labels] = 1.0
    feats += noise * gen.normal(size=(n, d))
    g = Graph(n, edges, labels, blocks, feats, None, f"sbm-{n}-{blocks}")
    return make_split(g, split_fractions, stream)


def triu_scores(s: np.ndarray) -> np.ndarray:
    return s[np.triu_indices(s.shape[0], k=1)]

