"""Differentiable dependency measurements between paired sample matrices.

Rows are samples. ``dp``, ``hsic``, ``cka`` and ``kde`` grow with dependency;
``kl`` and ``mse`` are distances. :func:`dependency` flips the sign of the
distances so callers can always maximise.

Inputs that stay fixed across many calls (a prior, the true adjacency) can be
wrapped once with :func:`prepare` to cache their kernel matrices.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

METRICS = ("dp", "hsic", "cka", "kde", "kl", "mse")
DISTANCES = ("kl", "mse")


class MetricError(ValueError):
    pass


@dataclass
class Prepared:
    """A constant input with cached per-metric quantities."""

    x: Tensor
    centered: Tensor | None = None
    gram_c: Tensor | None = None  # H K H for non-linear HSIC
    kernel: Tensor | None = None  # Gaussian kernel for KDE
    self_hsic: float | None = None
    kind: str | None = None


def _t(x) -> Tensor:
    if isinstance(x, Prepared):
        return x.x
    return ad.as_tensor(x)


def _rows_match(x, y, name: str) -> None:
    if _t(x).rows != _t(y).rows:
        raise MetricError(f"{name}: row counts differ ({_t(x).rows} vs {_t(y).rows})")


# ---------------------------------------------------------------------------
# kernels
# ---------------------------------------------------------------------------


def sq_distances(x: Tensor) -> Tensor:
    """Pairwise squared Euclidean distances between rows (clamped at 0 by value only)."""
    sq = ad.row_sum(x * x)
    d2 = ad.outer_add(sq, ad.transpose(sq)) - ad.scale(x @ ad.transpose(x), 2.0)
    # round-off can push tiny distances below zero; shift by a constant so the gradient is untouched
    neg = np.minimum(d2.value, 0.0)
    if np.any(neg):
        d2 = d2 - Tensor(neg)
    return d2


def median_bandwidth(x: np.ndarray) -> float:
    n = x.shape[0]
    sq = (x * x).sum(axis=1)
    d2 = np.maximum(sq[:, None] + sq[None, :] - 2.0 * x @ x.T, 0.0)
    d = np.sqrt(d2[np.triu_indices(n, k=1)])
    d = d[d > 0]
    return float(np.median(d)) if d.size else 0.0


def silverman_bandwidth(x: np.ndarray) -> float:
    n, d = x.shape
    sigma = float(np.mean(np.std(x, axis=0, ddof=1))) if n > 1 else 0.0
    return sigma * (4.0 / (d + 2.0)) ** (1.0 / (d + 4.0)) * n ** (-1.0 / (d + 4.0))


def _resolve_bandwidth(x: np.ndarray, rule, default: str) -> float:
    rule = default if rule is None else rule
    if isinstance(rule, str):
        if rule == "median":
            h = median_bandwidth(x)
        elif rule == "silverman":
            h = silverman_bandwidth(x)
        else:
            raise MetricError(f"unknown bandwidth rule {rule!r}")
        # data with no spread gives h = 0; fall back to unit width
        return h if h > 0 else 1.0
    h = float(rule)
    if not h > 0:
        raise MetricError(f"kernel bandwidth must be positive, got {h}")
    return h


def gaussian_kernel(x: Tensor, bandwidth) -> Tensor:
    return ad.exp(ad.scale(sq_distances(x), -1.0 / (2.0 * bandwidth * bandwidth)))


# ---------------------------------------------------------------------------
# measurements
# ---------------------------------------------------------------------------


def dp(x, y) -> Tensor:
    """||Y^T X||_F^2, equal to tr(X X^T Y Y^T)."""
    _rows_match(x, y, "dp")
    return ad.frobenius_sq(ad.transpose(_t(y)) @ _t(x))


def _centered(x) -> Tensor:
    if isinstance(x, Prepared) and x.centered is not None:
        return x.centered
    return ad.center(_t(x))


def _centered_gram(x, kernel: str, bandwidth) -> Tensor:
    if isinstance(x, Prepared) and x.gram_c is not None:
        return x.gram_c
    t = _t(x)
    h = _resolve_bandwidth(t.value, bandwidth, "median")
    k = gaussian_kernel(t, h)
    return ad.center(ad.transpose(ad.center(k)))


def hsic(x, y, kernel: str = "linear", bandwidth=None) -> Tensor:
    """tr(K H L H) / (n - 1)^2."""
    _rows_match(x, y, "hsic")
    n = _t(x).rows
    if n < 2:
        raise MetricError("hsic needs at least two samples")
    norm = 1.0 / (n - 1) ** 2
    if kernel == "linear":
        # tr(H X X^T H Y Y^T) = ||Yc^T Xc||_F^2
        return ad.scale(ad.frobenius_sq(ad.transpose(_centered(y)) @ _centered(x)), norm)
    if kernel == "rbf":
        kc = _centered_gram(x, kernel, bandwidth)
        lc = _centered_gram(y, kernel, bandwidth)
        return ad.scale(ad.reduce_sum(kc * lc), norm)
    raise MetricError(f"unknown kernel {kernel!r}")


def _self_hsic(x, kernel, bandwidth) -> Tensor:
    if isinstance(x, Prepared) and x.self_hsic is not None:
        return Tensor(x.self_hsic)
    return hsic(x, x, kernel, bandwidth)


def cka(x, y, kernel: str = "linear", bandwidth=None) -> Tensor:
    """HSIC(K, L) / sqrt(HSIC(K, K) HSIC(L, L))."""
    _rows_match(x, y, "cka")
    hxy = hsic(x, y, kernel, bandwidth)
    hxx = _self_hsic(x, kernel, bandwidth)
    hyy = _self_hsic(y, kernel, bandwidth)
    for name, v in (("first", hxx), ("second", hyy)):
        if not v.item() > 1e-12:
            raise MetricError(f"cka: {name} argument is degenerate (self-HSIC {v.item():.3g})")
    return hxy * ad.power(hxx * hyy, -0.5)


def scaled_gaussian_kernel(x: Tensor) -> Tensor:
    """Gaussian kernel whose squared width is the mean pairwise squared distance.

    The width is part of the graph, so the kernel is invariant to rescaling x.
    """
    d2 = sq_distances(x)
    width = ad.scale(ad.reduce_mean(d2), 2.0)
    if not width.item() > 0:
        return ad.exp(ad.scale(d2, -0.5))
    return ad.exp(ad.scale(ad.div(d2, width), -1.0))


def _kde_kernel(x, bandwidth) -> Tensor:
    if isinstance(x, Prepared) and x.kernel is not None:
        return x.kernel
    t = _t(x)
    if bandwidth == "scale":
        return scaled_gaussian_kernel(t)
    return gaussian_kernel(t, _resolve_bandwidth(t.value, bandwidth, "silverman"))


def kde_mi(x, y, bandwidth=None) -> Tensor:
    """Plug-in MI from Gaussian kernel density estimates.

    (1/n) sum_i log(n J_i / (R_i C_i)) with J = K_X * K_Y entrywise and
    J_i, R_i, C_i the row sums of J, K_X, K_Y.
    """
    _rows_match(x, y, "kde")
    n = _t(x).rows
    if n < 2:
        raise MetricError("kde needs at least two samples")
    kx = _kde_kernel(x, bandwidth)
    ky = _kde_kernel(y, bandwidth)
    j = ad.row_sum(kx * ky)
    r = ad.row_sum(kx)
    c = ad.row_sum(ky)
    ratio = ad.div(ad.scale(j, float(n)), r * c)
    return ad.reduce_mean(ad.log(ratio))


def kl_rows(x, y) -> Tensor:
    """Mean over rows of KL(softmax(x_i) || softmax(y_i))."""
    x, y = _t(x), _t(y)
    if x.shape != y.shape:
        raise MetricError(f"kl: shapes differ {x.shape} vs {y.shape}")
    logp = ad.log_softmax(x)
    logq = ad.log_softmax(y)
    p = ad.exp(logp)
    return ad.scale(ad.reduce_sum(p * (logp - logq)), 1.0 / x.rows)


def mse(x, y) -> Tensor:
    x, y = _t(x), _t(y)
    if x.shape != y.shape:
        raise MetricError(f"mse: shapes differ {x.shape} vs {y.shape}")
    return ad.scale(ad.frobenius_sq(x - y), 1.0 / x.value.size)


def adjacency_entropy(p, triu: bool = False) -> Tensor:
    """Mean Bernoulli entropy (nats) over the strict upper triangle.

    With ``triu=True`` the input is already the 1 x m row of upper-triangle entries.
    """
    p = ad.as_tensor(p)
    vals = p.value[0] if triu else p.value[np.triu_indices(p.rows, k=1)]
    if vals.size == 0:
        return Tensor(0.0)
    if np.any(vals < 0) or np.any(vals > 1):
        raise MetricError("edge probabilities must lie in [0, 1]")
    with np.errstate(divide="ignore", invalid="ignore"):
        h = -np.where(vals > 0, vals * np.log(vals), 0.0) - np.where(vals < 1, (1 - vals) * np.log1p(-vals), 0.0)
    m = vals.size
    shape = p.shape
    n = p.rows

    def bw(g):
        q = np.clip(vals, 1e-12, 1 - 1e-12)
        d = (np.log1p(-q) - np.log(q)) * (g[0, 0] / m)
        if triu:
            return (d.reshape(shape),)
        out = np.zeros(shape)
        out[np.triu_indices(n, k=1)] = d
        return (out,)

    return ad.custom_op(np.array([[h.mean()]]), (p,), bw, "adjacency_entropy")


# ---------------------------------------------------------------------------
# dispatch
# ---------------------------------------------------------------------------


def measure(kind: str, x, y, kernel: str = "linear", bandwidth=None) -> Tensor:
    """Raw value of measurement ``kind``."""
    if kind == "dp":
        return dp(x, y)
    if kind == "hsic":
        return hsic(x, y, kernel, bandwidth)
    if kind == "cka":
        return cka(x, y, kernel, bandwidth)
    if kind == "kde":
        return kde_mi(x, y, bandwidth)
    if kind == "kl":
        return kl_rows(x, y)
    if kind == "mse":
        return mse(x, y)
    raise MetricError(f"unknown metric {kind!r}; expected one of {METRICS}")


def dependency(kind: str, x, y, **opts) -> Tensor:
    """Higher means more dependent; distances are negated."""
    v = measure(kind, x, y, **opts)
    return ad.scale(v, -1.0) if kind in DISTANCES else v


def prepare(kind: str, x, kernel: str = "linear", bandwidth=None) -> Prepared:
    """Cache the constant-side quantities ``kind`` needs for ``x``."""
    t = ad.as_tensor(x).detach()
    p = Prepared(t, kind=kind)
    with ad.no_grad():
        if kind in ("hsic", "cka"):
            if kernel == "linear":
                p.centered = ad.center(t)
            else:
                p.gram_c = _centered_gram(t, kernel, bandwidth)
            if kind == "cka":
                p.self_hsic = hsic(p, p, kernel, bandwidth).item()
        elif kind == "kde":
            p.kernel = _kde_kernel(t, bandwidth)
    return p
