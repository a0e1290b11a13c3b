"""Vector-neuron layers.

Features are ``(N, C, 3)`` tensors: C channels of 3-vectors per point.
Weights only mix channels, so every layer commutes with a rotation applied
on the last axis.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Module, Tensor
from .pointcloud import KnnGraph

VN_EPS = 1e-8
AGGREGATIONS = ("mean", "max", "centroid")


def _init(rng: np.random.Generator, cout: int, cin: int) -> np.ndarray:
    # unit-variance fan-in scaling keeps vector norms roughly constant with depth
    bound = np.sqrt(3.0 / cin)
    return rng.uniform(-bound, bound, size=(cout, cin))


class VNLinear(Module):
    """Channel mixing ``out[c] = sum_j W[c, j] x[j]``; no bias."""

    def __init__(self, cin: int, cout: int, rng: np.random.Generator):
        self.cin, self.cout = cin, cout
        self.weight = ad.parameter(_init(rng, cout, cin))

    def __call__(self, x: Tensor) -> Tensor:
        return vn_linear(x, self.weight)


def vn_linear(x: Tensor, weight: Tensor) -> Tensor:
    if x.shape[-2] != weight.shape[1]:
        raise ValueError(f"vn_linear: input has {x.shape[-2]} channels, weight expects {weight.shape[1]}")
    lead = "abefgh"[: x.ndim - 2]
    return ad.einsum(f"oc,{lead}cd->{lead}od", weight, x)


def _dot3(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # einsum beats a ufunc reduction over the short innermost axis by ~3x
    return np.einsum("...i,...i->...", a, b)[..., None]


def vn_nonlinearity(x: Tensor, direction: Tensor, eps: float = VN_EPS) -> Tensor:
    """Keep ``v`` where ``<v, d> >= 0``; otherwise remove its component along ``d``.

    One fused node; ``vn_nonlinearity_reference`` is the same map built
    from primitive ops.
    """
    x, direction = ad.as_tensor(x), ad.as_tensor(direction)
    xd, dd = x.data, direction.data
    dot = _dot3(xd, dd)
    neg = 1.0 - ad.step_mask(ad.Tensor(dot))
    s = _dot3(dd, dd) + eps
    coef = neg * dot / s
    out = xd - coef * dd

    def bw(g):
        gd = neg * _dot3(g, dd) / s
        gx = g - gd * dd
        gdir = -coef * g - gd * xd + (2.0 * gd * dot / s) * dd
        return gx, gdir

    return ad.custom_op(out, (x, direction), bw)


def vn_nonlinearity_reference(x: Tensor, direction: Tensor, eps: float = VN_EPS) -> Tensor:
    dot = ad.reduce_sum(x * direction, axis=-1, keepdims=True)
    keep = ad.step_mask(dot)
    dsq = ad.reduce_sum(ad.square(direction), axis=-1, keepdims=True)
    coef = dot * (1.0 - keep) / (dsq + eps)
    return x - coef * direction


class VNNonlinearity(Module):
    def __init__(self, channels: int, rng: np.random.Generator):
        self.direction = VNLinear(channels, channels, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return vn_nonlinearity(x, self.direction(x))


def vn_mean_pool(x: Tensor) -> Tensor:
    """Mean over the point axis; ``(N, C, 3) -> (1, C, 3)``."""
    return ad.reduce_mean(x, axis=0, keepdims=True)


def vn_max_pool(x: Tensor, direction: Tensor, axis: int) -> Tensor:
    """Per channel, keep the vector along ``axis`` with the largest ``<v, d>``."""
    dot = ad.reduce_sum(x * direction, axis=-1, keepdims=True).data
    idx = np.argmax(dot, axis=axis)
    ad._log_kink(idx)
    idx = np.expand_dims(idx, axis)
    return ad.reshape(ad.take_along_axis(x, np.broadcast_to(idx, idx.shape[:-1] + (3,)), axis),
                      tuple(s for i, s in enumerate(x.shape) if i != axis % x.ndim))


def as_vector_feature(points) -> Tensor:
    """Raw coordinates ``(N, 3)`` viewed as a one-channel feature ``(N, 1, 3)``."""
    if isinstance(points, Tensor):
        return ad.reshape(points, (points.shape[0], 1, 3))
    pts = np.asarray(points)
    return Tensor(pts.reshape(len(pts), 1, 3), dtype=pts.dtype if pts.dtype.kind == "f" else None)


def edge_features(x: Tensor, graph: KnnGraph, k: int | None = None) -> Tensor:
    """Neighbour-aggregated edge features ``(N, 2C, 3)``.

    Channels are ``(mean_j x_j - x_i, x_i)``: the mean over neighbours of the
    per-edge features ``(x_j - x_i, x_i)``.  Because the next layer is linear,
    aggregating first equals aggregating after it.
    """
    idx = graph.indices if k is None else graph.indices[:, :k]
    if idx.shape[0] != x.shape[0]:
        raise ValueError(f"graph has {idx.shape[0]} rows, feature has {x.shape[0]} points")
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[0]):
        raise IndexError("kNN index out of range for the feature")
    nbr_mean = ad.spmm(graph.averaging_matrix(idx.shape[1]), x)
    return ad.concat([nbr_mean - x, x], axis=1)


def edge_features_per_edge(x: Tensor, graph: KnnGraph) -> Tensor:
    """Unaggregated edge features ``(N, k, 2C, 3)``."""
    nbrs = ad.gather_rows(x, graph.indices)
    center = ad.reshape(x, (x.shape[0], 1) + x.shape[1:])
    center = center + ad.Tensor(np.zeros((1, graph.k, 1, 1), dtype=x.dtype))
    return ad.concat([nbrs - center, center], axis=2)


class EdgeConvBlock(Module):
    """Edge features -> VN linear -> VN nonlinearity, aggregated over the kNN graph.

    ``"mean"`` and ``"max"`` run the linear map and nonlinearity on every
    edge, then mean-pool or VN-max-pool over neighbours. ``"centroid"``
    averages the edge features first, which is cheaper but leaves only the
    neighbourhood centroid visible to the layer.
    """

    def __init__(self, cin: int, cout: int, rng: np.random.Generator, aggregation: str = "mean"):
        if aggregation not in AGGREGATIONS:
            raise ValueError(f"unknown aggregation {aggregation!r}; choose from {AGGREGATIONS}")
        self.aggregation = aggregation
        self.linear = VNLinear(2 * cin, cout, rng)
        self.act = VNNonlinearity(cout, rng)
        if aggregation == "max":
            self.pool = VNLinear(cout, cout, rng)

    def __call__(self, x: Tensor, graph: KnnGraph) -> Tensor:
        if self.aggregation == "centroid":
            return self.act(self.linear(edge_features(x, graph)))
        e = self.edge_outputs(x, graph)
        if self.aggregation == "mean":
            return ad.reduce_mean(e, axis=1)
        return vn_max_pool(e, self.pool(e), axis=1)

    def edge_outputs(self, x: Tensor, graph: KnnGraph) -> Tensor:
        """Per-edge block output ``(N, k, C_out, 3)``.

        ``W [x_j - x_i, x_i] = W_d x_j + (W_c - W_d) x_i``, so the linear map
        and the nonlinearity's direction map run once per point and only the
        results are gathered per edge.
        """
        if graph.indices.shape[0] != x.shape[0]:
            raise ValueError(f"graph has {graph.indices.shape[0]} rows, feature has {x.shape[0]} points")
        n, c = x.shape[0], x.shape[1]
        w = self.linear.weight
        w_d, w_c = w[:, :c], w[:, c:]
        a, b = vn_linear(x, w_d), vn_linear(x, w_c - w_d)
        u = self.act.direction.weight
        da, db = vn_linear(a, u), vn_linear(b, u)
        lift = (n, 1) + b.shape[1:]
        e = ad.gather_rows(a, graph.indices) + ad.reshape(b, lift)
        d = ad.gather_rows(da, graph.indices) + ad.reshape(db, lift)
        return vn_nonlinearity(e, d)


def invariant_product(a: Tensor, b: Tensor) -> Tensor:
    """Per-point Gram products ``a_i b_i^T`` flattened to ``(N, C * C')``."""
    if a.shape[0] != b.shape[0]:
        raise ValueError(f"invariant_product: {a.shape[0]} vs {b.shape[0]} points")
    g = ad.einsum("ncd,ned->nce", a, b)
    return ad.reshape(g, (a.shape[0], a.shape[1] * b.shape[1]))
