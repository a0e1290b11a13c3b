"""Self-diagnostic suites: equivariance, residual invariance, gradient checks
and the rotation-mean oracle."""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from . import pointcloud as pcm
from . import so3
from .hypothesizer import HypothesizerConfig, HypothesizerModel
from .residual import (CharacteristicOrientationPredictor, LocalAttention, Linear, PredictorConfig,
                       ResidualConfig, ResidualModel)
from .synthetic import FAMILIES, make_instance
from .training import pair_loss
from .vnn import (EdgeConvBlock, VNLinear, VNNonlinearity, as_vector_feature, invariant_product,
                  vn_mean_pool)


@dataclass
class SuiteResult:
    name: str
    passed: bool
    value: float
    threshold: float
    detail: str = ""
    seconds: float = 0.0

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{self.name:<14} {status}  value={self.value:.3e}  threshold={self.threshold:g}  {self.detail}"


def random_clouds(n_clouds: int, n_points: int, seed: int) -> list[np.ndarray]:
    """Aligned synthetic clouds cycling through the shape families."""
    names = sorted(FAMILIES)
    return [make_instance(names[i % len(names)], np.random.default_rng([seed, 99, i]), n_points, 0.15, 0.0)
            for i in range(n_clouds)]


# -- equivariance and invariance ------------------------------------------------
def _frozen_predictor(seed: int) -> CharacteristicOrientationPredictor:
    return CharacteristicOrientationPredictor(PredictorConfig(knn_mode="frozen", precision="double"), seed=seed)


def equivariance_errors(trials: int = 100, n_points: int = 1024, seed: int = 0,
                        n_models: int = 10) -> tuple[np.ndarray, np.ndarray]:
    """Per trial: angle(f(PR), f(P)R) and angle(g(PR), g(P)), in radians.

    Parameters are freshly initialized (untrained), the graph is frozen on
    the un-rotated cloud and everything runs in double precision.
    """
    n_models = max(1, min(n_models, trials))
    models = [_frozen_predictor(seed * 1000 + m) for m in range(n_models)]
    clouds = random_clouds(trials, n_points, seed)
    rng = np.random.default_rng([seed, 1])
    eq, inv = [], []
    with ad.no_grad():
        for t, pts in enumerate(clouds):
            model = models[t % n_models]
            graph = model.graph_for(pts)
            r = so3.sample_uniform(rng)
            base = model.forward(pts, graph)
            rot = model.forward(pts @ r, graph)
            eq.append(so3.angle_between(rot.rotation.data, base.rotation.data @ r))
            inv.append(so3.angle_between(rot.residual.data, base.residual.data))
    return np.array(eq), np.array(inv)


def suite_equivariance(seed: int = 0, trials: int = 100, tol: float = 1e-6) -> SuiteResult:
    t0 = time.perf_counter()
    eq, _ = equivariance_errors(trials, seed=seed)
    return SuiteResult("equivariance", bool(eq.max() < tol), float(eq.max()), tol,
                       f"max angle(f(PR), f(P)R) over {trials} trials, rad", time.perf_counter() - t0)


def suite_invariance(seed: int = 0, trials: int = 100, tol: float = 1e-6) -> SuiteResult:
    t0 = time.perf_counter()
    _, inv = equivariance_errors(trials, seed=seed)
    return SuiteResult("invariance", bool(inv.max() < tol), float(inv.max()), tol,
                       f"max angle(g(PR), g(P)) over {trials} trials, rad", time.perf_counter() - t0)


# -- gradient checks ----------------------------------------------------------------
def _pts(rng: np.random.Generator, n: int) -> np.ndarray:
    p = rng.standard_normal((n, 3))
    return p - p.mean(axis=0)


def _weights(rng: np.random.Generator, shape) -> ad.Tensor:
    return ad.Tensor(rng.standard_normal(shape), requires_grad=True)


def _gc_vn_linear(rng):
    layer = VNLinear(4, 5, rng)
    x = ad.Tensor(rng.standard_normal((6, 4, 3)), requires_grad=True)
    w = rng.standard_normal((6, 5, 3))
    return lambda: ad.reduce_sum(layer(x) * w), {"x": x, **layer.named_parameters()}


def _gc_vn_nonlinearity(rng):
    layer = VNNonlinearity(4, rng)
    x = ad.Tensor(rng.standard_normal((6, 4, 3)), requires_grad=True)
    w = rng.standard_normal((6, 4, 3))
    return lambda: ad.reduce_sum(layer(x) * w), {"x": x, **layer.named_parameters()}


def _gc_edge_conv(aggregation):
    def build(rng):
        pts = _pts(rng, 24)
        graph = pcm.knn(pts, 6)
        layer = EdgeConvBlock(2, 4, rng, aggregation)
        x = ad.Tensor(rng.standard_normal((24, 2, 3)), requires_grad=True)
        w = rng.standard_normal((24, 4, 3))
        return lambda: ad.reduce_sum(layer(x, graph) * w), {"x": x, **layer.named_parameters()}
    return build


def _gc_invariant_product(rng):
    a = ad.Tensor(rng.standard_normal((5, 4, 3)), requires_grad=True)
    b = ad.Tensor(rng.standard_normal((5, 3, 3)), requires_grad=True)
    w = rng.standard_normal((5, 12))
    return lambda: ad.reduce_sum(invariant_product(a, b) * w), {"a": a, "b": b}


def _gc_mean_pool(rng):
    x = ad.Tensor(rng.standard_normal((7, 3, 3)), requires_grad=True)
    w = rng.standard_normal((1, 3, 3))
    return lambda: ad.reduce_sum(vn_mean_pool(x) * w), {"x": x}


def _gc_gram_schmidt(rng):
    u = ad.Tensor(rng.standard_normal(3), requires_grad=True)
    v = ad.Tensor(rng.standard_normal(3), requires_grad=True)
    w = rng.standard_normal((3, 3))
    return lambda: ad.reduce_sum(so3.gram_schmidt_tensor(u, v) * w), {"u": u, "v": v}


def _gc_hypothesizer(rng):
    pts = _pts(rng, 32)
    cfg = HypothesizerConfig(channels=(4, 4), out_channels=6, k=6)
    model = HypothesizerModel(cfg, rng)
    graph = pcm.knn(pts, cfg.k)
    x = ad.Tensor(pts, requires_grad=True)
    w = rng.standard_normal((3, 3))
    return lambda: ad.reduce_sum(model.hypothesize(x, graph).rotation * w), {"points": x, **model.named_parameters()}


def _gc_linear(rng):
    layer = Linear(5, 4, rng)
    layer.bias.data = rng.standard_normal(4)
    x = ad.Tensor(rng.standard_normal((6, 5)), requires_grad=True)
    w = rng.standard_normal((6, 4))
    return lambda: ad.reduce_sum(layer(x) * w), {"x": x, **layer.named_parameters()}


def _gc_attention(rng):
    n, h = 20, 8
    layer = LocalAttention(h, rng)
    x = ad.Tensor(rng.standard_normal((n, h)), requires_grad=True)
    coords = ad.Tensor(_pts(rng, n), requires_grad=True)
    idx = pcm.knn_indices(coords.data, 5)
    w = rng.standard_normal((n, h))
    return lambda: ad.reduce_sum(layer(x, coords, idx) * w), {"x": x, "coords": coords, **layer.named_parameters()}


def _gc_residual(rng):
    n = 24
    model = ResidualModel(6, ResidualConfig(hidden=8, blocks=1, k_attn=5), rng)
    model.head2.weight.data = rng.standard_normal(model.head2.weight.shape) * 0.5
    canon = ad.Tensor(_pts(rng, n), requires_grad=True)
    inv = ad.Tensor(rng.standard_normal((n, 6)), requires_grad=True)
    idx = pcm.knn_indices(canon.data, 5)
    w = rng.standard_normal((3, 3))
    return lambda: ad.reduce_sum(model(canon, inv, idx) * w), {"canon": canon, "inv": inv, **model.named_parameters()}


def _gc_pair_loss(rng):
    f1 = ad.Tensor(rng.standard_normal((3, 3)), requires_grad=True)
    f2 = ad.Tensor(rng.standard_normal((3, 3)), requires_grad=True)
    r1, r2 = so3.sample_uniform(rng), so3.sample_uniform(rng)
    return lambda: pair_loss(f1, f2, r1, r2), {"f1": f1, "f2": f2}


def _gc_full_loss(rng):
    """Composed predictor on both clouds of a pair, through the pair loss."""
    n = 40
    cfg = PredictorConfig(HypothesizerConfig(channels=(4, 6), out_channels=8, k=8),
                          ResidualConfig(hidden=8, blocks=1, k_attn=6), True, "adaptive", "double")
    model = CharacteristicOrientationPredictor(cfg, seed=int(rng.integers(1 << 31)))
    model.residual.head2.weight.data = rng.standard_normal(model.residual.head2.weight.shape) * 0.3
    p1, p2 = _pts(rng, n), _pts(rng, n)
    r1, r2 = so3.sample_uniform(rng), so3.sample_uniform(rng)
    x1 = ad.Tensor(p1 @ r1, requires_grad=True)
    x2 = ad.Tensor(p2 @ r2, requires_grad=True)
    g1, g2 = model.graph_for(x1.data), model.graph_for(x2.data)

    def fn():
        return pair_loss(model.forward(x1, g1).rotation, model.forward(x2, g2).rotation, r1, r2)
    return fn, {"p1": x1, "p2": x2, **model.named_parameters()}


GRADCHECK_CASES: dict[str, Callable] = {
    "vn_linear": _gc_vn_linear,
    "vn_nonlinearity": _gc_vn_nonlinearity,
    "edge_conv_mean": _gc_edge_conv("mean"),
    "edge_conv_max": _gc_edge_conv("max"),
    "edge_conv_centroid": _gc_edge_conv("centroid"),
    "vn_mean_pool": _gc_mean_pool,
    "invariant_product": _gc_invariant_product,
    "gram_schmidt": _gc_gram_schmidt,
    "hypothesizer": _gc_hypothesizer,
    "linear": _gc_linear,
    "local_attention": _gc_attention,
    "residual": _gc_residual,
    "pair_loss": _gc_pair_loss,
    "full_loss": _gc_full_loss,
}


def gradcheck_case(name: str, points: int = 20, seed: int = 0, tensors_per_point: int = 6,
                   coords_per_tensor: int = 3, step: float = 1e-5) -> ad.GradcheckResult:
    """Worst result over ``points`` random parameter draws.

    A step of 1e-5 keeps round-off in the differences below the error floor
    for the small gradients of deep parameters while truncation stays ~1e-10.
    """
    build = GRADCHECK_CASES[name]
    worst = ad.GradcheckResult(0.0, 0, 0)
    for i in range(points):
        rng = np.random.default_rng([seed, i, len(name)])
        fn, tensors = build(rng)
        names = sorted(tensors)
        if len(names) > tensors_per_point:
            names = sorted(rng.choice(names, size=tensors_per_point, replace=False))
        res = ad.gradcheck(fn, {k: tensors[k] for k in names}, coords_per_tensor=coords_per_tensor,
                           rng=rng, step=step)
        checked, skipped = worst.checked + res.checked, worst.skipped + res.skipped
        if res.max_rel_error >= worst.max_rel_error:
            worst = ad.GradcheckResult(res.max_rel_error, checked, skipped, f"point {i}: {res.worst}")
        else:
            worst = ad.GradcheckResult(worst.max_rel_error, checked, skipped, worst.worst)
    return worst


def suite_gradcheck(seed: int = 0, points: int = 20, tol: float = 1e-3) -> SuiteResult:
    t0 = time.perf_counter()
    worst_name, worst, failed = "", 0.0, []
    for name in GRADCHECK_CASES:
        res = gradcheck_case(name, points, seed)
        if not res.passed(tol):
            failed.append(name)
        if res.max_rel_error >= worst:
            worst, worst_name = res.max_rel_error, f"{name} {res.worst}"
    detail = f"worst: {worst_name}" + (f"; failing: {', '.join(failed)}" if failed else "")
    return SuiteResult("gradcheck", not failed, worst, tol, detail, time.perf_counter() - t0)


# -- rotation-mean oracle ---------------------------------------------------------------
def _expm_so3(w: np.ndarray) -> np.ndarray:
    """Batched Rodrigues formula for rotation vectors ``(S, 3)``."""
    theta = np.linalg.norm(w, axis=1)
    safe = np.where(theta > 0, theta, 1.0)
    k = w / safe[:, None]
    kx = np.zeros((len(w), 3, 3))
    kx[:, 0, 1], kx[:, 0, 2], kx[:, 1, 2] = -k[:, 2], k[:, 1], -k[:, 0]
    kx -= np.transpose(kx, (0, 2, 1))
    s, c = np.sin(theta)[:, None, None], np.cos(theta)[:, None, None]
    return np.eye(3) + s * kx + (1 - c) * (kx @ kx)


def brute_force_chordal_mean(rs: np.ndarray, iters: int = 3000, step: float = 0.5,
                             restarts: int = 100, seed: int = 0) -> np.ndarray:
    """Minimize ``sum_i |R_i - X|_F^2`` by Riemannian gradient descent on SO(3).

    The Euclidean gradient ``-2 sum_i R_i`` is projected onto the tangent
    space at X and the iterate is retracted with the matrix exponential.
    All restarts (each input plus random rotations) run together and the
    lowest-cost end point wins.
    """
    rs = np.asarray(rs, dtype=np.float64)
    rng = np.random.default_rng(seed)
    x = np.concatenate([rs, so3.sample_many(rng, restarts)])
    m = rs.sum(axis=0)
    for _ in range(iters):
        a = np.transpose(x, (0, 2, 1)) @ m
        w = 0.5 * np.stack([a[:, 2, 1] - a[:, 1, 2], a[:, 0, 2] - a[:, 2, 0], a[:, 1, 0] - a[:, 0, 1]], axis=1)
        if np.abs(w).max() < 1e-14:
            break
        x = x @ _expm_so3(step * w / len(rs))
    cost = np.sum((rs[None] - x[:, None]) ** 2, axis=(1, 2, 3))
    return x[int(np.argmin(cost))]


def rotation_mean_errors(sets: int = 50, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Per set: angle (degrees) between the SVD mean and the brute-force
    minimizer, and ``|det(mean) - 1|``."""
    rng = np.random.default_rng([seed, 4])
    angles, dets = [], []
    for _ in range(sets):
        rs = so3.sample_many(rng, int(rng.integers(2, 6)))
        mean = so3.chordal_mean(rs)
        ref = brute_force_chordal_mean(rs, seed=int(rng.integers(1 << 31)))
        angles.append(np.degrees(so3.angle_between(mean, ref)))
        dets.append(abs(np.linalg.det(mean) - 1.0))
    return np.array(angles), np.array(dets)


def suite_rotation_mean(seed: int = 0, sets: int = 50, tol_deg: float = 0.1) -> SuiteResult:
    t0 = time.perf_counter()
    angles, dets = rotation_mean_errors(sets, seed)
    ok = bool(angles.max() < tol_deg and dets.max() < 1e-9)
    return SuiteResult("rotation_mean", ok, float(angles.max()), tol_deg,
                       f"max angle to brute-force mean, deg; max |det-1| = {dets.max():.1e}",
                       time.perf_counter() - t0)


SUITES: dict[str, Callable[..., SuiteResult]] = {
    "equivariance": suite_equivariance,
    "invariance": suite_invariance,
    "gradcheck": suite_gradcheck,
    "rotation_mean": suite_rotation_mean,
}


def run_suites(names: list[str] | None = None, seed: int = 0) -> list[SuiteResult]:
    names = names or list(SUITES)
    unknown = [n for n in names if n not in SUITES]
    if unknown:
        raise KeyError(f"unknown suite(s) {unknown}; known: {list(SUITES)}")
    return [SUITES[n](seed=seed) for n in names]
