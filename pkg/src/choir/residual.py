"""Rotation-invariant residual predictor and the composed orientation predictor.

The residual network sees only rotation-invariant inputs (the hypothetically
canonicalized cloud and Gram products of equivariant features), so its output
rotation does not change when the input cloud is rotated.  Left-multiplying
the equivariant hypothesis by it keeps the composition equivariant.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import checkpoint
from . import pointcloud as pcm
from . import so3
from .autodiff import Module, Tensor
from .hypothesizer import Hypothesis, HypothesizerConfig, HypothesizerModel
from .pointcloud import KnnGraph, PointCloud
from .vnn import AGGREGATIONS
from .vnn import invariant_product

KNN_MODES = ("adaptive", "frozen")
IDENTITY_6D = np.array([1.0, 0.0, 0.0, 0.0, 1.0, 0.0])


class Linear(Module):
    def __init__(self, cin: int, cout: int, rng: np.random.Generator, bias: bool = True):
        bound = 1.0 / np.sqrt(cin)
        self.weight = ad.parameter(rng.uniform(-bound, bound, size=(cin, cout)))
        self.bias = ad.parameter(np.zeros(cout)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = ad.matmul(x, self.weight) if x.ndim >= 2 else ad.matmul(ad.reshape(x, (1, -1)), self.weight)[0]
        return y + self.bias if self.bias is not None else y


class LocalAttention(Module):
    """Vector attention over a kNN neighbourhood with a subtraction-based
    relative position encoding."""

    def __init__(self, hidden: int, rng: np.random.Generator):
        self.q = Linear(hidden, hidden, rng, bias=False)
        self.k = Linear(hidden, hidden, rng, bias=False)
        self.v = Linear(hidden, hidden, rng, bias=False)
        self.pos1 = Linear(3, hidden, rng)
        self.pos2 = Linear(hidden, hidden, rng)
        self.gamma1 = Linear(hidden, hidden, rng)
        self.gamma2 = Linear(hidden, hidden, rng, bias=False)  # a bias would cancel in the softmax
        self.out = Linear(hidden, hidden, rng)

    def __call__(self, x: Tensor, coords: Tensor, idx: np.ndarray) -> Tensor:
        n, k = idx.shape
        q, key, val = self.q(x), self.k(x), self.v(x)
        rel = ad.reshape(coords, (n, 1, 3)) - ad.gather_rows(coords, idx)
        delta = self.pos2(ad.relu(self.pos1(rel)))
        # the weight MLP must be nonlinear: a linear map of q_i - k_j would
        # shift all logits of point i equally and leave the softmax unchanged
        rel_qk = ad.reshape(q, (n, 1, -1)) - ad.gather_rows(key, idx) + delta
        logits = self.gamma2(ad.relu(self.gamma1(rel_qk)))
        w = ad.softmax(logits, axis=1)
        y = ad.reduce_sum(w * (ad.gather_rows(val, idx) + delta), axis=1)
        return ad.relu(x + self.out(y))


@dataclass
class ResidualConfig:
    hidden: int = 64
    blocks: int = 2
    k_attn: int = 16


class ResidualModel(Module):
    def __init__(self, in_features: int, cfg: ResidualConfig | None = None, rng: np.random.Generator | None = None):
        self.cfg = cfg or ResidualConfig()
        rng = rng if rng is not None else np.random.default_rng(1)
        h = self.cfg.hidden
        self.embed = Linear(in_features + 3, h, rng)
        self.blocks = [LocalAttention(h, rng) for _ in range(self.cfg.blocks)]
        self.head1 = Linear(h, h, rng)
        self.head2 = Linear(h, 6, rng)
        # start as (nearly) the identity rotation so f = h at initialization
        self.head2.weight.data *= 0.01
        self.head2.bias.data = IDENTITY_6D.copy()

    def __call__(self, canon: Tensor, inv: Tensor, idx: np.ndarray, strict: bool = False) -> Tensor:
        x = ad.relu(self.embed(ad.concat([canon, inv], axis=1)))
        for block in self.blocks:
            x = block(x, canon, idx)
        pooled = ad.reduce_mean(x, axis=0)
        out = self.head2(ad.relu(self.head1(pooled)))
        return so3.gram_schmidt_tensor(out[0:3], out[3:6], strict=strict)


@dataclass
class Prediction:
    rotation: Tensor
    hypothesis: Hypothesis
    residual: Tensor | None = None
    canonical: Tensor | None = field(default=None, repr=False)


@dataclass
class PredictorConfig:
    hypothesizer: HypothesizerConfig = field(default_factory=HypothesizerConfig)
    residual: ResidualConfig = field(default_factory=ResidualConfig)
    use_residual: bool = True
    knn_mode: str = "adaptive"
    precision: str = "double"


def canonicalize_hypothetically(points, hyp: Tensor) -> Tensor:
    """``P h^T``: rotate the cloud by the inverse hypothesis."""
    return ad.matmul(ad.as_tensor(points), ad.transpose(hyp))


class CharacteristicOrientationPredictor(Module):
    def __init__(self, cfg: PredictorConfig | None = None, seed: int = 0):
        self.cfg = cfg or PredictorConfig()
        if self.cfg.knn_mode not in KNN_MODES:
            raise ValueError(f"knn_mode must be one of {KNN_MODES}")
        rng = np.random.default_rng(seed)
        self.hypothesizer = HypothesizerModel(self.cfg.hypothesizer, rng)
        self.residual = (ResidualModel(3 * self.cfg.hypothesizer.out_channels, self.cfg.residual, rng)
                         if self.cfg.use_residual else None)

    # -- graphs ---------------------------------------------------------------
    def graph_for(self, points: np.ndarray, precision: str | None = None) -> KnnGraph:
        """Graph computed on the received cloud, tagged with the configured mode."""
        return pcm.knn(points, self.cfg.hypothesizer.k, precision or self.cfg.precision,
                       frozen=self.cfg.knn_mode == "frozen")

    # -- forward --------------------------------------------------------------
    def forward(self, points, graph: KnnGraph | None = None, strict: bool = False,
                precision: str | None = None) -> Prediction:
        """``f(P) = g(P h^T, phi V^T) h``.

        ``graph`` overrides the encoder graph (used to freeze indices across
        rotated copies of a cloud).  In frozen mode the residual's attention
        graph is the first ``k_attn`` columns of that same table; in adaptive
        mode it is recomputed on the hypothetically canonicalized cloud.
        ``precision`` overrides the configured kNN precision.
        """
        precision = precision or self.cfg.precision
        pts = points.data if isinstance(points, Tensor) else np.asarray(points, dtype=np.float64)
        if graph is None:
            graph = self.graph_for(pts, precision)
        hyp = self.hypothesizer.hypothesize(points, graph, strict)
        if self.residual is None:
            return Prediction(hyp.rotation, hyp)
        canon = canonicalize_hypothetically(points, hyp.rotation)
        inv = invariant_product(hyp.features, hyp.aux)
        ka = self.cfg.residual.k_attn
        if graph.frozen or self.cfg.knn_mode == "frozen":
            idx = graph.indices[:, :ka]
        else:
            idx = pcm.knn_indices(canon.data, ka, precision)
        g = self.residual(canon, inv, idx, strict)
        return Prediction(ad.matmul(g, hyp.rotation), hyp, g, canon)

    __call__ = forward

    def predict(self, points, graph: KnnGraph | None = None, strict: bool = False,
                precision: str | None = None) -> np.ndarray:
        with ad.no_grad():
            return self.forward(points, graph, strict, precision).rotation.data.copy()

    def canonicalize(self, pc: PointCloud, graph: KnnGraph | None = None) -> PointCloud:
        r = self.predict(pc.points, graph)
        return pcm.apply_rotation(pc, r.T)

    # -- persistence ------------------------------------------------------------
    def checkpoint_entries(self, extra: dict[str, float] | None = None) -> dict[str, np.ndarray]:
        hc, rc = self.cfg.hypothesizer, self.cfg.residual
        entries = {
            "meta.channels": np.array(hc.channels, dtype=float),
            "meta.out_channels": np.array(hc.out_channels, dtype=float),
            "meta.k": np.array(hc.k, dtype=float),
            "meta.aggregation": np.array(float(AGGREGATIONS.index(hc.aggregation))),
            "meta.hidden": np.array(rc.hidden, dtype=float),
            "meta.blocks": np.array(rc.blocks, dtype=float),
            "meta.k_attn": np.array(rc.k_attn, dtype=float),
            "meta.use_residual": np.array(float(self.cfg.use_residual)),
            "meta.knn_mode": np.array(float(KNN_MODES.index(self.cfg.knn_mode))),
            "meta.precision": np.array(0.0 if self.cfg.precision == "double" else 1.0),
        }
        for key, value in (extra or {}).items():
            entries[f"meta.{key}"] = np.array(float(value))
        entries.update(self.state_dict())
        return entries

    def save(self, path, extra: dict[str, float] | None = None) -> None:
        checkpoint.save_checkpoint(path, self.checkpoint_entries(extra))

    @classmethod
    def from_entries(cls, entries: dict[str, np.ndarray]) -> CharacteristicOrientationPredictor:
        hc = HypothesizerConfig(
            channels=tuple(int(c) for c in entries["meta.channels"]),
            out_channels=int(entries["meta.out_channels"]),
            k=int(entries["meta.k"]),
            aggregation=AGGREGATIONS[int(entries["meta.aggregation"])],
        )
        rc = ResidualConfig(int(entries["meta.hidden"]), int(entries["meta.blocks"]), int(entries["meta.k_attn"]))
        cfg = PredictorConfig(hc, rc, bool(entries["meta.use_residual"]),
                              KNN_MODES[int(entries["meta.knn_mode"])],
                              "double" if float(entries["meta.precision"]) == 0 else "single")
        model = cls(cfg)
        model.load_state_dict({k: v for k, v in entries.items() if not k.startswith("meta.")})
        return model

    @classmethod
    def load(cls, path) -> CharacteristicOrientationPredictor:
        return cls.from_entries(checkpoint.load_checkpoint(path))


def predict_characteristic_orientation(pc, model: CharacteristicOrientationPredictor,
                                       graph: KnnGraph | None = None) -> np.ndarray:
    pts = pc.points if isinstance(pc, PointCloud) else pc
    return model.predict(pts, graph)
