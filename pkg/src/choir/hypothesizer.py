"""SO(3)-equivariant orientation hypothesizer: a VN edge-conv encoder
followed by a head that reduces the pooled feature to two vectors and
orthonormalizes them."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import pointcloud as pcm
from . import so3
from .autodiff import Module, Tensor
from .pointcloud import KnnGraph
from .vnn import EdgeConvBlock, VNLinear, VNNonlinearity, as_vector_feature, vn_mean_pool


@dataclass
class HypothesizerConfig:
    channels: tuple[int, ...] = (8, 16, 32, 64)
    out_channels: int = 64
    k: int = pcm.DEFAULT_K
    aggregation: str = "mean"


@dataclass
class Hypothesis:
    rotation: Tensor  # (3, 3), rows are the frame vectors
    features: Tensor  # phi, (N, C, 3)
    aux: Tensor  # V, (N, 3, 3)
    graph: KnnGraph = field(repr=False, default=None)


class Encoder(Module):
    def __init__(self, cfg: HypothesizerConfig, rng: np.random.Generator):
        self.blocks = []
        cin = 1
        for cout in cfg.channels:
            self.blocks.append(EdgeConvBlock(cin, cout, rng, cfg.aggregation))
            cin = cout
        self.fuse = VNLinear(sum(cfg.channels), cfg.out_channels, rng)
        self.fuse_act = VNNonlinearity(cfg.out_channels, rng)

    def __call__(self, points, graph: KnnGraph) -> Tensor:
        x = as_vector_feature(points)
        outs = []
        for block in self.blocks:
            x = block(x, graph)
            outs.append(x)
        return self.fuse_act(self.fuse(ad.concat(outs, axis=1)))


class HypothesizerModel(Module):
    def __init__(self, cfg: HypothesizerConfig | None = None, rng: np.random.Generator | None = None):
        self.cfg = cfg or HypothesizerConfig()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.encoder = Encoder(self.cfg, rng)
        self.head = VNLinear(self.cfg.out_channels, 2, rng)
        self.aux_linear = VNLinear(self.cfg.out_channels, 3, rng)
        self.aux_act = VNNonlinearity(3, rng)

    def encode(self, points, graph: KnnGraph) -> Tensor:
        return self.encoder(points, graph)

    def predict_hypothesis(self, features: Tensor, strict: bool = False) -> Tensor:
        """Pool, reduce to two vectors, Gram-Schmidt.

        The frame vectors are stored as ROWS so that ``h(P R) = h(P) R``.
        """
        uv = self.head(vn_mean_pool(features))  # (1, 2, 3)
        frame = so3.gram_schmidt_tensor(uv[0, 0], uv[0, 1], strict=strict)
        return ad.transpose(frame)

    def auxiliary_feature(self, features: Tensor) -> Tensor:
        return self.aux_act(self.aux_linear(features))

    def hypothesize(self, points, graph: KnnGraph, strict: bool = False) -> Hypothesis:
        phi = self.encode(points, graph)
        return Hypothesis(self.predict_hypothesis(phi, strict), phi, self.auxiliary_feature(phi), graph)
