"""Small pooling encoder / interpolating decoder producing region features at every level."""
from __future__ import annotations

import numpy as np

from .geometry import NeighborMap
from .nn import MLP, Module
from .pyramid import PyramidLevel
from .tensor import ShapeError, Tensor, concat, gather_rows, reshape, rowscale, tmax, tsum

IDW_EPS = 1e-8


def idw_weights(nmap: NeighborMap, eps: float = IDW_EPS) -> np.ndarray:
    w = 1.0 / (nmap.sqdist + eps)
    return w / w.sum(axis=1, keepdims=True)


def neighbor_rows(x: Tensor, nmap: NeighborMap) -> Tensor:
    """Gather ``x`` rows into an (N, K, C) tensor following ``nmap``."""
    return gather_rows(x, nmap.indices)


def idw_interpolate(source: Tensor, nmap: NeighborMap, eps: float = IDW_EPS) -> Tensor:
    n, k = nmap.indices.shape
    c = source.shape[1]
    w = Tensor(idw_weights(nmap, eps).reshape(-1))
    rows = reshape(gather_rows(source, nmap.indices.reshape(-1)), (n * k, c))
    return tsum(reshape(rowscale(rows, w), (n, k, c)), axis=1)


def pool_neighbors(x: Tensor, nmap: NeighborMap) -> Tensor:
    """Concatenated max- and mean-pool over each row's neighbors."""
    g = neighbor_rows(x, nmap)
    k = nmap.k
    return concat([tmax(g, axis=1), tsum(g, axis=1) * (1.0 / k)], axis=-1)


class Backbone(Module):
    def __init__(self, in_dim: int, width: int, levels: int, rng: np.random.Generator):
        self.in_dim = in_dim
        self.width = width
        self.levels = levels
        self.stem = MLP(in_dim, width, width, rng, out_act="relu")
        self.down = [MLP(2 * width, width, width, rng, out_act="relu") for _ in range(levels - 1)]
        self.up = [MLP(2 * width, width, width, rng, out_act="relu") for _ in range(levels - 1)]

    def encode(self, pyramid: list[PyramidLevel], features: Tensor) -> list[Tensor]:
        if features.ndim != 2 or features.shape[1] != self.in_dim:
            raise ShapeError(f"encoder expects (N, {self.in_dim}) input features, got {features.shape}")
        if features.shape[0] != pyramid[0].n:
            raise ShapeError(f"{features.shape[0]} feature rows for {pyramid[0].n} level-1 points")
        enc = [self.stem(features)]
        for lv in pyramid[1:]:
            if lv.pool_neighbors is None:
                raise ValueError(f"level {lv.level} has no pooling neighbors")
            enc.append(self.down[lv.level - 2](pool_neighbors(enc[-1], lv.pool_neighbors)))
        return enc

    def decode(self, pyramid: list[PyramidLevel], enc: list[Tensor]) -> list[Tensor]:
        """Region features, index 0 = level 1."""
        if len(enc) != len(pyramid):
            raise ValueError(f"{len(enc)} encoder levels for a {len(pyramid)}-level pyramid")
        dec: list[Tensor] = [None] * len(pyramid)
        dec[-1] = enc[-1]
        for i in range(len(pyramid) - 2, -1, -1):
            nmap = pyramid[i].neighbors_up
            if nmap is None:
                raise ValueError(f"level {i + 1} is missing its upward neighbor map")
            up = idw_interpolate(dec[i + 1], nmap)
            dec[i] = self.up[i](concat([enc[i], up], axis=-1))
        return dec

    def __call__(self, pyramid: list[PyramidLevel], features: Tensor) -> list[Tensor]:
        return self.decode(pyramid, self.encode(pyramid, features))
