"""Multi-level point hierarchy with carried labels and cross-level neighbor maps."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig
from .geometry import NeighborMap, PointCloud, grid_downsample, knn_query, random_downsample


@dataclass
class PyramidLevel:
    level: int
    points: PointCloud
    neighbors_up: NeighborMap | None = None
    self_neighbors: NeighborMap | None = None
    # K nearest points of the level below, used by encoder pooling (absent at level 1)
    pool_neighbors: NeighborMap | None = None
    offsets_up: np.ndarray | None = None
    offsets_self: np.ndarray | None = None

    @property
    def n(self) -> int:
        return self.points.n

    @property
    def labels(self) -> np.ndarray | None:
        return self.points.labels


def cross_level_neighbors(lower: PointCloud, upper: PointCloud, k: int) -> NeighborMap:
    """For each ``lower`` point, its ``k`` nearest ``upper`` points."""
    return knn_query(upper, lower, k)


def relative_offsets(query: PointCloud, source: PointCloud, nmap: NeighborMap) -> np.ndarray:
    """``query_i - source_{nmap[i, k]}`` as an (N, K, 3) array."""
    return query.coords[:, None, :] - source.coords[nmap.indices]


def level_cell(cfg: RunConfig, level: int) -> float:
    """Grid cell used to derive ``level`` (>= 2) from the level below it."""
    return cfg.base_cell * 2.0 ** (level - 2)


def downsample_levels(cloud: PointCloud, cfg: RunConfig, seed: int = 0) -> list[PointCloud]:
    clouds = [cloud]
    for level in range(2, cfg.levels + 1):
        nxt = grid_downsample(clouds[-1], level_cell(cfg, level))
        cap = cfg.max_points[level - 1]
        if cap and nxt.n > cap:
            nxt = random_downsample(nxt, cap, seed * 1000 + level)
        if nxt.n == 0:
            raise ConfigError(f"downsampling emptied level {level}")
        clouds.append(nxt)
    return clouds


def build_pyramid(cloud: PointCloud, cfg: RunConfig, seed: int = 0) -> list[PyramidLevel]:
    """Levels 1..L; level 1 is ``cloud`` itself.

    K is clamped to the size of the cloud being searched so that small
    coarse levels remain usable.
    """
    if cloud.labels is None:
        raise ValueError("build_pyramid needs a labelled cloud")
    if cloud.n == 0:
        raise ConfigError("cannot build a pyramid from an empty cloud")
    clouds = downsample_levels(cloud, cfg, seed)
    levels = [PyramidLevel(i + 1, c) for i, c in enumerate(clouds)]
    for i, lv in enumerate(levels):
        k = cfg.k[i]
        if i + 1 < len(levels):
            upper = clouds[i + 1]
            lv.neighbors_up = cross_level_neighbors(lv.points, upper, min(k, upper.n))
            lv.offsets_up = relative_offsets(lv.points, upper, lv.neighbors_up)
            levels[i + 1].pool_neighbors = knn_query(lv.points, upper, min(k, lv.n))
        else:
            lv.self_neighbors = knn_query(lv.points, lv.points, min(k, lv.n))
            lv.offsets_self = relative_offsets(lv.points, lv.points, lv.self_neighbors)
    return levels


def dump_pyramid(levels: list[PyramidLevel], out_dir) -> list[Path]:
    """Debug dump: one ``x y z label`` file per level."""
    from .dataset import write_cloud

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for lv in levels:
        path = out / f"level_{lv.level}.txt"
        write_cloud(lv.points, path)
        paths.append(path)
    return paths
