"""Spatial kernels: exact K-NN, grid/voxel downsampling with label carry, random subsampling."""
from __future__ import annotations

import heapq
from dataclasses import dataclass, field

import numpy as np

IGNORE = -1
BRUTE_FORCE_BELOW = 64
LEAF_SIZE = 16


@dataclass
class PointCloud:
    coords: np.ndarray
    labels: np.ndarray | None = None
    features: np.ndarray | None = None

    def __post_init__(self):
        self.coords = np.ascontiguousarray(self.coords, dtype=np.float64).reshape(-1, 3)
        if not np.isfinite(self.coords).all():
            raise ValueError("point coordinates must be finite")
        n = self.coords.shape[0]
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
            if self.labels.shape[0] != n:
                raise ValueError(f"{self.labels.shape[0]} labels for {n} points")
            if self.labels.size and self.labels.min() < IGNORE:
                raise ValueError("labels must be >= 0 or the ignore sentinel -1")
        if self.features is not None:
            self.features = np.asarray(self.features, dtype=np.float64)
            if self.features.ndim != 2 or self.features.shape[0] != n:
                raise ValueError(f"feature rows {self.features.shape} do not match {n} points")

    def __len__(self) -> int:
        return self.coords.shape[0]

    @property
    def n(self) -> int:
        return self.coords.shape[0]

    def subset(self, index) -> "PointCloud":
        index = np.asarray(index, dtype=np.int64)
        return PointCloud(
            self.coords[index],
            None if self.labels is None else self.labels[index],
            None if self.features is None else self.features[index],
        )


@dataclass
class NeighborMap:
    """Row ``i`` lists the K nearest source points of query ``i``, nearest first."""

    indices: np.ndarray
    sqdist: np.ndarray = field(repr=False)

    @property
    def k(self) -> int:
        return self.indices.shape[1]

    def __len__(self) -> int:
        return self.indices.shape[0]


def _coords(x) -> np.ndarray:
    return x.coords if isinstance(x, PointCloud) else np.ascontiguousarray(x, dtype=np.float64).reshape(-1, 3)


def squared_distances(query: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Squared distances from one query to many points, summed in x, y, z order."""
    dx = points[:, 0] - query[0]
    dy = points[:, 1] - query[1]
    dz = points[:, 2] - query[2]
    return dx * dx + dy * dy + dz * dz


def brute_force_knn(source: np.ndarray, queries: np.ndarray, k: int, block: int = 512) -> NeighborMap:
    n = queries.shape[0]
    idx = np.empty((n, k), dtype=np.int64)
    dist = np.empty((n, k))
    for lo in range(0, n, block):
        q = queries[lo : lo + block]
        dx = source[None, :, 0] - q[:, None, 0]
        dy = source[None, :, 1] - q[:, None, 1]
        dz = source[None, :, 2] - q[:, None, 2]
        d = dx * dx + dy * dy + dz * dz
        # stable sort keeps the smaller index first on equal distances
        order = np.argsort(d, axis=1, kind="stable")[:, :k]
        idx[lo : lo + block] = order
        dist[lo : lo + block] = np.take_along_axis(d, order, axis=1)
    return NeighborMap(idx, dist)


class KDTree:
    """Median-split kd-tree over 3D points; queries are exact with index tie-break."""

    def __init__(self, points, leaf_size: int = LEAF_SIZE):
        self.points = _coords(points)
        self.leaf_size = leaf_size
        n = self.points.shape[0]
        if n == 0:
            raise ValueError("cannot index an empty cloud")
        self.perm = np.arange(n, dtype=np.int64)
        # node arrays: split axis (-1 for leaf), split value, children, leaf range
        self._axis: list[int] = []
        self._split: list[float] = []
        self._left: list[int] = []
        self._right: list[int] = []
        self._range: list[tuple[int, int]] = []
        self._build(0, n)

    def _new_node(self) -> int:
        self._axis.append(-1)
        self._split.append(0.0)
        self._left.append(-1)
        self._right.append(-1)
        self._range.append((0, 0))
        return len(self._axis) - 1

    def _build(self, start: int, end: int) -> int:
        node = self._new_node()
        self._range[node] = (start, end)
        if end - start <= self.leaf_size:
            return node
        seg = self.perm[start:end]
        pts = self.points[seg]
        axis = int(np.argmax(pts.max(axis=0) - pts.min(axis=0)))
        mid = (end - start) // 2
        part = np.argpartition(pts[:, axis], mid, kind="introselect")
        self.perm[start:end] = seg[part]
        self._axis[node] = axis
        self._split[node] = float(self.points[self.perm[start + mid], axis])
        self._left[node] = self._build(start, start + mid)
        self._right[node] = self._build(start + mid, end)
        return node

    def query_one(self, q: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
        # max-heap of (-d, -index) holding the current best k
        heap: list[tuple[float, int]] = []
        self._search(0, q, k, heap)
        best = sorted((-d, -i) for d, i in heap)
        return (np.array([i for _, i in best], dtype=np.int64), np.array([d for d, _ in best]))

    def _search(self, node: int, q: np.ndarray, k: int, heap: list) -> None:
        axis = self._axis[node]
        if axis < 0:
            start, end = self._range[node]
            ids = self.perm[start:end]
            ds = squared_distances(q, self.points[ids])
            for d, i in zip(ds.tolist(), ids.tolist()):
                if len(heap) < k:
                    heapq.heappush(heap, (-d, -i))
                else:
                    wd, wi = heap[0]
                    if d < -wd or (d == -wd and i < -wi):
                        heapq.heapreplace(heap, (-d, -i))
            return
        diff = q[axis] - self._split[node]
        near, far = (self._left[node], self._right[node]) if diff < 0 else (self._right[node], self._left[node])
        self._search(near, q, k, heap)
        if len(heap) < k or diff * diff <= -heap[0][0]:
            self._search(far, q, k, heap)

    def query(self, queries, k: int) -> NeighborMap:
        queries = _coords(queries)
        n = queries.shape[0]
        if not 1 <= k <= self.points.shape[0]:
            raise ValueError(f"K={k} must lie in [1, {self.points.shape[0]}]")
        idx = np.empty((n, k), dtype=np.int64)
        dist = np.empty((n, k))
        for row in range(n):
            idx[row], dist[row] = self.query_one(queries[row], k)
        return NeighborMap(idx, dist)


def knn_query(source, queries, k: int) -> NeighborMap:
    """K nearest ``source`` points for every query point, by squared Euclidean distance.

    Equal distances are resolved toward the smaller source index.
    """
    src = _coords(source)
    qry = _coords(queries)
    if src.shape[0] == 0:
        raise ValueError("knn_query: source cloud is empty")
    if not 1 <= k <= src.shape[0]:
        raise ValueError(f"knn_query: K={k} must lie in [1, {src.shape[0]}] (source size)")
    if src.shape[0] < BRUTE_FORCE_BELOW:
        return brute_force_knn(src, qry, k)
    return KDTree(src).query(qry, k)


# ---------------------------------------------------------------- cell grouping


def _cell_groups(coords: np.ndarray, cell: float):
    """Sort points by (cell key, coordinates) and return the grouping."""
    origin = coords.min(axis=0)
    keys = np.floor((coords - origin) / cell).astype(np.int64)
    order = np.lexsort((coords[:, 2], coords[:, 1], coords[:, 0], keys[:, 2], keys[:, 1], keys[:, 0]))
    sk = keys[order]
    new = np.ones(len(order), dtype=bool)
    new[1:] = np.any(sk[1:] != sk[:-1], axis=1)
    starts = np.flatnonzero(new)
    group = np.cumsum(new) - 1
    return origin, order, starts, group, sk[starts]


def majority_labels(group: np.ndarray, labels: np.ndarray, n_groups: int) -> np.ndarray:
    """Per-group mode of labels; ties go to the smallest class, ignored labels only vote if alone."""
    out = np.full(n_groups, IGNORE, dtype=np.int64)
    valid = labels != IGNORE
    if not valid.any():
        return out
    counts = np.zeros((n_groups, int(labels[valid].max()) + 1), dtype=np.int64)
    np.add.at(counts, (group[valid], labels[valid]), 1)
    has = counts.sum(axis=1) > 0
    out[has] = np.argmax(counts[has], axis=1)
    return out


def _grouped(cloud: PointCloud, cell: float, name: str):
    if not cell > 0:
        raise ValueError(f"{name}: cell size must be positive, got {cell}")
    if cloud.n == 0:
        raise ValueError(f"{name}: empty cloud")
    return _cell_groups(cloud.coords, cell)


def grid_downsample(cloud: PointCloud, cell: float) -> PointCloud:
    """One point per occupied cell at the centroid of its members, carrying the majority label."""
    origin, order, starts, group, _ = _grouped(cloud, cell, "grid_downsample")
    counts = np.diff(np.append(starts, len(order)))
    centroids = np.add.reduceat(cloud.coords[order], starts, axis=0) / counts[:, None]
    labels = None
    if cloud.labels is not None:
        labels = majority_labels(group, cloud.labels[order], len(starts))
    features = None
    if cloud.features is not None:
        features = np.add.reduceat(cloud.features[order], starts, axis=0) / counts[:, None]
    return PointCloud(centroids, labels, features)


def voxelize_majority(cloud: PointCloud, voxel: float) -> PointCloud:
    """Voxel centers keyed from the cloud's min corner, labelled with the member mode."""
    if cloud.labels is None:
        raise ValueError("voxelize_majority: cloud has no labels")
    origin, order, starts, group, keys = _grouped(cloud, voxel, "voxelize_majority")
    centers = origin + (keys + 0.5) * voxel
    return PointCloud(centers, majority_labels(group, cloud.labels[order], len(starts)))


def random_downsample(cloud: PointCloud, n: int, seed: int) -> PointCloud:
    """``n`` points drawn without replacement, kept in original order."""
    if not 0 < n <= cloud.n:
        raise ValueError(f"random_downsample: n={n} must lie in (0, {cloud.n}]")
    rng = np.random.default_rng(seed)
    keep = np.sort(rng.choice(cloud.n, size=n, replace=False))
    return cloud.subset(keep)
