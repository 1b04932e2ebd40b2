"""Synthetic labelled rooms and the ``x y z label`` text format."""
from __future__ import annotations

import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .geometry import IGNORE, PointCloud

CLASS_NAMES = ["floor", "wall", "box", "sphere", "pillar"]
FLOOR, WALL, BOX, SPHERE, PILLAR = range(5)


class ParseError(ValueError):
    def __init__(self, path, line_no: int, message: str):
        super().__init__(f"{path}:{line_no}: {message}")
        self.line_no = line_no


@dataclass
class SceneSpec:
    extents: tuple[float, float, float] = (6.0, 5.0, 3.0)
    num_points: int = 2048
    noise: float = 0.01
    seed: int = 0
    # [min, max] instances per object class
    boxes: tuple[int, int] = (2, 4)
    spheres: tuple[int, int] = (2, 4)
    pillars: tuple[int, int] = (1, 3)
    # [min, max] share of points per class, in CLASS_NAMES order
    shares: list[tuple[float, float]] = field(
        default_factory=lambda: [(0.15, 0.35), (0.25, 0.45), (0.10, 0.25), (0.05, 0.15), (0.05, 0.15)]
    )

    def validate(self) -> None:
        if len(self.extents) != 3 or min(self.extents) <= 0:
            raise ValueError(f"room extents must be three positive lengths, got {self.extents}")
        if min(self.extents[:2]) < 1.0:
            raise ValueError("room footprint must be at least 1 m on each side")
        if self.num_points < 100:
            raise ValueError(f"need at least 100 points per scene, got {self.num_points}")
        if self.noise < 0:
            raise ValueError(f"noise must be >= 0, got {self.noise}")
        for name, (lo, hi) in zip(("boxes", "spheres", "pillars"), (self.boxes, self.spheres, self.pillars)):
            if not 0 <= lo <= hi:
                raise ValueError(f"{name} count range {lo, hi} is invalid")
        if len(self.shares) != len(CLASS_NAMES) or any(not 0 <= lo <= hi <= 1 for lo, hi in self.shares):
            raise ValueError("shares must hold one valid [lo, hi] range per class")


def sample_shares(ranges: list[tuple[float, float]], rng: np.random.Generator) -> np.ndarray:
    """Random shares inside ``ranges`` that sum to one.

    Each share is drawn from the part of its range that still leaves the
    remaining classes feasible.
    """
    lo = np.array([r[0] for r in ranges])
    hi = np.array([r[1] for r in ranges])
    if lo.sum() > 1 + 1e-12 or hi.sum() < 1 - 1e-12:
        raise ValueError(f"share ranges cannot sum to one: {ranges}")
    out = np.zeros(len(ranges))
    left = 1.0
    for i in range(len(ranges) - 1):
        a = max(lo[i], left - hi[i + 1 :].sum())
        b = min(hi[i], left - lo[i + 1 :].sum())
        out[i] = rng.uniform(a, b) if b > a else a
        left -= out[i]
    out[-1] = left
    return out


def split_counts(shares: np.ndarray, total: int) -> np.ndarray:
    """Largest-remainder rounding of ``shares * total``."""
    raw = shares * total
    counts = np.floor(raw).astype(np.int64)
    rest = total - counts.sum()
    counts[np.argsort(-(raw - counts), kind="stable")[:rest]] += 1
    return counts


def _on_box(rng, n, lo, hi):
    """Points on the top and four sides of an axis-aligned box."""
    sx, sy, sz = hi - lo
    areas = np.array([sx * sy, sx * sz, sx * sz, sy * sz, sy * sz])
    face = rng.choice(5, size=n, p=areas / areas.sum())
    u, v = rng.random(n), rng.random(n)
    pts = np.empty((n, 3))
    pts[:, 0] = lo[0] + u * sx
    pts[:, 1] = lo[1] + v * sy
    pts[:, 2] = lo[2] + v * sz
    top = face == 0
    pts[top, 2] = hi[2]
    pts[face == 1, 1] = lo[1]
    pts[face == 2, 1] = hi[1]
    side_x = face >= 3
    pts[side_x, 1] = lo[1] + u[side_x] * sy
    pts[face == 3, 0] = lo[0]
    pts[face == 4, 0] = hi[0]
    return pts


def _on_sphere(rng, n, center, radius):
    d = rng.normal(size=(n, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    return center + radius * d


def _on_cylinder(rng, n, cx, cy, radius, height):
    t = rng.uniform(0, 2 * np.pi, n)
    return np.column_stack([cx + radius * np.cos(t), cy + radius * np.sin(t), rng.uniform(0, height, n)])


def _on_walls(rng, n, w, d, h):
    side = rng.choice(4, size=n, p=np.array([w, w, d, d]) / (2 * (w + d)))
    u, z = rng.random(n), rng.uniform(0, h, n)
    pts = np.empty((n, 3))
    pts[:, 2] = z
    along_x = side < 2
    pts[along_x, 0] = u[along_x] * w
    pts[along_x, 1] = np.where(side[along_x] == 0, 0.0, d)
    pts[~along_x, 1] = u[~along_x] * d
    pts[~along_x, 0] = np.where(side[~along_x] == 2, 0.0, w)
    return pts


def _split_among(rng, n: int, k: int) -> np.ndarray:
    return rng.multinomial(n, np.full(k, 1.0 / k))


def generate_scene(spec: SceneSpec) -> PointCloud:
    """Sample one labelled room; identical ``spec`` gives an identical cloud."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    w, d, h = spec.extents
    counts_obj = [int(rng.integers(lo, hi + 1)) for lo, hi in (spec.boxes, spec.spheres, spec.pillars)]
    ranges = list(spec.shares)
    for cls, count in zip((BOX, SPHERE, PILLAR), counts_obj):
        if count == 0:
            ranges[cls] = (0.0, 0.0)
    free = [i for i in (FLOOR, WALL)]
    if sum(r[1] for r in ranges) < 1:
        # absent objects: floor and walls absorb the remainder in proportion to area
        rest = 1 - sum(r[0] for i, r in enumerate(ranges) if i not in free)
        floor_share = rest * (w * d) / (w * d + 2 * (w + d) * h)
        ranges[FLOOR] = (floor_share, floor_share)
        ranges[WALL] = (rest - floor_share, rest - floor_share)
    per_class = split_counts(sample_shares(ranges, rng), spec.num_points)

    parts, labels = [], []

    def emit(pts, cls):
        parts.append(pts)
        labels.append(np.full(len(pts), cls, dtype=np.int64))

    n = per_class[FLOOR]
    emit(np.column_stack([rng.uniform(0, w, n), rng.uniform(0, d, n), np.zeros(n)]), FLOOR)
    emit(_on_walls(rng, per_class[WALL], w, d, h), WALL)

    margin = 0.3
    for cls, count in zip((BOX, SPHERE, PILLAR), counts_obj):
        if count == 0:
            continue
        for m in _split_among(rng, per_class[cls], count):
            if cls == BOX:
                size = rng.uniform([0.4, 0.4, 0.4], [1.2, 1.2, 1.0])
                size[:2] = np.minimum(size[:2], [w - 2 * margin, d - 2 * margin])
                lo = np.array([rng.uniform(margin, w - margin - size[0]), rng.uniform(margin, d - margin - size[1]), 0.0])
                pts = _on_box(rng, m, lo, lo + size)
            elif cls == SPHERE:
                r = rng.uniform(0.15, 0.4)
                center = np.array([rng.uniform(margin + r, w - margin - r), rng.uniform(margin + r, d - margin - r), r + rng.uniform(0, 0.8)])
                pts = _on_sphere(rng, m, center, r)
            else:
                r = rng.uniform(0.1, 0.25)
                pts = _on_cylinder(rng, m, rng.uniform(margin + r, w - margin - r), rng.uniform(margin + r, d - margin - r), r, h)
            emit(pts, cls)

    coords = np.concatenate(parts) if parts else np.zeros((0, 3))
    if spec.noise > 0:
        coords = coords + rng.normal(0.0, spec.noise, coords.shape)
    lab = np.concatenate(labels) if labels else np.zeros(0, np.int64)
    order = rng.permutation(len(coords))
    return PointCloud(coords[order], lab[order])


# ---------------------------------------------------------------- text format


def write_cloud(cloud: PointCloud, path, level: int | None = None, labels=None) -> None:
    """Write ``x y z label`` (or ``x y z label level``) lines with 9 significant digits."""
    lab = labels if labels is not None else cloud.labels
    if lab is None:
        lab = np.full(cloud.n, IGNORE, dtype=np.int64)
    lab = np.asarray(lab, dtype=np.int64)
    lines = []
    for (x, y, z), c in zip(cloud.coords.tolist(), lab.tolist()):
        line = f"{x:.9g} {y:.9g} {z:.9g} {c}"
        if level is not None:
            line += f" {level}"
        lines.append(line)
    Path(path).write_text("".join(s + "\n" for s in lines))


def read_cloud(path, with_level: bool = False):
    """Parse a cloud file; returns ``PointCloud`` (and the level column when ``with_level``)."""
    coords, labels, levels = [], [], []
    with open(path) as fh:
        for line_no, raw in enumerate(fh, start=1):
            text = raw.split("#", 1)[0].strip()
            if not text:
                continue
            cols = text.split()
            if len(cols) not in (4, 5):
                raise ParseError(path, line_no, f"expected 'x y z label [level]', got {len(cols)} columns")
            try:
                xyz = [float(c) for c in cols[:3]]
                lab = int(cols[3])
                lvl = int(cols[4]) if len(cols) == 5 else 1
            except ValueError as exc:
                raise ParseError(path, line_no, str(exc)) from None
            if not all(np.isfinite(xyz)):
                raise ParseError(path, line_no, "non-finite coordinate")
            if lab < IGNORE:
                raise ParseError(path, line_no, f"label {lab} below the ignore sentinel")
            coords.append(xyz)
            labels.append(lab)
            levels.append(lvl)
    cloud = PointCloud(np.array(coords, dtype=np.float64).reshape(-1, 3), np.array(labels, dtype=np.int64))
    if with_level:
        return cloud, np.array(levels, dtype=np.int64)
    return cloud


# ---------------------------------------------------------------- datasets


def worker_count() -> int:
    cap = os.environ.get("RETRO_THREADS")
    return max(1, int(cap)) if cap else 1


def generate_dataset(out_dir, n_train: int = 64, n_test: int = 16, seed: int = 0, spec: SceneSpec | None = None) -> Path:
    """Write scene files plus ``manifest.json``; returns the manifest path."""
    base = spec or SceneSpec()
    out = Path(out_dir)
    (out / "scenes").mkdir(parents=True, exist_ok=True)
    jobs = [(f"scene_{i:04d}", seed * 100003 + i) for i in range(n_train + n_test)]

    def make(job):
        name, scene_seed = job
        cloud = generate_scene(SceneSpec(**{**asdict(base), "seed": scene_seed}))
        rel = f"scenes/{name}.txt"
        write_cloud(cloud, out / rel)
        return rel

    with ThreadPoolExecutor(max_workers=worker_count()) as pool:
        files = list(pool.map(make, jobs))
    manifest = {
        "num_classes": len(CLASS_NAMES),
        "class_names": CLASS_NAMES,
        "seed": seed,
        "scene_spec": {k: v for k, v in asdict(base).items() if k != "seed"},
        "train": files[:n_train],
        "test": files[n_train:],
    }
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2))
    return path


def load_manifest(path) -> dict:
    path = Path(path)
    manifest = json.loads(path.read_text())
    for key in ("train", "test"):
        if key not in manifest:
            raise ValueError(f"{path}: manifest lacks a {key!r} list")
    manifest["root"] = str(path.parent)
    return manifest


def load_split(manifest: dict, split: str) -> list[tuple[str, PointCloud]]:
    root = Path(manifest["root"])
    return [(rel, read_cloud(root / rel)) for rel in manifest[split]]
