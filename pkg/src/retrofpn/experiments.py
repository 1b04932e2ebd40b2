"""Component ablation on synthetic rooms: each variant toggles one retro-transformer part."""
from __future__ import annotations

import logging
import time
from dataclasses import asdict

import numpy as np

from .config import RunConfig
from .dataset import SceneSpec, generate_scene
from .model import RetroFPN, Sample, prepare_sample
from .training import evaluate, make_optimizer, train_epoch

log = logging.getLogger(__name__)

# name -> toggles; ordered from weakest to strongest expected variant
VARIANTS: dict[str, dict] = {
    "backbone": dict(hs=False, cross_att=False, pos_emb=False, sem_gate=False),
    "hs_only": dict(hs=True, cross_att=False, pos_emb=False, sem_gate=False),
    "no_pos_emb": dict(hs=True, cross_att=True, pos_emb=False, sem_gate=True),
    "no_sem_gate": dict(hs=True, cross_att=True, pos_emb=True, sem_gate=False),
    "full": dict(hs=True, cross_att=True, pos_emb=True, sem_gate=True),
}


def synthetic_split(cfg: RunConfig, n_train: int = 64, n_test: int = 16, data_seed: int = 0, spec: SceneSpec | None = None):
    base = asdict(spec or SceneSpec())
    samples = []
    for i in range(n_train + n_test):
        cloud = generate_scene(SceneSpec(**{**base, "seed": data_seed * 100003 + i}))
        samples.append(prepare_sample(cloud, cfg, seed=i, name=f"scene_{i:04d}"))
    return samples[:n_train], samples[n_train:]


def train_and_test(cfg: RunConfig, train: list[Sample], test: list[Sample]) -> float:
    model = RetroFPN(cfg)
    opt = make_optimizer(model, cfg)
    for epoch in range(cfg.epochs):
        train_epoch(train, model, opt, cfg, epoch)
    return evaluate(test, model).miou


def run_ablation(
    cfg: RunConfig,
    seeds=(0, 1, 2),
    variants: dict[str, dict] | None = None,
    n_train: int = 64,
    n_test: int = 16,
    data_seed: int = 0,
) -> dict[str, list[float]]:
    """Test mIoU per variant and seed, on one shared synthetic split."""
    variants = variants or VARIANTS
    train, test = synthetic_split(cfg, n_train, n_test, data_seed)
    results: dict[str, list[float]] = {name: [] for name in variants}
    for seed in seeds:
        for name, toggles in variants.items():
            start = time.perf_counter()
            miou = train_and_test(cfg.replace(seed=seed, **toggles), train, test)
            results[name].append(miou)
            log.info("%s seed=%d miou=%.4f (%.0fs)", name, seed, miou, time.perf_counter() - start)
    return results


def ordering_report(means: dict[str, float], slack: float = 0.3, min_gain: float = 1.0) -> tuple[bool, list[str]]:
    """Check the expected ordering on mean mIoU given in points.

    At most one pairwise violation is tolerated, and only if it is within ``slack``.
    """
    pairs = [
        ("full", "no_pos_emb"),
        ("full", "no_sem_gate"),
        ("no_pos_emb", "hs_only"),
        ("no_sem_gate", "hs_only"),
        ("hs_only", "backbone"),
    ]
    lines, violations, ok = [], 0, True
    for hi, lo in pairs:
        gap = means[hi] - means[lo]
        status = "ok" if gap >= 0 else ("slack" if gap >= -slack else "FAIL")
        if gap < 0:
            violations += 1
            ok &= gap >= -slack
        lines.append(f"{hi} >= {lo}: {means[hi]:.2f} vs {means[lo]:.2f} [{status}]")
    gain = means["full"] - means["backbone"]
    lines.append(f"full - backbone = {gain:.2f} (need >= {min_gain})")
    ok = ok and violations <= 1 and gain >= min_gain
    return ok, lines


def mean_points(results: dict[str, list[float]]) -> dict[str, float]:
    return {name: 100.0 * float(np.mean(v)) for name, v in results.items()}
