"""Hierarchical loss, optimizers, the training epoch and mIoU evaluation."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .config import RunConfig
from .geometry import IGNORE
from .model import RetroFPN, Sample
from .tensor import Tensor, add, cross_entropy_mean, mul

log = logging.getLogger(__name__)


def hierarchical_loss(logits: Sequence[Tensor | None], labels: Sequence[np.ndarray], weights: Sequence[float]) -> Tensor:
    """Weighted sum of per-level mean cross-entropies; zero-weight levels are skipped."""
    if not (len(logits) == len(labels) == len(weights)):
        raise ValueError(f"level count mismatch: {len(logits)} logits, {len(labels)} labels, {len(weights)} weights")
    total: Tensor | None = None
    for lg, y, w in zip(logits, labels, weights):
        if w == 0:
            continue
        if lg is None:
            raise ValueError("a level with nonzero weight has no logits")
        term = mul(cross_entropy_mean(lg, y, IGNORE), float(w))
        total = term if total is None else add(total, term)
    return total if total is not None else Tensor(0.0)


# ---------------------------------------------------------------- optimizers


class Optimizer:
    def __init__(self, named_params: Iterable[tuple[str, Tensor]], cfg: RunConfig):
        self.named = list(named_params)
        self.lr = cfg.lr
        self.weight_decay = cfg.weight_decay
        self.t = 0

    def _grad(self, name: str, p: Tensor) -> np.ndarray:
        g = np.zeros_like(p.data) if p.grad is None else p.grad
        if not np.isfinite(g).all():
            bad = int((~np.isfinite(g)).sum())
            raise FloatingPointError(f"non-finite gradient in {name!r} ({bad} entries) at step {self.t + 1}")
        if self.weight_decay:
            g = g + self.weight_decay * p.data
        return g

    def step(self) -> None:
        grads = [self._grad(n, p) for n, p in self.named]
        self.t += 1
        for (name, p), g in zip(self.named, grads):
            self._update(name, p, g)
        self.zero_grad()

    def zero_grad(self) -> None:
        for _, p in self.named:
            p.grad = None

    def _update(self, name: str, p: Tensor, g: np.ndarray) -> None:
        raise NotImplementedError

    def state_dict(self) -> dict[str, np.ndarray]:
        return {"optim/step": np.asarray(float(self.t))}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        self.t = int(state["optim/step"])


class SGD(Optimizer):
    """SGD with heavy-ball momentum; the first step uses the raw gradient as velocity."""

    def __init__(self, named_params, cfg: RunConfig):
        super().__init__(named_params, cfg)
        self.momentum = cfg.momentum
        self.velocity: dict[str, np.ndarray] = {}

    def _update(self, name, p, g):
        if self.momentum:
            v = self.velocity.get(name)
            v = g.copy() if v is None else self.momentum * v + g
            self.velocity[name] = v
            g = v
        p.data = p.data - self.lr * g

    def state_dict(self):
        state = super().state_dict()
        for name, v in self.velocity.items():
            state[f"optim/velocity/{name}"] = v.copy()
        return state

    def load_state_dict(self, state):
        super().load_state_dict(state)
        self.velocity = {k[len("optim/velocity/"):]: v.copy() for k, v in state.items() if k.startswith("optim/velocity/")}


class Adam(Optimizer):
    def __init__(self, named_params, cfg: RunConfig):
        super().__init__(named_params, cfg)
        self.b1, self.b2 = cfg.betas
        self.eps = cfg.eps
        self.m = {n: np.zeros_like(p.data) for n, p in self.named}
        self.v = {n: np.zeros_like(p.data) for n, p in self.named}

    def _update(self, name, p, g):
        m = self.m[name] = self.b1 * self.m[name] + (1 - self.b1) * g
        v = self.v[name] = self.b2 * self.v[name] + (1 - self.b2) * g * g
        mhat = m / (1 - self.b1 ** self.t)
        vhat = v / (1 - self.b2 ** self.t)
        p.data = p.data - self.lr * mhat / (np.sqrt(vhat) + self.eps)

    def state_dict(self):
        state = super().state_dict()
        for name in self.m:
            state[f"optim/m/{name}"] = self.m[name].copy()
            state[f"optim/v/{name}"] = self.v[name].copy()
        return state

    def load_state_dict(self, state):
        super().load_state_dict(state)
        for name in self.m:
            self.m[name] = state[f"optim/m/{name}"].copy()
            self.v[name] = state[f"optim/v/{name}"].copy()


def make_optimizer(model: RetroFPN, cfg: RunConfig) -> Optimizer:
    cls = Adam if cfg.optimizer == "adam" else SGD
    return cls(model.named_parameters(), cfg)


def optimizer_step(optimizer: Optimizer) -> None:
    optimizer.step()


# ---------------------------------------------------------------- metrics


@dataclass
class Metrics:
    iou: np.ndarray
    miou: float
    acc: float
    confusion: np.ndarray
    per_level_loss: list[float] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "miou": self.miou,
            "acc": self.acc,
            "iou": [None if np.isnan(x) else float(x) for x in self.iou],
            "per_level_loss": list(self.per_level_loss),
        }


def confusion_matrix(pred, gt, num_classes: int, ignore: int | None = IGNORE) -> np.ndarray:
    """Rows are ground truth, columns are predictions; ignored points are dropped."""
    pred = np.asarray(pred, dtype=np.int64).reshape(-1)
    gt = np.asarray(gt, dtype=np.int64).reshape(-1)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction has {pred.size} entries, ground truth {gt.size}")
    keep = gt != ignore if ignore is not None else np.ones(gt.shape, bool)
    p, g = pred[keep], gt[keep]
    if p.size and (min(p.min(), g.min()) < 0 or max(p.max(), g.max()) >= num_classes):
        raise IndexError(f"labels must lie in [0, {num_classes})")
    return np.bincount(g * num_classes + p, minlength=num_classes**2).reshape(num_classes, num_classes)


def metrics_from_confusion(cm: np.ndarray) -> Metrics:
    total = cm.sum()
    if total == 0:
        raise ValueError("no points left after removing ignored labels")
    tp = np.diag(cm).astype(np.float64)
    union = cm.sum(axis=0) + cm.sum(axis=1) - tp
    iou = np.full(cm.shape[0], np.nan)
    present = union > 0
    iou[present] = tp[present] / union[present]
    return Metrics(iou, float(np.mean(iou[present])), float(tp.sum() / total), cm)


def evaluate_miou(pred, gt, num_classes: int, ignore: int | None = IGNORE) -> Metrics:
    return metrics_from_confusion(confusion_matrix(pred, gt, num_classes, ignore))


# ---------------------------------------------------------------- loops


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch]).permutation(n)


def train_epoch(samples: Sequence[Sample], model: RetroFPN, optimizer: Optimizer, cfg: RunConfig, epoch: int = 0) -> Metrics:
    """One pass over ``samples``; returns train-set level-1 metrics and mean per-level losses."""
    start = time.perf_counter()
    weights = cfg.effective_loss_weights()
    loss_sum = np.zeros(cfg.levels)
    loss_count = np.zeros(cfg.levels)
    cm = np.zeros((cfg.num_classes, cfg.num_classes), dtype=np.int64)
    order = epoch_order(len(samples), cfg.seed, epoch)
    for lo in range(0, len(order), cfg.batch_scenes):
        batch = [samples[i] for i in order[lo : lo + cfg.batch_scenes]]
        total = None
        for sample in batch:
            try:
                logits = model(sample)
                loss = hierarchical_loss(logits, sample.labels, weights)
            except Exception as exc:
                raise RuntimeError(f"scene {sample.name!r}: {exc}") from exc
            for i, lg in enumerate(logits):
                if lg is not None and (sample.labels[i] != IGNORE).any():
                    loss_sum[i] += float(cross_entropy_mean(lg.detach(), sample.labels[i]).data)
                    loss_count[i] += 1
            cm += confusion_matrix(np.argmax(logits[0].data, axis=1), sample.labels[0], cfg.num_classes)
            total = loss if total is None else add(total, loss)
        if len(batch) > 1:
            total = mul(total, 1.0 / len(batch))
        if total.requires_grad:
            total.backward()
        optimizer.step()
    metrics = metrics_from_confusion(cm)
    metrics.per_level_loss = [float(s / c) if c else float("nan") for s, c in zip(loss_sum, loss_count)]
    log.debug("epoch %d done in %.2fs", epoch, time.perf_counter() - start)
    return metrics


def evaluate(samples: Sequence[Sample], model: RetroFPN, workers: int = 1) -> Metrics:
    """Level-1 metrics over ``samples``; confusion matrices merge by summation."""
    k = model.cfg.num_classes

    def one(sample: Sample) -> np.ndarray:
        pred = model.predict(sample)[0]
        return confusion_matrix(pred, sample.labels[0], k)

    if workers > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(one, samples))
    else:
        parts = [one(s) for s in samples]
    return metrics_from_confusion(sum(parts, np.zeros((k, k), dtype=np.int64)))
