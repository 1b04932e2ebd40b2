"""Central finite-difference checks of backward gradients."""
from __future__ import annotations

from typing import Callable

import numpy as np

from . import tensor as T
from .config import RunConfig
from .geometry import PointCloud
from .model import RetroFPN, prepare_sample
from .tensor import Tensor

STEP = 1e-5
DENOM_FLOOR = 1e-8


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), DENOM_FLOOR)
    return np.abs(analytic - numeric) / denom


def numeric_gradient(
    loss_fn: Callable[[], Tensor], param: Tensor, step: float = STEP, dtype=np.longdouble
) -> np.ndarray:
    """Central differences of ``loss_fn`` w.r.t. each entry of ``param``.

    Parameters stay float64; the perturbed losses are evaluated in ``dtype``
    so that rounding in the loss does not swamp small gradient entries.
    """
    grad = np.zeros_like(param.data)
    flat = param.data.reshape(-1)
    out = grad.reshape(-1)
    with T.compute_dtype(dtype):
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = loss_fn().data
            flat[i] = orig - step
            down = loss_fn().data
            flat[i] = orig
            out[i] = float((up - down) / (2 * step))
    return grad


def check_gradients(loss_fn: Callable[[], Tensor], params: dict[str, Tensor], step: float = STEP) -> dict[str, float]:
    """Max relative error per named parameter between backward and finite differences."""
    for p in params.values():
        p.grad = None
    loss_fn().backward()
    analytic = {name: (np.zeros_like(p.data) if p.grad is None else p.grad.copy()) for name, p in params.items()}
    return {name: float(relative_error(analytic[name], numeric_gradient(loss_fn, p, step)).max()) for name, p in params.items()}


# ---------------------------------------------------------------- random primitive graphs


def _leaf(rng, *shape) -> Tensor:
    return Tensor(rng.normal(size=shape), requires_grad=True)


def random_graph(rng: np.random.Generator, kind: int):
    """A small scalar graph exercising a rotating subset of the primitives."""
    m, k, n = (int(v) for v in rng.integers(2, 5, size=3))
    a, b, bias = _leaf(rng, m, k), _leaf(rng, k, n), _leaf(rng, n)
    c, s = _leaf(rng, m, n), _leaf(rng, m)
    idx = rng.integers(0, m, size=(m + 1, 2))
    labels = rng.integers(0, n, size=m)
    labels[0] = -1
    params = {"a": a, "b": b, "bias": bias, "c": c, "s": s}

    def loss():
        h = T.add(T.matmul(a, b), bias)
        variant = kind % 5
        if variant == 0:
            h = T.mul(T.sigmoid(h), c)
            return T.cross_entropy_mean(T.softmax(h) * 3.0, labels)
        if variant == 1:
            g = T.gather_rows(T.relu(h) + c, idx)  # (m+1, 2, n)
            pooled = T.concat([T.tmax(g, axis=1), T.tsum(g, axis=1)], axis=-1)
            return T.mean(T.mul(pooled, pooled))
        if variant == 2:
            r = T.rowscale(T.sub(h, c), T.sigmoid(s))
            return T.cross_entropy_mean(r, labels) + T.tsum(T.exp(T.mul(r, 0.1)))
        if variant == 3:
            flat = T.reshape(h, (m * n,))
            return T.tsum(T.mul(T.softmax(T.reshape(flat, (m, n))), c)) + T.mean(T.neg(T.sigmoid(h)))
        z = T.sigmoid(T.add(h, c))
        mix = T.add(T.mul(z, h), T.mul(T.add(T.neg(z), 1.0), c))
        return T.cross_entropy_mean(mix, labels)

    return loss, params


def primitive_suite(seed: int = 0, graphs: int = 25) -> float:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for i in range(graphs):
        loss, params = random_graph(rng, i)
        worst = max(worst, max(check_gradients(loss, params).values()))
    return worst


# ---------------------------------------------------------------- model check


def tiny_model_problem(seed: int = 0, n_points: int = 16, levels: int = 2, k: int = 3, width: int = 4):
    """A 2-level, 16-point model and its hierarchical loss closure."""
    from .training import hierarchical_loss

    rng = np.random.default_rng(seed)
    coords = rng.uniform(0, 1, size=(n_points, 3))
    labels = rng.integers(0, 3, size=n_points)
    cfg = RunConfig(
        levels=levels, k=k, channels=width, backbone_channels=width, num_classes=3,
        base_cell=0.5, max_points=[0] + [max(k, n_points // 2)] * (levels - 1), seed=seed,
    )
    sample = prepare_sample(PointCloud(coords, labels), cfg, seed=seed)
    model = RetroFPN(cfg)
    # move parameters off zero so biases and ReLU kinks are generic
    for _, p in model.named_parameters():
        p.data = p.data + rng.normal(0, 0.3, size=p.shape)

    def loss():
        return hierarchical_loss(model(sample), sample.labels, cfg.effective_loss_weights())

    return model, sample, loss


def model_suite(seed: int = 0) -> dict[str, float]:
    model, _, loss = tiny_model_problem(seed)
    return check_gradients(loss, dict(model.named_parameters()))


def run_all(seed: int = 0) -> dict:
    prim = primitive_suite(seed)
    per_param = model_suite(seed)
    return {
        "seed": seed,
        "primitive_max_rel_err": prim,
        "model_max_rel_err": max(per_param.values()),
        "max_rel_err": max(prim, max(per_param.values())),
        "parameters_checked": len(per_param),
    }
