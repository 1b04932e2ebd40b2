"""Retro-transformer: local cross-attention over the coarser level plus a semantic gate.

Each level ``l`` turns its region features ``F_l`` into point-level semantic
features ``H_l`` by attending to the K nearest points of level ``l+1`` (whose
``H`` is already computed), then blending that summary with a linear
compaction of ``F_l`` through a sigmoid update gate. The top level attends
to itself using ``F_L`` as query, key and value source.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import NeighborMap
from .nn import MLP, Linear, Module
from .pyramid import PyramidLevel
from .tensor import (
    ShapeError,
    Tensor,
    add,
    gather_rows,
    mul,
    neg,
    relu,
    reshape,
    rowscale,
    softmax,
    tsum,
)


@dataclass(frozen=True)
class Ablation:
    cross_att: bool = True
    pos_emb: bool = True
    sem_gate: bool = True


FULL = Ablation()


class RetroParams(Module):
    """Learnable maps of one retro-transformer level.

    ``kv_dim`` is the width of the key/value source: ``C`` for cross-attention
    levels, ``C_L`` for the self-attending top level.
    """

    def __init__(self, in_dim: int, width: int, num_classes: int, rng: np.random.Generator, kv_dim: int | None = None):
        kv_dim = width if kv_dim is None else kv_dim
        self.in_dim = in_dim
        self.width = width
        self.kv_dim = kv_dim
        self.query = MLP(in_dim, width, width, rng)
        self.key = Linear(kv_dim, width, rng)
        self.value = Linear(kv_dim, width, rng)
        self.compact = Linear(in_dim, width, rng)
        self.pos_query = MLP(3, width, width, rng)
        self.pos_key = MLP(3, width, width, rng)
        self.gate = MLP(width, width, width, rng, out_act="sigmoid")
        self.head = Linear(width, num_classes, rng)


def _attend(q: Tensor, kv_source: Tensor, nmap: NeighborMap, offsets: np.ndarray, params: RetroParams, pos_emb: bool):
    n, k = nmap.indices.shape
    c = params.width
    flat = nmap.indices.reshape(-1)
    keys = gather_rows(params.key(kv_source), flat)
    values = gather_rows(params.value(kv_source), flat)
    queries = gather_rows(q, np.repeat(np.arange(n), k))
    if pos_emb:
        dp = Tensor(np.asarray(offsets, dtype=np.float64).reshape(n * k, 3))
        queries = add(queries, params.pos_query(dp))
        keys = add(keys, params.pos_key(dp))
    logits = tsum(mul(queries, keys), axis=1) * (1.0 / np.sqrt(c))
    attn = softmax(reshape(logits, (n, k)), axis=-1)
    weighted = rowscale(values, reshape(attn, (n * k,)))
    return tsum(reshape(weighted, (n, k, c)), axis=1), attn


def _check(f: Tensor, params: RetroParams, nmap: NeighborMap, offsets: np.ndarray):
    if f.ndim != 2 or f.shape[1] != params.in_dim:
        raise ShapeError(f"region features must be (N, {params.in_dim}), got {f.shape}")
    if nmap.indices.shape[0] != f.shape[0]:
        raise ShapeError(f"neighbor map has {nmap.indices.shape[0]} rows for {f.shape[0]} points")
    if np.shape(offsets) != nmap.indices.shape + (3,):
        raise ShapeError(f"offsets must be {nmap.indices.shape + (3,)}, got {np.shape(offsets)}")


def lca_forward(
    f: Tensor,
    h_next: Tensor,
    nmap: NeighborMap,
    offsets: np.ndarray,
    params: RetroParams,
    pos_emb: bool = True,
    return_attention: bool = False,
):
    """Local cross-attention from level-l region features onto level-(l+1) semantic features.

    ``offsets[i, k]`` is ``p_i - p_{nmap[i, k]}`` in meters.
    """
    _check(f, params, nmap, offsets)
    if h_next.ndim != 2 or h_next.shape[1] != params.kv_dim:
        raise ShapeError(f"key/value source must be (M, {params.kv_dim}), got {h_next.shape}")
    hhat, attn = _attend(params.query(f), h_next, nmap, offsets, params, pos_emb)
    return (hhat, attn) if return_attention else hhat


def self_attention_top(
    f_top: Tensor,
    nmap: NeighborMap,
    offsets: np.ndarray,
    params: RetroParams,
    pos_emb: bool = True,
    return_attention: bool = False,
):
    """Top-level degenerate case: ``F_L`` is query, key and value source."""
    _check(f_top, params, nmap, offsets)
    if params.kv_dim != f_top.shape[1]:
        raise ShapeError(f"top-level key/value width {params.kv_dim} != feature width {f_top.shape[1]}")
    hhat, attn = _attend(params.query(f_top), f_top, nmap, offsets, params, pos_emb)
    return (hhat, attn) if return_attention else hhat


def sgu_forward(hhat: Tensor, f: Tensor, params: RetroParams, sem_gate: bool = True) -> Tensor:
    """Gate the attended context against the compacted region feature."""
    if hhat.ndim != 2 or hhat.shape[1] != params.width or hhat.shape[0] != f.shape[0]:
        raise ShapeError(f"context {hhat.shape} does not match features {f.shape} / width {params.width}")
    o = params.compact(f)
    if not sem_gate:
        return add(hhat, o)
    z = params.gate(add(hhat, o))
    return add(mul(z, hhat), mul(add(neg(z), 1.0), o))


def head_forward(h: Tensor, params: RetroParams) -> Tensor:
    return params.head(relu(h))


def level_forward(
    level: PyramidLevel,
    f: Tensor,
    h_next: Tensor | None,
    params: RetroParams,
    ablation: Ablation = FULL,
) -> tuple[Tensor, Tensor]:
    """``(H_l, logits_l)`` for one level; ``h_next`` is None at the top."""
    if not ablation.cross_att:
        hhat = params.compact(f)
    elif h_next is None:
        if level.self_neighbors is None:
            raise ValueError(f"level {level.level} has no self neighbor map")
        hhat = self_attention_top(f, level.self_neighbors, level.offsets_self, params, ablation.pos_emb)
    else:
        if level.neighbors_up is None:
            raise ValueError(f"level {level.level} has no upward neighbor map")
        hhat = lca_forward(f, h_next, level.neighbors_up, level.offsets_up, params, ablation.pos_emb)
    h = sgu_forward(hhat, f, params, ablation.sem_gate)
    return h, head_forward(h, params)


def retro_forward(
    pyramid: list[PyramidLevel],
    features: list[Tensor],
    params: list[RetroParams],
    ablation: Ablation = FULL,
    levels_needed: int | None = None,
) -> list[tuple[Tensor, Tensor]]:
    """Run levels L..1 top-down. Returns ``(H_l, logits_l)`` indexed so that entry 0 is level 1.

    ``levels_needed`` lets callers stop computing coarse outputs nobody consumes;
    only valid when cross-attention is off.
    """
    n_levels = len(pyramid)
    if len(features) != n_levels or len(params) != n_levels:
        raise ValueError(f"need features and params for all {n_levels} levels")
    out: list[tuple[Tensor, Tensor] | None] = [None] * n_levels
    h_next = None
    top = n_levels if levels_needed is None or ablation.cross_att else levels_needed
    for i in range(top - 1, -1, -1):
        source = h_next if i < n_levels - 1 else None
        h, logits = level_forward(pyramid[i], features[i], source, params[i], ablation)
        out[i] = (h, logits)
        h_next = h
    return out
