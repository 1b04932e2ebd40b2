"""Independent reference computations used by the tests.

Everything here is written with explicit loops over plain numpy/python values
so it shares no code path with the autodiff engine.
"""
import math

import numpy as np


def matmul_loops(a, b):
    m, k = a.shape
    _, n = b.shape
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            s = 0.0
            for t in range(k):
                s += a[i, t] * b[t, j]
            out[i, j] = s
    return out


def knn_sort(source, queries, k):
    """Sort every source point by (squared distance, index) for each query."""
    rows = []
    for q in queries:
        cand = []
        for j, p in enumerate(source):
            dx, dy, dz = p[0] - q[0], p[1] - q[1], p[2] - q[2]
            cand.append((dx * dx + dy * dy + dz * dz, j))
        cand.sort()
        rows.append(cand[:k])
    return rows


def grid_cells(coords, labels, cell):
    """dict cell key -> (member coords, member labels), keyed from the min corner."""
    origin = coords.min(axis=0)
    cells = {}
    for p, lab in zip(coords, labels):
        key = tuple(int(math.floor((p[d] - origin[d]) / cell)) for d in range(3))
        cells.setdefault(key, ([], []))
        cells[key][0].append(p)
        cells[key][1].append(int(lab))
    return origin, cells


def mode_label(labels):
    votes = [l for l in labels if l != -1]
    if not votes:
        return -1
    counts = {}
    for l in votes:
        counts[l] = counts.get(l, 0) + 1
    best = max(counts.values())
    return min(l for l, c in counts.items() if c == best)


# ---------------------------------------------------------------- network pieces


def raw_params(module):
    return {name: p.data.copy() for name, p in module.named_parameters()}


def linear(x, P, name):
    return x @ P[f"{name}/weight"] + P[f"{name}/bias"]


def mlp(x, P, name, out=None):
    h = np.maximum(linear(x, P, f"{name}/fc1"), 0.0)
    y = linear(h, P, f"{name}/fc2")
    if out == "relu":
        return np.maximum(y, 0.0)
    if out == "sigmoid":
        return np.array([1.0 / (1.0 + math.exp(-v)) for v in y])
    return y


def attention_oracle(f, source, idx, offsets, P, pos_emb=True):
    """Per-point transcription of query/key/value, position-embedded logits and aggregation."""
    n, k = idx.shape
    c = P["key/weight"].shape[1]
    out = np.zeros((n, c))
    weights = np.zeros((n, k))
    for i in range(n):
        q = mlp(f[i], P, "query")
        logits = []
        values = []
        for t in range(k):
            h = source[idx[i, t]]
            key = linear(h, P, "key")
            values.append(linear(h, P, "value"))
            qq, kk = q, key
            if pos_emb:
                qq = q + mlp(offsets[i, t], P, "pos_query")
                kk = key + mlp(offsets[i, t], P, "pos_key")
            logits.append(sum(float(a) * float(b) for a, b in zip(qq, kk)) / math.sqrt(c))
        top = max(logits)
        ex = [math.exp(w - top) for w in logits]
        z = sum(ex)
        for t in range(k):
            weights[i, t] = ex[t] / z
            out[i] += weights[i, t] * values[t]
    return out, weights


def gate_oracle(hhat, f, P, sem_gate=True):
    out = np.zeros_like(hhat)
    for i in range(hhat.shape[0]):
        o = linear(f[i], P, "compact")
        if not sem_gate:
            out[i] = hhat[i] + o
            continue
        z = mlp(hhat[i] + o, P, "gate", out="sigmoid")
        out[i] = z * hhat[i] + (1.0 - z) * o
    return out


def head_oracle(h, P):
    return matmul_loops(np.maximum(h, 0.0), P["head/weight"]) + P["head/bias"]


def idw_oracle(source, idx, sqdist, eps=1e-8):
    n, k = idx.shape
    out = np.zeros((n, source.shape[1]))
    wts = np.zeros((n, k))
    for i in range(n):
        w = [1.0 / (sqdist[i, t] + eps) for t in range(k)]
        s = sum(w)
        for t in range(k):
            wts[i, t] = w[t] / s
            out[i] += wts[i, t] * source[idx[i, t]]
    return out, wts


def cross_entropy_oracle(logits, labels, ignore=-1):
    total, count = 0.0, 0
    for row, y in zip(logits, labels):
        if y == ignore:
            continue
        top = max(row)
        lse = top + math.log(sum(math.exp(v - top) for v in row))
        total += lse - row[y]
        count += 1
    return total / count


def confusion_oracle(pred, gt, num_classes, ignore=-1):
    cm = [[0] * num_classes for _ in range(num_classes)]
    for p, g in zip(pred, gt):
        if g == ignore:
            continue
        cm[g][p] += 1
    ious = []
    for c in range(num_classes):
        tp = cm[c][c]
        fp = sum(cm[r][c] for r in range(num_classes)) - tp
        fn = sum(cm[c]) - tp
        if tp + fp + fn:
            ious.append(tp / (tp + fp + fn))
    return sum(ious) / len(ious)
