"""Independent reference implementations used as test oracles.

Everything here is plain numpy written from the textbook definitions, without
reusing package internals beyond the parameter dictionaries.
"""

import itertools
import math

import numpy as np


# --- GNN forward passes ----------------------------------------------------

def _softmax_rows(z):
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def dense_forward(model, g, x):
    """Posteriors from dense matrices and explicit per-node loops."""
    arch, p = model.arch, model.params
    n = g.num_nodes
    a = np.zeros((n, n))
    for u, v in g.edges:
        a[u, v] = a[v, u] = 1.0
    h = np.asarray(x, dtype=np.float64)
    for i in range(arch.num_layers):
        last = i == arch.num_layers - 1
        if arch.kind == "GCN":
            at = a + np.eye(n)
            d = at.sum(axis=1) ** -0.5
            z = (d[:, None] * at * d[None, :]) @ h @ p[f"W{i}"] + p[f"b{i}"]
        elif arch.kind == "GraphSAGE":
            agg = np.zeros_like(h)
            for u in range(n):
                nb = np.flatnonzero(a[u])
                if len(nb):
                    agg[u] = h[nb].mean(axis=0)
            z = np.concatenate([h, agg], axis=1) @ p[f"W{i}"] + p[f"b{i}"]
        else:
            heads = arch.heads
            wh = (h @ p[f"W{i}"]).reshape(n, heads, -1)
            outs = np.zeros_like(wh)
            for u in range(n):
                nb = np.r_[np.flatnonzero(a[u]), u]
                for k in range(heads):
                    e = np.array([p[f"att_dst{i}"][k] @ wh[u, k] + p[f"att_src{i}"][k] @ wh[v, k] for v in nb])
                    e = np.where(e > 0, e, 0.2 * e)
                    w = np.exp(e - e.max())
                    w /= w.sum()
                    outs[u, k] = (w[:, None] * wh[nb, k]).sum(axis=0)
            z = (outs.mean(axis=1) if last else outs.reshape(n, -1)) + p[f"b{i}"]
        h = z if last else np.maximum(z, 0.0)
    return _softmax_rows(h)


def central_difference(f, arr, h=1e-5):
    """Gradient of scalar f() w.r.t. every entry of ``arr`` (mutated in place and restored)."""
    grad = np.zeros_like(arr)
    for idx in np.ndindex(arr.shape):
        old = arr[idx]
        arr[idx] = old + h
        up = f()
        arr[idx] = old - h
        down = f()
        arr[idx] = old
        grad[idx] = (up - down) / (2 * h)
    return grad


def smooth_mask(f, arr, h=1e-5, tol=1e-6):
    """Entries where forward and backward differences agree, i.e. no ReLU kink within +-h."""
    ok = np.ones(arr.shape, dtype=bool)
    base = f()
    for idx in np.ndindex(arr.shape):
        old = arr[idx]
        arr[idx] = old + h
        fwd = (f() - base) / h
        arr[idx] = old - h
        bwd = (base - f()) / h
        arr[idx] = old
        ok[idx] = abs(fwd - bwd) <= tol + 1e-3 * max(abs(fwd), abs(bwd))
    return ok


def max_relative_error(analytic, numeric, floor=1e-6):
    a, b = np.asarray(analytic), np.asarray(numeric)
    return float((np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)).max())


# --- distances: straight transcription of the formulas ---------------------

def distances_loop(u, v):
    u, v = list(map(float, u)), list(map(float, v))
    n = len(u)
    dot = sum(a * b for a, b in zip(u, v))
    nu = math.sqrt(sum(a * a for a in u))
    nv = math.sqrt(sum(b * b for b in v))
    cosine = 1.0 - dot / (nu * nv) if nu > 0 and nv > 0 else 1.0
    euclid = math.sqrt(sum((a - b) ** 2 for a, b in zip(u, v)))
    mu, mv = sum(u) / n, sum(v) / n
    cu = [a - mu for a in u]
    cv = [b - mv for b in v]
    ncu = math.sqrt(sum(a * a for a in cu))
    ncv = math.sqrt(sum(b * b for b in cv))
    corr = 1.0 - sum(a * b for a, b in zip(cu, cv)) / (ncu * ncv) if ncu > 0 and ncv > 0 else 1.0
    cheb = max(abs(a - b) for a, b in zip(u, v))
    den = sum(abs(a + b) for a, b in zip(u, v))
    bray = sum(abs(a - b) for a, b in zip(u, v)) / den if den > 0 else 0.0
    manh = sum(abs(a - b) for a, b in zip(u, v))
    canb = 0.0
    for a, b in zip(u, v):
        d = abs(a) + abs(b)
        if d > 0:
            canb += abs(a - b) / d
    sq = sum((a - b) ** 2 for a, b in zip(u, v))
    return [cosine, euclid, corr, cheb, bray, manh, canb, sq]


# --- ranking metrics --------------------------------------------------------

def auc_pairwise(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y]
    neg = [s for s, y in zip(scores, labels) if not y]
    total = 0.0
    for p, q in itertools.product(pos, neg):
        total += 1.0 if p > q else 0.5 if p == q else 0.0
    return total / (len(pos) * len(neg))


def ap_rank_by_rank(scores, labels):
    """Walk distinct thresholds from high to low, accumulating precision x recall gain."""
    n_pos = sum(1 for y in labels if y)
    ap, prev_recall = 0.0, 0.0
    for t in sorted(set(scores), reverse=True):
        tp = sum(1 for s, y in zip(scores, labels) if s >= t and y)
        fp = sum(1 for s, y in zip(scores, labels) if s >= t and not y)
        recall = tp / n_pos
        ap += (recall - prev_recall) * (tp / (tp + fp))
        prev_recall = recall
    return ap
