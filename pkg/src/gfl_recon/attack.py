"""Graph reconstruction from queried posteriors.

The attacker only ever sees its own subgraph and an object exposing
``query(node_ids) -> posteriors``.  Nothing here imports the federation
module or touches model parameters.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass

import numpy as np
import torch
from scipy.special import expit

from .graph import Graph, sample_non_edges
from .nn import AdamState, adam_update

DISTANCE_NAMES = (
    "cosine",
    "euclidean",
    "correlation",
    "chebyshev",
    "braycurtis",
    "manhattan",
    "canberra",
    "sqeuclidean",
)
ELEMENTWISE_NAMES = ("average", "weighted_l1", "hadamard", "weighted_l2")
VARIANTS = ("mlp", "attention")


# --- pair features --------------------------------------------------------

def _angular_distance(a, b):
    dot = (a * b).sum(axis=1)
    # sqrt(|a|^2 |b|^2) instead of |a||b|: exact 1.0 for a == b.
    denom = np.sqrt((a * a).sum(axis=1) * (b * b).sum(axis=1))
    out = np.ones(len(a))
    ok = denom > 0
    out[ok] = 1.0 - dot[ok] / denom[ok]
    return np.clip(out, 0.0, 2.0)


def distance_features(a, b) -> np.ndarray:
    """The eight distances between matching rows of ``a`` and ``b`` (n x 8)."""
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    diff = a - b
    absdiff = np.abs(diff)
    sq = (diff * diff).sum(axis=1)
    abs_sum = np.abs(a + b).sum(axis=1)
    manhattan = absdiff.sum(axis=1)
    bray = np.divide(manhattan, abs_sum, out=np.zeros(len(a)), where=abs_sum > 0)
    canb_den = np.abs(a) + np.abs(b)
    canberra = np.divide(absdiff, canb_den, out=np.zeros_like(absdiff), where=canb_den > 0).sum(axis=1)
    return np.stack(
        [
            _angular_distance(a, b),
            np.sqrt(sq),
            _angular_distance(a - a.mean(axis=1, keepdims=True), b - b.mean(axis=1, keepdims=True)),
            absdiff.max(axis=1),
            bray,
            manhattan,
            canberra,
            sq,
        ],
        axis=1,
    )


def elementwise_features(a, b) -> np.ndarray:
    """Average, weighted-L1, Hadamard and weighted-L2 blocks (n x 4C)."""
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    diff = a - b
    return np.concatenate([(a + b) / 2.0, np.abs(diff), a * b, diff * diff], axis=1)


@dataclass(frozen=True)
class PairFeatureVector:
    distances: np.ndarray
    elementwise: np.ndarray

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.distances, self.elementwise.ravel()])

    def __getitem__(self, name):
        if name in DISTANCE_NAMES:
            return float(self.distances[DISTANCE_NAMES.index(name)])
        return self.elementwise[ELEMENTWISE_NAMES.index(name)]


def pair_features(f_u, f_v) -> PairFeatureVector:
    f_u = np.asarray(f_u, dtype=np.float64)
    f_v = np.asarray(f_v, dtype=np.float64)
    c = f_u.shape[0]
    return PairFeatureVector(distance_features(f_u, f_v)[0], elementwise_features(f_u, f_v)[0].reshape(4, c))


def block_entropies(features, num_classes: int) -> np.ndarray:
    """Shannon entropy of each |element-wise block|, normalized to sum 1 (n x 4)."""
    f = np.atleast_2d(np.asarray(features, dtype=np.float64))
    blocks = np.abs(f[:, 8 : 8 + 4 * num_classes]).reshape(len(f), 4, num_classes)
    total = blocks.sum(axis=2, keepdims=True)
    p = np.divide(blocks, total, out=np.zeros_like(blocks), where=total > 0)
    logp = np.log(p, out=np.zeros_like(p), where=p > 0)
    return -(p * logp).sum(axis=2)


def pair_feature_matrix(posteriors, pairs) -> np.ndarray:
    """Feature rows (8 + 4C each) for index pairs into ``posteriors``."""
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    a, b = posteriors[pairs[:, 0]], posteriors[pairs[:, 1]]
    return np.concatenate([distance_features(a, b), elementwise_features(a, b)], axis=1)


# --- posterior access -----------------------------------------------------

class PosteriorCache:
    """Queries each node at most once and remembers the answer."""

    def __init__(self, oracle):
        self._oracle = oracle
        self._rows = {}

    def get(self, node_ids) -> np.ndarray:
        node_ids = np.asarray(node_ids, dtype=np.int64)
        missing = sorted(set(node_ids.tolist()) - self._rows.keys())
        if missing:
            for nid, row in zip(missing, self._oracle.query(missing)):
                self._rows[nid] = np.asarray(row, dtype=np.float64)
        if len(node_ids) == 0:
            return np.zeros((0, 0))
        return np.stack([self._rows[n] for n in node_ids.tolist()])

    def features(self, pairs) -> np.ndarray:
        pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
        nodes = np.unique(pairs)
        post = self.get(nodes)
        local = {n: i for i, n in enumerate(nodes.tolist())}
        idx = np.vectorize(local.__getitem__, otypes=[np.int64])(pairs) if len(pairs) else pairs
        return pair_feature_matrix(post, idx)


# --- shadow data ----------------------------------------------------------

@dataclass
class ShadowPairSet:
    pairs: np.ndarray
    labels: np.ndarray
    features: np.ndarray

    @property
    def balance(self) -> float:
        return float(self.labels.mean()) if len(self.labels) else 0.0


def build_shadow_set(subgraph: Graph, global_ids, oracle, negative_ratio: float = 1.0, seed: int = 0) -> ShadowPairSet:
    """Labelled edge / non-edge pairs from the attacker's own subgraph.

    ``global_ids[i]`` is the global node id of local node i.  Posteriors come
    from ``oracle.query`` only.
    """
    if subgraph.num_edges == 0:
        raise ValueError("the attacker's subgraph has no edges")
    global_ids = np.asarray(global_ids, dtype=np.int64)
    rng = np.random.default_rng(seed)
    neg = sample_non_edges(subgraph, int(round(negative_ratio * subgraph.num_edges)), rng)
    local_pairs = np.concatenate([subgraph.edges, neg])
    labels = np.concatenate([np.ones(subgraph.num_edges), np.zeros(len(neg))])
    pairs = global_ids[local_pairs]
    features = PosteriorCache(oracle).features(pairs)
    return ShadowPairSet(pairs, labels, features)


# --- attack models --------------------------------------------------------

def _glorot(rng, fan_in, fan_out, shape):
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


def init_attack_params(variant: str, num_classes: int, seed: int, emb_dim: int = 32, heads: int = 4,
                       extra_scalars: int = 0):
    rng = np.random.default_rng(seed)
    p = OrderedDict()
    scalars = 8 + extra_scalars
    if variant == "mlp":
        dims = [scalars + 4 * num_classes, 64, 32, 1]
        for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
            p[f"W{i}"] = _glorot(rng, a, b, (a, b))
            p[f"b{i}"] = np.zeros(b)
    elif variant == "attention":
        if emb_dim % heads:
            raise ValueError("emb_dim must be divisible by heads")
        c, d = num_classes, emb_dim
        p["dist_w"] = _glorot(rng, 1, d, (scalars, d))
        p["dist_b"] = np.zeros((scalars, d))
        p["block_w"] = _glorot(rng, c, d, (4, c, d))
        p["block_b"] = np.zeros((4, d))
        for name in ("Wq", "Wk", "Wv", "Wo"):
            p[name] = _glorot(rng, d, d, (d, d))
        p["bo"] = np.zeros(d)
        p["Wf"] = _glorot(rng, d, 1, (d, 1))
        p["bf"] = np.zeros(1)
    else:
        raise ValueError(f"unknown attack variant {variant!r}; expected one of {VARIANTS}")
    return p


def attack_logits(variant: str, params: dict, x: torch.Tensor, num_classes: int, heads: int = 4) -> torch.Tensor:
    """Pre-sigmoid edge scores for standardized feature rows ``x``.

    Row layout: 8 distances, the 4 element-wise C-blocks, then any extra
    scalar columns (the optional block entropies).
    """
    if variant == "mlp":
        h = torch.relu(x @ params["W0"] + params["b0"])
        h = torch.relu(h @ params["W1"] + params["b1"])
        return (h @ params["W2"] + params["b2"]).squeeze(-1)
    n, c = x.shape[0], num_classes
    # one token per scalar column, then one per element-wise block
    scalars = torch.cat([x[:, :8], x[:, 8 + 4 * c :]], dim=1)
    dist_tok = scalars[:, :, None] * params["dist_w"] + params["dist_b"]
    blocks = x[:, 8 : 8 + 4 * c].reshape(n, 4, c)
    block_tok = torch.einsum("nkc,kcd->nkd", blocks, params["block_w"]) + params["block_b"]
    tok = torch.cat([dist_tok, block_tok], dim=1)
    t, d = tok.shape[1], tok.shape[-1]
    dh = d // heads

    def split(a):
        return a.reshape(n, t, heads, dh).transpose(1, 2)

    q, k, v = split(tok @ params["Wq"]), split(tok @ params["Wk"]), split(tok @ params["Wv"])
    att = torch.softmax(q @ k.transpose(-1, -2) / np.sqrt(dh), dim=-1)
    mixed = (att @ v).transpose(1, 2).reshape(n, t, d) @ params["Wo"] + params["bo"]
    pooled = torch.relu(tok + mixed).mean(dim=1)
    return (pooled @ params["Wf"] + params["bf"]).squeeze(-1)


def _model_inputs(features, num_classes: int, entropy_summary: bool) -> np.ndarray:
    f = np.asarray(features, dtype=np.float64)
    if entropy_summary:
        f = np.concatenate([f, block_entropies(f, num_classes)], axis=1)
    return f


@dataclass
class AttackModel:
    variant: str
    params: "OrderedDict[str, np.ndarray]"
    num_classes: int
    mean: np.ndarray
    scale: np.ndarray
    train_auc: float = float("nan")
    losses: tuple = ()
    entropy_summary: bool = False

    def logits(self, features) -> np.ndarray:
        x = (_model_inputs(features, self.num_classes, self.entropy_summary) - self.mean) / self.scale
        with torch.no_grad():
            p = {k: torch.from_numpy(v) for k, v in self.params.items()}
            return attack_logits(self.variant, p, torch.from_numpy(x), self.num_classes).numpy()

    def score(self, features) -> np.ndarray:
        """Edge probabilities, kept strictly inside (0, 1)."""
        z = self.logits(features)
        return np.clip(expit(z), 1e-12, 1.0 - 1e-12)


def train_attack_model(
    shadow: ShadowPairSet,
    variant: str = "mlp",
    epochs: int = 100,
    seed: int = 0,
    lr: float = 0.001,
    batch_size: int = 128,
    entropy_summary: bool = False,
) -> AttackModel:
    """Fit the edge classifier with binary cross-entropy and Adam.

    With ``entropy_summary`` the entropy of each element-wise block is
    appended as four extra scalar inputs.
    """
    from .metrics import auc

    labels = np.asarray(shadow.labels, dtype=np.float64)
    if len(np.unique(labels)) < 2:
        raise ValueError("shadow set must contain both edges and non-edges")
    raw = np.asarray(shadow.features, dtype=np.float64)
    num_classes = (raw.shape[1] - 8) // 4
    feats = _model_inputs(raw, num_classes, entropy_summary)
    mean = feats.mean(axis=0)
    scale = feats.std(axis=0)
    scale[scale < 1e-12] = 1.0
    x = torch.from_numpy((feats - mean) / scale)
    y = torch.from_numpy(labels)

    rng = np.random.default_rng(seed)
    params = init_attack_params(variant, num_classes, int(rng.integers(2**31)), extra_scalars=4 if entropy_summary else 0)
    opt = AdamState(lr=lr)
    losses = []
    for _ in range(epochs):
        order = rng.permutation(len(y))
        total = 0.0
        for start in range(0, len(order), batch_size):
            idx = torch.from_numpy(order[start : start + batch_size])
            leaves = {k: torch.tensor(v, requires_grad=True) for k, v in params.items()}
            z = attack_logits(variant, leaves, x[idx], num_classes)
            loss = torch.nn.functional.binary_cross_entropy_with_logits(z, y[idx])
            grads = torch.autograd.grad(loss, list(leaves.values()))
            params = adam_update(opt, params, {k: gr.numpy() for k, gr in zip(leaves, grads)})
            total += float(loss.detach()) * len(idx)
        losses.append(total / len(y))
    model = AttackModel(variant, params, num_classes, mean, scale, losses=tuple(losses), entropy_summary=entropy_summary)
    model.train_auc = auc(model.logits(raw), labels)
    return model


# --- reconstruction -------------------------------------------------------

@dataclass
class ReconstructionResult:
    pairs: np.ndarray
    scores: np.ndarray
    threshold: float = 0.5

    @property
    def predicted(self) -> np.ndarray:
        return self.pairs[self.scores >= self.threshold]


def canonical_pairs(pairs) -> np.ndarray:
    """Sorted unique (u < v) pairs; self-pairs are dropped."""
    p = np.sort(np.asarray(pairs, dtype=np.int64).reshape(-1, 2), axis=1)
    p = p[p[:, 0] != p[:, 1]]
    return np.unique(p, axis=0) if len(p) else p


def reconstruct(model: AttackModel, oracle, candidate_pairs, threshold: float = 0.5) -> ReconstructionResult:
    pairs = canonical_pairs(candidate_pairs)
    if len(pairs) == 0:
        return ReconstructionResult(pairs, np.zeros(0), threshold)
    feats = PosteriorCache(oracle).features(pairs)
    return ReconstructionResult(pairs, model.score(feats), threshold)


class SealedPairs:
    """Evaluation pairs whose labels are only released to the evaluator."""

    def __init__(self, pairs, labels):
        self.pairs = pairs
        self._labels = labels

    def __len__(self):
        return len(self.pairs)

    def unseal(self) -> np.ndarray:
        return self._labels


def default_evaluation_pairs(ground_truth: Graph, target_nodes=None, seed: int = 0) -> SealedPairs:
    """All edges inside ``target_nodes`` plus as many uniform non-edges, in sorted order."""
    nodes = np.arange(ground_truth.num_nodes) if target_nodes is None else np.unique(np.asarray(target_nodes, dtype=np.int64))
    inside = np.zeros(ground_truth.num_nodes, dtype=bool)
    inside[nodes] = True
    pos = ground_truth.edges[inside[ground_truth.edges[:, 0]] & inside[ground_truth.edges[:, 1]]]
    if len(pos) == 0:
        raise ValueError("target node set has no internal edges")
    neg = sample_non_edges(ground_truth, len(pos), np.random.default_rng(seed), nodes=nodes)
    pairs = np.concatenate([pos, neg])
    labels = np.concatenate([np.ones(len(pos), dtype=np.int64), np.zeros(len(neg), dtype=np.int64)])
    order = np.lexsort((pairs[:, 1], pairs[:, 0]))
    return SealedPairs(pairs[order], labels[order])


def all_evaluation_pairs(ground_truth: Graph, target_nodes=None, max_pairs: int = 5_000_000) -> SealedPairs:
    """Every unordered pair inside ``target_nodes``, labelled; for small graphs only."""
    nodes = np.arange(ground_truth.num_nodes) if target_nodes is None else np.unique(np.asarray(target_nodes, dtype=np.int64))
    count = len(nodes) * (len(nodes) - 1) // 2
    if count > max_pairs:
        raise ValueError(f"{count} candidate pairs exceeds the limit of {max_pairs}")
    iu, ju = np.triu_indices(len(nodes), k=1)
    pairs = np.stack([nodes[iu], nodes[ju]], axis=1)
    adj = ground_truth.adjacency()
    labels = (adj[pairs[:, 0], pairs[:, 1]] > 0).astype(np.int64)
    if labels.min() == labels.max():
        raise ValueError("target node set needs both edges and non-edges")
    return SealedPairs(pairs, labels)
