"""Malicious-client feature manipulation.

The objective minimised over the local node features is

    J = lam * CE(P, smoothed targets)
        + alpha * sum_{(u,v) in E}  ||P_u - P_v||^2
        - beta  * sum_{(u,v) in S}  (1 - cos(P_u, P_v))^2

where P are the local model's posteriors and S is a fresh uniform sample of
unconnected pairs.  Minimising J pulls connected posteriors together and
pushes unconnected ones apart while keeping the labels predictable.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import nn
from .graph import Graph, sample_non_edges

LOG_FLOOR = nn.LOG_FLOOR


@dataclass(frozen=True)
class ManipulationConfig:
    alpha: float = 1.0
    beta: float = 0.01
    lam: float = 1.0
    epsilon: float = 0.1
    eta: float = 0.01
    steps: int = 100
    negative_sample_ratio: float = 1.0
    smoothing: str = "uniform"
    seed: int = 0

    def __post_init__(self):
        if min(self.alpha, self.beta, self.lam) < 0:
            raise ValueError("alpha, beta and lam must be >= 0")
        if not 0.0 <= self.epsilon < 1.0:
            raise ValueError("epsilon must lie in [0, 1)")
        if self.eta < 0 or self.steps < 0:
            raise ValueError("eta and steps must be >= 0")
        if self.smoothing not in ("uniform", "loss"):
            raise ValueError("smoothing must be 'uniform' or 'loss'")


@dataclass
class ManipulatedDataset:
    original: np.ndarray
    features: np.ndarray
    targets: np.ndarray
    trace: list = field(default_factory=list)

    @property
    def objective(self) -> np.ndarray:
        return np.array([row["J"] for row in self.trace])


def smooth_labels(labels, epsilon: float, num_classes: int, mode: str = "uniform", ce: float | None = None) -> np.ndarray:
    """Label smoothing: ``onehot * (1 - eps) + eps / C``.

    ``mode="loss"`` instead adds ``eps / ce`` (the additive term divided by a
    cross-entropy value) and renormalises rows.
    """
    if not 0.0 <= epsilon < 1.0:
        raise ValueError("epsilon must lie in [0, 1)")
    hot = nn.one_hot(labels, num_classes)
    if mode == "uniform":
        return hot * (1.0 - epsilon) + epsilon / num_classes
    if ce is None or ce <= 0:
        raise ValueError("loss-normalised smoothing needs a positive cross-entropy value")
    out = hot * (1.0 - epsilon) + epsilon / ce
    return out / out.sum(axis=1, keepdims=True)


def attraction_term(posteriors, edges) -> float:
    p = np.asarray(posteriors, dtype=np.float64)
    e = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    d = p[e[:, 0]] - p[e[:, 1]]
    return float((d * d).sum())


def _cosine_parts(a, b):
    sa = (a * a).sum(axis=1)
    sb = (b * b).sum(axis=1)
    denom = np.sqrt(sa * sb)
    ok = denom > 0
    cos = np.zeros(len(a))
    cos[ok] = (a * b).sum(axis=1)[ok] / denom[ok]
    return cos, sa, sb, denom, ok


def repulsion_term(posteriors, non_edges) -> float:
    p = np.asarray(posteriors, dtype=np.float64)
    s = np.asarray(non_edges, dtype=np.int64).reshape(-1, 2)
    cos = _cosine_parts(p[s[:, 0]], p[s[:, 1]])[0]
    return float(((1.0 - cos) ** 2).sum())


def combined_objective(posteriors, edges, non_edges, targets, mask, config: ManipulationConfig):
    """Value of J, its parts, and dJ/dP.

    Returns ``(J, parts, grad)`` with ``parts`` holding ce/attraction/repulsion.
    """
    p = np.asarray(posteriors, dtype=np.float64)
    idx = np.flatnonzero(mask) if np.asarray(mask).dtype == bool else np.asarray(mask, dtype=np.int64)
    grad = np.zeros_like(p)

    t = np.asarray(targets, dtype=np.float64)[idx]
    ce = float(-(t * np.log(p[idx] + LOG_FLOOR)).sum() / len(idx))
    np.add.at(grad, idx, -config.lam * t / (p[idx] + LOG_FLOOR) / len(idx))

    e = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    d = p[e[:, 0]] - p[e[:, 1]]
    attraction = float((d * d).sum())
    np.add.at(grad, e[:, 0], 2.0 * config.alpha * d)
    np.add.at(grad, e[:, 1], -2.0 * config.alpha * d)

    s = np.asarray(non_edges, dtype=np.int64).reshape(-1, 2)
    a, b = p[s[:, 0]], p[s[:, 1]]
    cos, sa, sb, denom, ok = _cosine_parts(a, b)
    repulsion = float(((1.0 - cos) ** 2).sum())
    # d/dc of -beta * (1 - c)^2 is 2 * beta * (1 - c); cos of a zero vector is constant 0.
    w = np.where(ok, 2.0 * config.beta * (1.0 - cos), 0.0)[:, None]
    safe = np.where(ok, denom, 1.0)[:, None]
    dcos_da = b / safe - cos[:, None] * a / np.where(ok, sa, 1.0)[:, None]
    dcos_db = a / safe - cos[:, None] * b / np.where(ok, sb, 1.0)[:, None]
    np.add.at(grad, s[:, 0], w * dcos_da)
    np.add.at(grad, s[:, 1], w * dcos_db)

    value = config.lam * ce + config.alpha * attraction - config.beta * repulsion
    return value, {"ce": ce, "attraction": attraction, "repulsion": repulsion}, grad


def _targets_for(model, g, x, labels, config):
    if config.smoothing == "uniform":
        return smooth_labels(labels, config.epsilon, g.num_classes)
    ce = nn.cross_entropy(nn.predict(model, g, x), nn.one_hot(labels, g.num_classes), np.arange(g.num_nodes))
    return smooth_labels(labels, config.epsilon, g.num_classes, mode="loss", ce=ce)


def pgd_manipulate(model: nn.ModelState, g: Graph, x, labels, config: ManipulationConfig, mask=None) -> ManipulatedDataset:
    """Projected gradient descent on node features; the edge set is never touched.

    After each step every feature column is clipped back to its original
    [min, max].  ``trace`` has ``steps + 1`` rows: the objective before each
    update and once more after the last one.
    """
    x0 = np.asarray(x, dtype=np.float64)
    mask = np.arange(g.num_nodes) if mask is None else mask
    targets = _targets_for(model, g, x0, labels, config)
    lo, hi = x0.min(axis=0), x0.max(axis=0)
    n_neg = int(round(config.negative_sample_ratio * g.num_edges))
    cur = x0.copy()
    trace = []
    for step in range(config.steps + 1):
        rng = np.random.default_rng([config.seed, step])
        non_edges = sample_non_edges(g, n_neg, rng, distinct=False)
        post, tape = nn.forward(model, g, cur)
        value, parts, d_post = combined_objective(post, g.edges, non_edges, targets, mask, config)
        if not np.isfinite(value):
            raise FloatingPointError(f"objective became non-finite at PGD step {step}")
        trace.append({"step": step, "J": value, **parts})
        if step == config.steps:
            break
        grads = nn.backward_external(model, g, cur, tape, d_post)
        cur = np.clip(cur - config.eta * grads.inputs, lo, hi)
    return ManipulatedDataset(x0, cur, targets, trace)


def objective_trace_csv(dataset: ManipulatedDataset) -> str:
    lines = ["step,J,CE,attraction,repulsion"]
    for row in dataset.trace:
        lines.append(f"{row['step']},{row['J']!r},{row['ce']!r},{row['attraction']!r},{row['repulsion']!r}")
    return "\n".join(lines) + "\n"


class FeatureManipulator:
    """Hook run by the malicious client before its local training.

    From round ``start_round`` on, features are re-derived from the clean data
    every ``refresh_every`` rounds.  In the white-box case (no
    ``surrogate_arch``) the gradients flow through the model the client is
    about to train; otherwise through a separately trained local surrogate.
    """

    def __init__(self, config: ManipulationConfig, train_idx, surrogate_arch: nn.ModelArch | None = None,
                 start_round: int = 1, refresh_every: int = 1, surrogate_epochs: int = 100, lr: float = 0.01):
        self.config = config
        self.train_idx = np.asarray(train_idx, dtype=np.int64)
        self.surrogate_arch = surrogate_arch
        self.start_round = start_round
        self.refresh_every = max(1, refresh_every)
        self.surrogate_epochs = surrogate_epochs
        self.lr = lr
        self.latest: ManipulatedDataset | None = None
        self._surrogate = None

    def surrogate(self, g, x, labels):
        if self._surrogate is None:
            model = nn.init_model(self.surrogate_arch, g.feature_dim, g.num_classes, self.config.seed)
            targets = nn.one_hot(labels, g.num_classes)
            self._surrogate, _ = nn.train_local(model, g, x, targets, self.train_idx, self.surrogate_epochs,
                                                nn.AdamState(lr=self.lr))
        return self._surrogate

    def __call__(self, round_index: int, model: nn.ModelState, g: Graph, x, labels):
        if round_index < self.start_round:
            return x, nn.one_hot(labels, g.num_classes)
        due = self.latest is None or (round_index - self.start_round) % self.refresh_every == 0
        if due:
            local = model if self.surrogate_arch is None else self.surrogate(g, x, labels)
            cfg = replace(self.config, seed=self.config.seed + round_index)
            self.latest = pgd_manipulate(local, g, x, labels, cfg, mask=self.train_idx)
        return self.latest.features, self.latest.targets


def identity_hook(round_index, model, g, x, labels):
    return x, nn.one_hot(labels, g.num_classes)
