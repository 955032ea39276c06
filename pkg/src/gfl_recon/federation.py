"""Horizontal graph federated learning: local training, FedAvg and the query oracle."""

from __future__ import annotations

import threading
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .graph import DataSplit, Graph, Partition
from .metrics import DefenseSetting, accuracy, apply_defense


@dataclass(frozen=True)
class FederationConfig:
    rounds: int = 100
    local_epochs: int = 1
    server_arch: nn.ModelArch = field(default_factory=nn.ModelArch)
    lr: float = 0.01
    seed: int = 0

    def __post_init__(self):
        if self.rounds < 1 or self.local_epochs < 1:
            raise ValueError("rounds and local_epochs must be >= 1")


@dataclass
class FederationState:
    config: FederationConfig
    partition: Partition
    global_model: nn.ModelState
    client_models: list
    optimizers: list
    client_train_idx: list
    round_index: int = 0
    trace: list = field(default_factory=list)


def fedavg_aggregate(client_models, client_sizes) -> nn.ModelState:
    """Size-weighted parameter average, summed in client order."""
    if not client_models:
        raise ValueError("no client models to aggregate")
    sizes = np.asarray(client_sizes, dtype=np.float64)
    if len(sizes) != len(client_models) or (sizes <= 0).any():
        raise ValueError("need one positive size per client")
    ref = client_models[0]
    for m in client_models[1:]:
        if list(m.params) != list(ref.params) or any(m.params[k].shape != v.shape for k, v in ref.params.items()):
            raise ValueError("client models have mismatched parameter shapes")
    weights = sizes / sizes.sum()
    out = OrderedDict()
    for name in ref.params:
        acc = np.zeros_like(ref.params[name])
        for w, m in zip(weights, client_models):
            acc = acc + w * m.params[name]
        out[name] = acc
    return ref.with_params(out)


def init_federation(config: FederationConfig, graph: Graph, partition: Partition, split: DataSplit) -> FederationState:
    model = nn.init_model(config.server_arch, graph.feature_dim, graph.num_classes, config.seed)
    train = split.mask("train")
    train_idx = [np.flatnonzero(train[nodes]) for nodes in partition.client_nodes]
    return FederationState(
        config=config,
        partition=partition,
        global_model=model,
        client_models=[model.copy() for _ in partition.client_nodes],
        optimizers=[nn.AdamState(lr=config.lr) for _ in partition.client_nodes],
        client_train_idx=train_idx,
    )


def run_round(state: FederationState, manipulation_hook=None) -> float:
    """One FedAvg round, updating ``state`` in place.

    Every client starts from the global parameters and trains ``local_epochs``
    full-batch epochs; the malicious client first passes its data through
    ``manipulation_hook``.  Returns the malicious client's last local loss.
    """
    if state.round_index >= state.config.rounds:
        raise RuntimeError("all rounds have already been run")
    part = state.partition
    models, mal_loss = [], float("nan")
    for i, sub in enumerate(part.client_subgraphs):
        local = state.global_model.copy()
        x, targets = sub.features, nn.one_hot(sub.labels, sub.num_classes)
        if i == part.malicious_index and manipulation_hook is not None:
            x, targets = manipulation_hook(state.round_index, local, sub, sub.features, sub.labels)
        idx = state.client_train_idx[i]
        if len(idx):
            local, losses = nn.train_local(local, sub, x, targets, idx, state.config.local_epochs, state.optimizers[i])
            if i == part.malicious_index:
                mal_loss = losses[-1]
        models.append(local)
    state.client_models = models
    state.global_model = fedavg_aggregate(models, part.client_sizes)
    state.round_index += 1
    return mal_loss


def run_training(config: FederationConfig, graph: Graph, partition: Partition, split: DataSplit,
                 manipulation_hook=None, progress=None) -> FederationState:
    """Run all rounds; ``state.trace`` gets one row per round."""
    state = init_federation(config, graph, partition, split)
    while state.round_index < config.rounds:
        mal_loss = run_round(state, manipulation_hook)
        post = nn.predict(state.global_model, graph)
        state.trace.append({
            "round": state.round_index,
            "global_train_acc": accuracy(post, graph.labels, split.train),
            "global_val_acc": accuracy(post, graph.labels, split.val),
            "malicious_local_loss": mal_loss,
        })
        if progress is not None:
            progress(state)
    return state


def round_trace_csv(trace) -> str:
    lines = ["round,global_train_acc,global_val_acc,malicious_local_loss"]
    for r in trace:
        lines.append(f"{r['round']},{r['global_train_acc']!r},{r['global_val_acc']!r},{r['malicious_local_loss']!r}")
    return "\n".join(lines) + "\n"


class QueryBudgetExceeded(RuntimeError):
    pass


class PosteriorOracle:
    """Query-only access to the trained global model on the full inference graph.

    Responses are posterior vectors, optionally perturbed by the configured
    defense.  Noise for the j-th query of node u is drawn from a stream seeded
    by (seed, u, j), so it does not depend on query order.
    """

    def __init__(self, model: nn.ModelState, graph: Graph, defense: DefenseSetting | None = None,
                 budget: int | None = None, seed: int = 0):
        self._model = model
        self._graph = graph
        self._defense = defense or DefenseSetting()
        self._budget = budget
        self._seed = seed
        self._posteriors = None
        self._lock = threading.Lock()
        self._per_node = {}
        self.query_log = 0

    @property
    def num_nodes(self) -> int:
        return self._graph.num_nodes

    def query(self, node_ids) -> np.ndarray:
        ids = [int(n) for n in np.asarray(node_ids, dtype=np.int64).reshape(-1)]
        for n in ids:
            if not 0 <= n < self._graph.num_nodes:
                raise IndexError(f"invalid node id {n}")
        with self._lock:
            if self._budget is not None and self.query_log + len(ids) > self._budget:
                raise QueryBudgetExceeded(f"query budget of {self._budget} exhausted")
            self.query_log += len(ids)
            counts = []
            for n in ids:
                counts.append(self._per_node.get(n, 0))
                self._per_node[n] = counts[-1] + 1
            if self._posteriors is None:
                self._posteriors = nn.predict(self._model, self._graph)
        rows = self._posteriors[ids] if ids else np.zeros((0, self._graph.num_classes))
        if not self._defense.active:
            return rows.copy()
        return np.stack([
            apply_defense(row, self._defense, np.random.default_rng([self._seed, n, j]))
            for row, n, j in zip(rows, ids, counts)
        ])


def query_posteriors(oracle: PosteriorOracle, node_ids) -> np.ndarray:
    return oracle.query(node_ids)
