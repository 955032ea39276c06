"""GNN models (GCN, GraphSAGE, GAT), losses, gradients and Adam.

Parameters live in numpy float64 arrays.  Each forward pass wraps them in
torch leaves so that reverse-mode gradients with respect to both parameters
and node features come from one recorded graph (the tape).
"""

from __future__ import annotations

import json
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np
import torch

from .graph import Graph

ARCHS = ("GCN", "GraphSAGE", "GAT")
LOG_FLOOR = 1e-12
LEAKY_SLOPE = 0.2


def set_deterministic(enabled: bool = True) -> None:
    """Pin torch to a single thread and deterministic kernels."""
    if enabled:
        torch.set_num_threads(1)
    torch.use_deterministic_algorithms(enabled)


@dataclass(frozen=True)
class ModelArch:
    kind: str = "GCN"
    num_layers: int = 2
    hidden_dim: int = 16
    heads: int = 4

    def __post_init__(self):
        kind = canonical_arch(self.kind)
        object.__setattr__(self, "kind", kind)
        if self.num_layers < 1 or self.hidden_dim < 1 or self.heads < 1:
            raise ValueError("num_layers, hidden_dim and heads must be >= 1")

    def to_dict(self) -> dict:
        return {"kind": self.kind, "num_layers": self.num_layers, "hidden_dim": self.hidden_dim, "heads": self.heads}


def canonical_arch(name: str) -> str:
    for kind in ARCHS:
        if name.lower() == kind.lower() or (kind == "GraphSAGE" and name.lower() == "sage"):
            return kind
    raise ValueError(f"unknown architecture {name!r}; expected one of {ARCHS}")


@dataclass
class ModelState:
    arch: ModelArch
    params: "OrderedDict[str, np.ndarray]"
    in_dim: int
    num_classes: int

    @property
    def param_count(self) -> int:
        return sum(p.size for p in self.params.values())

    def copy(self) -> "ModelState":
        return ModelState(self.arch, OrderedDict((k, v.copy()) for k, v in self.params.items()), self.in_dim, self.num_classes)

    def with_params(self, params) -> "ModelState":
        return ModelState(self.arch, OrderedDict(params), self.in_dim, self.num_classes)


@dataclass
class ForwardTape:
    x: torch.Tensor
    params: dict
    posteriors: torch.Tensor
    activations: list
    consumed: bool = False


@dataclass
class Gradients:
    params: "OrderedDict[str, np.ndarray]"
    inputs: np.ndarray


class TapeConsumedError(RuntimeError):
    pass


# --- initialisation -------------------------------------------------------

def _glorot(rng, fan_in, fan_out, shape=None):
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape or (fan_in, fan_out))


def _layer_dims(arch: ModelArch, in_dim, num_classes):
    dims = [in_dim] + [arch.hidden_dim] * (arch.num_layers - 1) + [num_classes]
    return list(zip(dims[:-1], dims[1:]))


def init_model(arch: ModelArch, in_dim: int, num_classes: int, seed: int) -> ModelState:
    """Glorot-uniform weights and zero biases.

    GAT hidden layers produce ``heads * hidden_dim`` features (heads are
    concatenated); the output layer averages its heads.
    """
    rng = np.random.default_rng(seed)
    params = OrderedDict()
    width = in_dim
    for i, (_, d_out) in enumerate(_layer_dims(arch, in_dim, num_classes)):
        last = i == arch.num_layers - 1
        if arch.kind == "GCN":
            params[f"W{i}"] = _glorot(rng, width, d_out)
            params[f"b{i}"] = np.zeros(d_out)
            width = d_out
        elif arch.kind == "GraphSAGE":
            params[f"W{i}"] = _glorot(rng, 2 * width, d_out)
            params[f"b{i}"] = np.zeros(d_out)
            width = d_out
        else:
            h = arch.heads
            params[f"W{i}"] = _glorot(rng, width, h * d_out)
            params[f"att_src{i}"] = _glorot(rng, d_out, 1, shape=(h, d_out))
            params[f"att_dst{i}"] = _glorot(rng, d_out, 1, shape=(h, d_out))
            out_width = d_out if last else h * d_out
            params[f"b{i}"] = np.zeros(out_width)
            width = out_width
    return ModelState(arch, params, in_dim, num_classes)


# --- forward --------------------------------------------------------------

def _edge_tensors(g: Graph, self_loops: bool):
    src, dst = g.directed_edges
    if self_loops:
        loops = np.arange(g.num_nodes)
        src, dst = np.concatenate([src, loops]), np.concatenate([dst, loops])
    return torch.from_numpy(src), torch.from_numpy(dst)


def _propagate(values, src, dst, weight, n):
    """out[d] = sum over edges (s -> d) of weight * values[s]."""
    msg = values[src] if weight is None else values[src] * weight.unsqueeze(-1)
    out = torch.zeros((n,) + tuple(values.shape[1:]), dtype=values.dtype)
    return out.index_add(0, dst, msg)


def _gcn_layer(h, w, b, ops):
    src, dst, norm, n = ops
    return _propagate(h @ w, src, dst, norm, n) + b


def _sage_layer(h, w, b, ops):
    src, dst, inv_deg, n = ops
    agg = _propagate(h, src, dst, None, n) * inv_deg.unsqueeze(-1)
    return torch.cat([h, agg], dim=1) @ w + b


def _gat_layer(h, w, a_src, a_dst, b, heads, last, ops):
    src, dst, n = ops
    wh = (h @ w).view(n, heads, -1)
    s_src = (wh * a_src).sum(-1)
    s_dst = (wh * a_dst).sum(-1)
    # e_uv = a^T [W h_u || W h_v] with u the receiving node.
    e = torch.nn.functional.leaky_relu(s_dst[dst] + s_src[src], LEAKY_SLOPE)
    shift = torch.full((n, heads), -torch.inf, dtype=e.dtype)
    shift = shift.scatter_reduce(0, dst.unsqueeze(-1).expand_as(e), e.detach(), reduce="amax")
    ex = torch.exp(e - shift[dst])
    denom = torch.zeros((n, heads), dtype=e.dtype).index_add(0, dst, ex)
    alpha = ex / denom[dst]
    out = _propagate(wh, src, dst, alpha, n)
    out = out.mean(dim=1) if last else out.reshape(n, -1)
    return out + b


def _graph_ops(kind, g: Graph):
    n = g.num_nodes
    if kind == "GCN":
        src, dst = _edge_tensors(g, self_loops=True)
        deg = torch.from_numpy(g.degrees.astype(np.float64) + 1.0)
        norm = deg[src].rsqrt() * deg[dst].rsqrt()
        return src, dst, norm, n
    if kind == "GraphSAGE":
        src, dst = _edge_tensors(g, self_loops=False)
        deg = g.degrees.astype(np.float64)
        inv = np.divide(1.0, deg, out=np.zeros_like(deg), where=deg > 0)
        return src, dst, torch.from_numpy(inv), n
    src, dst = _edge_tensors(g, self_loops=True)
    return src, dst, n


def _logits(model: ModelState, g: Graph, x: torch.Tensor, p: dict, activations=None):
    arch = model.arch
    ops = _graph_ops(arch.kind, g)
    h = x
    for i in range(arch.num_layers):
        last = i == arch.num_layers - 1
        if arch.kind == "GCN":
            z = _gcn_layer(h, p[f"W{i}"], p[f"b{i}"], ops)
        elif arch.kind == "GraphSAGE":
            z = _sage_layer(h, p[f"W{i}"], p[f"b{i}"], ops)
        else:
            z = _gat_layer(h, p[f"W{i}"], p[f"att_src{i}"], p[f"att_dst{i}"], p[f"b{i}"], arch.heads, last, ops)
        if activations is not None:
            activations.append(z)
        h = z if last else torch.relu(z)
    return h


def _check_inputs(model: ModelState, g: Graph, x):
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (g.num_nodes, model.in_dim):
        raise ValueError(f"expected features of shape {(g.num_nodes, model.in_dim)}, got {x.shape}")
    return x


def forward(model: ModelState, g: Graph, x) -> tuple[np.ndarray, ForwardTape]:
    """Posterior matrix (N x C) and the tape needed for one backward call."""
    x = _check_inputs(model, g, x)
    xt = torch.tensor(x, requires_grad=True)
    pt = {k: torch.tensor(v, requires_grad=True) for k, v in model.params.items()}
    acts = []
    post = torch.softmax(_logits(model, g, xt, pt, acts), dim=1)
    return post.detach().numpy().copy(), ForwardTape(xt, pt, post, acts)


def predict(model: ModelState, g: Graph, x=None) -> np.ndarray:
    """Posteriors without recording a tape."""
    x = _check_inputs(model, g, g.features if x is None else x)
    with torch.no_grad():
        p = {k: torch.from_numpy(v) for k, v in model.params.items()}
        return torch.softmax(_logits(model, g, torch.from_numpy(np.array(x)), p), dim=1).numpy()


def _pull_back(model: ModelState, tape: ForwardTape, scalar=None, upstream=None) -> Gradients:
    if tape.consumed:
        raise TapeConsumedError("this tape was already used for a backward pass")
    tape.consumed = True
    names = list(model.params)
    leaves = [tape.params[k] for k in names] + [tape.x]
    if scalar is not None:
        grads = torch.autograd.grad(scalar, leaves, allow_unused=True)
    else:
        grads = torch.autograd.grad(tape.posteriors, leaves, grad_outputs=upstream, allow_unused=True)
    grads = [torch.zeros_like(l) if gr is None else gr for l, gr in zip(leaves, grads)]
    out = OrderedDict((k, gr.numpy().copy()) for k, gr in zip(names, grads[:-1]))
    return Gradients(out, grads[-1].numpy().copy())


def cross_entropy(posteriors, targets, mask) -> float:
    p = np.asarray(posteriors)[mask]
    t = np.asarray(targets)[mask]
    return float(-(t * np.log(p + LOG_FLOOR)).sum() / len(p))


def loss_and_backward(model, g, x, tape: ForwardTape, targets, mask) -> tuple[float, Gradients]:
    """Soft-target cross-entropy over ``mask`` and its exact gradients."""
    idx = np.flatnonzero(mask) if np.asarray(mask).dtype == bool else np.asarray(mask, dtype=np.int64)
    if len(idx) == 0:
        raise ValueError("mask is empty")
    if tape.consumed:
        raise TapeConsumedError("this tape was already used for a backward pass")
    t = torch.from_numpy(np.asarray(targets, dtype=np.float64)[idx])
    sel = torch.from_numpy(idx)
    loss = -(t * torch.log(tape.posteriors[sel] + LOG_FLOOR)).sum() / len(idx)
    return float(loss.detach()), _pull_back(model, tape, scalar=loss)


def backward_external(model, g, x, tape: ForwardTape, d_posteriors) -> Gradients:
    """Vector-Jacobian product of an arbitrary upstream gradient at the posteriors."""
    d = np.asarray(d_posteriors, dtype=np.float64)
    if d.shape != tuple(tape.posteriors.shape):
        raise ValueError(f"upstream gradient shape {d.shape} != posteriors {tuple(tape.posteriors.shape)}")
    return _pull_back(model, tape, upstream=torch.from_numpy(d))


# --- optimisation ---------------------------------------------------------

@dataclass
class AdamState:
    lr: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_update(state: AdamState, params: dict, grads: dict) -> OrderedDict:
    """Bias-corrected Adam on a dict of arrays; returns new arrays, updates ``state``."""
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise FloatingPointError(f"non-finite gradient for {name!r} at Adam step {state.step + 1}")
    state.step += 1
    c1 = 1.0 - state.beta1 ** state.step
    c2 = 1.0 - state.beta2 ** state.step
    out = OrderedDict()
    for name, p in params.items():
        g = grads[name]
        m = state.m.get(name, np.zeros_like(p))
        v = state.v.get(name, np.zeros_like(p))
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * g * g
        state.m[name], state.v[name] = m, v
        out[name] = p - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return out


def adam_step(state: AdamState, model: ModelState, param_grads) -> ModelState:
    return model.with_params(adam_update(state, model.params, param_grads))


def one_hot(labels, num_classes) -> np.ndarray:
    return np.eye(num_classes)[np.asarray(labels, dtype=np.int64)]


def train_local(model, g, x, targets, train_idx, epochs, optimizer: AdamState) -> tuple[ModelState, list]:
    """Full-batch training; returns the final model and the per-epoch loss trace."""
    losses = []
    for _ in range(epochs):
        _, tape = forward(model, g, x)
        loss, grads = loss_and_backward(model, g, x, tape, targets, train_idx)
        model = adam_step(optimizer, model, grads.params)
        losses.append(loss)
    return model, losses


# --- serialisation --------------------------------------------------------

_MAGIC = b"GFLMODEL1\n"


def save_model(model: ModelState, path) -> None:
    """Write a header line of JSON followed by raw little-endian float64 arrays."""
    header = {
        "arch": model.arch.to_dict(),
        "in_dim": model.in_dim,
        "num_classes": model.num_classes,
        "params": [[k, list(v.shape)] for k, v in model.params.items()],
    }
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        for v in model.params.values():
            fh.write(np.ascontiguousarray(v, dtype="<f8").tobytes())


def load_model(path) -> ModelState:
    with open(path, "rb") as fh:
        if fh.readline() != _MAGIC:
            raise ValueError(f"{path}: not a model file")
        header = json.loads(fh.readline())
        params = OrderedDict()
        for name, shape in header["params"]:
            count = int(np.prod(shape, dtype=np.int64))
            buf = fh.read(8 * count)
            if len(buf) != 8 * count:
                raise ValueError(f"{path}: truncated parameter {name!r}")
            params[name] = np.frombuffer(buf, dtype="<f8").astype(np.float64).reshape(shape)
    return ModelState(ModelArch(**header["arch"]), params, header["in_dim"], header["num_classes"])
