"""Kernel-aware hierarchical graph over per-layer patch features.

Nodes are the L layer feature maps after a per-layer linear projection and a
bank of depthwise multi-shape kernels. Edges are intra-layer self-attention
(loop edges) and bilinear cross-layer affinities (line edges). Messages are
gated per channel, summed, and folded into the node state with a ConvGRU.

All maps are ``[C, H, W]`` or batched ``[B, C, H, W]``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from itertools import combinations
from typing import Mapping

import numpy as np

from . import tensor as tt
from .tensor import Tensor

__all__ = [
    "KERNEL_SHAPES",
    "KahgParams",
    "GraphState",
    "init_params",
    "embed_nodes",
    "loop_edge",
    "line_edges",
    "gated_messages",
    "aggregate",
    "convgru_step",
    "run_kahg",
    "flatten_patches",
]

KERNEL_SHAPES: dict[str, tuple[int, int]] = {
    "1x1": (1, 1),
    "3x3": (3, 3),
    "5x5": (5, 5),
    "1x5": (1, 5),
    "5x1": (5, 1),
}

NORM_EPS = 1e-12


@dataclass(frozen=True)
class KahgParams:
    """Named parameter tensors of the graph head and the cls adapter.

    Naming scheme::

        linear.{i}.weight [C',C_enc,1,1]   linear.{i}.bias [C']
        kernel.{shape}    [C',1,kh,kw]
        intra.{i}.{q,k,v}.weight / .bias  intra.{i}.alpha []
        inter.{i}.{j}     [C',C']  (i < j, one per unordered pair)
        gate.weight [C',C',1,1]  gate.bias [C']
        gru.{update,reset,candidate}.weight [C',2C',3,3] / .bias
        adapter.weight [C',C_cls]  adapter.bias [C']
    """

    tensors: Mapping[str, Tensor]
    n_layers: int

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def names(self) -> list[str]:
        return sorted(self.tensors)

    @property
    def c_prime(self) -> int:
        return self.tensors["gate.bias"].shape[0]

    @property
    def kernel_names(self) -> list[str]:
        return [k for k in KERNEL_SHAPES if f"kernel.{k}" in self.tensors]

    def inter(self, i: int, j: int) -> Tensor:
        return self.tensors[f"inter.{i}.{j}"]

    def as_arrays(self) -> dict[str, np.ndarray]:
        return {k: self.tensors[k].data for k in self.names()}

    def with_arrays(self, arrays: Mapping[str, np.ndarray], requires_grad: bool = False) -> "KahgParams":
        missing = set(self.tensors) - set(arrays)
        if missing:
            raise KeyError(f"missing parameters: {sorted(missing)}")
        return KahgParams({k: Tensor(arrays[k], requires_grad) for k in self.tensors}, self.n_layers)

    def trainable(self) -> "KahgParams":
        """Fresh leaf copies with ``requires_grad`` for one training step."""
        return self.with_arrays(self.as_arrays(), requires_grad=True)

    @classmethod
    def from_arrays(cls, arrays: Mapping[str, np.ndarray]) -> "KahgParams":
        n_layers = sum(1 for k in arrays if k.startswith("linear.") and k.endswith(".weight"))
        return cls({k: Tensor(v) for k, v in arrays.items()}, n_layers)


def init_params(
    n_layers: int,
    c_enc: int,
    c_prime: int,
    c_cls: int,
    seed: int,
    kernel_enabled: bool = True,
) -> KahgParams:
    """Seeded initialization.

    Multi-shape kernels start at the delta kernel plus N(0, 0.01) noise and
    the loop-edge scale alpha starts at 0, so the untrained head begins close
    to the identity on the projected features.
    """
    if c_prime % 2:
        raise ValueError("c_prime must be even (query/key projections use c_prime/2)")
    rng = np.random.default_rng(seed)
    half = c_prime // 2
    p: dict[str, np.ndarray] = {}

    def normal(shape, fan_in):
        return rng.standard_normal(shape) / np.sqrt(fan_in)

    for i in range(n_layers):
        p[f"linear.{i}.weight"] = normal((c_prime, c_enc, 1, 1), c_enc)
        p[f"linear.{i}.bias"] = np.zeros(c_prime)
    shapes = KERNEL_SHAPES if kernel_enabled else {"1x1": (1, 1)}
    for name, (kh, kw) in shapes.items():
        k = 0.01 * rng.standard_normal((c_prime, 1, kh, kw))
        k[:, 0, kh // 2, kw // 2] += 1.0
        p[f"kernel.{name}"] = k
    for i in range(n_layers):
        p[f"intra.{i}.q.weight"] = normal((half, c_prime, 1, 1), c_prime)
        p[f"intra.{i}.q.bias"] = np.zeros(half)
        p[f"intra.{i}.k.weight"] = normal((half, c_prime, 1, 1), c_prime)
        p[f"intra.{i}.k.bias"] = np.zeros(half)
        p[f"intra.{i}.v.weight"] = normal((c_prime, c_prime, 1, 1), c_prime)
        p[f"intra.{i}.v.bias"] = np.zeros(c_prime)
        p[f"intra.{i}.alpha"] = np.zeros(())
    for i, j in combinations(range(n_layers), 2):
        p[f"inter.{i}.{j}"] = normal((c_prime, c_prime), c_prime)
    p["gate.weight"] = normal((c_prime, c_prime, 1, 1), c_prime)
    p["gate.bias"] = np.zeros(c_prime)
    for g in ("update", "reset", "candidate"):
        p[f"gru.{g}.weight"] = normal((c_prime, 2 * c_prime, 3, 3), 2 * c_prime * 9)
        p[f"gru.{g}.bias"] = np.zeros(c_prime)
    p["adapter.weight"] = normal((c_prime, c_cls), c_cls)
    p["adapter.bias"] = np.zeros(c_prime)
    return KahgParams({k: Tensor(v) for k, v in p.items()}, n_layers)


@dataclass
class GraphState:
    """Nodes plus the edges, messages and gates of one message-passing round."""

    nodes: list[Tensor]
    t: int = 0
    loop_edges: list[Tensor] = field(default_factory=list)
    line_edges: dict[tuple[int, int], Tensor] = field(default_factory=dict)
    messages: dict[tuple[int, int], Tensor] = field(default_factory=dict)
    gates: dict[tuple[int, int], Tensor] = field(default_factory=dict)
    attention: list[Tensor] = field(default_factory=list)


# ---------------------------------------------------------------------------
# layout helpers


def flatten_patches(x: Tensor) -> Tensor:
    """``[...,C,H,W] -> [...,H*W,C]`` (row-major positions)."""
    *lead, C, H, W = x.shape
    return tt.swapaxes(tt.reshape(x, (*lead, C, H * W)), -1, -2)


def _unflatten(x: Tensor, C: int, H: int, W: int) -> Tensor:
    lead = x.shape[:-2]
    return tt.reshape(tt.swapaxes(x, -1, -2), (*lead, C, H, W))


def _conv1x1(x: Tensor, params: KahgParams, prefix: str) -> Tensor:
    return tt.conv2d(x, params[f"{prefix}.weight"], bias=params[f"{prefix}.bias"])


# ---------------------------------------------------------------------------
# graph operations


def embed_nodes(P: list[Tensor], params: KahgParams) -> list[Tensor]:
    """Project each layer, sum the multi-shape kernel responses, L2-normalize per position."""
    if not P:
        raise ValueError("embed_nodes needs at least one layer")
    spatial = {tuple(p.shape[-2:]) for p in P}
    if len(spatial) != 1:
        raise ValueError(f"all layers must share one spatial extent, got {sorted(spatial)}")
    if len(P) != params.n_layers:
        raise ValueError(f"expected {params.n_layers} layers, got {len(P)}")
    V = []
    for i, p in enumerate(P):
        z = _conv1x1(p, params, f"linear.{i}")
        acc = None
        for name in params.kernel_names:
            r = tt.conv2d(z, params[f"kernel.{name}"], depthwise=True)
            acc = r if acc is None else tt.add(acc, r)
        V.append(tt.l2_normalize(acc, axis=-3, eps=NORM_EPS))
    return V


def loop_edge(N_i: Tensor, params: KahgParams, i: int, attention_out: list | None = None) -> Tensor:
    """Intra-attention self edge: ``alpha * softmax(Q K^T) V + N_i``."""
    C, H, W = N_i.shape[-3:]
    q = flatten_patches(_conv1x1(N_i, params, f"intra.{i}.q"))
    k = flatten_patches(_conv1x1(N_i, params, f"intra.{i}.k"))
    v = flatten_patches(_conv1x1(N_i, params, f"intra.{i}.v"))
    att = tt.softmax(tt.matmul(q, tt.swapaxes(k, -1, -2)), axis=-1)
    if attention_out is not None:
        attention_out.append(att)
    ctx = _unflatten(tt.matmul(att, v), C, H, W)
    return tt.add(tt.mul(params[f"intra.{i}.alpha"], ctx), N_i)


def line_edges(N_i: Tensor, N_j: Tensor, W_c: Tensor) -> tuple[Tensor, Tensor]:
    """Directed cross-layer affinities ``(e_ij, e_ji)``, each ``[HW, HW]``.

    ``e_ji = N_j W_c^T N_i^T`` is exactly the transpose of ``e_ij``, so it is
    produced as that transpose.
    """
    if N_i.shape != N_j.shape:
        raise ValueError(f"line_edges: node shapes differ, {N_i.shape} vs {N_j.shape}")
    C = N_i.shape[-3]
    if W_c.shape != (C, C):
        raise ValueError(f"line_edges: W_c must be [{C},{C}], got {W_c.shape}")
    a = flatten_patches(N_i)
    b = flatten_patches(N_j)
    e_ij = tt.matmul(tt.matmul(a, W_c), tt.swapaxes(b, -1, -2))
    return e_ij, tt.swapaxes(e_ij, -1, -2)


def _gate(h: Tensor, params: KahgParams) -> Tensor:
    a = tt.sigmoid(tt.global_avg_pool(_conv1x1(h, params, "gate")))
    return a


def gated_messages(state: GraphState, params: KahgParams) -> dict[tuple[int, int], tuple[Tensor, Tensor]]:
    """Messages ``h_{j,i}`` and channel gates ``a_{j,i}`` from the round's edges.

    Keys are ``(j, i)``: sender ``j``, receiver ``i``. The loop message of node
    ``i`` is its loop edge; a line message is the row-softmax of ``e_{i,j}``
    applied to the sender's patches.
    """
    L = len(state.nodes)
    C, H, W = state.nodes[0].shape[-3:]
    out: dict[tuple[int, int], tuple[Tensor, Tensor]] = {}
    for i in range(L):
        for j in range(L):
            if i == j:
                h = state.loop_edges[i]
            else:
                att = tt.softmax(state.line_edges[(i, j)], axis=-1)
                state.attention.append(att)
                h = _unflatten(tt.matmul(att, flatten_patches(state.nodes[j])), C, H, W)
            out[(j, i)] = (h, _gate(h, params))
    return out


def _broadcast_gate(a: Tensor) -> Tensor:
    return tt.reshape(a, (*a.shape, 1, 1))


def aggregate(messages: Mapping[tuple[int, int], tuple[Tensor, Tensor]], L: int) -> list[Tensor]:
    """Per receiver, the gate-weighted sum of all incoming messages in sender order."""
    totals = []
    for i in range(L):
        acc = None
        for j in range(L):
            if (j, i) not in messages:
                raise KeyError(f"missing message from node {j} to node {i}")
            h, a = messages[(j, i)]
            term = tt.mul(_broadcast_gate(a), h)
            acc = term if acc is None else tt.add(acc, term)
        totals.append(acc)
    return totals


def convgru_step(N_prev: Tensor, h: Tensor, params: KahgParams) -> Tensor:
    """One ConvGRU update of a node state from its aggregated message."""
    if N_prev.shape != h.shape:
        raise ValueError(f"convgru_step: state {N_prev.shape} and message {h.shape} differ")
    x = tt.concat([N_prev, h], axis=-3)
    z = tt.sigmoid(tt.conv2d(x, params["gru.update.weight"], bias=params["gru.update.bias"]))
    r = tt.sigmoid(tt.conv2d(x, params["gru.reset.weight"], bias=params["gru.reset.bias"]))
    xr = tt.concat([tt.mul(r, N_prev), h], axis=-3)
    cand = tt.tanh(tt.conv2d(xr, params["gru.candidate.weight"], bias=params["gru.candidate.bias"]))
    return tt.add(tt.mul(tt.sub(1.0, z), N_prev), tt.mul(z, cand))


def _edges(state: GraphState, params: KahgParams) -> None:
    L = len(state.nodes)
    state.loop_edges = [loop_edge(state.nodes[i], params, i, state.attention) for i in range(L)]
    state.line_edges = {}
    for i, j in combinations(range(L), 2):
        e_ij, e_ji = line_edges(state.nodes[i], state.nodes[j], params.inter(i, j))
        state.line_edges[(i, j)] = e_ij
        state.line_edges[(j, i)] = e_ji


def run_kahg(
    P: list[Tensor],
    params: KahgParams,
    T: int,
    states: list[GraphState] | None = None,
) -> list[Tensor]:
    """Embed, pass messages for ``T`` rounds, and return ``O_i = flat(N_i^T + V_i)``.

    ``T == 0`` disables the graph and returns the flattened embeddings ``V_i``.
    When ``states`` is a list, the state of every round is appended to it.
    """
    if T < 0:
        raise ValueError("T must be >= 0")
    V = embed_nodes(P, params)
    if T == 0:
        return [flatten_patches(v) for v in V]
    L = len(V)
    nodes = list(V)
    for t in range(1, T + 1):
        state = GraphState(nodes=nodes, t=t)
        _edges(state, params)
        msgs = gated_messages(state, params)
        state.messages = {k: m[0] for k, m in msgs.items()}
        state.gates = {k: m[1] for k, m in msgs.items()}
        totals = aggregate(msgs, L)
        nodes = [convgru_step(nodes[i], totals[i], params) for i in range(L)]
        if states is not None:
            states.append(state)
    return [flatten_patches(tt.add(n, v)) for n, v in zip(nodes, V)]

