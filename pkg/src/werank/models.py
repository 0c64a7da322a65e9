"""Linear/GCN stacks, the BYOL predictor, EMA pairing and initialization."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Node
from .rng import substream

PRELU_INIT = 0.25
NORM_EPS = 1e-5


@dataclass(frozen=True)
class LayerSpec:
    kind: str  # "linear" | "gcn"
    d_in: int
    d_out: int
    bias: bool = False
    norm: Optional[str] = None  # None | "batch" | "layer"

    def __post_init__(self):
        if self.kind not in ("linear", "gcn"):
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.norm not in (None, "batch", "layer"):
            raise ValueError(f"unknown norm {self.norm!r}")
        if self.d_in < 1 or self.d_out < 1:
            raise ValueError("layer dimensions must be positive")


@dataclass(frozen=True)
class NetworkSpec:
    """Ordered layers with one activation kind.

    The activation sits between layers; ``final_activation`` also applies it
    after the last layer (BGRL-style GCN encoders do this).
    """

    layers: tuple[LayerSpec, ...]
    activation: str = "none"  # "none" | "relu" | "prelu"
    final_activation: bool = False

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        if not self.layers:
            raise ValueError("a network needs at least one layer")
        if self.activation not in ("none", "relu", "prelu"):
            raise ValueError(f"unknown activation {self.activation!r}")
        for a, b in zip(self.layers, self.layers[1:]):
            if a.d_out != b.d_in:
                raise ValueError(f"layer dims do not chain: {a.d_out} -> {b.d_in}")

    @property
    def d_in(self) -> int:
        return self.layers[0].d_in

    @property
    def d_out(self) -> int:
        return self.layers[-1].d_out

    def activated(self, i: int) -> bool:
        if self.activation == "none":
            return False
        return i < len(self.layers) - 1 or self.final_activation

    @classmethod
    def linear_chain(cls, dims: Sequence[int], **kwargs) -> "NetworkSpec":
        """Bias-free linear stack, e.g. ``linear_chain([16, 16, 16])``."""
        layers = [LayerSpec("linear", a, b) for a, b in zip(dims, dims[1:])]
        return cls(tuple(layers), **kwargs)

    @classmethod
    def gcn_encoder(cls, dims: Sequence[int], norm: Optional[str] = None) -> "NetworkSpec":
        layers = [LayerSpec("gcn", a, b, bias=True, norm=norm) for a, b in zip(dims, dims[1:])]
        return cls(tuple(layers), activation="prelu", final_activation=True)

    @classmethod
    def mlp_predictor(cls, d: int, hidden: int) -> "NetworkSpec":
        layers = (LayerSpec("linear", d, hidden, bias=True), LayerSpec("linear", hidden, d, bias=True))
        return cls(layers, activation="prelu")


@dataclass
class WeightStack:
    """Trainable tensors of a network; entries are arrays or autodiff nodes.

    ``biases[l]`` is None for bias-free layers and ``slopes[l]`` is None
    where no PReLU follows layer ``l``.
    """

    weights: list
    biases: list
    slopes: list

    def parameters(self) -> list:
        """Flat list in a fixed order: W_l, then b_l, then slope_l, per layer."""
        out = []
        for w, b, s in zip(self.weights, self.biases, self.slopes):
            out.append(w)
            if b is not None:
                out.append(b)
            if s is not None:
                out.append(s)
        return out

    def with_parameters(self, params: Sequence) -> "WeightStack":
        it = iter(params)
        weights, biases, slopes = [], [], []
        for b, s in zip(self.biases, self.slopes):
            weights.append(next(it))
            biases.append(next(it) if b is not None else None)
            slopes.append(next(it) if s is not None else None)
        return WeightStack(weights, biases, slopes)

    def to_nodes(self, requires_grad: bool = True) -> "WeightStack":
        return self.with_parameters([ad.leaf(p, requires_grad) for p in self.parameters()])

    def grads(self) -> list[np.ndarray]:
        return [p.grad for p in self.parameters()]

    def values(self) -> "WeightStack":
        return self.with_parameters([p.value.copy() for p in self.parameters()])

    def copy(self) -> "WeightStack":
        return self.with_parameters([np.array(p, copy=True) for p in self.parameters()])

    def checksum(self) -> str:
        import hashlib

        h = hashlib.sha256()
        for p in self.parameters():
            h.update(np.ascontiguousarray(p, dtype=np.float64).tobytes())
        return h.hexdigest()


def init_weights(spec: NetworkSpec, seed: int, stream: int = 0) -> WeightStack:
    """Gaussian weights with std 1/sqrt(d_in), zero biases, PReLU slopes 0.25."""
    rng = substream(seed, "init", stream)
    weights, biases, slopes = [], [], []
    for i, layer in enumerate(spec.layers):
        weights.append(rng.standard_normal((layer.d_in, layer.d_out)) / np.sqrt(layer.d_in))
        biases.append(np.zeros((1, layer.d_out)) if layer.bias else None)
        slopes.append(np.full((1, 1), PRELU_INIT) if spec.activated(i) and spec.activation == "prelu" else None)
    return WeightStack(weights, biases, slopes)


def _normalize(h: Node, kind: Optional[str]) -> Node:
    if kind is None:
        return h
    if kind == "batch":
        centered = h - ad.col_mean(h)
        return centered * ad.exp(ad.scale(ad.log(ad.col_var(h) + NORM_EPS), -0.5))
    # layer norm over features of each row
    t = h.T
    centered = t - ad.col_mean(t)
    return (centered * ad.exp(ad.scale(ad.log(ad.col_var(t) + NORM_EPS), -0.5))).T


def _activate(h: Node, spec: NetworkSpec, slope) -> Node:
    if spec.activation == "relu":
        return ad.relu(h)
    return ad.prelu(h, slope)


def _node(p):
    return p if p is None or isinstance(p, Node) else ad.const(p)


def _stack_forward(stack: WeightStack, spec: NetworkSpec, x: Node, adj: Optional[Node]) -> list[Node]:
    if x.shape[1] != spec.d_in:
        raise ValueError(f"input has {x.shape[1]} columns, network expects {spec.d_in}")
    outputs = []
    h = x
    for i, layer in enumerate(spec.layers):
        w = _node(stack.weights[i])
        if layer.kind == "gcn":
            if adj is None:
                raise ValueError("gcn layer needs a normalized adjacency")
            h = adj @ (h @ w) if layer.d_out <= layer.d_in else (adj @ h) @ w
        else:
            h = h @ w
        if stack.biases[i] is not None:
            h = h + _node(stack.biases[i])
        h = _normalize(h, layer.norm)
        if spec.activated(i):
            h = _activate(h, spec, _node(stack.slopes[i]))
        outputs.append(h)
    return outputs


def mlp_forward(stack: WeightStack, spec: NetworkSpec, x: Node) -> list[Node]:
    """Every layer output, last one being the network output."""
    return _stack_forward(stack, spec, x, None)


def gcn_forward(stack: WeightStack, spec: NetworkSpec, adj_norm, x: Node) -> list[Node]:
    """Layers compute act(norm(A_hat @ H @ W + b)); linear layers skip A_hat."""
    if not isinstance(adj_norm, Node):
        adj_norm = ad.const(adj_norm)
    n = x.shape[0]
    if adj_norm.shape != (n, n):
        raise ValueError(f"adjacency {adj_norm.shape} does not match {n} nodes")
    return _stack_forward(stack, spec, x, adj_norm)


def normalize_adjacency(edges, n_nodes: int, add_self_loops: bool = True) -> np.ndarray:
    """Dense D^-1/2 (A + I) D^-1/2 for an undirected edge list."""
    a = np.zeros((n_nodes, n_nodes))
    e = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    if e.size and (e.min() < 0 or e.max() >= n_nodes):
        raise IndexError("edge endpoint outside [0, n_nodes)")
    a[e[:, 0], e[:, 1]] = 1.0
    a[e[:, 1], e[:, 0]] = 1.0
    if add_self_loops:
        a[np.arange(n_nodes), np.arange(n_nodes)] = 1.0
    deg = a.sum(axis=1)
    if np.any(deg == 0):
        raise ValueError(f"{int(np.sum(deg == 0))} isolated node(s) with zero degree")
    inv = 1.0 / np.sqrt(deg)
    return a * inv[:, None] * inv[None, :]


@dataclass
class EmaPair:
    online: WeightStack
    target: WeightStack
    decay: float = 0.995

    def __post_init__(self):
        if not 0.0 <= self.decay <= 1.0:
            raise ValueError("EMA decay must lie in [0, 1]")
        a, b = self.online.parameters(), self.target.parameters()
        if len(a) != len(b) or any(np.shape(x) != np.shape(y) for x, y in zip(a, b)):
            raise ValueError("online and target stacks differ in shape")

    @classmethod
    def from_online(cls, online: WeightStack, decay: float = 0.995) -> "EmaPair":
        return cls(online, online.copy(), decay)


def ema_update(pair: EmaPair) -> WeightStack:
    """target <- decay * target + (1 - decay) * online; returns the new target."""
    tau = pair.decay
    new = [tau * t + (1.0 - tau) * o
           for t, o in zip(pair.target.parameters(), pair.online.parameters())]
    pair.target = pair.target.with_parameters(new)
    return pair.target
