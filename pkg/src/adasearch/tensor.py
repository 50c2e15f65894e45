"""Reverse-mode differentiable computation graphs with rewritable vertices.

A :class:`Graph` is an ordered list of :class:`Vertex` objects, each applying
one operator to the outputs of earlier vertices.  Every array flowing through
the graph carries a leading batch axis internally; :func:`forward` accepts
either a single input (shape ``graph.input_shape``) or a batch of them.

Two rewrites act on graphs without touching the source object:

* layer removal splices a vertex out and wires its consumers to its input;
* BPDA keeps a vertex's forward but swaps its backward for the vector-Jacobian
  product of a differentiable stand-in (identity, a 1x1 conv, or
  conv3x3-relu-conv3x3).
"""

from __future__ import annotations

import copy
import math
from collections.abc import Callable
from dataclasses import dataclass, field
from typing import Any

import numpy as np

OP_KINDS = (
    "input",
    "dense",
    "conv2d",
    "relu",
    "softmax",
    "add",
    "flatten",
    "quantize",
    "gaussian-noise",
    "reverse-sigmoid",
    "identity",
)
BACKWARD_MODES = ("native", "bpda-identity", "bpda-conv1", "bpda-conv2relu")
BPDA_CHOICES = ("identity", "conv1", "conv2relu")
NON_DIFFERENTIABLE = ("quantize",)


class GraphError(ValueError):
    """Malformed graph, bad vertex id or invalid transform policy."""


class ShapeError(GraphError):
    pass


class NaNError(FloatingPointError):
    def __init__(self, vertex_id: str):
        super().__init__(f"non-finite value produced by vertex {vertex_id!r}")
        self.vertex_id = vertex_id


@dataclass
class Vertex:
    id: str
    op: str
    inputs: list[str]
    out_shape: tuple[int, ...]
    params: dict[str, np.ndarray] = field(default_factory=dict)
    attrs: dict[str, Any] = field(default_factory=dict)
    backward_mode: str = "native"
    bpda_params: dict[str, np.ndarray] = field(default_factory=dict)
    # vertices sharing a block form one opaque operator for the transform space
    block: str | None = None

    @property
    def size(self) -> int:
        return int(np.prod(self.out_shape))


@dataclass
class Graph:
    vertices: list[Vertex]
    input_id: str
    logits_id: str
    probs_id: str

    def __post_init__(self):
        self._index = {v.id: i for i, v in enumerate(self.vertices)}
        if len(self._index) != len(self.vertices):
            raise GraphError("duplicate vertex ids")
        for i, v in enumerate(self.vertices):
            if v.op not in OP_KINDS:
                raise GraphError(f"unknown op {v.op!r} at {v.id!r}")
            if v.backward_mode not in BACKWARD_MODES:
                raise GraphError(f"unknown backward mode {v.backward_mode!r}")
            for src in v.inputs:
                j = self._index.get(src)
                if j is None or j >= i:
                    raise GraphError(f"vertex {v.id!r} reads {src!r} which is not an earlier vertex")
        for tap in (self.input_id, self.logits_id, self.probs_id):
            if tap not in self._index:
                raise GraphError(f"unknown tap {tap!r}")
        if self[self.input_id].op != "input":
            raise GraphError("input id must name an input vertex")

    def __getitem__(self, vid: str) -> Vertex:
        try:
            return self.vertices[self._index[vid]]
        except KeyError:
            raise GraphError(f"no vertex {vid!r}") from None

    def __contains__(self, vid: str) -> bool:
        return vid in self._index

    @property
    def input_shape(self) -> tuple[int, ...]:
        return self[self.input_id].out_shape

    @property
    def order(self) -> list[str]:
        return [v.id for v in self.vertices]

    def in_shape(self, vid: str) -> tuple[int, ...]:
        v = self[vid]
        return self[v.inputs[0]].out_shape if v.inputs else v.out_shape

    def consumers(self, vid: str) -> list[str]:
        return [v.id for v in self.vertices if vid in v.inputs]

    def is_randomized(self) -> bool:
        return any(v.op == "gaussian-noise" and v.attrs.get("sigma", 0.0) > 0 for v in self.vertices)

    def copy(self) -> Graph:
        return copy.deepcopy(self)


# --------------------------------------------------------------------------
# graph construction helpers


class GraphBuilder:
    """Appends vertices in topological order and infers output shapes."""

    def __init__(self, input_shape: tuple[int, ...], input_id: str = "input"):
        self.vertices = [Vertex(input_id, "input", [], tuple(input_shape))]
        self.input_id = input_id
        self._n = 0

    def _shape(self, vid: str) -> tuple[int, ...]:
        for v in self.vertices:
            if v.id == vid:
                return v.out_shape
        raise GraphError(f"no vertex {vid!r}")

    def add(self, op: str, inputs: list[str], vid: str | None = None, *, params=None,
            attrs=None, block=None) -> str:
        if vid is None:
            self._n += 1
            vid = f"{op}{self._n}"
        params = {k: np.asarray(p, dtype=np.float64) for k, p in (params or {}).items()}
        attrs = dict(attrs or {})
        in_shape = self._shape(inputs[0])
        if op == "dense":
            out_shape = (params["W"].shape[0],)
            if in_shape != (params["W"].shape[1],):
                raise ShapeError(f"dense {vid}: input {in_shape} vs weights {params['W'].shape}")
        elif op == "conv2d":
            if len(in_shape) != 3 or in_shape[0] != params["W"].shape[1]:
                raise ShapeError(f"conv2d {vid}: input {in_shape} vs weights {params['W'].shape}")
            out_shape = (params["W"].shape[0],) + in_shape[1:]
        elif op == "flatten":
            out_shape = (int(np.prod(in_shape)),)
        elif op == "softmax":
            if len(in_shape) != 1:
                raise ShapeError("softmax expects a vector input")
            out_shape = in_shape
        elif op == "add":
            if any(self._shape(i) != in_shape for i in inputs):
                raise ShapeError("add operands differ in shape")
            out_shape = in_shape
        else:
            out_shape = in_shape
        self.vertices.append(Vertex(vid, op, list(inputs), out_shape, params, attrs, block=block))
        return vid

    def build(self, logits_id: str, probs_id: str) -> Graph:
        return Graph(self.vertices, self.input_id, logits_id, probs_id)


# --------------------------------------------------------------------------
# operator kernels; every array has a leading batch axis


def _conv_same(x: np.ndarray, W: np.ndarray) -> np.ndarray:
    """Stride-1 same-padded cross-correlation. x (B,C,H,W), W (O,C,k,k)."""
    k = W.shape[-1]
    p = k // 2
    if k == 1:
        return np.einsum("bchw,oc->bohw", x, W[:, :, 0, 0])
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    return np.einsum("bchwij,ocij->bohw", win, W)


def _conv_weight_grad(x: np.ndarray, g: np.ndarray, k: int) -> np.ndarray:
    p = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    return np.einsum("bchwij,bohw->ocij", win, g)


def _conv_input_grad(g: np.ndarray, W: np.ndarray) -> np.ndarray:
    # adjoint of same-padded correlation is correlation with the flipped, transposed kernel
    return _conv_same(g, np.flip(W, axis=(2, 3)).transpose(1, 0, 2, 3))


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def quantize_values(x: np.ndarray, levels: int) -> np.ndarray:
    return np.round(x * (levels - 1)) / (levels - 1)


_RS_FLOOR = 1e-6
_P_EPS = 1e-12


def _rs_forward(p, beta, gamma):
    pc = np.clip(p, _P_EPS, 1.0 - _P_EPS)
    u = np.log(pc) - np.log1p(-pc)
    s = _sigmoid(gamma * u)
    h = p - beta * (s - 0.5)
    a = np.clip(h, _RS_FLOOR, 1.0)
    total = a.sum(axis=-1, keepdims=True)
    return a / total, (pc, s, h, a, total)


def _rs_backward(g, cache, beta, gamma):
    pc, s, h, a, total = cache
    out = a / total
    ga = (g - (g * out).sum(axis=-1, keepdims=True)) / total
    ga = ga * ((h > _RS_FLOOR) & (h < 1.0))
    dh = 1.0 - beta * gamma * s * (1.0 - s) / (pc * (1.0 - pc))
    return ga * dh


def _fwd(v: Vertex, xs: list[np.ndarray], rng) -> tuple[np.ndarray, Any]:
    x = xs[0]
    op = v.op
    if op == "dense":
        return x @ v.params["W"].T + v.params["b"], None
    if op == "conv2d":
        return _conv_same(x, v.params["W"]) + v.params["b"][None, :, None, None], None
    if op == "relu":
        return np.maximum(x, 0.0), None
    if op == "softmax":
        out = _softmax(x)
        return out, out
    if op == "add":
        return sum(xs[1:], xs[0]), None
    if op == "flatten":
        return x.reshape(x.shape[0], -1), None
    if op == "quantize":
        return quantize_values(x, int(v.attrs.get("levels", 8))), None
    if op == "gaussian-noise":
        sigma = float(v.attrs.get("sigma", 0.0))
        if sigma == 0.0:
            return x.copy(), None
        if rng is None:
            raise GraphError(f"vertex {v.id!r} is random; pass an rng to forward()")
        return x + sigma * rng.standard_normal(x.shape), None
    if op == "reverse-sigmoid":
        return _rs_forward(x, v.attrs.get("beta", 0.7), v.attrs.get("gamma", 0.3))
    if op in ("identity", "input"):
        return x, None
    raise GraphError(f"unknown op {op!r}")


def _bwd(v: Vertex, g: np.ndarray, xs: list[np.ndarray], out: np.ndarray, cache,
         want_params: bool) -> tuple[list[np.ndarray], dict[str, np.ndarray]]:
    op = v.op
    x = xs[0]
    pg: dict[str, np.ndarray] = {}
    if op == "dense":
        if want_params:
            pg = {"W": g.T @ x, "b": g.sum(axis=0)}
        return [g @ v.params["W"]], pg
    if op == "conv2d":
        W = v.params["W"]
        if want_params:
            pg = {"W": _conv_weight_grad(x, g, W.shape[-1]), "b": g.sum(axis=(0, 2, 3))}
        return [_conv_input_grad(g, W)], pg
    if op == "relu":
        return [g * (x > 0)], pg
    if op == "softmax":
        s = cache
        return [s * (g - (g * s).sum(axis=-1, keepdims=True))], pg
    if op == "add":
        return [g for _ in xs], pg
    if op == "flatten":
        return [g.reshape(x.shape)], pg
    if op == "quantize":
        return [np.zeros_like(x)], pg
    if op in ("gaussian-noise", "identity"):
        return [g], pg
    if op == "reverse-sigmoid":
        return [_rs_backward(g, cache, v.attrs.get("beta", 0.7), v.attrs.get("gamma", 0.3))], pg
    raise GraphError(f"no backward for op {op!r}")


# --------------------------------------------------------------------------
# BPDA approximators


def _as_image(x: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    # vectors are treated as C channels of a 1x1 image
    if len(shape) == 3:
        return x
    return x.reshape(x.shape[0], -1, 1, 1)


def approximator_forward(kind: str, params: dict[str, np.ndarray], x: np.ndarray,
                         shape: tuple[int, ...]):
    """Evaluate a BPDA stand-in on a batch; returns (output, cache)."""
    xi = _as_image(x, shape)
    if kind == "conv1":
        out = _conv_same(xi, params["W1"]) + params["b1"][None, :, None, None]
        return out.reshape(x.shape), (xi, None, None)
    if kind == "conv2relu":
        z = _conv_same(xi, params["W1"]) + params["b1"][None, :, None, None]
        hdn = np.maximum(z, 0.0)
        out = _conv_same(hdn, params["W2"]) + params["b2"][None, :, None, None]
        return out.reshape(x.shape), (xi, z, hdn)
    raise GraphError(f"unknown approximator {kind!r}")


def approximator_backward(kind: str, params, g: np.ndarray, cache, shape,
                          want_params: bool = False):
    xi, z, hdn = cache
    gi = _as_image(g, shape)
    pg = {}
    if kind == "conv1":
        if want_params:
            pg = {"W1": _conv_weight_grad(xi, gi, params["W1"].shape[-1]), "b1": gi.sum(axis=(0, 2, 3))}
        return _conv_input_grad(gi, params["W1"]).reshape(g.shape), pg
    gh = _conv_input_grad(gi, params["W2"])
    gz = gh * (z > 0)
    if want_params:
        pg = {
            "W2": _conv_weight_grad(hdn, gi, params["W2"].shape[-1]),
            "b2": gi.sum(axis=(0, 2, 3)),
            "W1": _conv_weight_grad(xi, gz, params["W1"].shape[-1]),
            "b1": gz.sum(axis=(0, 2, 3)),
        }
    return _conv_input_grad(gz, params["W1"]).reshape(g.shape), pg


def init_approximator(kind: str, shape: tuple[int, ...], rng: np.random.Generator,
                      scale: float = 0.1) -> dict[str, np.ndarray]:
    c = shape[0] if len(shape) == 3 else int(np.prod(shape))
    if kind == "conv1":
        return {"W1": rng.uniform(-scale, scale, (c, c, 1, 1)), "b1": rng.uniform(-scale, scale, c)}
    if kind == "conv2relu":
        return {
            "W1": rng.uniform(-scale, scale, (c, c, 3, 3)), "b1": rng.uniform(-scale, scale, c),
            "W2": rng.uniform(-scale, scale, (c, c, 3, 3)), "b2": rng.uniform(-scale, scale, c),
        }
    raise GraphError(f"unknown approximator {kind!r}")


# --------------------------------------------------------------------------
# forward / backward


@dataclass
class ForwardTrace:
    graph: Graph
    values: dict[str, np.ndarray]
    caches: dict[str, Any]
    batched: bool


def _batch(graph: Graph, x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    shape = graph.input_shape
    if x.shape == shape:
        return x[None], False
    if x.shape[1:] == shape:
        return x, True
    raise ShapeError(f"input shape {x.shape} does not match graph input {shape}")


def forward(graph: Graph, x, rng: np.random.Generator | None = None, check_finite: bool = True):
    """Evaluate the graph; returns ``(logits, probs, trace)``."""
    xb, batched = _batch(graph, x)
    values: dict[str, np.ndarray] = {}
    caches: dict[str, Any] = {}
    for v in graph.vertices:
        if v.op == "input":
            out = xb
        else:
            out, caches[v.id] = _fwd(v, [values[i] for i in v.inputs], rng)
        # a sum is non-finite iff some entry is (barring overflow, which is also worth flagging)
        if check_finite and not np.isfinite(out.sum()):
            raise NaNError(v.id)
        values[v.id] = out
    trace = ForwardTrace(graph, values, caches, batched)
    logits, probs = values[graph.logits_id], values[graph.probs_id]
    if not batched:
        logits, probs = logits[0], probs[0]
    return logits, probs, trace


def same_forward(a: Graph, b: Graph) -> bool:
    """True when two graphs compute the same forward function (backward modes may differ)."""
    if a is b:
        return True
    if (a.input_id, a.logits_id, a.probs_id) != (b.input_id, b.logits_id, b.probs_id):
        return False
    if len(a.vertices) != len(b.vertices):
        return False
    for u, v in zip(a.vertices, b.vertices):
        if (u.id, u.op, u.inputs, u.attrs) != (v.id, v.op, v.inputs, v.attrs) or u.params.keys() != v.params.keys():
            return False
        if any(u.params[k] is not v.params[k] and not np.array_equal(u.params[k], v.params[k]) for k in u.params):
            return False
    return True


def _backprop(graph: Graph, trace: ForwardTrace, seeds: dict[str, np.ndarray],
              want_params: bool = False):
    grads: dict[str, np.ndarray] = dict(seeds)
    pgrads: dict[str, dict[str, np.ndarray]] = {}
    # reverse topological sweep; only vertices upstream of a seed receive gradient
    for v in reversed(graph.vertices):
        g = grads.pop(v.id, None)
        if g is None or v.op == "input":
            if v.op == "input" and g is not None:
                grads[v.id] = g
            continue
        xs = [trace.values[i] for i in v.inputs]
        if v.backward_mode == "native":
            gin, pg = _bwd(v, g, xs, trace.values[v.id], trace.caches.get(v.id), want_params)
            if pg:
                pgrads[v.id] = pg
        elif v.backward_mode == "bpda-identity":
            gin = [g]
        else:
            kind = v.backward_mode.split("-", 1)[1]
            shape = graph.in_shape(v.id)
            _, cache = approximator_forward(kind, v.bpda_params, xs[0], shape)
            gx, _ = approximator_backward(kind, v.bpda_params, g, cache, shape)
            gin = [gx]
        for src, gs in zip(v.inputs, gin):
            grads[src] = grads[src] + gs if src in grads else gs
    gx = grads.get(graph.input_id)
    if gx is None:
        gx = np.zeros_like(trace.values[graph.input_id])
    return gx, pgrads


def backward(graph: Graph, trace: ForwardTrace | None, loss_grad_at_tap, tap: str = "logits") -> np.ndarray:
    """Gradient of a loss w.r.t. the graph input, given d loss / d tap."""
    if trace is None:
        raise GraphError("backward needs the trace returned by forward()")
    if trace.graph is not graph:
        raise GraphError("trace was produced by a different graph")
    tap_id = {"logits": graph.logits_id, "probs": graph.probs_id}.get(tap)
    if tap_id is None:
        raise GraphError(f"unknown tap {tap!r}")
    g = np.asarray(loss_grad_at_tap, dtype=np.float64)
    if not trace.batched:
        g = g[None]
    gx, _ = _backprop(graph, trace, {tap_id: g})
    return gx if trace.batched else gx[0]


def param_gradients(graph: Graph, trace: ForwardTrace, seeds: dict[str, np.ndarray]):
    """Per-vertex parameter gradients for batched seed gradients keyed by vertex id."""
    _, pg = _backprop(graph, trace, seeds, want_params=True)
    return pg


def finite_diff_grad(graph: Graph, x, loss: Callable[[np.ndarray, np.ndarray], float],
                     h: float = 1e-3, rng_seed: int | None = None) -> np.ndarray:
    """Central-difference gradient of ``loss(logits, probs)`` w.r.t. a single input.

    For random graphs pass ``rng_seed`` so both evaluations see the same draws.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = grad.reshape(-1)

    def f(xx):
        rng = None if rng_seed is None else np.random.default_rng(rng_seed)
        lg, pr, _ = forward(graph, xx, rng)
        return loss(lg, pr)

    for i in range(x.size):
        xp = x.copy().reshape(-1)
        xm = x.copy().reshape(-1)
        xp[i] += h
        xm[i] -= h
        flat[i] = (f(xp.reshape(x.shape)) - f(xm.reshape(x.shape))) / (2 * h)
    return grad


# --------------------------------------------------------------------------
# transformation space


def _candidate(graph: Graph, v: Vertex) -> bool:
    return (v.op not in ("input",) and v.block is None and len(v.inputs) == 1
            and int(np.prod(graph.in_shape(v.id))) == v.size)


def is_removable(graph: Graph, vid: str) -> bool:
    return _candidate(graph, graph[vid])


def list_bpda_candidates(graph: Graph) -> list[str]:
    """Non-differentiable operators whose input and output sizes agree."""
    return [v.id for v in graph.vertices if v.op in NON_DIFFERENTIABLE and _candidate(graph, v)]


def list_removal_candidates(graph: Graph) -> list[str]:
    """Operators (outside opaque blocks) whose input and output sizes agree."""
    return [v.id for v in graph.vertices if _candidate(graph, v)]


@dataclass
class TransformPolicy:
    bpda: dict[str, str] = field(default_factory=dict)
    removal: dict[str, bool] = field(default_factory=dict)
    # learned approximator weights keyed by vertex id; filled by the search
    weights: dict[str, dict[str, np.ndarray]] = field(default_factory=dict, repr=False)

    def is_empty(self) -> bool:
        return not any(c != "none" for c in self.bpda.values()) and not any(self.removal.values())

    def describe(self) -> dict:
        return {"bpda": dict(sorted(self.bpda.items())),
                "removal": {k: bool(v) for k, v in sorted(self.removal.items())}}


def apply_transform(graph: Graph, policy: TransformPolicy) -> Graph:
    """Return a new surrogate graph; the source graph is left untouched."""
    bpda_ok = set(list_bpda_candidates(graph))
    rem_ok = set(list_removal_candidates(graph))
    for vid, choice in policy.bpda.items():
        if vid not in bpda_ok:
            raise GraphError(f"{vid!r} is not a BPDA candidate")
        if choice not in ("none",) + BPDA_CHOICES:
            raise GraphError(f"unknown BPDA choice {choice!r}")
        if choice in ("conv1", "conv2relu") and vid not in policy.weights:
            raise GraphError(f"BPDA {choice} on {vid!r} needs trained weights")
    for vid in policy.removal:
        if vid not in rem_ok:
            raise GraphError(f"{vid!r} is not a removal candidate")

    g = graph.copy()
    for vid, choice in policy.bpda.items():
        v = g[vid]
        if choice == "none":
            v.backward_mode = "native"
        elif choice == "identity":
            v.backward_mode = "bpda-identity"
        else:
            v.backward_mode = f"bpda-{choice}"
            v.bpda_params = {k: np.array(a, copy=True) for k, a in policy.weights[vid].items()}

    removed = [vid for vid, r in policy.removal.items() if r]
    if not removed:
        return g
    redirect = {vid: g[vid].inputs[0] for vid in removed}

    def resolve(vid):
        while vid in redirect:
            vid = redirect[vid]
        return vid

    kept = []
    for v in g.vertices:
        if v.id in redirect:
            continue
        v.inputs = [resolve(i) for i in v.inputs]
        kept.append(v)
    return Graph(kept, g.input_id, resolve(g.logits_id), resolve(g.probs_id))


def train_bpda_approximator(graph: Graph, vertex_id: str, kind: str, inputs: np.ndarray,
                            epochs: int = 10, *, lr: float = 0.01, batch_size: int = 32,
                            seed: int = 0, rng: np.random.Generator | None = None):
    """Fit a conv stand-in to a vertex's forward map by minibatch SGD on MSE.

    ``inputs`` are network inputs (a batch); the vertex's own input activations
    are collected by a forward pass.  Returns ``(weights, mse_history)`` where
    ``mse_history[0]`` is the loss at initialisation and one entry follows each
    epoch.
    """
    if kind not in ("conv1", "conv2relu"):
        raise GraphError("approximator kind must be conv1 or conv2relu")
    if vertex_id not in list_bpda_candidates(graph):
        raise GraphError(f"{vertex_id!r} is not a BPDA candidate")
    inputs = np.asarray(inputs, dtype=np.float64)
    if inputs.ndim == len(graph.input_shape):
        inputs = inputs[None]
    if len(inputs) == 0:
        raise ValueError("cannot train an approximator on an empty dataset")
    rng = rng if rng is not None else np.random.default_rng(seed)
    noise_rng = np.random.default_rng(rng.integers(2**63))
    _, _, trace = forward(graph, inputs, noise_rng)
    v = graph[vertex_id]
    X = trace.values[v.inputs[0]]
    Y = trace.values[vertex_id]
    shape = graph.in_shape(vertex_id)
    params = init_approximator(kind, shape, rng)

    def mse(p):
        out, _ = approximator_forward(kind, p, X, shape)
        return float(np.mean((out - Y) ** 2))

    history = [mse(params)]
    n = len(X)
    for _ in range(epochs):
        perm = rng.permutation(n)
        for s in range(0, n, batch_size):
            idx = perm[s:s + batch_size]
            out, cache = approximator_forward(kind, params, X[idx], shape)
            g = 2.0 * (out - Y[idx]) / out.size
            _, pg = approximator_backward(kind, params, g, cache, shape, want_params=True)
            for k in params:
                params[k] = params[k] - lr * pg[k]
        history.append(mse(params))
    if not all(math.isfinite(h) for h in history):
        raise FloatingPointError("approximator training diverged")
    return params, history
