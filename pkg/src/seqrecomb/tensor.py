"""Dense-tensor numeric core with reverse-mode automatic differentiation.

Tensors wrap numpy arrays and record the op graph as they are produced;
`backward` walks that graph once in reverse topological order. The set of
ops is deliberately small: exactly what single-layer LSTM/BiLSTM encoders,
attention mixtures and softmax output heads need. Everything is batched:
the leading axis is always the batch.

Precision is a module-level switch: float32 for training speed, float64
for gradient-check mode (see `use_dtype`).
"""

from __future__ import annotations

import json
from typing import Callable, Iterable, Sequence

import numpy as np

_DEFAULT_DTYPE = np.dtype(np.float32)
_GRAD_ENABLED = True

NEG_INF = -1e30  # additive mask value; large enough to zero a softmax entry


def get_default_dtype() -> np.dtype:
    return _DEFAULT_DTYPE


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported dtype {dtype}")
    _DEFAULT_DTYPE = dtype


class use_dtype:
    """Context manager switching the global precision (gradient-check mode)."""

    def __init__(self, dtype):
        self.dtype = np.dtype(dtype)

    def __enter__(self):
        self.saved = _DEFAULT_DTYPE
        set_default_dtype(self.dtype)
        return self

    def __exit__(self, *exc):
        set_default_dtype(self.saved)
        return False


class no_grad:
    """Context manager disabling graph recording (decode-time fast path)."""

    def __enter__(self):
        global _GRAD_ENABLED
        self.saved = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self.saved
        return False


class Tensor:
    """A node in the computation graph.

    Leaf tensors are parameters (requires_grad) or constants; interior
    nodes carry a vector-Jacobian callback producing gradients for their
    parents.
    """

    __slots__ = ("data", "grad", "requires_grad", "parents", "vjp", "name")

    def __init__(self, data: np.ndarray, requires_grad: bool = False,
                 parents: tuple = (), vjp: Callable | None = None,
                 name: str | None = None):
        self.data = data
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.parents = parents
        self.vjp = vjp
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        tag = self.name or ("param" if self.requires_grad and not self.parents else "node")
        return f"Tensor({tag}, shape={self.data.shape})"


def parameter(array, name: str | None = None) -> Tensor:
    data = np.ascontiguousarray(array, dtype=_DEFAULT_DTYPE)
    return Tensor(data, requires_grad=True, name=name)


def constant(array) -> Tensor:
    data = np.asarray(array, dtype=_DEFAULT_DTYPE)
    return Tensor(data)


def _node(data: np.ndarray, parents: Sequence[Tensor], vjp: Callable) -> Tensor:
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, parents=tuple(parents), vjp=vjp)
    return Tensor(data)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum gradient over axes that were broadcast in the forward op."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise and linear algebra ops


def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data

    def vjp(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _node(out, (a, b), vjp)


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = a.data - b.data

    def vjp(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return _node(out, (a, b), vjp)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = a.data * b.data

    def vjp(g):
        return (_unbroadcast(g * b.data, a.data.shape),
                _unbroadcast(g * a.data, b.data.shape))

    return _node(out, (a, b), vjp)


def scale(a: Tensor, s: float) -> Tensor:
    out = a.data * s

    def vjp(g):
        return (g * s,)

    return _node(out, (a,), vjp)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-D matrix product (B,I) @ (I,O)."""
    out = a.data @ b.data

    def vjp(g):
        return g @ b.data.T, a.data.T @ g

    return _node(out, (a, b), vjp)


def matmul_t(a: Tensor, b: Tensor) -> Tensor:
    """a @ b.T for (B,E) @ (V,E) -> (B,V); used by tied output embeddings."""
    out = a.data @ b.data.T

    def vjp(g):
        return g @ b.data, g.T @ a.data

    return _node(out, (a, b), vjp)


def reciprocal(a: Tensor) -> Tensor:
    out = 1.0 / a.data

    def vjp(g):
        return (-g * out * out,)

    return _node(out, (a,), vjp)


def sigmoid(a: Tensor) -> Tensor:
    out = 1.0 / (1.0 + np.exp(-a.data))

    def vjp(g):
        return (g * out * (1.0 - out),)

    return _node(out, (a,), vjp)


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)

    def vjp(g):
        return (g * (1.0 - out * out),)

    return _node(out, (a,), vjp)


def log(a: Tensor) -> Tensor:
    out = np.log(a.data)

    def vjp(g):
        return (g / a.data,)

    return _node(out, (a,), vjp)


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)

    def vjp(g):
        return (g * 0.5 / out,)

    return _node(out, (a,), vjp)


def clamp_min(a: Tensor, floor: float) -> Tensor:
    """Elementwise max(a, floor); gradient is zero where clamped."""
    mask = a.data > floor
    out = np.where(mask, a.data, floor).astype(a.data.dtype)

    def vjp(g):
        return (g * mask,)

    return _node(out, (a,), vjp)


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)
    out = np.asarray(out, dtype=a.data.dtype)

    def vjp(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.data.shape).astype(a.data.dtype),)

    return _node(out, (a,), vjp)


def mean_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else a.data.shape[axis]
    return scale(sum_(a, axis=axis, keepdims=keepdims), 1.0 / n)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    datas = [t.data for t in tensors]
    out = np.concatenate(datas, axis=axis)
    sizes = [d.shape[axis] for d in datas]
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        return tuple(np.take(g, range(offsets[i], offsets[i + 1]), axis=axis)
                     for i in range(len(datas)))

    return _node(out, tuple(tensors), vjp)


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice along one axis."""
    idx = [slice(None)] * a.data.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    out = np.ascontiguousarray(a.data[idx])

    def vjp(g):
        full = np.zeros_like(a.data)
        full[idx] = g
        return (full,)

    return _node(out, (a,), vjp)


def reshape(a: Tensor, shape: tuple) -> Tensor:
    out = a.data.reshape(shape)

    def vjp(g):
        return (g.reshape(a.data.shape),)

    return _node(out, (a,), vjp)


def stack(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    out = np.stack([t.data for t in tensors], axis=axis)

    def vjp(g):
        pieces = np.split(g, len(tensors), axis=axis)
        return tuple(p.reshape(t.data.shape) for p, t in zip(pieces, tensors))

    return _node(out, tuple(tensors), vjp)


def embedding(weights: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup: weights (V,E), ids int array of any shape -> (*ids, E)."""
    ids = np.asarray(ids)
    out = weights.data[ids]

    def vjp(g):
        gw = np.zeros_like(weights.data)
        np.add.at(gw, ids, g)
        return (gw,)

    return _node(out, (weights,), vjp)


def take_per_row(a: Tensor, idx: np.ndarray) -> Tensor:
    """a (B,V), idx (B,) -> (B,) picking a[b, idx[b]]."""
    rows = np.arange(a.data.shape[0])
    out = a.data[rows, idx]

    def vjp(g):
        full = np.zeros_like(a.data)
        full[rows, idx] = g
        return (full,)

    return _node(out, (a,), vjp)


def scatter_vocab(probs: Tensor, ids: np.ndarray, vocab_size: int) -> Tensor:
    """Aggregate per-position probabilities onto token ids.

    probs (B,L), ids (B,L) int -> (B,V) where out[b,v] = sum over positions
    j with ids[b,j]==v of probs[b,j]. Fixed left-to-right summation order.
    """
    B, L = probs.data.shape
    rows = np.repeat(np.arange(B), L)
    cols = ids.reshape(-1)
    out = np.zeros((B, vocab_size), dtype=probs.data.dtype)
    np.add.at(out, (rows, cols), probs.data.reshape(-1))

    def vjp(g):
        return (g[rows, cols].reshape(B, L),)

    return _node(out, (probs,), vjp)


def att_scores(q: Tensor, keys: Tensor) -> Tensor:
    """q (B,A), keys (B,L,A) -> scores (B,L)."""
    out = np.matmul(keys.data, q.data[:, :, None])[:, :, 0]

    def vjp(g):
        gq = np.matmul(g[:, None, :], keys.data)[:, 0, :]
        gk = g[:, :, None] * q.data[:, None, :]
        return gq, gk

    return _node(out, (q, keys), vjp)


def att_combine(alpha: Tensor, values: Tensor) -> Tensor:
    """alpha (B,L), values (B,L,A) -> (B,A) weighted sum."""
    out = np.matmul(alpha.data[:, None, :], values.data)[:, 0, :]

    def vjp(g):
        ga = np.matmul(values.data, g[:, :, None])[:, :, 0]
        gv = alpha.data[:, :, None] * g[:, None, :]
        return ga, gv

    return _node(out, (alpha, values), vjp)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax (max subtraction).

    Output sums to 1 along `axis` and is invariant under adding a constant
    to the input.
    """
    x = a.data
    if x.size == 0 or x.shape[axis] == 0:
        raise ValueError("softmax over an empty axis")
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)

    return _node(out, (a,), vjp)


def dropout_mask(shape, rate: float, rng: np.random.Generator) -> np.ndarray:
    """Inverted-dropout mask: entries are 0 or 1/(1-rate); E[mask] = 1."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0,1), got {rate}")
    if rate == 0.0:
        return np.ones(shape, dtype=_DEFAULT_DTYPE)
    keep = rng.random(shape) >= rate
    return keep.astype(_DEFAULT_DTYPE) / _DEFAULT_DTYPE.type(1.0 - rate)


def dropout(a: Tensor, rate: float, rng: np.random.Generator | None) -> Tensor:
    """Apply inverted dropout; rng=None means identity (dropout disabled)."""
    if rng is None or rate == 0.0:
        return a
    return mul(a, constant(dropout_mask(a.data.shape, rate, rng)))


# ---------------------------------------------------------------------------
# LSTM primitives


def lstm_step(x: Tensor, state: tuple[Tensor, Tensor],
              w_ih: Tensor, w_hh: Tensor, b: Tensor) -> tuple[Tensor, Tensor]:
    """One LSTM cell update.

    x (B,I), state (h (B,H), c (B,H)); w_ih (I,4H), w_hh (H,4H), b (4H)
    with gate order [input, forget, cell, output]. Returns (h', c').
    """
    h, c = state
    hidden = h.data.shape[-1]
    if w_ih.data.shape[0] != x.data.shape[-1] or w_ih.data.shape[1] != 4 * hidden:
        raise ValueError(
            f"lstm_step dimension mismatch: x {x.data.shape}, "
            f"w_ih {w_ih.data.shape}, hidden {hidden}")
    gates = add(add(matmul(x, w_ih), matmul(h, w_hh)), b)
    i = sigmoid(narrow(gates, 1, 0, hidden))
    f = sigmoid(narrow(gates, 1, hidden, hidden))
    g = tanh(narrow(gates, 1, 2 * hidden, hidden))
    o = sigmoid(narrow(gates, 1, 3 * hidden, hidden))
    c_new = add(mul(f, c), mul(i, g))
    h_new = mul(o, tanh(c_new))
    return h_new, c_new


def _lstm_gates_step(pre_t: Tensor, state, w_hh: Tensor):
    """Cell update from a precomputed input transform (x@W_ih + b)."""
    h, c = state
    hidden = h.data.shape[-1]
    gates = add(pre_t, matmul(h, w_hh))
    i = sigmoid(narrow(gates, 1, 0, hidden))
    f = sigmoid(narrow(gates, 1, hidden, hidden))
    g = tanh(narrow(gates, 1, 2 * hidden, hidden))
    o = sigmoid(narrow(gates, 1, 3 * hidden, hidden))
    c_new = add(mul(f, c), mul(i, g))
    h_new = mul(o, tanh(c_new))
    return h_new, c_new


def lstm_run(embs: Tensor, lengths: np.ndarray, w_ih: Tensor, w_hh: Tensor,
             b: Tensor, reverse: bool = False) -> tuple[Tensor, tuple[Tensor, Tensor]]:
    """Run an LSTM over a right-padded batch.

    embs (B,L,E); lengths (B,) true lengths. The input-side transform is
    one matmul over the whole sequence. State updates are masked at padding
    so the final state equals the state at each sequence's true end
    regardless of padding. Returns per-step outputs (B,L,H) and the final
    (h, c).
    """
    B, L, E = embs.data.shape
    hidden = w_hh.data.shape[0]
    pre = add(matmul(reshape(embs, (B * L, E)), w_ih), b)
    pre = reshape(pre, (B, L, 4 * hidden))
    h = constant(np.zeros((B, hidden), dtype=_DEFAULT_DTYPE))
    c = constant(np.zeros((B, hidden), dtype=_DEFAULT_DTYPE))
    steps = range(L - 1, -1, -1) if reverse else range(L)
    outs: list[Tensor | None] = [None] * L
    for t in steps:
        pre_t = reshape(narrow(pre, 1, t, 1), (B, 4 * hidden))
        h_new, c_new = _lstm_gates_step(pre_t, (h, c), w_hh)
        valid = (t < lengths).astype(_DEFAULT_DTYPE)[:, None]
        m = constant(valid)
        inv = constant(1.0 - valid)
        h = add(mul(m, h_new), mul(inv, h))
        c = add(mul(m, c_new), mul(inv, c))
        outs[t] = h
    return stack(outs, axis=1), (h, c)


def bilstm_encode(embs: Tensor, lengths: np.ndarray, weights: dict) -> tuple[Tensor, Tensor]:
    """Bidirectional encoding of a padded batch.

    weights holds fwd_w_ih/fwd_w_hh/fwd_b and bwd_* tensors. Returns
    per-token [forward;backward] concatenations (B,L,2H) and the
    concatenated final states (B,2H).
    """
    if embs.data.shape[1] == 0:
        raise ValueError("bilstm_encode on an empty sequence")
    fwd_out, (fwd_h, _) = lstm_run(embs, lengths, weights["fwd_w_ih"],
                                   weights["fwd_w_hh"], weights["fwd_b"])
    bwd_out, (bwd_h, _) = lstm_run(embs, lengths, weights["bwd_w_ih"],
                                   weights["bwd_w_hh"], weights["bwd_b"],
                                   reverse=True)
    return concat([fwd_out, bwd_out], axis=2), concat([fwd_h, bwd_h], axis=1)


# ---------------------------------------------------------------------------
# backward pass


class Graph:
    """Reverse-mode traversal record: nodes reachable from a root, in
    topological order. Acyclicity is inherent (ops never create cycles);
    the visit-once guarantee comes from the explicit ordering."""

    def __init__(self, root: Tensor):
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node.parents:
                if id(p) not in seen and p.requires_grad:
                    stack.append((p, False))
        self.nodes = order  # parents before children

    def __len__(self):
        return len(self.nodes)


def backward(loss: Tensor) -> Graph:
    """Accumulate gradients of a scalar loss into every reachable
    parameter's .grad. Returns the traversal Graph."""
    if loss.data.size != 1:
        raise ValueError(f"backward requires a scalar loss, got shape {loss.data.shape}")
    graph = Graph(loss)
    loss.grad = np.ones_like(loss.data)
    for node in reversed(graph.nodes):
        if node.vjp is None or node.grad is None:
            continue
        grads = node.vjp(node.grad)
        for p, g in zip(node.parents, grads):
            if g is None or not p.requires_grad:
                continue
            if p.grad is None:
                p.grad = np.asarray(g, dtype=p.data.dtype).copy()
            else:
                p.grad += g
        if node.parents:  # free interior gradients eagerly
            node.grad = None
    return graph


# ---------------------------------------------------------------------------
# optimizer


class AdamState:
    """Adam with optional global gradient-norm clipping.

    Moment tensors shape-match the parameters; the step counter increases
    by one per `step` call.
    """

    def __init__(self, params: dict[str, Tensor], lr: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
                 clip_norm: float | None = None):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.clip_norm = clip_norm
        self.t = 0
        self.m = {k: np.zeros_like(p.data, dtype=np.float64) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data, dtype=np.float64) for k, p in params.items()}

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self):
        grads = {}
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            if not np.all(np.isfinite(g)):
                raise ValueError(f"non-finite gradient in parameter '{name}'")
            grads[name] = np.asarray(g, dtype=np.float64)

        if self.clip_norm is not None:
            total = np.sqrt(sum(float((g * g).sum()) for g in grads.values()))
            if total > self.clip_norm and total > 0.0:
                factor = self.clip_norm / total
                for g in grads.values():
                    g *= factor

        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name, p in self.params.items():
            g = grads[name]
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            update = (self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps))
            p.data -= update.astype(p.data.dtype)


def adam_step(params: dict[str, Tensor], state: AdamState) -> None:
    """Apply one Adam update from the parameters' accumulated .grad."""
    if set(params) != set(state.params) or any(params[k] is not state.params[k]
                                               for k in params):
        raise ValueError("AdamState was built for a different parameter set")
    state.step()


# ---------------------------------------------------------------------------
# initialization and checkpointing


def xavier_uniform(rng: np.random.Generator, fan_in: int, fan_out: int,
                   shape=None) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    shape = shape if shape is not None else (fan_in, fan_out)
    return rng.uniform(-bound, bound, size=shape).astype(_DEFAULT_DTYPE)


_CKPT_MAGIC = b"SEQRECOMB-CKPT v1\n"


def save_checkpoint(path, tensors: dict[str, np.ndarray], meta: dict | None = None):
    """Self-describing container: versioned magic line, JSON index
    (name -> shape/dtype/offset), then raw row-major bytes."""
    entries = {}
    offset = 0
    blobs = []
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr)
        raw = arr.tobytes()
        entries[name] = {"shape": list(arr.shape), "dtype": str(arr.dtype),
                         "offset": offset, "nbytes": len(raw)}
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"meta": meta or {}, "tensors": entries}).encode("utf-8")
    with open(path, "wb") as f:
        f.write(_CKPT_MAGIC)
        f.write(len(header).to_bytes(8, "little"))
        f.write(header)
        for raw in blobs:
            f.write(raw)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as f:
        magic = f.read(len(_CKPT_MAGIC))
        if magic != _CKPT_MAGIC:
            raise ValueError(f"{path}: not a seqrecomb checkpoint (bad header)")
        hlen = int.from_bytes(f.read(8), "little")
        header = json.loads(f.read(hlen).decode("utf-8"))
        payload = f.read()
    tensors = {}
    for name, ent in header["tensors"].items():
        raw = payload[ent["offset"]:ent["offset"] + ent["nbytes"]]
        tensors[name] = np.frombuffer(raw, dtype=np.dtype(ent["dtype"])).reshape(ent["shape"]).copy()
    return tensors, header["meta"]
