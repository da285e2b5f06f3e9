"""A small tape-free reverse-mode differentiation engine over numpy arrays.

Each :class:`Tensor` produced by an op keeps references to its parents and a
closure mapping the output gradient to parent gradients. ``backward`` walks
the graph once in reverse topological order. Only the primitives the path
following networks need are provided.
"""

from __future__ import annotations

import contextlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

_state = {"dtype": np.float32, "grad": True, "debug": bool(os.environ.get("RPF_DEBUG"))}


def default_dtype():
    return _state["dtype"]


def set_default_dtype(dtype):
    _state["dtype"] = np.dtype(dtype).type


@contextlib.contextmanager
def using_dtype(dtype):
    old = _state["dtype"]
    set_default_dtype(dtype)
    try:
        yield
    finally:
        _state["dtype"] = old


@contextlib.contextmanager
def no_grad():
    old = _state["grad"]
    _state["grad"] = False
    try:
        yield
    finally:
        _state["grad"] = old


def grad_enabled():
    return _state["grad"]


def set_debug(flag):
    _state["debug"] = bool(flag)


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=_state["dtype"])
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.shape}, name={self.name!r})"

    def zero_grad(self):
        self.grad = None

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return slice_(self, idx)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into ``.grad`` of every leaf requiring grad."""
        if grad is None:
            if self.data.size != 1:
                raise ShapeError(f"backward needs an explicit gradient for shape {self.shape}")
            grad = np.ones_like(self.data)
        order = _topo_order(self)
        grads = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in order:
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


def _topo_order(root):
    """Reverse topological order (root first), iterative to survive long BPTT chains."""
    order = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    order.reverse()
    return order


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, name=None):
    return Tensor(data, requires_grad=True, name=name)


def _make(data, parents, backward):
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    if _state["debug"] and not np.all(np.isfinite(data)):
        raise FloatingPointError("non-finite value produced by an op")
    if _state["grad"] and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(a, b, op):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# elementwise

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def neg(a):
    return _make(-a.data, (a,), lambda g: (-g,))


def tanh(a):
    y = np.tanh(a.data)
    return _make(y, (a,), lambda g: (g * (1.0 - y * y),))


def sigmoid(a):
    y = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _make(y, (a,), lambda g: (g * y * (1.0 - y),))


def relu(a):
    mask = a.data > 0
    return _make(a.data * mask, (a,), lambda g: (g * mask,))


def exp(a):
    y = np.exp(a.data)
    return _make(y, (a,), lambda g: (g * y,))


def log(a):
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def abs_(a):
    # subgradient 0 at exactly 0
    s = np.sign(a.data)
    return _make(np.abs(a.data), (a,), lambda g: (g * s,))


def power(a, p):
    y = a.data ** p
    return _make(y, (a,), lambda g: (g * p * a.data ** (p - 1),))


# ---------------------------------------------------------------------------
# reductions and normalizers

def sum_(a, axis=None, keepdims=False):
    y = a.data.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)
    return _make(np.asarray(y), (a,), back)


def mean(a, axis=None):
    n = a.data.size if axis is None else a.shape[axis]
    return mul(sum_(a, axis), 1.0 / n)


def softmax(a, axis=-1):
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)
    return _make(y, (a,), back)


def logsumexp(a, axis=-1, mask=None):
    """log(sum(exp(a))) along ``axis``, optionally over entries where ``mask`` is True."""
    x = a.data
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if not mask.any(axis=axis).all():
            raise ValueError("logsumexp: empty mask along the reduced axis")
        x = np.where(mask, x, -np.inf)
    m = x.max(axis=axis, keepdims=True)
    e = np.exp(x - m)
    s = e.sum(axis=axis, keepdims=True)
    y = (np.log(s) + m).squeeze(axis)

    def back(g):
        return (np.expand_dims(g, axis) * (e / s),)
    return _make(y, (a,), back)


# ---------------------------------------------------------------------------
# linear algebra

def matmul(a, b):
    """``a[..., n] @ b[n, m]``, or a plain 2D product."""
    a, b = as_tensor(a), as_tensor(b)
    if b.ndim != 2 or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    y = a.data @ b.data

    def back(g):
        ga = g @ b.data.T
        gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, b.shape[1])
        return ga, gb
    return _make(y, (a, b), back)


def dense(x, w, b=None):
    y = matmul(x, w)
    return y if b is None else add(y, b)


def weighted_sum(w, v):
    """``out[..., d] = sum_j w[..., j] * v[..., j, d]``."""
    w, v = as_tensor(w), as_tensor(v)
    if v.shape[:-1] != w.shape:
        raise ShapeError(f"weighted_sum: weights {w.shape} do not match values {v.shape}")
    y = np.einsum("...j,...jd->...d", w.data, v.data)

    def back(g):
        gw = np.einsum("...d,...jd->...j", g, v.data)
        gv = w.data[..., None] * g[..., None, :]
        return gw, gv
    return _make(y, (w, v), back)


def conv1d(x, w, b, stride=1):
    """Valid 1D convolution. ``x[B, L, C]``, ``w[K, C, O]``, ``b[O]`` -> ``[B, L_out, O]``."""
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    if x.ndim != 3 or w.ndim != 3 or x.shape[2] != w.shape[1] or b.shape != (w.shape[2],):
        raise ShapeError(f"conv1d: incompatible shapes {x.shape}, {w.shape}, {b.shape}")
    B, L, C = x.shape
    K, _, O = w.shape
    L_out = (L - K) // stride + 1
    if L_out < 1:
        raise ShapeError(f"conv1d: input length {L} shorter than kernel {K}")
    idx = np.arange(L_out)[:, None] * stride + np.arange(K)[None, :]
    cols = x.data[:, idx, :].reshape(B, L_out, K * C)
    wf = w.data.reshape(K * C, O)
    y = cols @ wf + b.data

    def back(g):
        gcols = (g @ wf.T).reshape(B, L_out, K, C)
        gx = np.zeros_like(x.data)
        for k in range(K):
            gx[:, k:k + stride * (L_out - 1) + 1:stride, :] += gcols[:, :, k, :]
        gw = (cols.reshape(-1, K * C).T @ g.reshape(-1, O)).reshape(K, C, O)
        gb = g.reshape(-1, O).sum(axis=0)
        return gx, gw, gb
    return _make(y, (x, w, b), back)


# ---------------------------------------------------------------------------
# structure

def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    try:
        y = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: incompatible shapes {[t.shape for t in tensors]}") from None
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def back(g):
        return tuple(np.split(g, sizes, axis=axis))
    return _make(y, tuple(tensors), back)


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    y = np.stack([t.data for t in tensors], axis=axis)

    def back(g):
        return tuple(np.moveaxis(g, axis, 0))
    return _make(y, tuple(tensors), back)


def slice_(a, idx):
    y = a.data[idx]

    def back(g):
        out = np.zeros_like(a.data)
        out[idx] = g
        return (out,)
    return _make(np.asarray(y), (a,), back)


def reshape(a, shape):
    y = a.data.reshape(shape)
    return _make(y, (a,), lambda g: (g.reshape(a.shape),))


# ---------------------------------------------------------------------------
# recurrent cell

def gru_cell(h, x, params, prefix="gru"):
    """One GRU step.

    ``params`` holds ``{prefix}.wx [D, 3H]``, ``{prefix}.wh [H, 3H]``,
    ``{prefix}.bx [3H]``, ``{prefix}.bh [3H]`` with gate blocks ordered
    (update, reset, candidate). The update gate ``u`` weighs the candidate:
    ``h' = u * n + (1 - u) * h``, so ``u = 0`` keeps the state.
    """
    wx, wh = params[f"{prefix}.wx"], params[f"{prefix}.wh"]
    bx, bh = params[f"{prefix}.bx"], params[f"{prefix}.bh"]
    H = wh.shape[0]
    if h.shape[-1] != H or x.shape[-1] != wx.shape[0]:
        raise ShapeError(f"gru_cell: state {h.shape} / input {x.shape} vs weights {wx.shape}, {wh.shape}")
    gx = dense(x, wx, bx)
    gh = dense(h, wh, bh)
    u = sigmoid(add(gx[..., :H], gh[..., :H]))
    r = sigmoid(add(gx[..., H:2 * H], gh[..., H:2 * H]))
    n = tanh(add(gx[..., 2 * H:], mul(r, gh[..., 2 * H:])))
    return add(h, mul(u, sub(n, h)))


# ---------------------------------------------------------------------------
# optimizer

@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState) -> dict:
    """Textbook Adam with bias correction; updates ``params[name].data`` in place."""
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise ShapeError(f"adam_step: grad {g.shape} vs param {p.shape} for {name}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        update = state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.data = (p.data - update).astype(p.data.dtype)
    return params


# ---------------------------------------------------------------------------
# gradient checking

@dataclass
class GradCheckReport:
    max_rel_error: dict
    tolerance: float

    @property
    def worst(self):
        return max(self.max_rel_error.values()) if self.max_rel_error else 0.0

    @property
    def ok(self):
        return self.worst < self.tolerance

    def lines(self):
        return [f"{name:28s} max_rel_err={err:.3e} {'ok' if err < self.tolerance else 'FAIL'}"
                for name, err in self.max_rel_error.items()]


def grad_check(loss_fn, params: dict, tolerance=1e-3, h=1e-3, max_entries=12, seed=0,
               fd_dtype=np.float64, stencil=4, ladder=1):
    """Compare backprop against central finite differences, per parameter tensor.

    ``loss_fn()`` must build a scalar loss from the current ``params``. The
    finite differences are evaluated with every parameter and every constant
    cast to ``fd_dtype`` so the oracle is sharper than the path it checks;
    ``stencil`` is 2 (classic central difference) or 4 (fourth order).
    Relative error is ``|g - g_fd| / max(|g_fd|, 1e-6)``.

    With ``ladder > 1`` the steps ``h, h/10, ...`` are tried in turn and the
    estimate closest to its smaller-step neighbour is kept, so a step that
    straddles a relu kink is rejected in favour of one that does not. The
    ladder stops early once two neighbouring steps agree.
    """
    for p in params.values():
        p.grad = None
    loss = loss_fn()
    loss.backward()
    analytic = {n: (p.grad.astype(np.float64) if p.grad is not None else np.zeros(p.shape))
                for n, p in params.items()}
    saved = {n: p.data for n, p in params.items()}
    rng = np.random.default_rng(seed)
    errors = {}
    try:
        with using_dtype(fd_dtype), no_grad():
            for n, p in params.items():
                p.data = saved[n].astype(fd_dtype)
            for n, p in params.items():
                flat = p.data.reshape(-1)
                picks = np.arange(flat.size) if flat.size <= max_entries else \
                    rng.choice(flat.size, max_entries, replace=False)
                worst = 0.0
                for e in picks:
                    orig = flat[e]

                    def f(delta):
                        flat[e] = orig + delta
                        return fd_dtype(loss_fn().data)
                    def estimate(s):
                        if stencil == 4:
                            return (-f(2 * s) + 8 * f(s) - 8 * f(-s) + f(-2 * s)) / (12 * s)
                        return (f(s) - f(-s)) / (2 * s)
                    ests = [estimate(h)]
                    gaps = []
                    for k in range(1, ladder):
                        ests.append(estimate(h * 10.0 ** -k))
                        gaps.append(abs(ests[-2] - ests[-1]))
                        if gaps[-1] <= 0.01 * tolerance * max(abs(ests[-1]), 1e-6):
                            break  # two steps agree far inside the tolerance
                    fd = ests[int(np.argmin(gaps))] if gaps else ests[0]
                    flat[e] = orig
                    g = analytic[n].reshape(-1)[e]
                    err = float(abs(g - fd) / max(abs(fd), 1e-6))
                    worst = max(worst, err)
                errors[n] = worst
    finally:
        for n, p in params.items():
            p.data = saved[n]
    return GradCheckReport(errors, tolerance)


# ---------------------------------------------------------------------------
# checkpoints

def save_checkpoint(directory, params: dict, meta=None):
    """Write ``manifest.json`` plus one little-endian float32 blob ``params.bin``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    offset = 0
    chunks = []
    for name in sorted(params):
        arr = np.ascontiguousarray(params[name].data, dtype="<f4")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.nbytes
        chunks.append(arr.tobytes())
    (directory / "params.bin").write_bytes(b"".join(chunks))
    manifest = {"tensors": entries, "total_bytes": offset, "meta": meta or {}}
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return directory


def load_checkpoint(directory):
    """Returns ``(params, meta)``; validates the blob length against the manifest."""
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    blob = (directory / "params.bin").read_bytes()
    expected = sum(4 * int(np.prod(t["shape"], dtype=np.int64)) for t in manifest["tensors"])
    if len(blob) != expected or manifest.get("total_bytes", expected) != expected:
        raise ValueError(f"checkpoint blob has {len(blob)} bytes, manifest expects {expected}")
    params = {}
    for t in manifest["tensors"]:
        n = int(np.prod(t["shape"], dtype=np.int64))
        arr = np.frombuffer(blob, dtype="<f4", count=n, offset=t["offset"]).reshape(t["shape"])
        params[t["name"]] = parameter(arr.astype(default_dtype()), name=t["name"])
    return params, manifest["meta"]
