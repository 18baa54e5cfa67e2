"""Dense reverse-mode differentiation on numpy arrays.

A :class:`Tape` records every operation whose inputs include a tracked
tensor. Calling :meth:`Tape.backward` on a scalar walks the tape in reverse
and accumulates gradients. Tapes are single-use: build a fresh one for each
forward pass.

Parameters live in a :class:`ParamStore` (plain float64 arrays plus Adam
moments). ``tape.watch(store)`` turns the arrays into leaf tensors.
"""

from __future__ import annotations

import hashlib
import io
import json
import struct
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping

import numpy as np
from scipy import sparse

DTYPE = np.float64


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class TapeError(RuntimeError):
    pass


def _as_array(x) -> np.ndarray:
    arr = np.asarray(x, dtype=DTYPE)
    return arr


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"{op}: non-finite value encountered")


class Tensor:
    """A float64 array, optionally tracked on a tape."""

    __slots__ = ("value", "tape", "id", "name")
    __array_priority__ = 1000

    def __init__(self, value, tape: Tape | None = None, id: int = -1, name: str | None = None):
        self.value = value if isinstance(value, np.ndarray) and value.dtype == DTYPE else _as_array(value)
        self.tape = tape
        self.id = id
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def tracked(self) -> bool:
        return self.tape is not None

    def __repr__(self) -> str:
        tag = f" id={self.id}" if self.tracked else ""
        return f"Tensor(shape={self.shape}{tag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)


@dataclass
class _Node:
    parents: tuple[int, ...]
    backward: Callable[[np.ndarray], tuple[np.ndarray | None, ...]] | None


class Tape:
    """Append-only record of one forward pass."""

    def __init__(self) -> None:
        self.nodes: list[_Node] = []
        self.values: list[np.ndarray] = []
        self.grads: list[np.ndarray | None] | None = None
        self._watched: dict[str, Tensor] = {}
        self._consumed = False

    def __len__(self) -> int:
        return len(self.nodes)

    def leaf(self, value, name: str | None = None) -> Tensor:
        if self._consumed:
            raise TapeError("tape already consumed by backward; start a new tape")
        arr = np.array(value, dtype=DTYPE)
        _check_finite(arr, "leaf")
        self.nodes.append(_Node((), None))
        self.values.append(arr)
        return Tensor(arr, self, len(self.nodes) - 1, name)

    def watch(self, store: ParamStore, names: Iterable[str] | None = None) -> dict[str, Tensor]:
        """Leaf tensors for the store entries in ``names`` (default: all)."""
        wanted = list(store.entries) if names is None else list(names)
        out = {}
        for name in wanted:
            t = self.leaf(store.entries[name], name)
            self._watched[name] = t
            out[name] = t
        return out

    def record(self, value: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
        if self._consumed:
            raise TapeError("tape already consumed by backward; start a new tape")
        ids = tuple(p.id if p.tape is self else -1 for p in parents)
        self.nodes.append(_Node(ids, backward))
        self.values.append(value)
        return Tensor(value, self, len(self.nodes) - 1)

    def backward(self, root: Tensor) -> None:
        if root.tape is not self:
            raise TapeError("root tensor does not belong to this tape")
        if root.value.size != 1 or root.value.ndim > 1:
            raise ShapeError(f"backward needs a scalar root, got shape {root.shape}")
        if self._consumed:
            raise TapeError("backward called twice on the same tape; re-run the forward pass")
        self._consumed = True
        grads: list[np.ndarray | None] = [None] * len(self.nodes)
        grads[root.id] = np.ones_like(root.value)
        for idx in range(root.id, -1, -1):
            g = grads[idx]
            node = self.nodes[idx]
            if g is None or node.backward is None:
                continue
            parent_grads = node.backward(g)
            for pid, pg in zip(node.parents, parent_grads):
                if pid < 0 or pg is None:
                    continue
                if grads[pid] is None:
                    grads[pid] = pg
                else:
                    grads[pid] = grads[pid] + pg
        self.grads = grads

    def grad(self, t: Tensor) -> np.ndarray:
        if self.grads is None:
            raise TapeError("backward has not run")
        g = self.grads[t.id]
        return np.zeros_like(t.value) if g is None else g

    def param_grads(self, into: dict[str, np.ndarray] | None = None) -> dict[str, np.ndarray]:
        """Gradients of every watched parameter; adds into ``into`` when given."""
        out = {} if into is None else into
        for name, t in self._watched.items():
            g = self.grad(t)
            if name in out:
                out[name] = out[name] + g
            else:
                out[name] = g.copy()
        return out


def _tape_of(*xs) -> Tape | None:
    tape = None
    for x in xs:
        if isinstance(x, Tensor) and x.tape is not None:
            if tape is None:
                tape = x.tape
            elif x.tape is not tape:
                raise TapeError("operands are tracked on different tapes")
    return tape


def _wrap(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = _as_array(x)
    _check_finite(arr, "constant")
    return Tensor(arr)


def _emit(op: str, value: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    _check_finite(value, op)
    tape = _tape_of(*parents)
    if tape is None:
        return Tensor(value)
    return tape.record(value, parents, backward)


# -- broadcasting -----------------------------------------------------------


def _broadcast_ok(a: tuple, b: tuple) -> bool:
    if a == b or a == () or b == () or a == (1,) or b == (1,):
        return True
    short, long_ = (a, b) if len(a) <= len(b) else (b, a)
    return long_[len(long_) - len(short):] == short


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    if len(shape) == 0 or shape == (1,):
        return np.asarray(g.sum(), dtype=DTYPE).reshape(shape)
    lead = g.ndim - len(shape)
    return g.sum(axis=tuple(range(lead)))


def _binary_shapes(op: str, a: Tensor, b: Tensor) -> None:
    if not _broadcast_ok(a.shape, b.shape):
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


# -- elementwise ------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _binary_shapes("add", a, b)
    sa, sb = a.shape, b.shape
    return _emit("add", a.value + b.value, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _binary_shapes("sub", a, b)
    sa, sb = a.shape, b.shape
    return _emit("sub", a.value - b.value, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _binary_shapes("mul", a, b)
    av, bv = a.value, b.value
    return _emit("mul", av * bv, (a, b),
                 lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))


def div(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _binary_shapes("div", a, b)
    av, bv = a.value, b.value
    if np.any(bv == 0):
        raise NonFiniteError("div: division by zero")
    out = av / bv
    return _emit("div", out, (a, b),
                 lambda g: (_unbroadcast(g / bv, av.shape), _unbroadcast(-g * out / bv, bv.shape)))


def neg(a) -> Tensor:
    a = _wrap(a)
    return _emit("neg", -a.value, (a,), lambda g: (-g,))


def square(a) -> Tensor:
    a = _wrap(a)
    av = a.value
    return _emit("square", av * av, (a,), lambda g: (2.0 * av * g,))


def tanh(a) -> Tensor:
    a = _wrap(a)
    out = np.tanh(a.value)
    return _emit("tanh", out, (a,), lambda g: (g * (1.0 - out * out),))


def sigmoid(a) -> Tensor:
    a = _wrap(a)
    out = 0.5 * (np.tanh(0.5 * a.value) + 1.0)
    return _emit("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def relu(a) -> Tensor:
    a = _wrap(a)
    mask = a.value > 0
    return _emit("relu", a.value * mask, (a,), lambda g: (g * mask,))


# -- linear algebra and shape ops ------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    av, bv = a.value, b.value
    return _emit("matmul", av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g))


def linear(x, W, b) -> Tensor:
    """``x @ W + b`` as one tape node."""
    x, W, b = _wrap(x), _wrap(W), _wrap(b)
    if x.value.ndim != 2 or W.value.ndim != 2 or x.shape[1] != W.shape[0] or b.shape != (W.shape[1],):
        raise ShapeError(f"linear: incompatible shapes x{x.shape}, W{W.shape}, b{b.shape}")
    xv, Wv = x.value, W.value
    return _emit("linear", xv @ Wv + b.value, (x, W, b),
                 lambda g: (g @ Wv.T, xv.T @ g, g.sum(axis=0)))


def gru_cell(x, h, W, U, bi, bh) -> Tensor:
    """Gated recurrent unit update as one tape node.

    Gate layout along the last axis of W/U/bi/bh is (reset, update, candidate).
    """
    x, h, W, U, bi, bh = (_wrap(t) for t in (x, h, W, U, bi, bh))
    H = h.shape[1] if h.value.ndim == 2 else -1
    if (x.value.ndim != 2 or h.value.ndim != 2 or x.shape[0] != h.shape[0]
            or W.shape != (x.shape[1], 3 * H) or U.shape != (H, 3 * H)
            or bi.shape != (3 * H,) or bh.shape != (3 * H,)):
        raise ShapeError(f"gru_cell: incompatible shapes x{x.shape}, h{h.shape}, W{W.shape}, U{U.shape}")
    xv, hv, Wv, Uv = x.value, h.value, W.value, U.value
    gi = xv @ Wv + bi.value
    gh = hv @ Uv + bh.value
    r = 0.5 * (np.tanh(0.5 * (gi[:, :H] + gh[:, :H])) + 1.0)
    z = 0.5 * (np.tanh(0.5 * (gi[:, H:2 * H] + gh[:, H:2 * H])) + 1.0)
    gh_n = gh[:, 2 * H:]
    n = np.tanh(gi[:, 2 * H:] + r * gh_n)
    out = n + z * (hv - n)

    def backward(g):
        dn_pre = g * (1.0 - z) * (1.0 - n * n)
        dz_pre = g * (hv - n) * z * (1.0 - z)
        dr_pre = dn_pre * gh_n * r * (1.0 - r)
        dgi = np.concatenate([dr_pre, dz_pre, dn_pre], axis=1)
        dgh = np.concatenate([dr_pre, dz_pre, dn_pre * r], axis=1)
        return (dgi @ Wv.T, dgh @ Uv.T + g * z, xv.T @ dgi, hv.T @ dgh, dgi.sum(axis=0), dgh.sum(axis=0))

    return _emit("gru_cell", out, (x, h, W, U, bi, bh), backward)


def concat(xs: list, axis: int = -1) -> Tensor:
    ts = [_wrap(x) for x in xs]
    vals = [t.value for t in ts]
    try:
        out = np.concatenate(vals, axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: incompatible shapes {[v.shape for v in vals]}") from exc
    ax = axis % out.ndim
    bounds = np.cumsum([0] + [v.shape[ax] for v in vals])

    def backward(g):
        idx = [slice(None)] * g.ndim
        parts = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            idx[ax] = slice(lo, hi)
            parts.append(g[tuple(idx)])
        return tuple(parts)

    return _emit("concat", out, tuple(ts), backward)


def getitem(a, key) -> Tensor:
    """Basic slicing (ints and slices only)."""
    a = _wrap(a)
    shape = a.shape
    out = a.value[key]

    def backward(g):
        full = np.zeros(shape, dtype=DTYPE)
        full[key] = g
        return (full,)

    return _emit("slice", np.array(out, dtype=DTYPE), (a,), backward)


def reshape(a, shape: tuple[int, ...]) -> Tensor:
    a = _wrap(a)
    old = a.shape
    try:
        out = a.value.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot reshape {old} into {shape}") from exc
    return _emit("reshape", out, (a,), lambda g: (g.reshape(old),))


def scatter_matrix(index: np.ndarray, n: int) -> sparse.csr_matrix:
    """Sparse [n, len(index)] 0/1 matrix that sums rows into buckets ``index``."""
    index = np.asarray(index, dtype=np.intp)
    m = index.shape[0]
    return sparse.csr_matrix((np.ones(m), (index, np.arange(m))), shape=(n, m))


def gather(a, index: np.ndarray, scatter: sparse.csr_matrix | None = None) -> Tensor:
    """Rows of ``a`` picked by an integer index array.

    ``scatter`` may pass a cached ``scatter_matrix(index, len(a))``.
    """
    a = _wrap(a)
    index = np.asarray(index, dtype=np.intp)
    if scatter is None:
        scatter = scatter_matrix(index, a.shape[0])
    return _emit("gather", a.value[index], (a,), lambda g: (scatter @ g,))


def segment_sum(a, segment: np.ndarray, n_segments: int,
                scatter: sparse.csr_matrix | None = None) -> Tensor:
    """Sum rows of ``a`` into ``n_segments`` buckets given by ``segment``."""
    a = _wrap(a)
    segment = np.asarray(segment, dtype=np.intp)
    if segment.shape[0] != a.shape[0]:
        raise ShapeError(f"segment_sum: {a.shape[0]} rows but {segment.shape[0]} segment ids")
    if scatter is None:
        scatter = scatter_matrix(segment, n_segments)
    out = np.asarray(scatter @ a.value, dtype=DTYPE)
    return _emit("segment_sum", out, (a,), lambda g: (g[segment],))


def sparse_matmul(matrix: sparse.spmatrix, a, transpose: sparse.spmatrix | None = None) -> Tensor:
    """Constant sparse matrix times a tracked dense matrix.

    ``transpose`` may pass a cached ``matrix.T`` in CSR form.
    """
    a = _wrap(a)
    if matrix.shape[1] != a.shape[0]:
        raise ShapeError(f"sparse_matmul: incompatible shapes {matrix.shape} and {a.shape}")
    mt = matrix.T.tocsr() if transpose is None else transpose
    return _emit("sparse_matmul", np.asarray(matrix @ a.value, dtype=DTYPE), (a,), lambda g: (mt @ g,))


# -- reductions -------------------------------------------------------------


def sum(a, axis: int | None = None) -> Tensor:  # noqa: A001 - mirrors numpy
    a = _wrap(a)
    shape = a.shape
    out = np.asarray(a.value.sum(axis=axis), dtype=DTYPE)

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _emit("sum", out, (a,), backward)


def mean(a, axis: int | None = None) -> Tensor:
    a = _wrap(a)
    count = a.value.size if axis is None else a.shape[axis]
    return mul(sum(a, axis), 1.0 / count)


# -- parameter storage and optimisation ------------------------------------


@dataclass
class ParamStore:
    """Named parameter arrays with Adam moments and a step counter."""

    entries: dict[str, np.ndarray] = field(default_factory=dict)
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    meta: dict = field(default_factory=dict)

    def add(self, name: str, value) -> None:
        if name in self.entries:
            raise KeyError(f"duplicate parameter name {name!r}")
        arr = np.array(value, dtype=DTYPE)
        self.entries[name] = arr
        self.m[name] = np.zeros_like(arr)
        self.v[name] = np.zeros_like(arr)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.entries[name]

    def __contains__(self, name: str) -> bool:
        return name in self.entries

    def names(self) -> list[str]:
        return list(self.entries)

    def n_params(self) -> int:
        return int(np.sum([v.size for v in self.entries.values()]))

    def copy(self) -> ParamStore:
        return ParamStore(
            {k: v.copy() for k, v in self.entries.items()},
            {k: v.copy() for k, v in self.m.items()},
            {k: v.copy() for k, v in self.v.items()},
            self.step,
            json.loads(json.dumps(self.meta)),
        )

    def reset_optimizer(self) -> None:
        for k, v in self.entries.items():
            self.m[k] = np.zeros_like(v)
            self.v[k] = np.zeros_like(v)
        self.step = 0

    def to_bytes(self) -> bytes:
        return save_params(self)

    def digest(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()


def adam_step(store: ParamStore, grads: Mapping[str, np.ndarray], lr: float = 1e-3,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> ParamStore:
    """One bias-corrected Adam update, in place. Returns ``store``."""
    if not lr > 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    for name, p in store.entries.items():
        if name not in grads:
            raise KeyError(f"missing gradient for parameter {name!r}")
        if np.shape(grads[name]) != p.shape:
            raise ShapeError(f"gradient for {name!r} has shape {np.shape(grads[name])}, expected {p.shape}")
    store.step += 1
    t = store.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, p in store.entries.items():
        g = grads[name]
        store.m[name] = beta1 * store.m[name] + (1.0 - beta1) * g
        store.v[name] = beta2 * store.v[name] + (1.0 - beta2) * g * g
        m_hat = store.m[name] / c1
        v_hat = store.v[name] / c2
        store.entries[name] = p - lr * m_hat / (np.sqrt(v_hat) + eps)
    return store


def sgd_step(store: ParamStore, grads: Mapping[str, np.ndarray], lr: float) -> ParamStore:
    for name in store.entries:
        if name not in grads:
            raise KeyError(f"missing gradient for parameter {name!r}")
    for name, p in store.entries.items():
        store.entries[name] = p - lr * grads[name]
    store.step += 1
    return store


# -- gradient checking ------------------------------------------------------


@dataclass
class GradcheckReport:
    max_rel_error: dict[str, float]
    tol: float

    @property
    def failures(self) -> list[str]:
        return [k for k, e in self.max_rel_error.items() if not e < self.tol]

    @property
    def ok(self) -> bool:
        return not self.failures

    def worst(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)


def gradcheck(loss_fn: Callable[[dict[str, Tensor]], Tensor], store: ParamStore,
              names: Iterable[str] | None = None, eps: float = 1e-5, tol: float = 1e-4,
              floor: float = 1e-6) -> GradcheckReport:
    """Compare reverse-mode gradients against central differences.

    ``loss_fn`` receives a mapping name -> Tensor for every store entry; only
    ``names`` are tracked (the rest are passed as constants and left out of
    the report). Relative error per entry is ``|ad - fd| / max(|ad|, |fd|, floor)``.
    """
    tracked = list(store.entries) if names is None else list(names)

    def evaluate() -> float:
        params = {k: Tensor(v) for k, v in store.entries.items()}
        return float(loss_fn(params).value)

    first, second = evaluate(), evaluate()
    if first != second:
        raise TapeError(f"loss closure is not deterministic ({first!r} != {second!r})")

    tape = Tape()
    params = {k: Tensor(v) for k, v in store.entries.items()}
    params.update(tape.watch(store, tracked))
    loss = loss_fn(params)
    tape.backward(loss)
    grads = tape.param_grads()

    report = {}
    for name in tracked:
        p = store.entries[name]
        ad = grads[name].ravel()
        fd = np.empty_like(ad)
        flat = p.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = evaluate()
            flat[i] = orig - eps
            down = evaluate()
            flat[i] = orig
            fd[i] = (up - down) / (2 * eps)
        denom = np.maximum(np.maximum(np.abs(ad), np.abs(fd)), floor)
        report[name] = float(np.max(np.abs(ad - fd) / denom)) if ad.size else 0.0
    return GradcheckReport(report, tol)


# -- checkpoint format ------------------------------------------------------

CHECKPOINT_MAGIC = b"PIMETAL-PARAMS"
CHECKPOINT_VERSION = 1


def save_params(store: ParamStore) -> bytes:
    """Serialize values, optimizer state and metadata. Byte output is deterministic."""
    header = {
        "version": CHECKPOINT_VERSION,
        "step": store.step,
        "meta": store.meta,
        "entries": [[k, list(v.shape)] for k, v in store.entries.items()],
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<IQ", CHECKPOINT_VERSION, len(head)))
    buf.write(head)
    for k in store.entries:
        for arr in (store.entries[k], store.m[k], store.v[k]):
            buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return buf.getvalue()


def load_params(data: bytes) -> ParamStore:
    if not data.startswith(CHECKPOINT_MAGIC):
        raise ValueError("not a parameter checkpoint (bad magic)")
    pos = len(CHECKPOINT_MAGIC)
    version, n_head = struct.unpack_from("<IQ", data, pos)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    pos += struct.calcsize("<IQ")
    header = json.loads(data[pos:pos + n_head])
    pos += n_head
    store = ParamStore(step=header["step"], meta=header["meta"])
    for name, shape in header["entries"]:
        size = int(np.prod(shape, dtype=np.int64))
        arrays = []
        for _ in range(3):
            arr = np.frombuffer(data, dtype="<f8", count=size, offset=pos).astype(DTYPE).reshape(shape)
            pos += 8 * size
            arrays.append(arr)
        store.entries[name], store.m[name], store.v[name] = arrays
    if pos != len(data):
        raise ValueError("trailing bytes in checkpoint")
    return store
