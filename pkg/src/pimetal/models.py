"""Graph-network modules: spatial derivative modules (SDM), the temporal
derivative module (TDM), their PA-DGN composition and the RGN baseline.

Parameters live in two stores: ``phi`` holds one MPNN per derivative operator,
``theta`` holds the recurrent graph network. Model functions take a mapping
name -> Tensor so the same code runs tracked (training) or untracked.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict
from functools import cached_property

import numpy as np
from scipy import sparse

from . import autodiff as ad
from .autodiff import ParamStore, Tensor
from .graphs import SpatialGraph, TaskDataset

DEFAULT_OPERATORS = ("x", "y", "xx", "yy")


@dataclass(frozen=True)
class ModelSpec:
    kind: str = "padgn"  # padgn | rgn
    sdm_hidden: int = 64
    tdm_hidden: int = 64
    rgn_hidden: int = 73
    operators: tuple[str, ...] = DEFAULT_OPERATORS
    n_extra: int = 0

    def __post_init__(self):
        if self.kind not in ("padgn", "rgn"):
            raise ValueError(f"unknown model kind {self.kind!r}")
        object.__setattr__(self, "operators", tuple(self.operators))

    @property
    def uses_sdm(self) -> bool:
        return self.kind == "padgn"

    @property
    def node_inputs(self) -> int:
        if self.kind == "padgn":
            return 1 + len(self.operators) + self.n_extra
        return 1 + self.n_extra

    @property
    def hidden(self) -> int:
        return self.tdm_hidden if self.kind == "padgn" else self.rgn_hidden

    def to_dict(self) -> dict:
        d = asdict(self)
        d["operators"] = list(self.operators)
        return d


class GraphContext:
    """Index arrays and cached scatter matrices for one graph."""

    def __init__(self, graph: SpatialGraph):
        self.graph = graph
        self.n = graph.n_nodes
        self.src = graph.src
        self.dst = graph.dst
        rel = graph.coords[graph.dst] - graph.coords[graph.src]
        dist = np.sqrt(np.sum(rel * rel, axis=1, keepdims=True))
        self.geometry = np.concatenate([rel, dist], axis=1)
        deg = np.bincount(self.src, minlength=self.n).astype(float)
        if np.any(deg == 0):
            raise ValueError("every node needs at least one outgoing edge")
        self.to_src = ad.scatter_matrix(self.src, self.n)
        self.to_dst = ad.scatter_matrix(self.dst, self.n)
        self.mean_src = (sparse.diags(1.0 / deg) @ self.to_src).tocsr()
        self.mean_src_t = self.mean_src.T.tocsr()

    @cached_property
    def n_edges(self) -> int:
        return self.src.shape[0]

    def batched(self, copies: int) -> GraphContext:
        """Disjoint union of ``copies`` identical graphs (frame batching)."""
        offs = np.repeat(np.arange(copies) * self.n, self.n_edges)
        coords = np.tile(self.graph.coords, (copies, 1))
        g = SpatialGraph(coords, np.tile(self.src, copies) + offs, np.tile(self.dst, copies) + offs,
                         self.graph.k_neighbors)
        return GraphContext(g)

    def gather_src(self, x: Tensor) -> Tensor:
        return ad.gather(x, self.src, self.to_src)

    def gather_dst(self, x: Tensor) -> Tensor:
        return ad.gather(x, self.dst, self.to_dst)

    def sum_at_src(self, x: Tensor) -> Tensor:
        return ad.segment_sum(x, self.src, self.n, self.to_src)

    def mean_at_src(self, x: Tensor) -> Tensor:
        return ad.sparse_matmul(self.mean_src, x, self.mean_src_t)


# -- building blocks --------------------------------------------------------


def _uniform(rng, fan_in, shape):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_linear(store: ParamStore, name: str, n_in: int, n_out: int, rng, zero: bool = False,
                bias=None) -> None:
    if zero:
        store.add(f"{name}.W", np.zeros((n_in, n_out)))
        store.add(f"{name}.b", np.zeros(n_out))
        return
    store.add(f"{name}.W", _uniform(rng, n_in, (n_in, n_out)))
    store.add(f"{name}.b", _uniform(rng, n_in, (n_out,)) if bias is None else np.asarray(bias, float))


def linear(p, name: str, x: Tensor) -> Tensor:
    return ad.linear(x, p[f"{name}.W"], p[f"{name}.b"])


def init_mlp(store, name, n_in, n_hidden, n_out, rng, out_bias=None) -> None:
    init_linear(store, f"{name}.l1", n_in, n_hidden, rng)
    init_linear(store, f"{name}.l2", n_hidden, n_out, rng, bias=out_bias)


def mlp(p, name: str, x: Tensor) -> Tensor:
    return linear(p, f"{name}.l2", ad.tanh(linear(p, f"{name}.l1", x)))


def init_gru(store, name, n_in, n_hidden, rng) -> None:
    store.add(f"{name}.W", _uniform(rng, n_hidden, (n_in, 3 * n_hidden)))
    store.add(f"{name}.U", _uniform(rng, n_hidden, (n_hidden, 3 * n_hidden)))
    store.add(f"{name}.bi", _uniform(rng, n_hidden, (3 * n_hidden,)))
    store.add(f"{name}.bh", _uniform(rng, n_hidden, (3 * n_hidden,)))


def gru_cell(p, name: str, x: Tensor, h: Tensor) -> Tensor:
    return ad.gru_cell(x, h, p[f"{name}.W"], p[f"{name}.U"], p[f"{name}.bi"], p[f"{name}.bh"])


def init_gru2(store, name, n_in, n_hidden, rng) -> None:
    init_gru(store, f"{name}.g1", n_in, n_hidden, rng)
    init_gru(store, f"{name}.g2", n_hidden, n_hidden, rng)


def gru2(p, name: str, x: Tensor, state: list[Tensor]) -> list[Tensor]:
    h1 = gru_cell(p, f"{name}.g1", x, state[0])
    h2 = gru_cell(p, f"{name}.g2", h1, state[1])
    return [h1, h2]


# -- spatial derivative modules --------------------------------------------


def init_sdm(spec: ModelSpec, rng: np.random.Generator) -> ParamStore:
    """One MPNN per operator. The coefficient head starts with b-bias 1 so
    every edge begins as a plain difference ``a * (u_i - u_j)``."""
    store = ParamStore()
    H = spec.sdm_hidden
    for k in spec.operators:
        init_mlp(store, f"sdm.{k}.edge1", 5, H, H, rng)
        init_mlp(store, f"sdm.{k}.node1", 1 + H, H, H, rng)
        init_mlp(store, f"sdm.{k}.edge2", 3 * H, H, 2, rng, out_bias=[0.0, 1.0])
    store.meta["role"] = "phi"
    store.meta["spec"] = spec.to_dict()
    return store


@dataclass
class SdmOutput:
    derivs: Tensor  # [N, |K|]
    coeffs: dict = field(default_factory=dict)  # k -> (a [E], b [E])


def sdm_forward(phi, ctx: GraphContext, u: Tensor, operators=DEFAULT_OPERATORS,
                force: dict | None = None) -> SdmOutput:
    """Approximate every operator in ``operators`` at each node.

    ``u`` has shape [N]. ``force`` may pin the coefficient outputs, e.g.
    ``{"b": 1.0}``, which is used by identity checks.
    """
    u = u if isinstance(u, Tensor) else Tensor(u)
    if u.shape != (ctx.n,):
        raise ad.ShapeError(f"sdm_forward: frame shape {u.shape} does not match graph with {ctx.n} nodes")
    col = ad.reshape(u, (ctx.n, 1))
    ui, uj = ctx.gather_src(col), ctx.gather_dst(col)
    edge_in = ad.concat([ui, uj, ctx.geometry], axis=1)
    ui_f, uj_f = ad.reshape(ui, (-1,)), ad.reshape(uj, (-1,))
    outs, coeffs = [], {}
    for k in operators:
        e1 = mlp(phi, f"sdm.{k}.edge1", edge_in)
        n1 = mlp(phi, f"sdm.{k}.node1", ad.concat([col, ctx.mean_at_src(e1)], axis=1))
        e2_in = ad.concat([ctx.gather_src(n1), ctx.gather_dst(n1), e1], axis=1)
        ab = mlp(phi, f"sdm.{k}.edge2", e2_in)
        a, b = ab[:, 0], ab[:, 1]
        if force:
            if "a" in force:
                a = Tensor(np.full(ctx.n_edges, float(force["a"])))
            if "b" in force:
                b = Tensor(np.full(ctx.n_edges, float(force["b"])))
        terms = ad.mul(a, ad.sub(ui_f, ad.mul(b, uj_f)))
        outs.append(ad.reshape(ctx.sum_at_src(ad.reshape(terms, (-1, 1))), (ctx.n, 1)))
        coeffs[k] = (a, b)
    return SdmOutput(ad.concat(outs, axis=1), coeffs)


# -- recurrent graph network (TDM and RGN share it) ------------------------


def init_recurrent_gn(store: ParamStore, prefix: str, n_in: int, H: int, rng) -> None:
    init_gru2(store, f"{prefix}.b1.edge", 2 * n_in, H, rng)
    init_gru2(store, f"{prefix}.b1.node", n_in + H, H, rng)
    init_gru2(store, f"{prefix}.b2.edge", 3 * H, H, rng)
    init_gru2(store, f"{prefix}.b2.node", 2 * H, H, rng)
    init_linear(store, f"{prefix}.head", H, 1, rng, zero=True)


STATE_KEYS = ("b1.edge", "b1.node", "b2.edge", "b2.node")


def zero_state(ctx: GraphContext, H: int) -> dict[str, list[Tensor]]:
    e = Tensor(np.zeros((ctx.n_edges, H)))
    n = Tensor(np.zeros((ctx.n, H)))
    return {k: [e, e] if k.endswith("edge") else [n, n] for k in STATE_KEYS}


def recurrent_gn(p, prefix: str, ctx: GraphContext, node_in: Tensor, state: dict) -> tuple[Tensor, dict]:
    """Two recurrent GN blocks; returns the per-node head output [N] and new state."""
    e_in = ad.concat([ctx.gather_src(node_in), ctx.gather_dst(node_in)], axis=1)
    e1 = gru2(p, f"{prefix}.b1.edge", e_in, state["b1.edge"])
    n1 = gru2(p, f"{prefix}.b1.node", ad.concat([node_in, ctx.mean_at_src(e1[-1])], axis=1),
              state["b1.node"])
    e2_in = ad.concat([ctx.gather_src(n1[-1]), ctx.gather_dst(n1[-1]), e1[-1]], axis=1)
    e2 = gru2(p, f"{prefix}.b2.edge", e2_in, state["b2.edge"])
    n2 = gru2(p, f"{prefix}.b2.node", ad.concat([n1[-1], ctx.mean_at_src(e2[-1])], axis=1),
              state["b2.node"])
    out = ad.reshape(linear(p, f"{prefix}.head", n2[-1]), (ctx.n,))
    return out, {"b1.edge": e1, "b1.node": n1, "b2.edge": e2, "b2.node": n2}


def init_theta(spec: ModelSpec, rng: np.random.Generator) -> ParamStore:
    store = ParamStore()
    prefix = "tdm" if spec.kind == "padgn" else "rgn"
    init_recurrent_gn(store, prefix, spec.node_inputs, spec.hidden, rng)
    store.meta["role"] = "theta"
    store.meta["spec"] = spec.to_dict()
    return store


def init_phi(spec: ModelSpec, rng: np.random.Generator) -> ParamStore:
    if not spec.uses_sdm:
        store = ParamStore()
        store.meta.update(role="phi", spec=spec.to_dict())
        return store
    return init_sdm(spec, rng)


def _node_features(u: Tensor, n: int, parts: list) -> Tensor:
    cols = [ad.reshape(u, (n, 1))] + [p for p in parts if p is not None]
    return ad.concat(cols, axis=1) if len(cols) > 1 else cols[0]


def tdm_step(theta, ctx: GraphContext, u: Tensor, derivs: Tensor, dt: float, state: dict,
             extra=None):
    """One forward-Euler step: returns (u_t, u_next, new_state)."""
    if not dt > 0:
        raise ValueError(f"time step must be positive, got {dt}")
    u = u if isinstance(u, Tensor) else Tensor(u)
    feats = _node_features(u, ctx.n, [derivs, extra])
    u_t, state = recurrent_gn(theta, "tdm", ctx, feats, state)
    return u_t, ad.add(u, ad.mul(u_t, dt)), state


def rgn_step(theta, ctx: GraphContext, u: Tensor, state: dict, extra=None):
    u = u if isinstance(u, Tensor) else Tensor(u)
    feats = _node_features(u, ctx.n, [extra])
    delta, state = recurrent_gn(theta, "rgn", ctx, feats, state)
    return ad.add(u, delta), state


def rollout(spec: ModelSpec, phi, theta, ctx: GraphContext, u0, n_steps: int, dt: float,
            extras: np.ndarray | None = None) -> list[Tensor]:
    """Autoregressive prediction of ``n_steps`` frames after ``u0``.

    ``extras`` holds observed features for the input frame of each step,
    shape [n_steps, N, F].
    """
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    u = u0 if isinstance(u0, Tensor) else Tensor(u0)
    state = zero_state(ctx, spec.hidden)
    preds = []
    for s in range(n_steps):
        extra = None if extras is None else Tensor(extras[s])
        if spec.kind == "padgn":
            derivs = sdm_forward(phi, ctx, u, spec.operators).derivs
            _, u, state = tdm_step(theta, ctx, u, derivs, dt, state, extra)
        else:
            u, state = rgn_step(theta, ctx, u, state, extra)
        preds.append(u)
    return preds


def padgn_rollout(phi, theta, spec: ModelSpec, task: TaskDataset, start: int, n_steps: int,
                  ctx: GraphContext | None = None) -> list[Tensor]:
    ctx = ctx or GraphContext(task.graph)
    extras = None if task.extra is None else task.extra[start:start + n_steps]
    return rollout(spec, phi, theta, ctx, task.frames[start], n_steps, task.dt, extras)


def rgn_rollout(theta, spec: ModelSpec, task: TaskDataset, start: int, n_steps: int,
                ctx: GraphContext | None = None) -> list[Tensor]:
    ctx = ctx or GraphContext(task.graph)
    extras = None if task.extra is None else task.extra[start:start + n_steps]
    return rollout(spec, None, theta, ctx, task.frames[start], n_steps, task.dt, extras)


# -- losses -----------------------------------------------------------------


def _stack_rows(xs) -> Tensor:
    if isinstance(xs, Tensor):
        return xs
    return ad.concat([ad.reshape(x, (1,) + x.shape) for x in xs], axis=0)


def loss_main(predicted, true) -> Tensor:
    """Mean squared error over frames and nodes."""
    pred = _stack_rows(predicted)
    true = np.asarray(true, dtype=float)
    if pred.shape != true.shape:
        raise ad.ShapeError(f"loss_main: prediction shape {pred.shape} vs target shape {true.shape}")
    return ad.mean(ad.square(ad.sub(pred, true)))


def loss_aux(derivs: Tensor, labels: np.ndarray) -> list[Tensor]:
    """Per-operator MSE; ``derivs`` and ``labels`` are [rows, |K|]."""
    labels = np.asarray(labels, dtype=float)
    if derivs.shape != labels.shape:
        raise ad.ShapeError(f"loss_aux: estimate shape {derivs.shape} vs label shape {labels.shape}")
    sq = ad.square(ad.sub(derivs, labels))
    return [ad.mean(sq[:, j]) for j in range(labels.shape[1])]


def sdm_on_frames(phi, spec: ModelSpec, ctx: GraphContext, frames: np.ndarray) -> Tensor:
    """SDM applied to several ground-truth frames at once: [S * N, |K|].

    ``ctx`` is either the task graph or its ``batched(S)`` union.
    """
    S = frames.shape[0]
    big = ctx if ctx.n == frames.size else ctx.batched(S)
    return sdm_forward(phi, big, Tensor(frames.reshape(-1)), spec.operators).derivs


def aux_labels(task: TaskDataset, frames: slice, operators=DEFAULT_OPERATORS) -> np.ndarray:
    if task.aux is None:
        raise ValueError(f"task {task.task_id} has no auxiliary derivative labels")
    cols = [DEFAULT_OPERATORS.index(k) for k in operators]
    lab = task.aux[frames][:, :, cols]
    return lab.reshape(-1, len(cols))
