"""Meta-training (modular and MAML-style), pre-training and few-shot adaptation.

Shared spatial modules (``phi``) are trained across tasks; each task owns a
temporal module (``theta``). Inner-loop gradients are first order: losses at
adapted parameters are differentiated with respect to those parameters only.
"""

from __future__ import annotations

import csv
import io
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, Tape, Tensor
from .graphs import TaskDataset
from .models import GraphContext, ModelSpec, aux_labels, init_phi, init_theta, loss_aux, loss_main, rollout, sdm_on_frames

log = logging.getLogger(__name__)

VARIANTS = ("modular", "maml", "scratch", "weight_init")
OPTIMIZERS = ("adam", "sgd")


@dataclass
class MetaConfig:
    alpha: float = 1e-3
    beta: float = 1e-3
    batch_tasks: int = 1
    inner_steps: int = 1
    epochs: int = 200
    aux_weight: float = 1.0
    variant: str = "modular"
    seed: int = 0
    outer_optimizer: str = "adam"
    inner_optimizer: str = "adam"
    first_order: bool = True
    adapt_epochs: int = 300
    adapt_lr: float = 1e-3
    finetune_phi: bool = False
    threads: int = 1

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")
        if self.beta < 0:
            raise ValueError("beta must be non-negative")
        if self.batch_tasks < 1 or self.inner_steps < 1:
            raise ValueError("batch_tasks and inner_steps must be >= 1")
        if self.outer_optimizer not in OPTIMIZERS or self.inner_optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizers must be one of {OPTIMIZERS}")
        if not self.first_order:
            raise NotImplementedError("second-order meta-gradients are not supported")

    def to_dict(self) -> dict:
        return asdict(self)


# -- objectives -------------------------------------------------------------


class RolloutObjective:
    """Losses of one model family on a task.

    The train loss rolls out from frame 0 over the ``k`` observed frames; the
    test loss rolls out from the last observed frame over the remaining ones.
    """

    def __init__(self, spec: ModelSpec):
        self.spec = spec
        self._ctx: dict = {}

    @property
    def has_aux(self) -> bool:
        return self.spec.uses_sdm

    def init_phi(self, rng) -> ParamStore:
        return init_phi(self.spec, rng)

    def init_theta(self, rng) -> ParamStore:
        return init_theta(self.spec, rng)

    def context(self, task: TaskDataset, copies: int = 1) -> GraphContext:
        # keyed by id() but the graph is kept alongside, so a recycled id of a
        # collected graph can never hand back a stale context
        key = (id(task.graph), copies)
        hit = self._ctx.get(key)
        if hit is not None and hit[0] is task.graph:
            return hit[1]
        base_hit = self._ctx.get((id(task.graph), 1))
        base = base_hit[1] if base_hit is not None and base_hit[0] is task.graph else GraphContext(task.graph)
        self._ctx[(id(task.graph), 1)] = (task.graph, base)
        ctx = base if copies == 1 else base.batched(copies)
        self._ctx[key] = (task.graph, ctx)
        return ctx

    def predict(self, phi, theta, task: TaskDataset, start: int, n_steps: int) -> list[Tensor]:
        extras = None if task.extra is None else task.extra[start:start + n_steps]
        return rollout(self.spec, phi, theta, self.context(task), task.frames[start], n_steps, task.dt, extras)

    def _check_split(self, task: TaskDataset, split_k: int | None) -> int:
        k = task.split_k if split_k is None else split_k
        if not 2 <= k <= task.n_frames - 1:
            raise ValueError(f"split_k={k} leaves no train or test frames for {task.task_id} (T={task.n_frames})")
        return k

    def train_loss(self, phi, theta, task: TaskDataset, split_k: int | None = None) -> Tensor:
        k = self._check_split(task, split_k)
        return loss_main(self.predict(phi, theta, task, 0, k - 1), task.frames[1:k])

    def test_loss(self, phi, theta, task: TaskDataset, split_k: int | None = None) -> Tensor:
        k = self._check_split(task, split_k)
        T = task.n_frames
        return loss_main(self.predict(phi, theta, task, k - 1, T - k), task.frames[k:])

    def sequence_loss(self, phi, theta, task: TaskDataset) -> Tensor:
        T = task.n_frames
        return loss_main(self.predict(phi, theta, task, 0, T - 1), task.frames[1:])

    def aux_losses(self, phi, task: TaskDataset, frames: slice) -> list[Tensor]:
        if not self.has_aux:
            return []
        sub = task.frames[frames]
        derivs = sdm_on_frames(phi, self.spec, self.context(task, sub.shape[0]), sub)
        return loss_aux(derivs, aux_labels(task, frames, self.spec.operators))


def _constants(store: ParamStore) -> dict[str, Tensor]:
    return {k: Tensor(v) for k, v in store.entries.items()}


def value_and_grads(fn: Callable, phi: ParamStore, theta: ParamStore, wrt_phi: bool, wrt_theta: bool):
    """Run ``fn(phi_params, theta_params) -> (loss, info)`` and differentiate.

    Returns ``(loss_value, info, phi_grads | None, theta_grads | None)``.
    """
    tape = Tape()
    pp = tape.watch(phi) if wrt_phi else _constants(phi)
    tp = tape.watch(theta) if wrt_theta else _constants(theta)
    loss, info = fn(pp, tp)
    value = float(loss.value)
    if not (wrt_phi or wrt_theta):
        return value, info, None, None
    if loss.tape is None:
        zero = lambda params: {k: np.zeros_like(t.value) for k, t in params.items()}  # noqa: E731
        return value, info, zero(pp) if wrt_phi else None, zero(tp) if wrt_theta else None
    tape.backward(loss)
    gp = {k: tape.grad(t) for k, t in pp.items()} if wrt_phi else None
    gt = {k: tape.grad(t) for k, t in tp.items()} if wrt_theta else None
    return value, info, gp, gt


def apply_update(store: ParamStore, grads, lr: float, optimizer: str) -> None:
    if optimizer == "adam":
        ad.adam_step(store, grads, lr)
    else:
        ad.sgd_step(store, grads, lr)


def _add_into(acc: dict, grads: dict) -> None:
    for k, g in grads.items():
        acc[k] = acc[k] + g if k in acc else g.copy()


# -- meta-training ----------------------------------------------------------


@dataclass
class MetaState:
    phi: ParamStore
    thetas: dict[str, ParamStore]
    epoch: int = 0
    history: list[dict] = field(default_factory=list)  # one entry per epoch
    rows: list[dict] = field(default_factory=list)  # one entry per (epoch, task)

    def loss_csv(self, operators=("x", "y", "xx", "yy")) -> str:
        return loss_rows_csv(self.rows, operators)


def loss_rows_csv(rows: list[dict], operators) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["epoch", "task_id", "main_loss"] + [f"aux_loss_{k}" for k in operators])
    for r in rows:
        aux = r["aux"] or [float("nan")] * len(operators)
        w.writerow([r["epoch"], r["task_id"], "%.17g" % r["main"]] + ["%.17g" % a for a in aux])
    return buf.getvalue()


def _streams(seed: int) -> tuple[np.random.Generator, np.random.Generator]:
    init_ss, sample_ss = np.random.SeedSequence(seed).spawn(2)
    return np.random.default_rng(init_ss), np.random.default_rng(sample_ss)


def init_meta_state(suite: list[TaskDataset], objective, cfg: MetaConfig) -> MetaState:
    init_rng, _ = _streams(cfg.seed)
    phi = objective.init_phi(init_rng)
    thetas = {t.task_id: objective.init_theta(init_rng) for t in suite}
    return MetaState(phi, thetas)


def _check_suite(suite: list[TaskDataset], objective) -> None:
    if not suite:
        raise ValueError("empty meta-train suite")
    ids = [t.task_id for t in suite]
    if len(set(ids)) != len(ids):
        raise ValueError("task ids in a suite must be unique")
    if objective.has_aux:
        missing = [t.task_id for t in suite if t.aux is None]
        if missing:
            raise ValueError(f"tasks missing auxiliary labels: {missing[:5]}")


def _outer_objective(objective, task: TaskDataset, aux_weight: float):
    k = task.split_k

    def fn(pp, tp):
        main = objective.test_loss(pp, tp, task)
        aux = objective.aux_losses(pp, task, slice(k, task.n_frames))
        total = main
        for a in aux:
            total = ad.add(total, ad.mul(a, aux_weight))
        return total, {"main": float(main.value), "aux": [float(a.value) for a in aux]}

    return fn


def _train_objective(objective, task: TaskDataset):
    return lambda pp, tp: (objective.train_loss(pp, tp, task), {})


def _map_tasks(fn, items, threads: int):
    if threads <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def _modular_task(objective, cfg: MetaConfig, phi: ParamStore, theta: ParamStore, task: TaskDataset):
    if cfg.beta > 0:
        for _ in range(cfg.inner_steps):
            _, _, _, g_theta = value_and_grads(_train_objective(objective, task), phi, theta, False, True)
            apply_update(theta, g_theta, cfg.beta, cfg.inner_optimizer)
    _, info, g_phi, _ = value_and_grads(_outer_objective(objective, task, cfg.aux_weight), phi, theta, True, False)
    return info, g_phi


def _maml_task(objective, cfg: MetaConfig, phi: ParamStore, theta: ParamStore, task: TaskDataset):
    theta_a, phi_a = theta.copy(), phi.copy()
    if cfg.beta > 0:
        for _ in range(cfg.inner_steps):
            _, _, g_phi, g_theta = value_and_grads(_train_objective(objective, task), phi_a, theta_a, True, True)
            ad.sgd_step(theta_a, g_theta, cfg.beta)
            ad.sgd_step(phi_a, g_phi, cfg.beta)
    _, info, g_phi, g_theta = value_and_grads(
        _outer_objective(objective, task, cfg.aux_weight), phi_a, theta_a, True, True)
    apply_update(theta, g_theta, cfg.alpha, cfg.inner_optimizer)
    return info, g_phi


def meta_train(suite: list[TaskDataset], cfg: MetaConfig, objective=None, state: MetaState | None = None,
               on_epoch: Callable | None = None) -> MetaState:
    """Modular (inner theta step, outer phi step) or first-order MAML meta-training."""
    if cfg.variant not in ("modular", "maml"):
        raise ValueError(f"meta_train handles modular/maml, not {cfg.variant!r}")
    objective = objective or RolloutObjective(ModelSpec())
    _check_suite(suite, objective)
    state = state or init_meta_state(suite, objective, cfg)
    _, sample_rng = _streams(cfg.seed)
    per_task = _modular_task if cfg.variant == "modular" else _maml_task
    B = min(cfg.batch_tasks, len(suite))
    for _ in range(cfg.epochs):
        batch = sorted(sample_rng.choice(len(suite), size=B, replace=False).tolist())
        phi_snapshot = state.phi
        results = _map_tasks(
            lambda i: per_task(objective, cfg, phi_snapshot, state.thetas[suite[i].task_id], suite[i]),
            batch, cfg.threads)
        delta: dict[str, np.ndarray] = {}
        for i, (info, g_phi) in zip(batch, results):
            _add_into(delta, g_phi)
            state.rows.append({"epoch": state.epoch, "task_id": suite[i].task_id, **info})
        if state.phi.entries:
            apply_update(state.phi, delta, cfg.alpha, cfg.outer_optimizer)
        infos = [r[0] for r in results]
        state.history.append({
            "epoch": state.epoch,
            "main": float(np.mean([x["main"] for x in infos])),
            "aux": np.mean([x["aux"] for x in infos], axis=0).tolist() if infos[0]["aux"] else [],
        })
        state.epoch += 1
        if on_epoch:
            on_epoch(state)
    return state


def meta_train_modular(suite, cfg: MetaConfig, objective=None, state=None) -> MetaState:
    if cfg.variant != "modular":
        raise ValueError("meta_train_modular expects variant='modular'")
    return meta_train(suite, cfg, objective, state)


def meta_train_maml(suite, cfg: MetaConfig, objective=None, state=None) -> MetaState:
    if cfg.variant != "maml":
        raise ValueError("meta_train_maml expects variant='maml'")
    return meta_train(suite, cfg, objective, state)


def pretrain(suite: list[TaskDataset], cfg: MetaConfig, objective=None,
             on_epoch: Callable | None = None) -> MetaState:
    """Joint multi-task training of one (phi, theta) pair on whole sequences
    plus auxiliary losses; the checkpoint behind the weight-init baselines."""
    objective = objective or RolloutObjective(ModelSpec())
    _check_suite(suite, objective)
    init_rng, sample_rng = _streams(cfg.seed)
    phi = objective.init_phi(init_rng)
    theta = objective.init_theta(init_rng)
    state = MetaState(phi, {"shared": theta})
    B = min(cfg.batch_tasks, len(suite))
    for _ in range(cfg.epochs):
        batch = sorted(sample_rng.choice(len(suite), size=B, replace=False).tolist())
        d_phi: dict = {}
        d_theta: dict = {}
        infos = []
        for i in batch:
            task = suite[i]

            def fn(pp, tp, task=task):
                main = objective.sequence_loss(pp, tp, task)
                aux = objective.aux_losses(pp, task, slice(0, task.n_frames))
                total = main
                for a in aux:
                    total = ad.add(total, ad.mul(a, cfg.aux_weight))
                return total, {"main": float(main.value), "aux": [float(a.value) for a in aux]}

            _, info, g_phi, g_theta = value_and_grads(fn, phi, theta, True, True)
            _add_into(d_phi, g_phi)
            _add_into(d_theta, g_theta)
            infos.append(info)
            state.rows.append({"epoch": state.epoch, "task_id": task.task_id, **info})
        if phi.entries:
            apply_update(phi, d_phi, cfg.alpha, cfg.outer_optimizer)
        apply_update(theta, d_theta, cfg.alpha, cfg.outer_optimizer)
        state.history.append({
            "epoch": state.epoch,
            "main": float(np.mean([x["main"] for x in infos])),
            "aux": np.mean([x["aux"] for x in infos], axis=0).tolist() if infos[0]["aux"] else [],
        })
        state.epoch += 1
        if on_epoch:
            on_epoch(state)
    return state


# -- meta-test adaptation ---------------------------------------------------


@dataclass
class AdaptResult:
    phi: ParamStore
    theta: ParamStore
    test_mse: float
    train_curve: list[float]
    best_epoch: int


def fresh_init(objective, seed: int, task_index: int) -> tuple[ParamStore, ParamStore]:
    """Per-task random initialisation; phi and theta use separate streams so a
    fresh theta is identical whichever phi it is paired with."""
    phi = objective.init_phi(np.random.default_rng([seed, task_index, 0]))
    theta = objective.init_theta(np.random.default_rng([seed, task_index, 1]))
    return phi, theta


def adapt_and_evaluate(objective, task: TaskDataset, phi: ParamStore, theta: ParamStore,
                       train_phi: bool, epochs: int, lr: float = 1e-3,
                       split_k: int | None = None) -> AdaptResult:
    """Train on the first ``split_k`` frames with Adam, keep the parameters with
    the lowest train loss, report the rollout MSE over the remaining frames.

    The input stores are not modified.
    """
    phi, theta = phi.copy(), theta.copy()
    phi.reset_optimizer()
    theta.reset_optimizer()
    fn = lambda pp, tp: (objective.train_loss(pp, tp, task, split_k), {})  # noqa: E731
    best_loss, best, best_epoch = np.inf, (phi.copy(), theta.copy()), 0
    curve = []
    for epoch in range(epochs + 1):
        last = epoch == epochs
        loss, _, g_phi, g_theta = value_and_grads(fn, phi, theta, train_phi and not last, not last)
        curve.append(loss)
        if loss < best_loss:
            best_loss, best, best_epoch = loss, (phi.copy(), theta.copy()), epoch
        if last:
            break
        ad.adam_step(theta, g_theta, lr)
        if train_phi and phi.entries:
            ad.adam_step(phi, g_phi, lr)
    b_phi, b_theta = best
    test = objective.test_loss(_constants(b_phi), _constants(b_theta), task, split_k)
    return AdaptResult(b_phi, b_theta, float(test.value), curve, best_epoch)


def meta_test(phi: ParamStore, task: TaskDataset, cfg: MetaConfig, objective=None, task_index: int = 0,
              split_k: int | None = None) -> AdaptResult:
    """Fresh theta on top of a meta-trained phi (frozen unless ``cfg.finetune_phi``)."""
    objective = objective or RolloutObjective(ModelSpec())
    _, theta = fresh_init(objective, cfg.seed, task_index)
    return adapt_and_evaluate(objective, task, phi, theta, cfg.finetune_phi, cfg.adapt_epochs,
                              cfg.adapt_lr, split_k)


def baseline_scratch(task: TaskDataset, cfg: MetaConfig, objective=None, task_index: int = 0,
                     split_k: int | None = None) -> AdaptResult:
    objective = objective or RolloutObjective(ModelSpec())
    phi, theta = fresh_init(objective, cfg.seed, task_index)
    return adapt_and_evaluate(objective, task, phi, theta, True, cfg.adapt_epochs, cfg.adapt_lr, split_k)


def baseline_weight_init(pretrained: MetaState | None, task: TaskDataset, cfg: MetaConfig, objective=None,
                         split_k: int | None = None) -> AdaptResult:
    if pretrained is None or "shared" not in pretrained.thetas:
        raise ValueError("weight-init baseline needs a pretrained checkpoint")
    objective = objective or RolloutObjective(ModelSpec())
    return adapt_and_evaluate(objective, task, pretrained.phi, pretrained.thetas["shared"], True,
                              cfg.adapt_epochs, cfg.adapt_lr, split_k)


# -- evaluation over suites -------------------------------------------------


METHOD_LABELS = {
    ("rgn", "scratch"): "RGN (train from scratch)",
    ("padgn", "scratch"): "PA-DGN (train from scratch)",
    ("rgn", "weight_init"): "RGN (weight init)",
    ("padgn", "weight_init"): "PA-DGN (weight init)",
    ("padgn", "modular"): "PiMetaL-modular",
    ("padgn", "maml"): "PiMetaL-MAML",
}


def method_label(kind: str, variant: str) -> str:
    return METHOD_LABELS.get((kind, variant), f"{kind}-{variant}")


def evaluate_checkpoint(variant: str, objective, phi: ParamStore, theta: ParamStore | None,
                        tasks: list[TaskDataset], shots: int, cfg: MetaConfig) -> list[float]:
    """Per-task test MSE for one trained method; every method goes through
    :func:`adapt_and_evaluate`."""

    def one(i: int) -> float:
        task = tasks[i]
        fresh_phi, fresh_theta = fresh_init(objective, cfg.seed, i)
        if variant in ("modular", "maml"):
            res = adapt_and_evaluate(objective, task, phi, fresh_theta, cfg.finetune_phi,
                                     cfg.adapt_epochs, cfg.adapt_lr, shots)
        elif variant == "scratch":
            res = adapt_and_evaluate(objective, task, fresh_phi, fresh_theta, True,
                                     cfg.adapt_epochs, cfg.adapt_lr, shots)
        elif variant == "weight_init":
            if theta is None:
                raise ValueError("weight-init evaluation needs a pretrained theta")
            res = adapt_and_evaluate(objective, task, phi, theta, True, cfg.adapt_epochs, cfg.adapt_lr, shots)
        else:
            raise ValueError(f"unknown variant {variant!r}")
        log.debug("%s %s shots=%d mse=%.6g", variant, task.task_id, shots, res.test_mse)
        return res.test_mse

    return _map_tasks(one, list(range(len(tasks))), cfg.threads)
