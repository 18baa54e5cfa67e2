from types import SimpleNamespace

import numpy as np
import pytest

from pimetal import autodiff as ad
from pimetal.autodiff import ParamStore, Tensor
from pimetal.checks import random_task
from pimetal.config import load_preset
from pimetal.graphs import TaskDataset, knn_graph, make_meta_suite
from pimetal.meta import (
    MetaConfig,
    MetaState,
    RolloutObjective,
    adapt_and_evaluate,
    baseline_scratch,
    baseline_weight_init,
    evaluate_checkpoint,
    fresh_init,
    meta_test,
    meta_train,
    meta_train_maml,
    meta_train_modular,
    pretrain,
    value_and_grads,
)
from pimetal.models import ModelSpec

SPEC = ModelSpec("padgn", sdm_hidden=3, tdm_hidden=3)


# -- quadratic toy standing in for the model ---------------------------------


class Quadratic:
    """L_tr = |v + w - c_tr|^2 / 2, L_te = |2v + w - c_te|^2 / 2, L_aux = |w - c_aux|^2 / 2.

    ``w`` plays the shared phi, ``v`` a task's theta.
    """

    has_aux = True

    def init_phi(self, rng):
        s = ParamStore()
        s.add("w", [0.5, -1.0])
        return s

    def init_theta(self, rng):
        s = ParamStore()
        s.add("v", [1.5, 0.25])
        return s

    @staticmethod
    def _half_sq(x):
        return ad.mul(ad.sum(ad.square(x)), 0.5)

    def train_loss(self, pp, tp, task):
        return self._half_sq(ad.sub(ad.add(tp["v"], pp["w"]), task.c_tr))

    def test_loss(self, pp, tp, task):
        return self._half_sq(ad.sub(ad.add(ad.mul(tp["v"], 2.0), pp["w"]), task.c_te))

    def aux_losses(self, pp, task, frames):
        return [self._half_sq(ad.sub(pp["w"], task.c_aux))]


def toy_task(name="q0"):
    return SimpleNamespace(task_id=name, aux=True, split_k=2, n_frames=4,
                           c_tr=np.array([1.0, 2.0]), c_te=np.array([-0.5, 0.3]), c_aux=np.array([0.2, 0.1]))


def toy_cfg(variant, alpha=0.1, beta=0.3, **kw):
    return MetaConfig(variant=variant, alpha=alpha, beta=beta, epochs=1, outer_optimizer="sgd",
                      inner_optimizer="sgd", **kw)


W0, V0 = np.array([0.5, -1.0]), np.array([1.5, 0.25])


def test_modular_step_matches_closed_form():
    task = toy_task()
    cfg = toy_cfg("modular")
    state = meta_train_modular([task], cfg, Quadratic())
    t = task
    v1 = V0 - cfg.beta * (V0 + W0 - t.c_tr)
    delta = (2 * v1 + W0 - t.c_te) + (W0 - t.c_aux)
    np.testing.assert_allclose(state.thetas["q0"]["v"], v1, rtol=0, atol=1e-15)
    np.testing.assert_allclose(state.phi["w"], W0 - cfg.alpha * delta, rtol=0, atol=1e-15)


def test_first_order_maml_step_matches_closed_form():
    task = toy_task()
    cfg = toy_cfg("maml")
    state = meta_train_maml([task], cfg, Quadratic())
    t = task
    g = V0 + W0 - t.c_tr
    v_a, w_a = V0 - cfg.beta * g, W0 - cfg.beta * g
    r = 2 * v_a + w_a - t.c_te
    np.testing.assert_allclose(state.thetas["q0"]["v"], V0 - cfg.alpha * 2 * r, rtol=0, atol=1e-15)
    np.testing.assert_allclose(state.phi["w"], W0 - cfg.alpha * (r + (w_a - t.c_aux)), rtol=0, atol=1e-15)


def test_inner_steps_repeat_the_inner_update():
    task = toy_task()
    cfg = toy_cfg("modular", inner_steps=3)
    state = meta_train([task], cfg, Quadratic())
    v = V0.copy()
    for _ in range(3):
        v = v - cfg.beta * (v + W0 - task.c_tr)
    np.testing.assert_allclose(state.thetas["q0"]["v"], v, atol=1e-15)


def test_maml_with_zero_beta_matches_modular_outer_step():
    modular = meta_train([toy_task()], toy_cfg("modular", beta=0.0), Quadratic())
    maml = meta_train([toy_task()], toy_cfg("maml", beta=0.0), Quadratic())
    np.testing.assert_array_equal(modular.phi["w"], maml.phi["w"])
    assert modular.history[0]["main"] == maml.history[0]["main"]


def test_wrong_variant_entry_points():
    with pytest.raises(ValueError):
        meta_train_maml([toy_task()], toy_cfg("modular"), Quadratic())
    with pytest.raises(ValueError):
        meta_train([toy_task()], toy_cfg("scratch"), Quadratic())


@pytest.mark.parametrize("kw", [dict(alpha=0.0), dict(beta=-1.0), dict(batch_tasks=0), dict(inner_steps=0),
                                dict(variant="reptile"), dict(outer_optimizer="rmsprop")])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        MetaConfig(**kw)


def test_second_order_not_offered():
    with pytest.raises(NotImplementedError):
        MetaConfig(first_order=False)


# -- the real model ------------------------------------------------------------


@pytest.fixture(scope="module")
def suite():
    rng = np.random.default_rng(0)
    return [random_task(10, rng, n_frames=6, task_id=f"r{i}") for i in range(3)]


def small_cfg(variant, **kw):
    base = dict(variant=variant, epochs=2, seed=3, adapt_epochs=3)
    base.update(kw)
    return MetaConfig(**base)


def test_zero_beta_keeps_theta_fixed(suite):
    obj = RolloutObjective(SPEC)
    cfg = small_cfg("modular", beta=0.0, inner_steps=4, epochs=3, batch_tasks=3)
    before = {k: v.digest() for k, v in meta_train(suite, MetaConfig(**{**cfg.to_dict(), "epochs": 0}), obj).thetas.items()}
    after = meta_train(suite, cfg, obj)
    assert {k: v.digest() for k, v in after.thetas.items()} == before


def test_zero_beta_maml_matches_modular_first_epoch(suite):
    obj = RolloutObjective(SPEC)
    a = meta_train(suite, small_cfg("modular", beta=0.0, epochs=1), obj)
    b = meta_train(suite, small_cfg("maml", beta=0.0, epochs=1), obj)
    assert abs(a.history[0]["main"] - b.history[0]["main"]) < 1e-10
    np.testing.assert_allclose(a.history[0]["aux"], b.history[0]["aux"], rtol=0, atol=1e-10)
    for k in a.phi.entries:
        np.testing.assert_allclose(a.phi[k], b.phi[k], rtol=0, atol=1e-10)


def test_batch_delta_is_sum_of_task_contributions(suite):
    obj = RolloutObjective(SPEC)
    cfg = small_cfg("modular", beta=0.0, epochs=1, batch_tasks=3, alpha=1.0, outer_optimizer="sgd")
    state = meta_train(suite, MetaConfig(**{**cfg.to_dict(), "epochs": 0}), obj)
    phi0 = state.phi.copy()
    total = {k: np.zeros_like(v) for k, v in phi0.entries.items()}
    for task in suite:
        def fn(pp, tp, task=task):
            out = obj.test_loss(pp, tp, task)
            for a in obj.aux_losses(pp, task, slice(task.split_k, task.n_frames)):
                out = ad.add(out, a)
            return out, {}

        _, _, g, _ = value_and_grads(fn, phi0, state.thetas[task.task_id], True, False)
        for k in total:
            total[k] += g[k]
    meta_train(suite, cfg, obj, state)
    for k in total:
        np.testing.assert_allclose(phi0[k] - state.phi[k], total[k], rtol=0, atol=1e-10)


def _values(store):
    # raw parameter bytes; a digest would also cover the Adam moments and step
    # count, which advance even on a zero gradient
    return {k: v.tobytes() for k, v in store.entries.items()}


def test_degenerate_constant_task_leaves_parameters_alone():
    coords = np.random.default_rng(0).uniform(0, 6, size=(8, 2))
    task = TaskDataset(knn_graph(coords, 3), np.full((6, 8), 0.4), np.zeros((6, 8, 4)), 0.01, 3, task_id="c")
    obj = RolloutObjective(SPEC)
    cfg = small_cfg("modular", epochs=1, aux_weight=0.0)
    state = meta_train([task], MetaConfig(**{**cfg.to_dict(), "epochs": 0}), obj)
    phi, theta = _values(state.phi), _values(state.thetas["c"])
    meta_train([task], cfg, obj, state)
    assert state.epoch == 1 and state.history[0]["main"] == 0.0
    assert _values(state.phi) == phi
    assert _values(state.thetas["c"]) == theta


def test_missing_aux_labels_rejected(suite):
    bare = random_task(8, np.random.default_rng(1), task_id="bare")
    bare.aux = None
    with pytest.raises(ValueError, match="auxiliary"):
        meta_train([bare], small_cfg("modular"), RolloutObjective(SPEC))


def test_meta_training_is_reproducible_and_thread_independent(suite):
    obj = RolloutObjective(SPEC)
    a = meta_train(suite, small_cfg("modular", batch_tasks=2, epochs=3), obj)
    b = meta_train(suite, small_cfg("modular", batch_tasks=2, epochs=3, threads=3), RolloutObjective(SPEC))
    assert a.loss_csv() == b.loss_csv()
    assert a.phi.digest() == b.phi.digest()
    assert len(a.history) == a.epoch == 3
    assert a.loss_csv().splitlines()[0] == "epoch,task_id,main_loss,aux_loss_x,aux_loss_y,aux_loss_xx,aux_loss_yy"


def test_meta_test_keeps_phi_frozen_and_is_deterministic(suite):
    obj = RolloutObjective(SPEC)
    phi = meta_train(suite, small_cfg("modular"), obj).phi
    digest = phi.digest()
    cfg = small_cfg("modular")
    r1 = meta_test(phi, suite[0], cfg, obj, task_index=2)
    r2 = meta_test(phi, suite[0], cfg, obj, task_index=2)
    assert phi.digest() == digest
    assert _values(r1.phi) == _values(phi)
    assert r1.test_mse == r2.test_mse and r1.theta.digest() == r2.theta.digest()


def test_constant_task_scores_zero_without_training():
    coords = np.random.default_rng(2).uniform(0, 6, size=(9, 2))
    task = TaskDataset(knn_graph(coords, 4), np.full((8, 9), -1.2), np.zeros((8, 9, 4)), 0.01, 5, task_id="c")
    obj = RolloutObjective(SPEC)
    phi, _ = fresh_init(obj, 0, 0)
    assert meta_test(phi, task, small_cfg("modular", adapt_epochs=0), obj).test_mse == 0.0
    assert baseline_scratch(task, small_cfg("scratch", adapt_epochs=0), obj).test_mse == 0.0


def test_best_checkpoint_never_worse_than_start(suite):
    obj = RolloutObjective(SPEC)
    res = baseline_scratch(suite[1], small_cfg("scratch", adapt_epochs=15, adapt_lr=1e-2), obj)
    assert res.train_curve[res.best_epoch] == min(res.train_curve) <= res.train_curve[0]
    again = baseline_scratch(suite[1], small_cfg("scratch", adapt_epochs=15, adapt_lr=1e-2), obj)
    assert again.test_mse == res.test_mse


def test_weight_init_from_fresh_weights_equals_scratch(suite):
    obj = RolloutObjective(SPEC)
    cfg = small_cfg("weight_init", adapt_epochs=5)
    phi, theta = fresh_init(obj, cfg.seed, 0)
    from_ckpt = baseline_weight_init(MetaState(phi, {"shared": theta}), suite[0], cfg, obj)
    scratch = baseline_scratch(suite[0], cfg, obj, task_index=0)
    assert from_ckpt.test_mse == scratch.test_mse
    with pytest.raises(ValueError):
        baseline_weight_init(None, suite[0], cfg, obj)


def test_evaluate_checkpoint_shares_the_adaptation_path(suite):
    obj = RolloutObjective(SPEC)
    cfg = small_cfg("scratch", adapt_epochs=4)
    via_eval = evaluate_checkpoint("scratch", obj, None, None, suite, 3, cfg)
    direct = [baseline_scratch(t, cfg, obj, task_index=i, split_k=3).test_mse for i, t in enumerate(suite)]
    assert via_eval == direct


def test_adaptation_does_not_touch_inputs(suite):
    obj = RolloutObjective(SPEC)
    phi, theta = fresh_init(obj, 1, 1)
    before = (phi.digest(), theta.digest())
    adapt_and_evaluate(obj, suite[2], phi, theta, True, 3)
    assert (phi.digest(), theta.digest()) == before


def test_pretraining_reduces_loss():
    rng = np.random.default_rng(5)
    tasks = [random_task(10, rng, n_frames=6, task_id=f"p{i}") for i in range(2)]
    state = pretrain(tasks, MetaConfig(variant="weight_init", epochs=60, batch_tasks=2, alpha=1e-2, seed=0),
                     RolloutObjective(SPEC))
    first, last = state.history[0], state.history[-1]
    assert last["main"] + sum(last["aux"]) < first["main"] + sum(first["aux"])


# -- desk-scale training runs ----------------------------------------------------


@pytest.fixture(scope="module")
def desk_suite():
    cfg = load_preset("desk")
    return make_meta_suite(cfg.metatrain.suite_config(cfg.suite_seed("metatrain"), "metatrain")), cfg


def _suite_aux(obj, phi, tasks):
    params = {k: Tensor(v) for k, v in phi.entries.items()}
    return float(np.mean([np.mean([float(a.value) for a in obj.aux_losses(params, t, slice(t.split_k, t.n_frames))])
                          for t in tasks]))


def test_desk_meta_training_halves_aux_error(desk_suite):
    tasks, run = desk_suite
    obj = RolloutObjective(run.model.spec("padgn"))
    cfg = run.meta.meta_config("modular", run.seed, 1)
    start = _suite_aux(obj, meta_train(tasks, MetaConfig(**{**cfg.to_dict(), "epochs": 0}), obj).phi, tasks)
    state = meta_train(tasks, cfg, obj)
    assert len(state.history) == 200
    assert _suite_aux(obj, state.phi, tasks) < 0.5 * start


def test_desk_maml_history_is_finite(desk_suite):
    tasks, run = desk_suite
    obj = RolloutObjective(run.model.spec("padgn"))
    state = meta_train(tasks, run.meta.meta_config("maml", run.seed, 1), obj)
    assert len(state.history) == 200
    assert all(np.isfinite(h["main"]) and np.all(np.isfinite(h["aux"])) for h in state.history)
