"""Small synthetic tasks and model gradient checks used by the CLI and tests."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import GradcheckReport, ParamStore
from .graphs import TaskDataset, knn_graph
from .meta import RolloutObjective
from .models import ModelSpec

TWO_PI = 2.0 * np.pi


def random_task(n_nodes: int, rng: np.random.Generator, n_frames: int = 5, k: int = 4,
                split_k: int = 3, dt: float = 0.01, task_id: str = "rand") -> TaskDataset:
    """A task on random points with smooth-ish random signals and labels."""
    coords = rng.uniform(0.0, TWO_PI, size=(n_nodes, 2))
    graph = knn_graph(coords, min(k, n_nodes - 1))
    base = np.sin(coords[:, 0]) * np.cos(coords[:, 1])
    drift = rng.normal(0.0, 0.3, size=n_nodes)
    frames = np.stack([base + 0.1 * t * drift for t in range(n_frames)])
    frames += 0.05 * rng.normal(size=frames.shape)
    aux = rng.normal(0.0, 0.5, size=(n_frames, n_nodes, 4))
    return TaskDataset(graph, frames, aux, dt, split_k, {"source": "random"}, None, task_id)


def randomize(store: ParamStore, rng: np.random.Generator, scale: float = 0.3) -> ParamStore:
    """Perturb every entry so zero-initialised heads do not hide gradients."""
    out = store.copy()
    for k, v in out.entries.items():
        out.entries[k] = v + scale * rng.normal(size=v.shape)
    return out


@dataclass
class ModelGradcheck:
    kind: str
    loss: str
    report: GradcheckReport


def model_gradchecks(kind: str, n_nodes: int = 10, seed: int = 0, hidden: int = 2,
                     eps: float = 1e-5, tol: float = 1e-4) -> list[ModelGradcheck]:
    """Gradient checks of the train, test and (PA-DGN only) auxiliary losses
    with respect to every parameter of ``kind`` in {"padgn", "rgn"}."""
    rng = np.random.default_rng(seed)
    spec = ModelSpec(kind, sdm_hidden=hidden, tdm_hidden=hidden, rgn_hidden=hidden)
    obj = RolloutObjective(spec)
    task = random_task(n_nodes, rng)
    phi = randomize(obj.init_phi(rng), rng)
    theta = randomize(obj.init_theta(rng), rng)
    # one joint store so a single check covers phi and theta together
    joint = ParamStore()
    for src in (phi, theta):
        for k, v in src.entries.items():
            joint.add(k, v)
    phi_names, theta_names = set(phi.entries), set(theta.entries)

    def split(p):
        return ({k: v for k, v in p.items() if k in phi_names},
                {k: v for k, v in p.items() if k in theta_names})

    def train(p):
        pp, tp = split(p)
        return obj.train_loss(pp, tp, task)

    def test(p):
        pp, tp = split(p)
        return obj.test_loss(pp, tp, task)

    losses = [("train", train), ("test", test)]
    if spec.uses_sdm:
        def aux(p):
            pp, _ = split(p)
            total = None
            for term in obj.aux_losses(pp, task, slice(0, task.n_frames)):
                total = term if total is None else ad.add(total, term)
            return total

        losses.append(("aux", aux))
    out = []
    for name, fn in losses:
        names = sorted(phi_names) if name == "aux" else None
        out.append(ModelGradcheck(kind, name, ad.gradcheck(fn, joint, names=names, eps=eps, tol=tol)))
    return out
