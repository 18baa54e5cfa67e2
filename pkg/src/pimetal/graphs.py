"""Sensor graphs and few-shot tasks sampled from grid simulations.

Task directory layout (also the ingestion format for external data)::

    nodes.csv   id,x,y
    edges.csv   src,dst
    frames.csv  t_index,node_id,u,u_x,u_y,u_xx,u_yy   (derivative columns may be empty)
    extras.csv  t_index,node_id,f_0,...               (optional observed features)
    meta.json   T, N, dt, split_k, provenance, format_version
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .pde import GridField, PdeConfig, simulate

TASK_FORMAT_VERSION = 1
AUX_NAMES = ("u_x", "u_y", "u_xx", "u_yy")


@dataclass
class SpatialGraph:
    coords: np.ndarray  # [N, 2]
    src: np.ndarray  # [E]
    dst: np.ndarray  # [E]
    k_neighbors: int

    @property
    def n_nodes(self) -> int:
        return self.coords.shape[0]

    @property
    def n_edges(self) -> int:
        return self.src.shape[0]

    def out_degree(self) -> np.ndarray:
        return np.bincount(self.src, minlength=self.n_nodes)

    def relabel(self, perm: np.ndarray) -> SpatialGraph:
        """Graph with node ``i`` renamed to ``perm[i]``."""
        inv = np.argsort(perm)
        return SpatialGraph(self.coords[inv], perm[self.src], perm[self.dst], self.k_neighbors)


@dataclass
class TaskDataset:
    graph: SpatialGraph
    frames: np.ndarray  # [T, N]
    aux: np.ndarray | None  # [T, N, 4]
    dt: float
    split_k: int
    meta: dict = field(default_factory=dict)
    extra: np.ndarray | None = None  # [T, N, F]
    task_id: str = "task"

    def __post_init__(self):
        T, N = self.frames.shape
        if N != self.graph.n_nodes:
            raise ValueError(f"frames have {N} nodes but graph has {self.graph.n_nodes}")
        if not 1 <= self.split_k <= T - 1:
            raise ValueError(f"split_k must be in [1, {T - 1}], got {self.split_k}")
        if self.aux is not None and self.aux.shape != (T, N, 4):
            raise ValueError(f"aux shape {self.aux.shape} does not match frames {(T, N)} x 4")
        if self.extra is not None and self.extra.shape[:2] != (T, N):
            raise ValueError(f"extra shape {self.extra.shape} does not match frames {(T, N)}")

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def n_nodes(self) -> int:
        return self.frames.shape[1]

    @property
    def n_extra(self) -> int:
        return 0 if self.extra is None else self.extra.shape[2]

    def with_split(self, split_k: int) -> TaskDataset:
        return TaskDataset(self.graph, self.frames, self.aux, self.dt, split_k,
                           dict(self.meta, split_k=split_k), self.extra, self.task_id)

    def digest(self) -> str:
        h = hashlib.sha256()
        for name, content in sorted(task_files(self).items()):
            h.update(name.encode())
            h.update(content.encode())
        return h.hexdigest()


def sample_nodes(grid: GridField, n_nodes: int, rng: np.random.Generator) -> np.ndarray:
    """Distinct flat cell indices drawn uniformly without replacement."""
    n_cells = grid.grid_n ** 2
    if n_nodes > n_cells:
        raise ValueError(f"cannot sample {n_nodes} nodes from {n_cells} grid cells")
    if n_nodes < 1:
        raise ValueError("n_nodes must be positive")
    return rng.choice(n_cells, size=n_nodes, replace=False)


def knn_graph(coords: np.ndarray, k: int, periodic_domain: float | None = None) -> SpatialGraph:
    """Directed k-NN graph; ties broken by (distance, node id)."""
    coords = np.asarray(coords, dtype=float)
    n = coords.shape[0]
    if not 0 < k < n:
        raise ValueError(f"k must satisfy 0 < k < N; got k={k}, N={n}")
    diff = coords[None, :, :] - coords[:, None, :]
    if periodic_domain is not None:
        diff = diff - periodic_domain * np.round(diff / periodic_domain)
    d2 = diff[..., 0] * diff[..., 0] + diff[..., 1] * diff[..., 1]
    np.fill_diagonal(d2, np.inf)
    order = np.argsort(d2, axis=1, kind="stable")[:, :k]
    src = np.repeat(np.arange(n), k)
    return SpatialGraph(coords, src, order.reshape(-1), k)


def build_task(grid: GridField, n_nodes: int, k_neighbors: int, split_k: int,
               rng: np.random.Generator, task_id: str = "task") -> TaskDataset:
    if not 1 <= split_k <= grid.n_frames - 1:
        raise ValueError(f"split_k must be in [1, {grid.n_frames - 1}], got {split_k}")
    cells = sample_nodes(grid, n_nodes, rng)
    ix, iy = np.unravel_index(cells, (grid.grid_n, grid.grid_n))
    coords = np.stack([grid.x[ix, iy], grid.y[ix, iy]], axis=1)
    graph = knn_graph(coords, k_neighbors)
    frames = grid.frames[:, ix, iy]
    aux = np.moveaxis(grid.derivs[:, :, ix, iy], 1, 2)
    meta = {
        "source": "synthetic",
        "solver": grid.solver,
        "pde_config": grid.config.to_dict() if grid.config else None,
        "pde_hash": grid.config.digest() if grid.config else None,
        "cells": cells.tolist(),
    }
    return TaskDataset(graph, frames, aux, grid.dt_save, split_k, meta, None, task_id)


@dataclass(frozen=True)
class SuiteConfig:
    pde: PdeConfig
    n_tasks: int
    n_nodes: int | tuple[int, int]
    k_neighbors: int = 4
    split_k: int = 5
    seed: int = 0
    name: str = "suite"


def _task_seeds(seed: int, n_tasks: int) -> list[tuple[int, np.random.Generator]]:
    out = []
    for child in np.random.SeedSequence(seed).spawn(n_tasks):
        pde_seed = int(child.generate_state(1, dtype=np.uint32)[0])
        out.append((pde_seed, np.random.default_rng(child)))
    return out


def make_meta_suite(cfg: SuiteConfig) -> list[TaskDataset]:
    """``cfg.n_tasks`` tasks, each from an independently seeded simulation."""
    if cfg.n_tasks < 1:
        raise ValueError("a suite needs at least one task")
    tasks = []
    for i, (pde_seed, rng) in enumerate(_task_seeds(cfg.seed, cfg.n_tasks)):
        pde = PdeConfig(**dict(cfg.pde.to_dict(), seed=pde_seed))
        grid = simulate(pde)
        if isinstance(cfg.n_nodes, int):
            n_nodes = cfg.n_nodes
        else:
            lo, hi = cfg.n_nodes
            n_nodes = int(rng.integers(lo, hi + 1))
        task = build_task(grid, n_nodes, cfg.k_neighbors, cfg.split_k, rng, f"{cfg.name}-{i:03d}")
        task.meta.update(sampling_seed=cfg.seed, task_index=i)
        tasks.append(task)
    return tasks


# -- serialization ----------------------------------------------------------


def _fmt(x: float) -> str:
    return "%.17g" % x


def _csv_text(header: list[str], rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def task_files(task: TaskDataset) -> dict[str, str]:
    g = task.graph
    files = {
        "nodes.csv": _csv_text(["id", "x", "y"], ([i, _fmt(x), _fmt(y)] for i, (x, y) in enumerate(g.coords))),
        "edges.csv": _csv_text(["src", "dst"], zip(g.src.tolist(), g.dst.tolist())),
    }
    T, N = task.frames.shape
    rows = []
    for t in range(T):
        for i in range(N):
            aux = [""] * 4 if task.aux is None else [_fmt(v) for v in task.aux[t, i]]
            rows.append([t, i, _fmt(task.frames[t, i])] + aux)
    files["frames.csv"] = _csv_text(["t_index", "node_id", "u", *AUX_NAMES], rows)
    if task.extra is not None:
        F = task.extra.shape[2]
        files["extras.csv"] = _csv_text(
            ["t_index", "node_id"] + [f"f_{j}" for j in range(F)],
            ([t, i] + [_fmt(v) for v in task.extra[t, i]] for t in range(T) for i in range(N)))
    meta = {
        "format_version": TASK_FORMAT_VERSION,
        "task_id": task.task_id,
        "T": T,
        "N": N,
        "dt": task.dt,
        "split_k": task.split_k,
        "k_neighbors": g.k_neighbors,
        "n_extra": task.n_extra,
        "provenance": task.meta,
    }
    files["meta.json"] = json.dumps(meta, indent=1, sort_keys=True) + "\n"
    return files


def save_task(task: TaskDataset, directory: str | Path) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for name, content in task_files(task).items():
        (directory / name).write_text(content)
    return directory


def _read_rows(path: Path) -> tuple[list[str], list[list[str]]]:
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        return header, list(reader)


def load_task(directory: str | Path) -> TaskDataset:
    directory = Path(directory)
    meta = json.loads((directory / "meta.json").read_text())
    if meta.get("format_version") != TASK_FORMAT_VERSION:
        raise ValueError(f"{directory}: unsupported task format version {meta.get('format_version')}")
    _, node_rows = _read_rows(directory / "nodes.csv")
    node_rows.sort(key=lambda r: int(r[0]))
    if [int(r[0]) for r in node_rows] != list(range(len(node_rows))):
        raise ValueError(f"{directory}: node ids must be 0..N-1")
    coords = np.array([[float(r[1]), float(r[2])] for r in node_rows])
    _, edge_rows = _read_rows(directory / "edges.csv")
    edges = np.array([[int(r[0]), int(r[1])] for r in edge_rows], dtype=np.intp).reshape(-1, 2)
    T, N = int(meta["T"]), len(node_rows)
    frames = np.zeros((T, N))
    aux = np.zeros((T, N, 4))
    have_aux = True
    _, frame_rows = _read_rows(directory / "frames.csv")
    if len(frame_rows) != T * N:
        raise ValueError(f"{directory}: expected {T * N} frame rows, found {len(frame_rows)}")
    for r in frame_rows:
        t, i = int(r[0]), int(r[1])
        frames[t, i] = float(r[2])
        if len(r) < 7 or any(v == "" for v in r[3:7]):
            have_aux = False
        else:
            aux[t, i] = [float(v) for v in r[3:7]]
    extra = None
    if (directory / "extras.csv").exists():
        header, rows = _read_rows(directory / "extras.csv")
        extra = np.zeros((T, N, len(header) - 2))
        for r in rows:
            extra[int(r[0]), int(r[1])] = [float(v) for v in r[2:]]
    k = int(meta.get("k_neighbors", 0)) or int(np.bincount(edges[:, 0], minlength=N).max())
    graph = SpatialGraph(coords, edges[:, 0].copy(), edges[:, 1].copy(), k)
    return TaskDataset(graph, frames, aux if have_aux else None, float(meta["dt"]), int(meta["split_k"]),
                       meta.get("provenance", {}), extra, meta.get("task_id", directory.name))


def save_suite(tasks: list[TaskDataset], directory: str | Path, config: dict | None = None) -> dict:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for task in tasks:
        save_task(task, directory / task.task_id)
        entries.append({"task_id": task.task_id, "hash": task.digest(),
                        "pde_seed": (task.meta.get("pde_config") or {}).get("seed")})
    manifest = {"format_version": TASK_FORMAT_VERSION, "n_tasks": len(tasks), "tasks": entries,
                "config": config}
    blob = json.dumps(manifest, sort_keys=True).encode()
    manifest["manifest_hash"] = hashlib.sha256(blob).hexdigest()
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return manifest


def load_suite(directory: str | Path) -> list[TaskDataset]:
    directory = Path(directory)
    manifest_path = directory / "manifest.json"
    if manifest_path.exists():
        manifest = json.loads(manifest_path.read_text())
        ids = [e["task_id"] for e in manifest["tasks"]]
    else:
        ids = sorted(p.name for p in directory.iterdir() if (p / "meta.json").exists())
    if not ids:
        raise FileNotFoundError(f"no tasks found in {directory}")
    return [load_task(directory / i) for i in ids]
