"""Command-line entry point: ``pimetal <command> ...``.

Commands write into ``<out>.incomplete`` and rename to ``<out>`` only when the
whole command succeeded, so a directory without the suffix is always complete.
Wall-clock timings go to ``timing.log``; every other output file is a pure
function of (config, seed).
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import io
import json
import logging
import shutil
import sys
import time
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import __version__
from .autodiff import ParamStore, load_params, save_params
from .checks import model_gradchecks
from .config import METHODS, ConfigError, RunConfig, from_dict, load_config, load_preset, PRESETS
from .fdm import format_exact, solve_coefficients
from .graphs import TaskDataset, load_suite, make_meta_suite, save_suite
from .meta import MetaState, RolloutObjective, evaluate_checkpoint, meta_train, method_label, pretrain

log = logging.getLogger("pimetal")

MARKER = ".pimetal-output"
METRIC_COLUMNS = ["task_id", "shots", "method", "test_mse"]


class CommandError(RuntimeError):
    pass


# -- output handling --------------------------------------------------------


@contextlib.contextmanager
def staged_output(out: str | Path):
    """Yield a scratch directory that replaces ``out`` on success.

    A failure leaves the partial results in ``<out>.incomplete``. An existing
    ``out`` is only replaced if an earlier command created it.
    """
    out = Path(out)
    if out.exists() and not (out / MARKER).exists():
        raise CommandError(f"{out} exists and was not written by pimetal; refusing to overwrite")
    tmp = out.with_name(out.name + ".incomplete")
    if tmp.exists():
        shutil.rmtree(tmp)
    tmp.mkdir(parents=True)
    (tmp / MARKER).write_text("pimetal output directory\n")
    yield tmp
    if out.exists():
        shutil.rmtree(out)
    tmp.rename(out)


class Timer:
    def __init__(self):
        self.lines: list[str] = []

    @contextlib.contextmanager
    def __call__(self, label: str):
        t0 = time.perf_counter()
        yield
        dt = time.perf_counter() - t0
        self.lines.append(f"{label}\t{dt:.3f}s")
        log.info("%s took %.2fs", label, dt)

    def write(self, directory: Path) -> None:
        stamp = time.strftime("%Y-%m-%dT%H:%M:%S")
        (directory / "timing.log").write_text(f"# {stamp}\n" + "\n".join(self.lines) + "\n")


def _write_json(path: Path, data) -> None:
    path.write_text(json.dumps(data, indent=1, sort_keys=True) + "\n")


# -- configuration ----------------------------------------------------------


def resolve_config(args) -> RunConfig:
    base = load_preset(args.preset) if getattr(args, "preset", None) else RunConfig()
    cfg = load_config(args.config, base) if getattr(args, "config", None) else base
    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "threads", None) is not None:
        overrides["threads"] = args.threads
    return from_dict(overrides, cfg)


# -- generate ---------------------------------------------------------------


def generate_suites(cfg: RunConfig, dest: Path) -> dict[str, tuple[list[TaskDataset], dict]]:
    out = {}
    for which in ("metatrain", "metatest"):
        sec = getattr(cfg, which)
        if sec is None:
            continue
        seed = cfg.suite_seed(which)
        tasks = make_meta_suite(sec.suite_config(seed, which))
        section = cfg.to_dict()[which]
        section["pde"] = {k: v for k, v in sec.pde_config().to_dict().items() if k != "seed"}
        manifest = save_suite(tasks, dest / which, config={
            "suite": which, "seed": list(seed), "section": section, "shots": list(cfg.evaluate.shots)})
        out[which] = (tasks, manifest)
    return out


def cmd_generate(args) -> int:
    cfg = resolve_config(args)
    patch = {}
    for which in ("metatrain", "metatest"):
        if getattr(cfg, which) is None:
            continue
        sec = {}
        if args.tasks is not None:
            sec["n_tasks"] = args.tasks
        if args.nodes is not None:
            sec["n_nodes"] = args.nodes
        if sec:
            patch[which] = sec
    cfg = from_dict(patch, cfg)
    if cfg.metatrain is None and cfg.metatest is None:
        raise CommandError("config defines no suite to generate")
    out = Path(args.out or "suites")
    timer = Timer()
    with staged_output(out) as tmp:
        with timer("generate"):
            suites = generate_suites(cfg, tmp)
        (tmp / "config.yaml").write_text(cfg.dump())
        timer.write(tmp)
    for which, (tasks, manifest) in suites.items():
        nodes = sorted({t.n_nodes for t in tasks})
        print(f"{which}: {len(tasks)} tasks, T={tasks[0].n_frames}, nodes {nodes[0]}..{nodes[-1]}, "
              f"k={tasks[0].graph.k_neighbors} -> {out / which} (manifest {manifest['manifest_hash'][:12]})")
    return 0


# -- train ------------------------------------------------------------------


def _suite_hash(directory: Path) -> str | None:
    path = Path(directory) / "manifest.json"
    return json.loads(path.read_text()).get("manifest_hash") if path.exists() else None


def train_run(cfg: RunConfig, kind: str, variant: str, suite: list[TaskDataset] | None,
              dest: Path, suite_hash: str | None = None) -> MetaState | None:
    """Train one method and write its run directory into ``dest``."""
    if variant in ("modular", "maml") and kind != "padgn":
        raise CommandError(f"variant {variant!r} meta-trains spatial modules and needs model 'padgn'")
    n_extra = suite[0].n_extra if suite else 0
    spec = cfg.model.spec(kind, n_extra)
    mcfg = cfg.meta.meta_config(variant, cfg.seed, cfg.threads)
    objective = RolloutObjective(spec)
    state = None
    if variant in ("modular", "maml"):
        state = meta_train(suite, mcfg, objective)
    elif variant == "weight_init":
        state = pretrain(suite, mcfg, objective)
    dest.mkdir(parents=True, exist_ok=True)
    (dest / "config.yaml").write_text(cfg.dump())
    meta = {
        "format_version": 1,
        "package_version": __version__,
        "model": kind,
        "variant": variant,
        "method": method_label(kind, variant),
        "model_spec": spec.to_dict(),
        "meta_config": mcfg.to_dict() | {"threads": None},
        "first_order_maml": mcfg.first_order,
        "outer_update": mcfg.outer_optimizer,
        "seed": cfg.seed,
        "suite_manifest_hash": suite_hash,
        "epochs_completed": state.epoch if state else 0,
    }
    if state is not None:
        (dest / "phi.ckpt").write_bytes(save_params(state.phi))
        meta["phi_digest"] = state.phi.digest()
        if variant == "weight_init":
            (dest / "theta.ckpt").write_bytes(save_params(state.thetas["shared"]))
        else:
            tdir = dest / "thetas"
            tdir.mkdir()
            for tid in sorted(state.thetas):
                (tdir / f"{tid}.ckpt").write_bytes(save_params(state.thetas[tid]))
        (dest / "losses.csv").write_text(state.loss_csv(spec.operators))
    _write_json(dest / "metadata.json", meta)
    return state


def cmd_train(args) -> int:
    variant = args.variant
    if variant == "scratch":
        used = [f"--{name}" for name in ("suite", "beta", "epochs") if getattr(args, name) is not None]
        if used:
            raise CommandError(f"train --variant scratch has no meta-training stage; it does not accept "
                               f"{', '.join(used)}")
    elif args.suite is None:
        raise CommandError(f"train --variant {variant} needs --suite (a meta-train suite directory)")
    cfg = resolve_config(args)
    patch = {}
    if args.beta is not None:
        patch["beta"] = args.beta
    if args.epochs is not None:
        patch["epochs"] = args.epochs
    if patch:
        cfg = from_dict({"meta": patch}, cfg)
    suite = load_suite(args.suite) if args.suite else None
    out = Path(args.out or f"runs/{args.model}-{variant}")
    timer = Timer()
    with staged_output(out) as tmp:
        with timer(f"train {args.model}-{variant}"):
            state = train_run(cfg, args.model, variant, suite, tmp, _suite_hash(args.suite) if args.suite else None)
        timer.write(tmp)
    if state is not None and state.history:
        last = state.history[-1]
        aux = " aux=" + " ".join(f"{a:.4g}" for a in last["aux"]) if last["aux"] else ""
        print(f"{method_label(args.model, variant)}: {state.epoch} epochs, last main={last['main']:.6g}{aux}")
    print(f"run written to {out}")
    return 0


# -- evaluate ---------------------------------------------------------------


def load_run(directory: str | Path):
    directory = Path(directory)
    if not (directory / "metadata.json").exists():
        raise CommandError(f"{directory} is not a run directory (no metadata.json)")
    meta = json.loads((directory / "metadata.json").read_text())
    cfg = load_config(directory / "config.yaml")
    phi = theta = None
    if (directory / "phi.ckpt").exists():
        phi = load_params((directory / "phi.ckpt").read_bytes())
    if (directory / "theta.ckpt").exists():
        theta = load_params((directory / "theta.ckpt").read_bytes())
    return meta, cfg, phi, theta


def _check_compatible(meta: dict, tasks: list[TaskDataset]) -> None:
    want = meta["model_spec"]["n_extra"]
    for t in tasks:
        if t.n_extra != want:
            raise CommandError(f"extra-feature dimension mismatch: checkpoint expects n_extra={want}, "
                               f"task {t.task_id} has n_extra={t.n_extra}")


def _check_store(store: ParamStore | None, meta: dict, what: str) -> None:
    if store is None:
        return
    spec = store.meta.get("spec")
    if spec is not None and spec != meta["model_spec"]:
        raise CommandError(f"{what} was built for model spec {spec}, run metadata says {meta['model_spec']}")


def evaluate_runs(runs: list[tuple[dict, RunConfig, ParamStore | None, ParamStore | None]],
                  tasks: list[TaskDataset], shots: list[int], threads: int) -> list[dict]:
    rows = []
    for meta, cfg, phi, theta in runs:
        _check_compatible(meta, tasks)
        _check_store(phi, meta, "phi checkpoint")
        _check_store(theta, meta, "theta checkpoint")
        spec = cfg.model.spec(meta["model"], meta["model_spec"]["n_extra"])
        objective = RolloutObjective(spec)
        mcfg = cfg.meta.meta_config(meta["variant"], cfg.seed, threads)
        for k in shots:
            for t in tasks:
                if not 2 <= k <= t.n_frames - 1:
                    raise CommandError(f"shots={k} is invalid for task {t.task_id} with T={t.n_frames}")
            mses = evaluate_checkpoint(meta["variant"], objective, phi, theta, tasks, k, mcfg)
            for t, m in zip(tasks, mses):
                rows.append({"task_id": t.task_id, "shots": k, "method": meta["method"], "test_mse": m})
    return rows


def summarize(rows: list[dict]) -> list[dict]:
    order: dict = {}
    for r in rows:
        order.setdefault((r["method"], r["shots"]), []).append(r["test_mse"])
    return [{"method": m, "shots": k, "mean_test_mse": float(np.mean(v)), "n_tasks": len(v)}
            for (m, k), v in order.items()]


def metrics_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRIC_COLUMNS)
    for r in rows:
        w.writerow([r["task_id"], r["shots"], r["method"], "%.17g" % r["test_mse"]])
    return buf.getvalue()


def summary_csv(summary: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["method", "shots", "mean_test_mse", "n_tasks"])
    for s in summary:
        w.writerow([s["method"], s["shots"], "%.17g" % s["mean_test_mse"], s["n_tasks"]])
    return buf.getvalue()


def summary_table(summary: list[dict]) -> str:
    header = ("method", "shots", "mean test MSE", "tasks")
    body = [(s["method"], str(s["shots"]), "%.4e" % s["mean_test_mse"], str(s["n_tasks"])) for s in summary]
    widths = [max(len(r[i]) for r in [header] + body) for i in range(4)]
    fmt = lambda r: "  ".join([r[0].ljust(widths[0])] + [c.rjust(w) for c, w in zip(r[1:], widths[1:])])  # noqa: E731
    lines = [fmt(header), "  ".join("-" * w for w in widths)] + [fmt(r) for r in body]
    return "\n".join(lines) + "\n"


def write_metrics(dest: Path, rows: list[dict]) -> list[dict]:
    summary = summarize(rows)
    (dest / "metrics.csv").write_text(metrics_csv(rows))
    (dest / "summary.csv").write_text(summary_csv(summary))
    (dest / "summary.txt").write_text(summary_table(summary))
    return summary


def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def cmd_evaluate(args) -> int:
    runs = [load_run(r) for r in args.run]
    tasks = load_suite(args.suite)
    shots = args.shots or runs[0][1].evaluate.shots
    threads = args.threads or 1
    out = Path(args.out or "evaluation")
    timer = Timer()
    with staged_output(out) as tmp:
        with timer("evaluate"):
            rows = evaluate_runs(runs, tasks, shots, threads)
        summary = write_metrics(tmp, rows)
        timer.write(tmp)
    print(summary_table(summary), end="")
    return 0


# -- pipeline ---------------------------------------------------------------


def run_pipeline(cfg: RunConfig, dest: Path, timer: Timer | None = None) -> tuple[list[dict], list[dict]]:
    """generate -> train every configured method -> evaluate, all under ``dest``."""
    timer = timer or Timer()
    if cfg.metatest is None:
        raise CommandError("pipeline needs a metatest suite in the config")
    kinds = [METHODS[m] for m in cfg.evaluate.methods]
    needs_train = any(v != "scratch" for _, v in kinds)
    if needs_train and cfg.metatrain is None:
        raise CommandError("pipeline methods need a metatrain suite in the config")
    (dest / "config.yaml").write_text(cfg.dump())
    with timer("generate"):
        suites = generate_suites(cfg, dest / "suites")
    train_tasks = suites["metatrain"][0] if "metatrain" in suites else None
    train_hash = suites["metatrain"][1]["manifest_hash"] if "metatrain" in suites else None
    test_tasks = suites["metatest"][0]
    runs = []
    for name in cfg.evaluate.methods:
        kind, variant = METHODS[name]
        with timer(f"train {name}"):
            state = train_run(cfg, kind, variant, train_tasks if variant != "scratch" else None,
                              dest / "runs" / name, train_hash if variant != "scratch" else None)
        meta = json.loads((dest / "runs" / name / "metadata.json").read_text())
        phi = state.phi if state else None
        theta = state.thetas.get("shared") if state else None
        runs.append((meta, cfg, phi, theta))
    with timer("evaluate"):
        rows = evaluate_runs(runs, test_tasks, list(cfg.evaluate.shots), cfg.threads)
    summary = write_metrics(dest, rows)
    return rows, summary


def cmd_pipeline(args) -> int:
    cfg = resolve_config(args)
    out = Path(args.out or "pipeline")
    timer = Timer()
    with staged_output(out) as tmp:
        _, summary = run_pipeline(cfg, tmp, timer)
        timer.write(tmp)
    print(summary_table(summary), end="")
    print(f"results written to {out}")
    return 0


# -- diagnostics ------------------------------------------------------------


def cmd_gradcheck(args) -> int:
    kinds = ["padgn", "rgn"] if args.model == "all" else [args.model]
    seeds = range(args.seed, args.seed + args.repeats)
    failed = 0
    print(f"{'model':6}  {'loss':5}  {'seed':>4}  {'params':>6}  {'max rel err':>11}  result")
    for kind in kinds:
        for seed in seeds:
            for chk in model_gradchecks(kind, args.nodes, seed, args.hidden):
                rep = chk.report
                status = "ok" if rep.ok else "FAIL " + ",".join(rep.failures[:3])
                failed += not rep.ok
                print(f"{kind:6}  {chk.loss:5}  {seed:>4}  {len(rep.max_rel_error):>6}  {rep.worst():>11.3e}  {status}")
    if failed:
        print(f"{failed} gradient check(s) failed", file=sys.stderr)
        return 1
    return 0


def _parse_offset(text: str) -> Fraction:
    try:
        return Fraction(text.strip())
    except (ValueError, ZeroDivisionError):
        raise argparse.ArgumentTypeError(f"bad offset {text!r}") from None


def cmd_fdm(args) -> int:
    offsets = [_parse_offset(x) for x in args.offsets.split(",") if x.strip()]
    stencil = solve_coefficients(offsets, args.order)
    h = _parse_offset(args.h)
    if h <= 0:
        raise CommandError("--h must be positive")
    scale = h ** args.order
    print(" ".join(format_exact(c / scale) for c in stencil.coeffs))
    return 0


# -- argument parsing -------------------------------------------------------


def _add_common(p: argparse.ArgumentParser, out: bool = True) -> None:
    p.add_argument("--config", help="YAML/JSON run config, overlaid on --preset (or the defaults)")
    p.add_argument("--preset", choices=PRESETS, help="built-in config")
    p.add_argument("--seed", type=int, help="master seed")
    p.add_argument("--threads", type=int, help="worker threads for per-task work")
    if out:
        p.add_argument("--out", help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pimetal", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="progress logging on stderr")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="simulate PDE tasks and write meta-train/meta-test suites")
    _add_common(p)
    p.add_argument("--tasks", type=int, help="override n_tasks of every suite")
    p.add_argument("--nodes", type=int, help="override n_nodes of every suite")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="meta-train, pre-train or set up a from-scratch run")
    _add_common(p)
    p.add_argument("--variant", required=True, choices=["modular", "maml", "scratch", "weight_init"])
    p.add_argument("--model", default="padgn", choices=["padgn", "rgn"])
    p.add_argument("--suite", help="meta-train suite directory")
    p.add_argument("--beta", type=float, help="inner learning rate")
    p.add_argument("--epochs", type=int, help="meta-training epochs")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="adapt each run on few shots of every task and report test MSE")
    p.add_argument("--run", action="append", required=True, help="run directory (repeatable)")
    p.add_argument("--suite", required=True, help="meta-test suite directory")
    p.add_argument("--shots", type=_int_list, help="comma-separated shot counts, e.g. 5,10")
    p.add_argument("--threads", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("pipeline", help="generate -> train all methods -> evaluate")
    _add_common(p)
    p.set_defaults(func=cmd_pipeline)

    p = sub.add_parser("gradcheck", help="finite-difference check of every model gradient")
    p.add_argument("--model", default="all", choices=["padgn", "rgn", "all"])
    p.add_argument("--nodes", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--repeats", type=int, default=1, help="number of consecutive seeds")
    p.add_argument("--hidden", type=int, default=2)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("fdm", help="print finite-difference stencil weights")
    p.add_argument("--offsets", required=True, help="comma-separated offsets, e.g. -1,0,1 or -1/2,1/2")
    p.add_argument("--order", type=int, required=True)
    p.add_argument("--h", default="1", help="grid spacing (weights are divided by h**order)")
    p.set_defaults(func=cmd_fdm)
    return parser


def _glue_negative_values(argv: list[str]) -> list[str]:
    # "--offsets -1,0,1" would otherwise be read as an unknown option
    out, i = [], 0
    while i < len(argv):
        if argv[i] == "--offsets" and i + 1 < len(argv):
            out.append(f"--offsets={argv[i + 1]}")
            i += 2
            continue
        out.append(argv[i])
        i += 1
    return out


def main(argv: list[str] | None = None) -> int:
    argv = _glue_negative_values(list(sys.argv[1:] if argv is None else argv))
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (CommandError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
