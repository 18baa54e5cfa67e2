"""Run configuration: one nested YAML/JSON document per experiment.

Defaults follow the published settings where those exist. Unknown keys are an
error at every nesting level, so a typo never silently falls back to a
default.
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from importlib import resources
from pathlib import Path

import yaml

from .graphs import SuiteConfig
from .meta import MetaConfig
from .models import DEFAULT_OPERATORS, ModelSpec
from .pde import PdeConfig

PRESETS = ("paper-metatrain", "paper-metatest", "desk")

# methods a pipeline can run: (model kind, variant)
METHODS = {
    "padgn-modular": ("padgn", "modular"),
    "padgn-maml": ("padgn", "maml"),
    "padgn-scratch": ("padgn", "scratch"),
    "rgn-scratch": ("rgn", "scratch"),
    "padgn-weight_init": ("padgn", "weight_init"),
    "rgn-weight_init": ("rgn", "weight_init"),
}


class ConfigError(ValueError):
    pass


@dataclass
class SuiteSection:
    n_tasks: int
    n_nodes: int | list[int]
    k_neighbors: int = 4
    split_k: int = 5
    pde: dict = field(default_factory=dict)  # PdeConfig overrides

    def pde_config(self) -> PdeConfig:
        return PdeConfig(**self.pde)

    def suite_config(self, seed, name: str) -> SuiteConfig:
        nodes = self.n_nodes if isinstance(self.n_nodes, int) else tuple(self.n_nodes)
        return SuiteConfig(self.pde_config(), self.n_tasks, nodes, self.k_neighbors, self.split_k, seed, name)


def _default_metatrain() -> SuiteSection:
    return SuiteSection(n_tasks=100, n_nodes=246, pde={"lam": 1.0, "diff_coeff": 0.2})


def _default_metatest() -> SuiteSection:
    return SuiteSection(n_tasks=10, n_nodes=[150, 400], pde={"lam": 0.8, "diff_coeff": 0.1})


@dataclass
class ModelSection:
    sdm_hidden: int = 64
    tdm_hidden: int = 64
    rgn_hidden: int = 73
    operators: list[str] = field(default_factory=lambda: list(DEFAULT_OPERATORS))

    def spec(self, kind: str, n_extra: int = 0) -> ModelSpec:
        return ModelSpec(kind, self.sdm_hidden, self.tdm_hidden, self.rgn_hidden, tuple(self.operators), n_extra)


@dataclass
class MetaSection:
    alpha: float = 1e-3
    beta: float = 1e-3
    batch_tasks: int = 1
    inner_steps: int = 1
    epochs: int = 200
    aux_weight: float = 1.0
    outer_optimizer: str = "adam"
    inner_optimizer: str = "adam"
    adapt_epochs: int = 300
    adapt_lr: float = 1e-3
    finetune_phi: bool = False

    def meta_config(self, variant: str, seed: int, threads: int) -> MetaConfig:
        return MetaConfig(variant=variant, seed=seed, threads=threads, **asdict(self))


@dataclass
class EvaluateSection:
    shots: list[int] = field(default_factory=lambda: [5, 10])
    methods: list[str] = field(default_factory=lambda: list(METHODS))


@dataclass
class RunConfig:
    seed: int = 0
    threads: int = 1
    metatrain: SuiteSection | None = field(default_factory=_default_metatrain)
    metatest: SuiteSection | None = field(default_factory=_default_metatest)
    model: ModelSection = field(default_factory=ModelSection)
    meta: MetaSection = field(default_factory=MetaSection)
    evaluate: EvaluateSection = field(default_factory=EvaluateSection)

    def validate(self) -> RunConfig:
        if self.threads < 1:
            raise ConfigError("threads must be >= 1")
        for name in ("metatrain", "metatest"):
            sec = getattr(self, name)
            if sec is None:
                continue
            try:
                sec.pde_config()
            except TypeError as exc:
                raise ConfigError(f"{name}.pde: {exc}") from None
            except ValueError as exc:
                raise ConfigError(f"{name}.pde: {exc}") from None
            if isinstance(sec.n_nodes, list) and (len(sec.n_nodes) != 2 or sec.n_nodes[0] > sec.n_nodes[1]):
                raise ConfigError(f"{name}.n_nodes range must be [lo, hi]")
        bad = [m for m in self.evaluate.methods if m not in METHODS]
        if bad:
            raise ConfigError(f"unknown methods {bad}; choose from {sorted(METHODS)}")
        if not self.evaluate.shots:
            raise ConfigError("evaluate.shots must not be empty")
        try:
            self.meta.meta_config("modular", self.seed, self.threads)
        except ValueError as exc:
            raise ConfigError(f"meta: {exc}") from None
        return self

    def suite_seed(self, which: str) -> tuple[int, int]:
        # independent streams per suite, distinct for every master seed
        return (self.seed, {"metatrain": 0, "metatest": 1}[which])

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()

    def dump(self) -> str:
        # threads only changes scheduling, never results, so snapshots omit it
        data = self.to_dict()
        data.pop("threads")
        return yaml.safe_dump(data, sort_keys=False)


_SECTIONS = {
    "metatrain": SuiteSection,
    "metatest": SuiteSection,
    "model": ModelSection,
    "meta": MetaSection,
    "evaluate": EvaluateSection,
}
_PDE_KEYS = {f.name for f in fields(PdeConfig)} - {"seed"}


def _build(cls, data, where: str, base=None):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected a mapping, got {type(data).__name__}")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {unknown}")
    values = asdict(base) if base is not None else {}
    for k, v in data.items():
        if k == "pde":
            if not isinstance(v, dict):
                raise ConfigError(f"{where}.pde: expected a mapping")
            bad = sorted(set(v) - _PDE_KEYS)
            if bad:
                raise ConfigError(f"{where}.pde: unknown key(s) {bad}")
            merged = dict(values.get("pde") or {})
            merged.update(v)
            v = merged
        values[k] = v
    try:
        return cls(**values)
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from None


def from_dict(data: dict | None, base: RunConfig | None = None) -> RunConfig:
    """Overlay ``data`` on ``base`` (or the defaults); nested sections merge key by key."""
    data = data or {}
    if not isinstance(data, dict):
        raise ConfigError("config document must be a mapping")
    base = copy.deepcopy(base) if base is not None else RunConfig()
    unknown = sorted(set(data) - {f.name for f in fields(RunConfig)})
    if unknown:
        raise ConfigError(f"unknown top-level key(s) {unknown}")
    for key, value in data.items():
        if key in _SECTIONS:
            if value is None:
                if key not in ("metatrain", "metatest"):
                    raise ConfigError(f"section {key!r} cannot be null")
                setattr(base, key, None)
                continue
            current = getattr(base, key)
            if current is None:
                current = {"metatrain": _default_metatrain, "metatest": _default_metatest}[key]()
            setattr(base, key, _build(_SECTIONS[key], value, key, current))
        else:
            setattr(base, key, value)
    return base.validate()


def load_preset(name: str) -> RunConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {list(PRESETS)}")
    text = resources.files("pimetal.presets").joinpath(f"{name}.yaml").read_text()
    return from_dict(yaml.safe_load(text))


def load_config(path: str | Path, base: RunConfig | None = None) -> RunConfig:
    path = Path(path)
    try:
        data = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: not valid YAML/JSON ({exc})") from None
    return from_dict(data, base)
