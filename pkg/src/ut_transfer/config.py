"""Experiment configuration: one TOML file drives every pipeline stage.

Unknown keys are errors. Every problem is reported with its key path, e.g.
``attacks[0].epsilon``. Relative paths resolve against the config file's
directory.
"""

from __future__ import annotations

import hashlib
import os
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any

import tomli_w

from .attacks import KINDS, AttackSpec, ILAParams, TAPParams
from .models import FAMILIES
from .training import CyclicSchedule, FastFGSM, SteppedSchedule, TrainConfig

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

MNIST_ENV = "UT_TRANSFER_MNIST"
DATASET_KINDS = ("synthetic", "mnist", "cifar10")
ROLES = ("surrogate", "target")


class ConfigError(ValueError):
    def __init__(self, problems: list[str]):
        super().__init__("invalid config:\n  " + "\n  ".join(problems))
        self.problems = list(problems)


@dataclass(frozen=True)
class DatasetConfig:
    kind: str = "synthetic"
    path: str = ""
    train_files: tuple[str, ...] = ()
    test_files: tuple[str, ...] = ()
    split_seed: int = 0
    val_fraction: float = 0.1
    train_subset: int = 0
    eval_size: int = 2000
    # synthetic only
    classes: int = 4
    per_class: int = 200
    test_per_class: int = 100
    shape: tuple[int, int, int] = (1, 8, 8)
    sigma: float = 1.0
    mean_distance: float = 3.0


@dataclass(frozen=True)
class ModelConfig:
    name: str
    role: str
    family: str = "smallcnn"
    widths: tuple[int, ...] = ()
    hidden: int = 64
    seed: int = 0


@dataclass(frozen=True)
class SweepConfig:
    stride: int = 2
    attacks: tuple[str, ...] = ("mifgsm", "ifgsm")


@dataclass(frozen=True)
class DiagnosticsConfig:
    h: float = 0.01
    h_sensitivity: tuple[float, ...] = (0.005, 0.01, 0.02)
    subset_size: int = 256
    seed: int = 0
    attack: str = ""
    gap_attacks: tuple[str, ...] = ("mifgsm", "ifgsm")


@dataclass(frozen=True)
class ExperimentConfig:
    name: str
    dataset: DatasetConfig
    models: tuple[ModelConfig, ...]
    train: TrainConfig
    attacks: tuple[AttackSpec, ...]
    sweep: SweepConfig = field(default_factory=SweepConfig)
    diagnostics: DiagnosticsConfig = field(default_factory=DiagnosticsConfig)
    seed: int = 0
    output: str = "runs/out"
    base_dir: str = field(default=".", compare=False)

    @property
    def surrogates(self) -> tuple[ModelConfig, ...]:
        return tuple(m for m in self.models if m.role == "surrogate")

    @property
    def targets(self) -> tuple[ModelConfig, ...]:
        return tuple(m for m in self.models if m.role == "target")

    def model_seed(self, m: ModelConfig) -> int:
        return self.seed + m.seed

    def attack(self, label: str) -> AttackSpec:
        for a in self.attacks:
            if a.label == label:
                return a
        raise KeyError(label)

    @property
    def regression_attack(self) -> str:
        return self.diagnostics.attack or self.sweep.attacks[0]

    def resolve(self, path: str) -> Path:
        p = Path(os.path.expanduser(path))
        return p if p.is_absolute() else Path(self.base_dir) / p

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return replace(self, seed=int(seed))

    def with_output(self, output: str) -> "ExperimentConfig":
        return replace(self, output=str(output))

    def hash(self) -> str:
        """Content hash of everything that affects results (not the output location)."""
        d = to_dict(self)
        d["experiment"].pop("output", None)
        return hashlib.sha256(tomli_w.dumps(d).encode("utf-8")).hexdigest()[:16]


# -- parsing ----------------------------------------------------------------------------

class _Section:
    """Typed key extraction that records problems instead of raising."""

    def __init__(self, raw: Any, path: str, problems: list[str]):
        self.path, self.problems = path, problems
        if not isinstance(raw, dict):
            problems.append(f"{path}: expected a table")
            raw = {}
        self.raw = dict(raw)
        self.seen: set[str] = set()

    def key(self, k: str) -> str:
        return f"{self.path}.{k}" if self.path else k

    def get(self, k: str, default, kind):
        self.seen.add(k)
        if k not in self.raw:
            return default
        v = self.raw[k]
        ok = {
            "int": isinstance(v, int) and not isinstance(v, bool),
            "float": isinstance(v, (int, float)) and not isinstance(v, bool),
            "str": isinstance(v, str),
            "bool": isinstance(v, bool),
            "ints": isinstance(v, list) and all(isinstance(e, int) and not isinstance(e, bool) for e in v),
            "floats": isinstance(v, list) and all(isinstance(e, (int, float)) and not isinstance(e, bool) for e in v),
            "strs": isinstance(v, list) and all(isinstance(e, str) for e in v),
            "table": isinstance(v, dict),
            "tables": isinstance(v, list) and all(isinstance(e, dict) for e in v),
        }[kind]
        if not ok:
            self.problems.append(f"{self.key(k)}: expected {kind}, got {type(v).__name__}")
            return default
        if kind == "float":
            return float(v)
        if kind in ("ints", "strs"):
            return tuple(v)
        if kind == "floats":
            return tuple(float(e) for e in v)
        return v

    def sub(self, k: str) -> "_Section":
        return _Section(self.get(k, {}, "table"), self.key(k), self.problems)

    def finish(self) -> None:
        for k in sorted(set(self.raw) - self.seen):
            self.problems.append(f"{self.key(k)}: unknown key")

    def check(self, k: str, cond: bool, msg: str) -> None:
        if not cond:
            self.problems.append(f"{self.key(k)}: {msg}")


def _dataset(s: _Section) -> DatasetConfig:
    d = DatasetConfig()
    out = DatasetConfig(
        kind=s.get("kind", d.kind, "str"), path=s.get("path", d.path, "str"),
        train_files=s.get("train_files", d.train_files, "strs"), test_files=s.get("test_files", d.test_files, "strs"),
        split_seed=s.get("split_seed", d.split_seed, "int"), val_fraction=s.get("val_fraction", d.val_fraction, "float"),
        train_subset=s.get("train_subset", d.train_subset, "int"), eval_size=s.get("eval_size", d.eval_size, "int"),
        classes=s.get("classes", d.classes, "int"), per_class=s.get("per_class", d.per_class, "int"),
        test_per_class=s.get("test_per_class", d.test_per_class, "int"), shape=s.get("shape", d.shape, "ints"),
        sigma=s.get("sigma", d.sigma, "float"), mean_distance=s.get("mean_distance", d.mean_distance, "float"))
    s.finish()
    s.check("kind", out.kind in DATASET_KINDS, f"must be one of {', '.join(DATASET_KINDS)}")
    s.check("val_fraction", 0 < out.val_fraction < 1, "must lie in (0, 1)")
    s.check("train_subset", out.train_subset >= 0, "must be >= 0 (0 keeps everything)")
    s.check("eval_size", out.eval_size >= 1, "must be >= 1")
    if out.kind == "synthetic":
        s.check("classes", out.classes >= 2, "must be >= 2")
        s.check("per_class", out.per_class >= 2, "must be >= 2")
        s.check("test_per_class", out.test_per_class >= 1, "must be >= 1")
        s.check("shape", len(out.shape) == 3 and min(out.shape, default=0) >= 1, "must be [channels, height, width]")
        s.check("sigma", out.sigma > 0, "must be > 0")
        s.check("mean_distance", out.mean_distance > 0, "must be > 0")
    return out


def _model(s: _Section) -> ModelConfig:
    out = ModelConfig(name=s.get("name", "", "str"), role=s.get("role", "", "str"),
                      family=s.get("family", "smallcnn", "str"), widths=s.get("widths", (), "ints"),
                      hidden=s.get("hidden", 64, "int"), seed=s.get("seed", 0, "int"))
    s.finish()
    s.check("name", bool(out.name), "is required")
    s.check("role", out.role in ROLES, f"must be one of {', '.join(ROLES)}")
    s.check("family", out.family in FAMILIES, f"must be one of {', '.join(FAMILIES)}")
    s.check("widths", all(w >= 1 for w in out.widths), "must be positive")
    s.check("hidden", out.hidden >= 1, "must be >= 1")
    return out


def _train(s: _Section) -> TrainConfig:
    d = TrainConfig()
    sched = s.sub("schedule")
    kind = sched.get("kind", "stepped", "str")
    if kind == "stepped":
        dd = SteppedSchedule()
        schedule = SteppedSchedule(sched.get("base_lr", dd.base_lr, "float"),
                                   sched.get("decay_factor", dd.decay_factor, "float"),
                                   sched.get("milestones", dd.milestones, "ints"))
    elif kind == "cyclic":
        dc = CyclicSchedule()
        schedule = CyclicSchedule(sched.get("min_lr", dc.min_lr, "float"), sched.get("max_lr", dc.max_lr, "float"),
                                  sched.get("period", dc.period, "int"))
    else:
        sched.check("kind", False, "must be stepped or cyclic")
        schedule = SteppedSchedule()
    sched.finish()
    adversarial = None
    if "adversarial" in s.raw:
        adv = s.sub("adversarial")
        adversarial = FastFGSM(adv.get("epsilon", FastFGSM().epsilon, "float"))
        adv.finish()
    else:
        s.seen.add("adversarial")
    out = TrainConfig(epochs=s.get("epochs", d.epochs, "int"), batch_size=s.get("batch_size", d.batch_size, "int"),
                      momentum=s.get("momentum", d.momentum, "float"),
                      weight_decay=s.get("weight_decay", d.weight_decay, "float"),
                      schedule=schedule, adversarial=adversarial)
    s.finish()
    for p in out.validate():
        s.problems.append(f"{s.path}: {p}")
    return out


def _attack(s: _Section) -> AttackSpec:
    d = AttackSpec("fgsm")
    ila, tap = ILAParams(), TAPParams()
    if "ila" in s.raw:
        si = s.sub("ila")
        ila = ILAParams(si.get("base_kind", ila.base_kind, "str"), si.get("base_iterations", ila.base_iterations, "int"),
                        si.get("enhance_iterations", ila.enhance_iterations, "int"), si.get("layer", ila.layer, "str"))
        si.finish()
    if "tap" in s.raw:
        st = s.sub("tap")
        tap = TAPParams(st.get("layers", tap.layers, "strs"), st.get("feature_weight", tap.feature_weight, "float"),
                        st.get("smooth_kernel", tap.smooth_kernel, "int"),
                        st.get("smooth_weight", tap.smooth_weight, "float"))
        st.finish()
    s.seen.update(("ila", "tap"))
    out = AttackSpec(kind=s.get("kind", "", "str"), epsilon=s.get("epsilon", d.epsilon, "float"),
                     step_size=s.get("step_size", d.step_size, "float"),
                     iterations=s.get("iterations", d.iterations, "int"), decay=s.get("decay", d.decay, "float"),
                     ila=ila, tap=tap, name=s.get("name", "", "str"))
    s.finish()
    for k, msg in out.validate():
        s.problems.append(f"{s.key(k)}: {msg}")
    return out


def _sweep(s: _Section) -> SweepConfig:
    d = SweepConfig()
    out = SweepConfig(s.get("stride", d.stride, "int"), s.get("attacks", d.attacks, "strs"))
    s.finish()
    s.check("stride", out.stride >= 1, "must be >= 1")
    s.check("attacks", len(out.attacks) >= 1, "must name at least one attack")
    return out


def _diagnostics(s: _Section) -> DiagnosticsConfig:
    d = DiagnosticsConfig()
    out = DiagnosticsConfig(h=s.get("h", d.h, "float"), h_sensitivity=s.get("h_sensitivity", d.h_sensitivity, "floats"),
                            subset_size=s.get("subset_size", d.subset_size, "int"), seed=s.get("seed", d.seed, "int"),
                            attack=s.get("attack", d.attack, "str"),
                            gap_attacks=s.get("gap_attacks", d.gap_attacks, "strs"))
    s.finish()
    s.check("h", out.h > 0, "must be > 0")
    s.check("h_sensitivity", all(h > 0 for h in out.h_sensitivity), "entries must be > 0")
    s.check("subset_size", out.subset_size >= 1, "must be >= 1")
    s.check("gap_attacks", len(out.gap_attacks) in (0, 2), "must name exactly two attacks, or none to skip")
    return out


def parse_config(text: str, base_dir: str | os.PathLike = ".", check_paths: bool = True) -> ExperimentConfig:
    """Parse and validate; raises :class:`ConfigError` listing every problem."""
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError([f"not valid TOML: {exc}"]) from None
    problems: list[str] = []
    top = _Section(raw, "", problems)
    exp = top.sub("experiment")
    name = exp.get("name", "experiment", "str")
    seed = exp.get("seed", 0, "int")
    output = exp.get("output", "runs/out", "str")
    exp.finish()
    dataset = _dataset(top.sub("dataset"))
    models = tuple(_model(_Section(m, f"models[{i}]", problems))
                   for i, m in enumerate(top.get("models", [], "tables")))
    train = _train(top.sub("train"))
    attacks = tuple(_attack(_Section(a, f"attacks[{i}]", problems))
                    for i, a in enumerate(top.get("attacks", [], "tables")))
    sweep = _sweep(top.sub("sweep"))
    diag = _diagnostics(top.sub("diagnostics"))
    top.finish()

    names = [m.name for m in models]
    for n in sorted({n for n in names if names.count(n) > 1}):
        problems.append(f"models: duplicate model name {n!r}")
    if not any(m.role == "surrogate" for m in models):
        problems.append("models: at least one surrogate is required")
    if not any(m.role == "target" for m in models):
        problems.append("models: at least one target is required")
    if not attacks:
        problems.append("attacks: at least one attack is required")
    labels = [a.label for a in attacks]
    for n in sorted({n for n in labels if labels.count(n) > 1}):
        problems.append(f"attacks: duplicate attack name {n!r} (set a distinct name)")

    def given(section: str, key: str) -> bool:
        sec = raw.get(section)
        return isinstance(sec, dict) and key in sec

    # unset sweep.attacks means every configured attack; the default gap pair only applies when defined
    if not given("sweep", "attacks"):
        sweep = replace(sweep, attacks=tuple(dict.fromkeys(labels)) or sweep.attacks)
    for i, a in enumerate(sweep.attacks):
        if a not in labels:
            problems.append(f"sweep.attacks[{i}]: {a!r} is not defined in attacks")
    if not given("diagnostics", "gap_attacks") and not set(diag.gap_attacks) <= set(labels):
        diag = replace(diag, gap_attacks=())
    for i, a in enumerate(diag.gap_attacks):
        if a not in labels:
            problems.append(f"diagnostics.gap_attacks[{i}]: {a!r} is not defined in attacks")
    if diag.attack and diag.attack not in sweep.attacks:
        problems.append(f"diagnostics.attack: {diag.attack!r} is not one of sweep.attacks")

    cfg = ExperimentConfig(name=name, dataset=dataset, models=models, train=train, attacks=attacks, sweep=sweep,
                           diagnostics=diag, seed=seed, output=output, base_dir=str(base_dir))
    if check_paths and not problems:
        problems.extend(_path_problems(cfg))
    if problems:
        raise ConfigError(problems)
    return cfg


def dataset_dir(cfg: ExperimentConfig) -> Path:
    if cfg.dataset.path:
        return cfg.resolve(cfg.dataset.path)
    return Path(os.environ.get(MNIST_ENV, "")) if os.environ.get(MNIST_ENV) else Path()


def _path_problems(cfg: ExperimentConfig) -> list[str]:
    ds = cfg.dataset
    out = []
    if ds.kind == "mnist":
        d = dataset_dir(cfg)
        if not ds.path and not os.environ.get(MNIST_ENV):
            out.append(f"dataset.path: not set and ${MNIST_ENV} is empty")
        elif not d.is_dir():
            out.append(f"dataset.path: directory {d} does not exist")
    elif ds.kind == "cifar10":
        if not ds.train_files:
            out.append("dataset.train_files: required for cifar10")
        for key in ("train_files", "test_files"):
            for i, p in enumerate(getattr(ds, key)):
                if not cfg.resolve(p).is_file():
                    out.append(f"dataset.{key}[{i}]: file {cfg.resolve(p)} does not exist")
    return out


def load_config(path: str | os.PathLike, check_paths: bool = True) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError([f"cannot read config {path}: {exc}"]) from None
    return parse_config(text, base_dir=path.parent, check_paths=check_paths)


# -- serialization ------------------------------------------------------------------------

def _attack_dict(a: AttackSpec) -> dict:
    d = {"kind": a.kind, "epsilon": a.epsilon, "step_size": a.step_size, "iterations": a.iterations,
         "decay": a.decay}
    if a.name:
        d["name"] = a.name
    if a.ila != ILAParams():
        d["ila"] = {"base_kind": a.ila.base_kind, "base_iterations": a.ila.base_iterations,
                    "enhance_iterations": a.ila.enhance_iterations, "layer": a.ila.layer}
    if a.tap != TAPParams():
        d["tap"] = {"layers": list(a.tap.layers), "feature_weight": a.tap.feature_weight,
                    "smooth_kernel": a.tap.smooth_kernel, "smooth_weight": a.tap.smooth_weight}
    return d


def to_dict(cfg: ExperimentConfig) -> dict:
    ds = cfg.dataset
    dataset = {"kind": ds.kind, "path": ds.path, "train_files": list(ds.train_files), "test_files": list(ds.test_files),
               "split_seed": ds.split_seed, "val_fraction": ds.val_fraction, "train_subset": ds.train_subset,
               "eval_size": ds.eval_size, "classes": ds.classes, "per_class": ds.per_class,
               "test_per_class": ds.test_per_class, "shape": list(ds.shape), "sigma": ds.sigma,
               "mean_distance": ds.mean_distance}
    s = cfg.train.schedule
    if isinstance(s, SteppedSchedule):
        schedule = {"kind": "stepped", "base_lr": s.base_lr, "decay_factor": s.decay_factor,
                    "milestones": list(s.milestones)}
    else:
        schedule = {"kind": "cyclic", "min_lr": s.min_lr, "max_lr": s.max_lr, "period": s.period}
    train = {"epochs": cfg.train.epochs, "batch_size": cfg.train.batch_size, "momentum": cfg.train.momentum,
             "weight_decay": cfg.train.weight_decay, "schedule": schedule}
    if cfg.train.adversarial is not None:
        train["adversarial"] = {"epsilon": cfg.train.adversarial.epsilon}
    dg = cfg.diagnostics
    return {
        "experiment": {"name": cfg.name, "seed": cfg.seed, "output": cfg.output},
        "dataset": dataset,
        "models": [{"name": m.name, "role": m.role, "family": m.family, "widths": list(m.widths),
                    "hidden": m.hidden, "seed": m.seed} for m in cfg.models],
        "train": train,
        "attacks": [_attack_dict(a) for a in cfg.attacks],
        "sweep": {"stride": cfg.sweep.stride, "attacks": list(cfg.sweep.attacks)},
        "diagnostics": {"h": dg.h, "h_sensitivity": list(dg.h_sensitivity), "subset_size": dg.subset_size,
                        "seed": dg.seed, "attack": dg.attack, "gap_attacks": list(dg.gap_attacks)},
    }


def dump_config(cfg: ExperimentConfig) -> str:
    return tomli_w.dumps(to_dict(cfg))
