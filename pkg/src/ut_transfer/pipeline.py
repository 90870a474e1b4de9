"""Stage orchestration: train -> attack -> sweep -> diagnose -> report.

Output layout under the run directory::

    manifest.json                 config hash and completed stages
    config.toml                   the resolved config that produced the run
    checkpoints/<model>/          per-epoch checkpoints and log.csv
    matrices/attack.csv           fully-trained surrogates vs targets, every attack
    matrices/sweep.csv            surrogate epoch sweep
    diagnostics/similarity.csv, curvature.csv, curvature_h.csv, correlations.csv, regression.txt
    report/sweep_<surrogate>.svg, report/summary.txt
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import diagnostics as D
from .checkpoint import atomic_write
from .config import ConfigError, ExperimentConfig, ModelConfig, dataset_dir, dump_config
from .datasets import Dataset, load_cifar10_binary, load_mnist_dir, subset, synth_gaussians
from .models import ArchitectureDescriptor, build_model
from .report import sweep_svg, table
from .training import CheckpointStore, select_fully_trained, train
from .transfer import ModelRef, TransferMatrix, best_surrogate_epoch, epoch_sweep, transfer_cells

log = logging.getLogger(__name__)

STAGES = ("train", "attack", "sweep", "diagnose", "report")
ALL = "all"


class PipelineError(RuntimeError):
    """Runtime or data failure; maps to exit status 2."""


@dataclass
class RunResult:
    status: int
    stage: str
    artifacts: list[Path] = field(default_factory=list)
    message: str = ""


# -- inputs -----------------------------------------------------------------------------

def load_dataset(cfg: ExperimentConfig) -> Dataset:
    ds = cfg.dataset
    if ds.kind == "synthetic":
        data = synth_gaussians(ds.classes, int(np.prod(ds.shape)), ds.per_class, seed=ds.split_seed, sigma=ds.sigma,
                               mean_distance=ds.mean_distance, test_per_class=ds.test_per_class,
                               val_fraction=ds.val_fraction, shape=ds.shape)
    elif ds.kind == "mnist":
        data = load_mnist_dir(dataset_dir(cfg), seed=ds.split_seed, val_fraction=ds.val_fraction)
    else:
        data = load_cifar10_binary([cfg.resolve(p) for p in ds.train_files], [cfg.resolve(p) for p in ds.test_files],
                                   seed=ds.split_seed, val_fraction=ds.val_fraction)
    if ds.train_subset:
        data = subset(data, ds.train_subset, seed=ds.split_seed, val_fraction=ds.val_fraction)
    if len(data.test_idx) == 0:
        raise PipelineError(f"dataset {data.name} has no test split to evaluate on")
    return data


def descriptor_for(m: ModelConfig, data: Dataset) -> ArchitectureDescriptor:
    return ArchitectureDescriptor(family=m.family, input_shape=data.input_shape, num_classes=data.num_classes,
                                  widths=m.widths, hidden=m.hidden, input_mean=data.mean, input_std=data.std)


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


class Run:
    """One output directory bound to one config."""

    def __init__(self, cfg: ExperimentConfig, out: str | Path | None = None, jobs: int = 1):
        self.cfg = cfg
        self.out = Path(out) if out is not None else Path(cfg.output)
        self.jobs = max(1, int(jobs))
        self.hash = cfg.hash()
        self._data: Dataset | None = None

    # paths
    def ckpt_dir(self, name: str) -> Path:
        return self.out / "checkpoints" / name

    @property
    def manifest_path(self) -> Path:
        return self.out / "manifest.json"

    def path(self, rel: str) -> Path:
        return self.out / rel

    @property
    def data(self) -> Dataset:
        if self._data is None:
            self._data = load_dataset(self.cfg)
        return self._data

    # manifest
    def manifest(self) -> dict:
        if not self.manifest_path.exists():
            return {}
        try:
            return json.loads(self.manifest_path.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise PipelineError(f"unreadable manifest {self.manifest_path}: {exc}") from None

    def claim(self) -> None:
        """Bind the output directory to this config hash, refusing stale mixes."""
        man = self.manifest()
        if man and man.get("config_hash") != self.hash:
            raise PipelineError(f"{self.out} holds artifacts from config hash {man.get('config_hash')}, "
                                f"current config hashes to {self.hash}; use a fresh --out directory")
        if not man:
            stray = [p for p in ("checkpoints", "matrices", "diagnostics", "report") if (self.out / p).exists()]
            if stray:
                raise PipelineError(f"{self.out} has artifacts ({', '.join(stray)}) but no manifest; refusing to mix")
            self._write_manifest({"config_hash": self.hash, "name": self.cfg.name, "stages": []})
            atomic_write(self.path("config.toml"), dump_config(self.cfg).encode())

    def _write_manifest(self, man: dict) -> None:
        atomic_write(self.manifest_path, (json.dumps(man, indent=2, sort_keys=True) + "\n").encode())

    def mark_done(self, stage: str) -> None:
        man = self.manifest()
        stages = set(man.get("stages", [])) | {stage}
        man["stages"] = [s for s in STAGES if s in stages]
        self._write_manifest(man)

    def require(self, rel: str, stage: str) -> Path:
        p = self.path(rel)
        if not p.exists() or stage not in self.manifest().get("stages", []):
            raise PipelineError(f"missing artifact {p} (run the '{stage}' stage first)")
        return p

    # models
    def store(self, m: ModelConfig) -> CheckpointStore:
        return CheckpointStore(self.ckpt_dir(m.name))

    def complete_store(self, m: ModelConfig) -> CheckpointStore:
        d = self.ckpt_dir(m.name)
        if not (d / "log.csv").exists():
            raise PipelineError(f"missing artifact {d / 'log.csv'} (run the 'train' stage first)")
        store = CheckpointStore(d)
        if len(store) != self.cfg.train.epochs:
            raise PipelineError(f"checkpoints for {m.name} cover {len(store)} of {self.cfg.train.epochs} epochs "
                                f"(run the 'train' stage first)")
        return store

    def fully_trained(self, m: ModelConfig) -> ModelRef:
        store = self.complete_store(m)
        return ModelRef.from_checkpoint(m.name, store.load(select_fully_trained(store)))

    def eval_set(self) -> tuple[np.ndarray, np.ndarray]:
        return self.data.eval_set(self.cfg.dataset.eval_size, seed=self.cfg.dataset.split_seed)

    def diag_set(self) -> tuple[np.ndarray, np.ndarray]:
        return self.data.eval_set(self.cfg.diagnostics.subset_size, seed=self.cfg.diagnostics.seed)

    def _map(self, fn, items):
        if self.jobs > 1 and len(items) > 1:
            with ThreadPoolExecutor(max_workers=self.jobs) as pool:
                return list(pool.map(fn, items))
        return [fn(it) for it in items]


# -- stages -----------------------------------------------------------------------------

def stage_train(run: Run) -> list[Path]:
    cfg = run.cfg
    run.data  # load once before workers start

    def one(m: ModelConfig) -> Path:
        seed = cfg.model_seed(m)
        store = run.store(m)
        if len(store) >= cfg.train.epochs:
            log.info("%s: %d epochs already trained", m.name, len(store))
            return store.root
        model = build_model(descriptor_for(m, run.data), seed)
        tc = replace(cfg.train, seed=seed)
        log.info("training %s (%s, seed %d) for %d epochs", m.name, m.family, seed, tc.epochs)
        train(model, run.data, tc, store)
        return store.root

    return run._map(one, list(cfg.models))


def stage_attack(run: Run) -> list[Path]:
    cfg = run.cfg
    x, y = run.eval_set()
    targets = [run.fully_trained(t) for t in cfg.targets]
    items = [(s, a) for s in cfg.surrogates for a in cfg.attacks]
    surrogates = {s.name: run.fully_trained(s) for s in cfg.surrogates}
    clean: dict = {}
    cells = run._map(lambda it: transfer_cells(surrogates[it[0].name], targets, it[1], x, y, clean_cache=clean), items)
    matrix = TransferMatrix([c for cs in cells for c in cs])
    p = run.path("matrices/attack.csv")
    atomic_write(p, matrix.to_csv().encode())
    return [p]


def stage_sweep(run: Run) -> list[Path]:
    cfg = run.cfg
    x, y = run.eval_set()
    targets = [run.fully_trained(t) for t in cfg.targets]
    attacks = [cfg.attack(a) for a in cfg.sweep.attacks]
    cells = []
    for s in cfg.surrogates:
        store = run.complete_store(s)
        m = epoch_sweep(store, s.name, cfg.sweep.stride, targets, attacks, x, y,
                        include=[select_fully_trained(store)], jobs=run.jobs)
        cells.extend(m.cells)
    matrix = TransferMatrix(cells)
    p = run.path("matrices/sweep.csv")
    atomic_write(p, matrix.to_csv().encode())
    return [p]


def read_matrix(path: Path) -> TransferMatrix:
    return TransferMatrix.from_csv(path.read_text())


def stage_diagnose(run: Run) -> list[Path]:
    cfg = run.cfg
    dg = cfg.diagnostics
    matrix = read_matrix(run.require("matrices/sweep.csv", "sweep"))
    x, y = run.diag_set()
    targets = [run.fully_trained(t) for t in cfg.targets]
    hs = sorted(set(dg.h_sensitivity) | {dg.h})
    items = []
    for s in cfg.surrogates:
        store = run.complete_store(s)
        items += [(s, e, store) for e in matrix.select(surrogate=s.name).surrogate_epochs]

    def one(item):
        s, epoch, store = item
        model = store.load(epoch).model
        sims = [D.gradient_similarity(model, t.model, x, y, names=((s.name, epoch), (t.arch, t.epoch)))
                for t in targets]
        curvs = [D.curvature(model, x, y, h=h, name=(s.name, epoch)) for h in hs]
        return sims, curvs

    results = run._map(one, items)
    sims = [r for res in results for r in res[0]]
    curvs_all = [r for res in results for r in res[1]]
    curvs = [r for r in curvs_all if r.h == dg.h]

    rows = []
    for s in cfg.surrogates:
        sub = matrix.select(surrogate=s.name)
        s_sims = [r for r in sims if r.surrogate[0] == s.name]
        for attack in sub.attacks:
            rows.append(_corr_row("similarity_vs_accuracy", s.name, attack,
                                  lambda: D.similarity_accuracy_correlation(sub, s_sims, attack),
                                  len(sub.surrogate_epochs)))
        a, b = dg.gap_attacks or (None, None)
        if a in sub.attacks and b in sub.attacks:
            s_curv = [r for r in curvs if r.model[0] == s.name]
            rows.append(_corr_row("curvature_vs_gap", s.name, f"{a}-{b}",
                                  lambda: D.gap_curvature_correlation(sub, s_curv, a, b, surrogate=s.name),
                                  len(sub.surrogate_epochs)))
    try:
        reg = D.explanatory_model(matrix, sims, curvs, attack=cfg.regression_attack)
        regression = f"post-attack accuracy ({cfg.regression_attack}) ~ similarity + similarity^2 + curvature " \
                     f"+ per-source constants\n\n" + reg.summary()
    except D.DiagnosticsError as exc:
        regression = f"regression not estimable: {exc}\n"

    out = {
        "diagnostics/similarity.csv": D.similarity_csv(sims),
        "diagnostics/curvature.csv": D.curvature_csv(curvs),
        "diagnostics/curvature_h.csv": D.curvature_csv(curvs_all),
        "diagnostics/correlations.csv": _csv_text(("analysis", "surrogate", "attack", "n", "r", "p", "note"), rows),
        "diagnostics/regression.txt": regression,
    }
    paths = []
    for rel, text in out.items():
        atomic_write(run.path(rel), text.encode())
        paths.append(run.path(rel))
    return paths


def _corr_row(analysis, surrogate, attack, fn, n):
    try:
        r, p = fn()
        return [analysis, surrogate, attack, n, repr(r), repr(p), ""]
    except D.DiagnosticsError as exc:
        return [analysis, surrogate, attack, n, "nan", "nan", str(exc)]


def read_correlations(path: Path) -> list[dict]:
    return list(csv.DictReader(io.StringIO(path.read_text())))


def stage_report(run: Run) -> list[Path]:
    cfg = run.cfg
    matrix = read_matrix(run.require("matrices/sweep.csv", "sweep"))
    paths = []
    lines = [f"experiment: {cfg.name}", f"config hash: {run.hash}", ""]
    rows = []
    for s in cfg.surrogates:
        sub = matrix.select(surrogate=s.name)
        store = run.complete_store(s)
        full = select_fully_trained(store)
        best = best_surrogate_epoch(sub)
        p = run.path(f"report/sweep_{s.name}.svg")
        atomic_write(p, sweep_svg(matrix, s.name, best, full).encode())
        paths.append(p)
        for attack in [None] + sub.attacks:
            means = sub.mean_by_epoch(attack)
            b = best_surrogate_epoch(sub, attack)
            rows.append([s.name, attack or "pooled", full, f"{means.get(full, math.nan):.2f}", b,
                         f"{means[b]:.2f}", f"{means.get(full, math.nan) - means[b]:.2f}"])
    lines.append("surrogate epoch sweep: mean post-attack target accuracy (%)")
    lines.append(table(rows, ["surrogate", "attack", "fully_trained", "acc@full", "best", "acc@best", "gain"]))

    attack_csv = run.path("matrices/attack.csv")
    if attack_csv.exists() and "attack" in run.manifest().get("stages", []):
        am = read_matrix(attack_csv)
        lines.append("fully-trained surrogates: post-attack accuracy (%)")
        lines.append(table([[c.surrogate_arch, f"{c.target_arch}@{c.target_epoch}", c.attack, f"{c.clean_acc:.2f}",
                             f"{c.post_attack_acc:.2f}"] for c in am.cells],
                           ["surrogate", "target", "attack", "clean", "post_attack"]))
    corr = run.path("diagnostics/correlations.csv")
    if corr.exists() and "diagnose" in run.manifest().get("stages", []):
        lines.append("correlations")
        lines.append(table([[r["analysis"], r["surrogate"], r["attack"], r["n"], _short(r["r"]), _short(r["p"])]
                            for r in read_correlations(corr)], ["analysis", "surrogate", "attack", "n", "r", "p"]))
        lines.append(run.path("diagnostics/regression.txt").read_text())
    p = run.path("report/summary.txt")
    atomic_write(p, ("\n".join(lines).rstrip() + "\n").encode())
    paths.append(p)
    return paths


def _short(v: str) -> str:
    try:
        return f"{float(v):.4g}"
    except ValueError:
        return v


STAGE_FNS = {"train": stage_train, "attack": stage_attack, "sweep": stage_sweep,
             "diagnose": stage_diagnose, "report": stage_report}


def execute(cfg: ExperimentConfig, stage: str, out: str | Path | None = None, jobs: int = 1) -> list[Path]:
    """Run one stage (or ``all``); raises on failure."""
    if stage != ALL and stage not in STAGES:
        raise ConfigError([f"stage: unknown stage {stage!r}; expected one of {', '.join(STAGES + (ALL,))}"])
    run = Run(cfg, out, jobs)
    run.claim()
    artifacts: list[Path] = []
    for st in (STAGES if stage == ALL else (stage,)):
        log.info("stage %s -> %s", st, run.out)
        artifacts += STAGE_FNS[st](run)
        run.mark_done(st)
    return artifacts


def run_pipeline(cfg: ExperimentConfig, stage: str, out: str | Path | None = None, jobs: int = 1) -> RunResult:
    """Run a stage and report an exit status: 0 ok, 1 validation error, 2 runtime or data error."""
    try:
        return RunResult(0, stage, execute(cfg, stage, out, jobs))
    except ConfigError as exc:
        return RunResult(1, stage, message=str(exc))
    except Exception as exc:  # any failure maps to a nonzero status
        return RunResult(2, stage, message=f"{type(exc).__name__}: {exc}")
