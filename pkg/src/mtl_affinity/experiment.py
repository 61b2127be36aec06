"""End-to-end experiment harness: train, score, evaluate, emit reports.

One run covers a list of seeds. Per seed the harness builds (or loads) the
task suite, trains the whole model roster (single-task models at half
capacity, pairwise shared-backbone models at full capacity, label-injected
models when LI is requested), assembles the requested affinity matrices
next to the measured gain matrix, runs the three evaluation levels, and
writes one directory of CSV/JSON report files.

Everything is deterministic in the config: rerunning a seed produces
byte-identical files.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import platform
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from . import __version__
from .evaluation import (
    CostModel,
    EvaluationReport,
    GainMatrix,
    evaluate,
    level1_csv,
    level2_csv,
    level3_csv,
    mtl_gain,
    score_cost,
    score_cost_expression,
)
from .matrices import MatrixFormatError
from .models import (
    BackboneConfig,
    TrainConfig,
    TrainingDivergedError,
    TrainTrace,
    half_capacity,
    multiply_add_count,
    train_injected,
    train_mtl,
    train_stl,
)
from .scores import (
    SCORE_KINDS,
    AffinityMatrix,
    assemble_matrix,
    gradient_similarity,
    gradient_transference,
    input_attribution_similarity,
    label_injection,
    rsa,
    taxonomical_distance,
)
from .tasks import (
    TaskSuite,
    TaxonomyDistances,
    generate_latent_factor_suite,
    load_dataset,
    load_taxonomy_distances,
)

__all__ = [
    "CostRow",
    "ExperimentConfig",
    "ExperimentError",
    "ScatterRow",
    "SeedResult",
    "costs_csv",
    "manifest_json",
    "read_costs_csv",
    "read_scatter_csv",
    "run_experiment",
    "scatter_csv",
]

# Evaluation needs at least 2 partners per target for a correlation.
MIN_EVAL_TASKS = 3


class ExperimentError(RuntimeError):
    """A run could not complete; the message names the failing piece."""


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything one run needs; JSON-serializable, hashable by content.

    The dataset comes either from the generator parameters (the default)
    or from ``dataset_path``, a directory written by ``save_dataset``; in
    the latter case the generator parameters are ignored and the same
    suite is reused for every seed (seeds then vary training only).
    """

    # dataset generation
    n_tasks: int = 3
    d_latent: int = 12
    d_in: int = 24
    n_examples: int = 2000
    overlap: float = 0.5
    noise_std: float = 0.1
    dataset_path: str | None = None
    taxonomy_path: str | None = None
    # backbone and training
    hidden: tuple[int, ...] = (32, 16)
    latent_dim: int = 16
    epochs: int = 20
    initial_lr: float = 0.02
    lr_decay: float = 0.95
    batch_size: int = 32
    eval_batch_size: int = 256
    # what to compute and where to put it
    scores: tuple[str, ...] = ("IAS", "RSA", "GS", "GT")
    seeds: tuple[int, ...] = (0,)
    out_dir: str = "runs/experiment"
    display_gs_x100: bool = False

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(w) for w in self.hidden))
        object.__setattr__(self, "scores", tuple(str(s) for s in self.scores))
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        if not self.scores:
            raise ValueError("scores must name at least one score kind")
        unknown = [s for s in self.scores if s not in SCORE_KINDS]
        if unknown:
            raise ValueError(f"unknown score kinds {unknown}; known: {sorted(SCORE_KINDS)}")
        if len(set(self.scores)) != len(self.scores):
            raise ValueError(f"scores must be unique, got {list(self.scores)}")
        if not self.seeds:
            raise ValueError("seeds must contain at least one seed")
        if len(set(self.seeds)) != len(self.seeds):
            raise ValueError(f"seeds must be unique, got {list(self.seeds)}")
        if "TD" in self.scores and not self.taxonomy_path:
            raise ValueError("score TD needs taxonomy_path (a taxonomy-distance CSV)")
        if self.dataset_path is None and self.n_tasks < 2:
            raise ValueError(f"n_tasks must be >= 2 to form pairs, got {self.n_tasks}")

    def to_json_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["hidden"] = list(self.hidden)
        d["scores"] = list(self.scores)
        d["seeds"] = list(self.seeds)
        return d

    @classmethod
    def from_json_dict(cls, d: Mapping) -> "ExperimentConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ValueError(f"unknown config keys {unknown}; known: {sorted(known)}")
        return cls(**dict(d))

    @classmethod
    def from_file(cls, path: str | Path) -> "ExperimentConfig":
        return cls.from_json_dict(json.loads(Path(path).read_text(encoding="utf-8")))

    def with_overrides(self, **overrides) -> "ExperimentConfig":
        """A copy with the given fields replaced (None values are ignored)."""
        changes = {k: v for k, v in overrides.items() if v is not None}
        unknown = sorted(set(changes) - {f.name for f in dataclasses.fields(self)})
        if unknown:
            raise ValueError(f"unknown config keys {unknown}")
        return dataclasses.replace(self, **changes)

    def sha256(self) -> str:
        canon = json.dumps(self.to_json_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode("utf-8")).hexdigest()

    def train_config(self, seed: int) -> TrainConfig:
        return TrainConfig(seed=seed, epochs=self.epochs, initial_lr=self.initial_lr,
                           lr_decay=self.lr_decay, batch_size=self.batch_size,
                           eval_batch_size=self.eval_batch_size)


@dataclass
class SeedResult:
    """Everything computed for one seed, plus where it was written."""
    seed: int
    directory: Path
    gain: GainMatrix                       # unit "fraction"
    affinities: dict[str, AffinityMatrix]  # score kind -> complete matrix
    reports: dict[str, EvaluationReport]   # empty when n < MIN_EVAL_TASKS
    c_s: float                             # measured per-example multiply-adds
    notes: dict[str, str]


def _load_suite(config: ExperimentConfig, seed: int) -> TaskSuite:
    if config.dataset_path is not None:
        return load_dataset(config.dataset_path)
    return generate_latent_factor_suite(
        seed=seed, n_tasks=config.n_tasks, d_latent=config.d_latent,
        d_in=config.d_in, n_examples=config.n_examples,
        overlap=config.overlap, noise_std=config.noise_std)


def _train(kind_key: str, trainer: Callable, *args):
    try:
        return trainer(*args)
    except TrainingDivergedError as exc:
        raise ExperimentError(
            f"training diverged for {kind_key} at epoch {exc.epoch}") from exc


def _pairs(names: Sequence[str]) -> list[tuple[str, str]]:
    return [(a, b) for i, a in enumerate(names) for b in names[i + 1:]]


def _note_skips(notes: dict[str, str], label: str, value) -> None:
    skipped = getattr(value, "skipped", 0)
    if skipped:
        notes[label] = f"skipped {skipped} of {skipped + value.used}"


class _SeedRun:
    """Working state for one seed: trained models, losses, traces."""

    def __init__(self, config: ExperimentConfig, seed: int):
        self.config = config
        self.seed = seed
        suite = _load_suite(config, seed)
        self.specs = {s.name: s for s in suite.specs}
        self.names = tuple(s.name for s in suite.specs)
        if len(self.names) < 2:
            raise ExperimentError(f"need at least 2 tasks, dataset has {len(self.names)}")
        self.dataset = suite.dataset
        self.cfg = config.train_config(seed)
        full = BackboneConfig(self.dataset.d_in, config.hidden, config.latent_dim)
        self.half = half_capacity(full)
        self.full = full
        self.notes: dict[str, str] = {}

        self.stl: dict[str, object] = {}
        for name in self.names:
            model, _ = _train(f"stl/{name}", train_stl,
                              self.specs[name], self.dataset, self.half, self.cfg)
            self.stl[name] = model

        self.mtl: dict[tuple[str, str], object] = {}
        self.mtl_trace: dict[tuple[str, str], TrainTrace] = {}
        for a, b in _pairs(self.names):
            model, trace = _train(f"mtl/{a}/{b}", train_mtl,
                                  (self.specs[a], self.specs[b]),
                                  self.dataset, self.full, self.cfg)
            self.mtl[(a, b)] = model
            self.mtl_trace[(a, b)] = trace

        test = self.dataset.splits["test"]
        self.test_x = self.dataset.split_inputs("test")
        self.test_y = {t: self.dataset.split_labels(t, "test") for t in self.names}
        eval_idx = test[:min(self.cfg.eval_batch_size, len(test))]
        self.eval_x = self.dataset.inputs[eval_idx]
        self.eval_y = {t: self.dataset.labels[t][eval_idx] for t in self.names}

        self.stl_loss = {t: self.stl[t].loss_value(self.test_x, self.test_y[t])
                         for t in self.names}

        self.injected_loss: dict[tuple[str, str], float] = {}
        if "LI" in config.scores:
            for target in self.names:
                for partner in self.names:
                    if partner == target:
                        continue
                    model, _ = _train(f"inj/{target}/{partner}", train_injected,
                                      self.specs[target], self.specs[partner],
                                      self.dataset, self.half, self.cfg)
                    partner_y = self.dataset.split_labels(partner, "test")
                    self.injected_loss[(target, partner)] = model.loss_value(
                        self.test_x, self.test_y[target], partner_y)

    def gain_matrix(self) -> GainMatrix:
        gain = GainMatrix(self.names, unit="fraction")
        for a, b in _pairs(self.names):
            model = self.mtl[(a, b)]
            for target, partner in ((a, b), (b, a)):
                mtl_loss = model.task_loss_value(target, self.test_x, self.test_y[target])
                gain.set(partner, target, mtl_gain(self.stl_loss[target], mtl_loss))
        return gain

    def affinity(self, kind: str, taxonomy: TaxonomyDistances | None) -> AffinityMatrix:
        values: dict[tuple[str, str], float] = {}
        if kind == "TD":
            assert taxonomy is not None
            for a, b in _pairs(self.names):
                values[(a, b)] = taxonomical_distance(taxonomy, a, b)
        elif kind == "IAS":
            for a, b in _pairs(self.names):
                v = input_attribution_similarity(
                    self.stl[a], self.stl[b], self.eval_x,
                    self.eval_y[a], self.eval_y[b])
                _note_skips(self.notes, f"IAS {a}/{b}", v)
                values[(a, b)] = float(v)
        elif kind == "RSA":
            for a, b in _pairs(self.names):
                values[(a, b)] = rsa(self.stl[a], self.stl[b], self.eval_x)
        elif kind == "LI":
            for (target, partner), loss in self.injected_loss.items():
                values[(partner, target)] = label_injection(
                    self.stl_loss[target], loss)
        elif kind == "GS":
            for pair in _pairs(self.names):
                values[pair] = gradient_similarity(self.mtl_trace[pair])
        elif kind == "GT":
            for a, b in _pairs(self.names):
                trace = self.mtl_trace[(a, b)]
                for target, partner in ((a, b), (b, a)):
                    v = gradient_transference(trace, target)
                    _note_skips(self.notes, f"GT {target}|{partner}", v)
                    values[(partner, target)] = float(v)
        else:
            raise ValueError(f"unknown score kind {kind!r}")
        return assemble_matrix(kind, self.names, values)

    def measured_c_s(self) -> float:
        # The cost unit: mean per-example multiply-adds of one single-task
        # model. Heads differ by output width, hence the mean.
        return float(np.mean([multiply_add_count(m) for m in self.stl.values()]))


@dataclass(frozen=True)
class CostRow:
    """One line of the cost table: a score's price in multiply-adds."""
    score: str
    expression: str
    n: int
    c_s: float
    multiply_adds: float


def costs_csv(rows: Sequence[CostRow]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["score", "expression", "n", "c_s", "multiply_adds"])
    for r in rows:
        writer.writerow([r.score, r.expression, r.n, repr(r.c_s), repr(r.multiply_adds)])
    return buf.getvalue()


def read_costs_csv(text: str) -> list[CostRow]:
    rows = [r for r in csv.reader(io.StringIO(text)) if r]
    if not rows or rows[0] != ["score", "expression", "n", "c_s", "multiply_adds"]:
        raise MatrixFormatError(f"bad costs header: {rows[:1]}")
    return [CostRow(r[0], r[1], int(r[2]), float(r[3]), float(r[4])) for r in rows[1:]]


@dataclass(frozen=True)
class ScatterRow:
    """One plot point: a target's gain with one partner against the score."""
    score: str
    target: str
    with_task: str
    score_value: float
    gain: float                            # percent


def scatter_csv(rows: Sequence[ScatterRow]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["score", "target", "with", "score_value", "gain"])
    for r in rows:
        writer.writerow([r.score, r.target, r.with_task,
                         repr(r.score_value), repr(r.gain)])
    return buf.getvalue()


def read_scatter_csv(text: str) -> list[ScatterRow]:
    rows = [r for r in csv.reader(io.StringIO(text)) if r]
    if not rows or rows[0] != ["score", "target", "with", "score_value", "gain"]:
        raise MatrixFormatError(f"bad scatter header: {rows[:1]}")
    return [ScatterRow(r[0], r[1], r[2], float(r[3]), float(r[4])) for r in rows[1:]]


def manifest_json(config: ExperimentConfig, seed: int, c_s: float,
                  notes: Mapping[str, str]) -> str:
    payload = {
        "config": config.to_json_dict(),
        "config_sha256": config.sha256(),
        "seed": seed,
        "c_s": c_s,
        "notes": dict(sorted(notes.items())),
        "versions": {
            "python": platform.python_version(),
            "numpy": np.__version__,
            "mtl_affinity": __version__,
        },
    }
    return json.dumps(payload, sort_keys=True, indent=2) + "\n"


def _scatter_rows(affinities: Mapping[str, AffinityMatrix],
                  gain_percent: GainMatrix) -> list[ScatterRow]:
    rows = []
    tasks = gain_percent.tasks
    for kind, matrix in affinities.items():
        for target in tasks:
            for partner in tasks:
                if partner == target:
                    continue
                rows.append(ScatterRow(kind, target, partner,
                                       matrix.get(partner, target),
                                       gain_percent.get(partner, target)))
    return rows


def _display_matrix(kind: str, matrix: AffinityMatrix, x100: bool) -> AffinityMatrix:
    if kind != "GS" or not x100:
        return matrix
    scaled = {(w, t): 100.0 * matrix.get(w, t)
              for w in matrix.tasks for t in matrix.tasks if w != t}
    return AffinityMatrix("GS", matrix.tasks, scaled)


def _emit_seed_files(directory: Path, config: ExperimentConfig,
                     result: SeedResult) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    files: dict[str, str] = {}
    files["gain.csv"] = result.gain.as_percent().to_csv_text()
    for kind, matrix in result.affinities.items():
        shown = _display_matrix(kind, matrix, config.display_gs_x100)
        files[f"{kind.lower()}.csv"] = shown.to_csv_text()
    if result.reports:
        reports = list(result.reports.values())
        files["level1.csv"] = level1_csv(reports)
        files["level2.csv"] = level2_csv(reports)
        files["level3.csv"] = level3_csv(reports)
    cost = CostModel(n=len(result.gain.tasks), c_s=result.c_s)
    files["costs.csv"] = costs_csv([
        CostRow(kind, score_cost_expression(kind), cost.n, cost.c_s,
                score_cost(kind, cost))
        for kind in config.scores])
    files["scatter.csv"] = scatter_csv(
        _scatter_rows(result.affinities, result.gain.as_percent()))
    files["manifest.json"] = manifest_json(config, result.seed, result.c_s,
                                           result.notes)
    for name, text in files.items():
        (directory / name).write_text(text, encoding="utf-8")


def run_experiment(config: ExperimentConfig,
                   progress: Callable[[str], None] | None = None,
                   ) -> list[SeedResult]:
    """Run every seed in the config and write one report directory each.

    Output layout: ``<out_dir>/seed<k>/`` holding gain.csv (percent), one
    ``<kind>.csv`` per requested score, level1-3.csv (when the suite has
    at least MIN_EVAL_TASKS tasks), costs.csv, scatter.csv, manifest.json.

    Raises:
        ExperimentError: training diverged (the message names the model)
            or the dataset has fewer than 2 tasks.
    """
    say = progress or (lambda _msg: None)
    taxonomy = (load_taxonomy_distances(config.taxonomy_path)
                if "TD" in config.scores else None)
    out_root = Path(config.out_dir)
    results = []
    for seed in config.seeds:
        say(f"seed {seed}: training roster")
        run = _SeedRun(config, seed)
        gain = run.gain_matrix()
        affinities = {kind: run.affinity(kind, taxonomy) for kind in config.scores}
        if len(run.names) >= MIN_EVAL_TASKS:
            reports = {kind: evaluate(gain.as_percent(), matrix)
                       for kind, matrix in affinities.items()}
        else:
            reports = {}
            run.notes["evaluation"] = (
                f"skipped: {len(run.names)} tasks < {MIN_EVAL_TASKS}")
        result = SeedResult(seed=seed, directory=out_root / f"seed{seed}",
                            gain=gain, affinities=affinities, reports=reports,
                            c_s=run.measured_c_s(), notes=run.notes)
        _emit_seed_files(result.directory, config, result)
        say(f"seed {seed}: wrote {result.directory}")
        results.append(result)
    return results
