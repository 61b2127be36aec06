"""The six pairwise task-affinity scores and the matrices they fill.

Higher always means "more affine". Four scores are symmetric in the pair
(TD, IAS, RSA, GS); two depend on direction (LI, GT). The directional
convention throughout: a value "for target a with partner b" lands in
matrix cell (row b, column a).

Score summary:

* TD: negated taxonomy-tree distance, read from a user-supplied table.
* IAS: mean cosine between the models' input-times-gradient attribution
  maps over a batch.
* RSA: Spearman correlation between the two backbones' representation
  dissimilarity matrices on a batch.
* LI: relative test-loss drop when the partner's label is injected as an
  extra input.
* GS: per-epoch cosine between the two tasks' backbone gradients in a
  joint run, averaged over all epochs.
* GT: per-epoch relative loss change of the target after a simulated
  backbone step on the partner's loss alone, averaged over all epochs.

GS values are kept in their natural [-1, 1] units here; any x100
presentation is a formatting concern. GT uses the "1 - ratio" form so
positive means the partner helps; the bare look-ahead ratio is recoverable
as 1 - score.
"""

from __future__ import annotations

from typing import Callable, Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .matrices import TaskMatrix
from .models import STLModel, TrainTrace
from .stats import spearman
from .tasks import TaxonomyDistances

__all__ = [
    "SCORE_KINDS",
    "SYMMETRIC_KINDS",
    "ScoreValue",
    "DegenerateScoreError",
    "MatrixAssemblyError",
    "AffinityMatrix",
    "taxonomical_distance",
    "input_x_gradient",
    "input_attribution_similarity",
    "representation_dissimilarity",
    "rsa",
    "label_injection",
    "gradient_similarity",
    "gradient_transference",
    "transference_ratio",
    "assemble_matrix",
]

# kind -> symmetric?
SCORE_KINDS: dict[str, bool] = {
    "TD": True, "IAS": True, "RSA": True, "LI": False, "GS": True, "GT": False,
}
SYMMETRIC_KINDS = frozenset(k for k, sym in SCORE_KINDS.items() if sym)


class DegenerateScoreError(ValueError):
    """The inputs admit no meaningful score (all examples skipped, ...)."""


class MatrixAssemblyError(ValueError):
    """Supplied per-pair values cannot fill a complete, consistent matrix."""


class ScoreValue(float):
    """A score that also remembers how many examples/epochs went into it."""

    skipped: int
    used: int

    def __new__(cls, value: float, skipped: int = 0, used: int = 0) -> "ScoreValue":
        obj = super().__new__(cls, value)
        obj.skipped = skipped
        obj.used = used
        return obj


class AffinityMatrix(TaskMatrix):
    """A TaskMatrix tagged with its score kind; symmetric kinds stay mirrored."""

    def __init__(self, score_kind: str, tasks, values=None):
        if score_kind not in SCORE_KINDS:
            raise ValueError(f"score_kind must be one of {sorted(SCORE_KINDS)}, got {score_kind!r}")
        self.score_kind = score_kind
        self.symmetric = SCORE_KINDS[score_kind]
        super().__init__(tasks, values)

    def set(self, with_task: str, target: str, value: float) -> None:
        if self.symmetric and self.has(target, with_task):
            mirror = self.get(target, with_task)
            if mirror != float(value):
                raise ValueError(
                    f"{self.score_kind} is symmetric but ({with_task}, {target}) = {value} "
                    f"conflicts with ({target}, {with_task}) = {mirror}")
        super().set(with_task, target, value)

    def __eq__(self, other) -> bool:
        if not isinstance(other, AffinityMatrix):
            return NotImplemented
        return self.score_kind == other.score_kind and super().__eq__(other)

    def __repr__(self) -> str:
        return (f"AffinityMatrix(kind={self.score_kind}, tasks={list(self.tasks)}, "
                f"filled={len(self._cells)})")

    @classmethod
    def from_csv_text(cls, text: str, score_kind: str = "") -> "AffinityMatrix":
        if not score_kind:
            raise ValueError("loading an AffinityMatrix needs an explicit score_kind")
        plain = TaskMatrix.from_csv_text(text)
        out = cls(score_kind, plain.tasks)
        for key, v in plain._cells.items():
            out.set(*key, v)
        return out

    @classmethod
    def from_csv(cls, path, score_kind: str = "") -> "AffinityMatrix":
        from pathlib import Path
        return cls.from_csv_text(Path(path).read_text(encoding="utf-8"), score_kind)

    def to_json_dict(self) -> dict:
        rows = [[None if w == t or not self.has(w, t) else self.get(w, t)
                 for t in self.tasks] for w in self.tasks]
        return {"score_kind": self.score_kind, "symmetric": self.symmetric,
                "with": list(self.tasks), "rows": rows}

    @classmethod
    def from_json_dict(cls, payload: Mapping) -> "AffinityMatrix":
        try:
            kind = payload["score_kind"]
            tasks = payload["with"]
            rows = payload["rows"]
        except (KeyError, TypeError) as exc:
            raise ValueError(f"affinity JSON needs score_kind/with/rows: {exc}") from exc
        out = cls(kind, tasks)
        if len(rows) != len(out.tasks):
            raise ValueError(f"expected {len(out.tasks)} rows, got {len(rows)}")
        for w, row in zip(out.tasks, rows):
            if len(row) != len(out.tasks):
                raise ValueError(f"row for {w!r} has {len(row)} cells")
            for t, v in zip(out.tasks, row):
                if w == t:
                    if v is not None:
                        raise ValueError(f"diagonal for {t!r} must be null")
                elif v is not None:
                    out.set(w, t, v)
        return out


def taxonomical_distance(distances: TaxonomyDistances, a: str, b: str) -> float:
    """The (already negated) tree distance between two tasks; symmetric."""
    return distances.distance(a, b)


def input_x_gradient(model: STLModel, inputs: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Attribution maps: input elementwise times d(test loss)/d(input).

    One row per example. The batch-mean loss is differentiated, which
    scales every row by the same positive constant relative to per-example
    losses; direction-based uses (cosines, zero checks) are unaffected.
    """
    x = ad.Tensor(np.asarray(inputs, dtype=np.float64), requires_grad=True)
    with ad.Tape():
        loss = model.loss_graph(x, labels)
        ad.backward(loss)
    return x.data * x.grad


def input_attribution_similarity(
    model_a: STLModel,
    model_b: STLModel,
    inputs: np.ndarray,
    labels_a: np.ndarray,
    labels_b: np.ndarray,
    attribution: Callable[[STLModel, np.ndarray, np.ndarray], np.ndarray] = input_x_gradient,
) -> ScoreValue:
    """Mean per-example cosine between the two models' attribution maps.

    Symmetric, in [-1, 1]. Examples where either map has zero norm are
    skipped; the returned value records how many.

    Raises:
        DegenerateScoreError: every example was skipped.
    """
    inputs = np.asarray(inputs, dtype=np.float64)
    if inputs.ndim != 2 or inputs.shape[0] == 0:
        raise ValueError(f"need a non-empty 2-D batch, got shape {inputs.shape}")
    for name, model in (("first", model_a), ("second", model_b)):
        if model.config.input_dim != inputs.shape[1]:
            raise ValueError(f"{name} model expects input width {model.config.input_dim}, "
                             f"batch has {inputs.shape[1]}")
    attr_a = attribution(model_a, inputs, labels_a)
    attr_b = attribution(model_b, inputs, labels_b)
    norm_a = np.linalg.norm(attr_a, axis=1)
    norm_b = np.linalg.norm(attr_b, axis=1)
    usable = (norm_a > 0.0) & (norm_b > 0.0)
    skipped = int(np.sum(~usable))
    if not np.any(usable):
        raise DegenerateScoreError(
            f"all {inputs.shape[0]} examples had a zero-norm attribution map")
    cosines = (np.sum(attr_a[usable] * attr_b[usable], axis=1)
               / (norm_a[usable] * norm_b[usable]))
    value = float(np.clip(np.mean(np.clip(cosines, -1.0, 1.0)), -1.0, 1.0))
    return ScoreValue(value, skipped=skipped, used=int(np.sum(usable)))


def representation_dissimilarity(latents: np.ndarray) -> np.ndarray:
    """RDM of a latent batch: entry (i, j) is 1 - Pearson(z_i, z_j).

    Raises:
        DegenerateScoreError: some example's latent vector is constant, so
            its correlations are undefined; the message names the example.
    """
    z = np.asarray(latents, dtype=np.float64)
    if z.ndim != 2 or z.shape[1] < 2:
        raise ValueError(f"need (m, latent_dim >= 2) latents, got shape {z.shape}")
    centered = z - z.mean(axis=1, keepdims=True)
    norms = np.linalg.norm(centered, axis=1)
    flat = np.flatnonzero(norms == 0.0)
    if flat.size:
        raise DegenerateScoreError(
            f"latent vector of example {int(flat[0])} is constant; "
            f"its correlation distance is undefined")
    corr = (centered @ centered.T) / np.outer(norms, norms)
    return 1.0 - np.clip(corr, -1.0, 1.0)


def rsa(model_a: STLModel, model_b: STLModel, inputs: np.ndarray) -> float:
    """Spearman correlation of the two backbones' RDM upper triangles.

    Symmetric, in [-1, 1]. Needs at least 3 examples so the triangles have
    3 or more entries.
    """
    inputs = np.asarray(inputs, dtype=np.float64)
    if inputs.ndim != 2 or inputs.shape[0] < 3:
        raise ValueError(f"rsa needs a batch of at least 3 examples, got shape {inputs.shape}")
    rdm_a = representation_dissimilarity(model_a.latent(inputs))
    rdm_b = representation_dissimilarity(model_b.latent(inputs))
    iu = np.triu_indices(inputs.shape[0], k=1)
    return spearman(rdm_a[iu], rdm_b[iu])


def label_injection(loss_stl: float, loss_injected: float) -> float:
    """Relative loss improvement from injecting the partner's label.

    (loss_stl - loss_injected) / loss_injected for one (target, partner)
    direction. Positive means the injected label helped.

    Raises:
        ValueError: either loss is <= 0; losses here are non-negative by
            construction and a zero denominator marks a degenerate task.
    """
    if loss_stl <= 0.0 or loss_injected <= 0.0:
        raise ValueError(f"label injection needs positive losses, got "
                         f"stl={loss_stl}, injected={loss_injected}")
    return (loss_stl - loss_injected) / loss_injected


def gradient_similarity(trace: TrainTrace) -> float:
    """Mean of the per-epoch backbone-gradient cosines over all epochs."""
    if trace.gs_cosine is None or not trace.gs_cosine:
        raise ValueError("trace has no recorded gradient cosines; was this an MTL run?")
    return float(np.mean(trace.gs_cosine))


def gradient_transference(trace: TrainTrace, target: str) -> ScoreValue:
    """Mean over epochs of 1 - (target loss after partner step) / (before).

    Positive means the partner's backbone updates helped the target.
    Epochs with a zero pre-update loss are skipped and counted.

    Raises:
        DegenerateScoreError: every epoch was skipped.
    """
    if trace.lookahead is None or target not in trace.lookahead:
        have = sorted(trace.lookahead) if trace.lookahead else []
        raise ValueError(f"trace has no look-ahead record for {target!r}; has {have}")
    pairs = trace.lookahead[target]
    if not pairs:
        raise ValueError(f"look-ahead record for {target!r} is empty")
    values = [1.0 - post / pre for pre, post in pairs if pre != 0.0]
    skipped = len(pairs) - len(values)
    if not values:
        raise DegenerateScoreError(
            f"all {len(pairs)} epochs had zero pre-update loss for {target!r}")
    return ScoreValue(float(np.mean(values)), skipped=skipped, used=len(values))


def transference_ratio(trace: TrainTrace, target: str) -> float:
    """The bare look-ahead loss ratio, averaged over epochs: 1 - GT score."""
    return 1.0 - gradient_transference(trace, target)


def assemble_matrix(score_kind: str, tasks: Sequence[str],
                    values: Mapping[tuple[str, str], float]) -> AffinityMatrix:
    """Fill a complete AffinityMatrix from per-pair scores.

    Keys are (with_task, target). Symmetric kinds may supply either or both
    directions of a pair (they must agree); asymmetric kinds must supply
    every ordered pair.

    Raises:
        MatrixAssemblyError: a pair is missing, a symmetric pair disagrees,
            or a key names an unknown task.
    """
    matrix = AffinityMatrix(score_kind, tasks)
    known = set(matrix.tasks)
    for (w, t) in values:
        if w not in known or t not in known:
            raise MatrixAssemblyError(f"value for unknown pair ({w!r}, {t!r}); "
                                      f"tasks are {list(matrix.tasks)}")
        if w == t:
            raise MatrixAssemblyError(f"diagonal value supplied for {w!r}")
    if matrix.symmetric:
        for i, a in enumerate(matrix.tasks):
            for b in matrix.tasks[i + 1:]:
                provided = [values[k] for k in ((a, b), (b, a)) if k in values]
                if not provided:
                    raise MatrixAssemblyError(f"missing value for pair ({a!r}, {b!r})")
                if len(provided) == 2 and provided[0] != provided[1]:
                    raise MatrixAssemblyError(
                        f"symmetric kind {score_kind} got conflicting values for "
                        f"({a!r}, {b!r}): {provided[0]} vs {provided[1]}")
                matrix.set(a, b, provided[0])
                matrix.set(b, a, provided[0])
    else:
        for w in matrix.tasks:
            for t in matrix.tasks:
                if w == t:
                    continue
                if (w, t) not in values:
                    raise MatrixAssemblyError(f"missing value for ordered pair ({w!r}, {t!r})")
                matrix.set(w, t, values[(w, t)])
    return matrix
