"""Tiny MLP models and the training loop the affinity scores observe.

Three model families, all sharing one dense+ReLU backbone shape:

* single-task (STL): backbone -> one head;
* pairwise multi-task (MTL): one shared backbone -> two heads, trained on
  the unweighted sum of the two task losses;
* label-injected STL: an STL model for task ``a`` whose input is the
  original input concatenated with an encoding of task ``b``'s label.

Training is plain minibatch SGD with an exponentially decaying learning
rate. Every epoch the trainer records full train/validation losses and a
parameter snapshot, and for MTL runs the two per-epoch quantities the
gradient-based scores are built from: the cosine between the two tasks'
backbone gradients, and the look-ahead losses after a simulated one-step
backbone update on the partner's loss alone. Both are measured on one
fixed evaluation batch so traces are deterministic.

The returned model carries the parameters of the epoch with the lowest
validation loss (combined loss for MTL; ties go to the earliest epoch).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .seeding import BATCHING, INIT, model_stream
from .tasks import MultiTaskDataset, TaskSpec

__all__ = [
    "BackboneConfig",
    "TrainConfig",
    "TrainTrace",
    "TrainingDivergedError",
    "STLModel",
    "MTLModel",
    "InjectedSTLModel",
    "multiply_add_count",
    "half_capacity",
    "encode_labels",
    "train_stl",
    "train_mtl",
    "train_injected",
    "save_checkpoint",
    "load_checkpoint",
    "checkpoint_filename",
]


class TrainingDivergedError(RuntimeError):
    """A loss became non-finite; ``epoch`` is the 0-based epoch it happened in."""

    def __init__(self, epoch: int, message: str = ""):
        super().__init__(message or f"training diverged at epoch {epoch}")
        self.epoch = epoch


@dataclass(frozen=True)
class BackboneConfig:
    """Widths of the shared trunk: input -> hidden ... -> latent output.

    The latent output layer is linear; ReLU sits between dense layers only.
    """
    input_dim: int
    hidden_widths: tuple[int, ...]
    latent_dim: int

    def __post_init__(self):
        object.__setattr__(self, "hidden_widths", tuple(int(w) for w in self.hidden_widths))
        for w in (self.input_dim, *self.hidden_widths, self.latent_dim):
            if w < 1:
                raise ValueError(f"all widths must be positive, got {self}")

    def layer_widths(self) -> list[tuple[int, int]]:
        chain = [self.input_dim, *self.hidden_widths, self.latent_dim]
        return list(zip(chain[:-1], chain[1:]))

    def with_input_dim(self, input_dim: int) -> "BackboneConfig":
        return BackboneConfig(input_dim, self.hidden_widths, self.latent_dim)


@dataclass(frozen=True)
class TrainConfig:
    seed: int
    epochs: int = 50
    initial_lr: float = 0.05
    lr_decay: float = 0.95
    batch_size: int = 32
    eval_batch_size: int = 256

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if not 0.0 < self.lr_decay <= 1.0:
            raise ValueError(f"lr_decay must be in (0, 1], got {self.lr_decay}")
        if self.initial_lr <= 0:
            raise ValueError(f"initial_lr must be > 0, got {self.initial_lr}")
        if self.batch_size < 1 or self.eval_batch_size < 1:
            raise ValueError("batch sizes must be >= 1")

    def lr_at(self, epoch: int) -> float:
        return self.initial_lr * self.lr_decay ** epoch


@dataclass
class TrainTrace:
    """Per-epoch record of one training run. Epoch indices are 0-based.

    ``lookahead`` maps a target task name to per-epoch (pre, post) losses:
    the target's evaluation-batch loss before and after a simulated
    backbone-only SGD step on the partner task's loss.
    """
    train_loss: list[dict[str, float]]
    val_loss: list[dict[str, float]]
    combined_val: list[float]
    best_epoch: int
    gs_cosine: list[float] | None = None
    lookahead: dict[str, list[tuple[float, float]]] | None = None
    param_snapshots: list[dict[str, np.ndarray]] = field(default_factory=list, repr=False)

    @property
    def epochs(self) -> int:
        return len(self.combined_val)

    def to_json_dict(self) -> dict:
        d = {"train_loss": self.train_loss, "val_loss": self.val_loss,
             "combined_val": self.combined_val, "best_epoch": self.best_epoch}
        if self.gs_cosine is not None:
            d["gs_cosine"] = self.gs_cosine
        if self.lookahead is not None:
            d["lookahead"] = {t: [list(p) for p in pairs] for t, pairs in self.lookahead.items()}
        return d


class _LayerStack:
    """Dense layers with ReLU between them; the final layer stays linear."""

    def __init__(self, weights: list[ad.Tensor], biases: list[ad.Tensor], prefix: str):
        self.weights = weights
        self.biases = biases
        self.prefix = prefix

    @classmethod
    def init(cls, rng: np.random.Generator, widths: Sequence[tuple[int, int]],
             prefix: str) -> "_LayerStack":
        # He initialization: N(0, sqrt(2 / fan_in)) weights, zero biases.
        ws, bs = [], []
        for fan_in, fan_out in widths:
            ws.append(ad.Tensor(rng.normal(0.0, math.sqrt(2.0 / fan_in), (fan_in, fan_out)),
                                requires_grad=True))
            bs.append(ad.Tensor(np.zeros(fan_out), requires_grad=True))
        return cls(ws, bs, prefix)

    def copy_params_from(self, other: "_LayerStack") -> None:
        for mine, theirs in zip(self.weights + self.biases, other.weights + other.biases):
            mine.data = theirs.data.copy()

    def forward(self, x: ad.Tensor) -> ad.Tensor:
        out = x
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out = ad.add(ad.matmul(out, w), b)
            if i != last:
                out = ad.relu(out)
        return out

    def params(self) -> list[ad.Tensor]:
        return [*self.weights, *self.biases]

    def named_params(self) -> dict[str, ad.Tensor]:
        named = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            named[f"{self.prefix}.w{i}"] = w
            named[f"{self.prefix}.b{i}"] = b
        return named

    def multiply_add_count(self) -> int:
        return sum(w.shape[0] * w.shape[1] for w in self.weights)

    def shapes(self) -> list[tuple[int, int]]:
        return [w.shape for w in self.weights]


def encode_labels(spec: TaskSpec, labels: np.ndarray) -> np.ndarray:
    """Labels as network-ready floats: one-hot for classes, raw for regression."""
    if spec.kind == "classification":
        idx = np.asarray(labels).astype(np.int64).reshape(-1)
        if idx.size and (idx.min() < 0 or idx.max() >= spec.output_dim):
            raise ValueError(f"labels for {spec.name!r} outside [0, {spec.output_dim})")
        onehot = np.zeros((idx.shape[0], spec.output_dim))
        onehot[np.arange(idx.shape[0]), idx] = 1.0
        return onehot
    return np.asarray(labels, dtype=np.float64).reshape(len(labels), -1)


def _task_loss(pred: ad.Tensor, spec: TaskSpec, labels: np.ndarray) -> ad.Tensor:
    if spec.kind == "classification":
        return ad.softmax_cross_entropy(pred, np.asarray(labels).reshape(-1))
    return ad.mse_loss(pred, ad.Tensor(np.asarray(labels, dtype=np.float64)))


class _ModelBase:
    """Shared plumbing: parameter access, loss evaluation, checkpoints."""

    backbone: _LayerStack
    config: BackboneConfig

    def _heads(self) -> dict[str, _LayerStack]:
        raise NotImplementedError

    def _spec(self, task: str) -> TaskSpec:
        raise NotImplementedError

    def params(self) -> list[ad.Tensor]:
        out = self.backbone.params()
        for head in self._heads().values():
            out.extend(head.params())
        return out

    def backbone_params(self) -> list[ad.Tensor]:
        return self.backbone.params()

    def named_params(self) -> dict[str, ad.Tensor]:
        named = self.backbone.named_params()
        for head in self._heads().values():
            named.update(head.named_params())
        return named

    def set_params(self, snapshot: Mapping[str, np.ndarray]) -> None:
        named = self.named_params()
        if set(named) != set(snapshot):
            raise ValueError(f"snapshot keys {sorted(snapshot)} != model keys {sorted(named)}")
        for name, tensor in named.items():
            if tensor.data.shape != snapshot[name].shape:
                raise ValueError(f"shape mismatch for {name}")
            tensor.data = np.array(snapshot[name], dtype=np.float64)

    def snapshot(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.named_params().items()}

    def latent(self, inputs: np.ndarray) -> np.ndarray:
        """Backbone output for raw inputs, no gradient tracking."""
        return self.backbone.forward(ad.Tensor(inputs)).data

    def task_prediction(self, task: str, inputs: ad.Tensor) -> ad.Tensor:
        return self._heads()[task].forward(self.backbone.forward(inputs))

    def task_loss_graph(self, task: str, inputs: ad.Tensor, labels: np.ndarray) -> ad.Tensor:
        """Loss node for one task; caller controls the tape and the input tensor."""
        return _task_loss(self.task_prediction(task, inputs), self._spec(task), labels)

    def task_loss_value(self, task: str, inputs: np.ndarray, labels: np.ndarray) -> float:
        return self.task_loss_graph(task, ad.Tensor(inputs), labels).item()


class STLModel(_ModelBase):
    """One backbone, one head, one task."""

    def __init__(self, spec: TaskSpec, config: BackboneConfig,
                 backbone: _LayerStack, head: _LayerStack):
        self.spec = spec
        self.config = config
        self.backbone = backbone
        self.head = head

    @classmethod
    def init(cls, spec: TaskSpec, config: BackboneConfig, rng: np.random.Generator) -> "STLModel":
        backbone = _LayerStack.init(rng, config.layer_widths(), "backbone")
        head = _LayerStack.init(rng, [(config.latent_dim, spec.output_dim)], f"head.{spec.name}")
        return cls(spec, config, backbone, head)

    def _heads(self) -> dict[str, _LayerStack]:
        return {self.spec.name: self.head}

    def _spec(self, task: str) -> TaskSpec:
        if task != self.spec.name:
            raise KeyError(f"model serves {self.spec.name!r}, not {task!r}")
        return self.spec

    def loss_graph(self, inputs: ad.Tensor, labels: np.ndarray) -> ad.Tensor:
        return self.task_loss_graph(self.spec.name, inputs, labels)

    def loss_value(self, inputs: np.ndarray, labels: np.ndarray) -> float:
        return self.task_loss_value(self.spec.name, inputs, labels)


class MTLModel(_ModelBase):
    """Shared backbone, two heads; the objective is loss_a + loss_b."""

    def __init__(self, spec_a: TaskSpec, spec_b: TaskSpec, config: BackboneConfig,
                 backbone: _LayerStack, head_a: _LayerStack, head_b: _LayerStack):
        if spec_a.name == spec_b.name:
            raise ValueError("an MTL pair needs two distinct task names")
        self.spec_a = spec_a
        self.spec_b = spec_b
        self.config = config
        self.backbone = backbone
        self.head_a = head_a
        self.head_b = head_b

    @classmethod
    def init(cls, spec_a: TaskSpec, spec_b: TaskSpec, config: BackboneConfig,
             rng: np.random.Generator) -> "MTLModel":
        backbone = _LayerStack.init(rng, config.layer_widths(), "backbone")
        head_a = _LayerStack.init(rng, [(config.latent_dim, spec_a.output_dim)],
                                  f"head.{spec_a.name}")
        head_b = _LayerStack.init(rng, [(config.latent_dim, spec_b.output_dim)],
                                  f"head.{spec_b.name}")
        if spec_a.output_dim == spec_b.output_dim:
            # Same-shape heads start from identical weights so that a task
            # paired with a copy of itself keeps bit-identical heads, which
            # is what makes the duplicated-task gradient cosine exactly 1.
            head_b.copy_params_from(head_a)
        return cls(spec_a, spec_b, config, backbone, head_a, head_b)

    @property
    def pair(self) -> tuple[str, str]:
        return (self.spec_a.name, self.spec_b.name)

    def _heads(self) -> dict[str, _LayerStack]:
        return {self.spec_a.name: self.head_a, self.spec_b.name: self.head_b}

    def _spec(self, task: str) -> TaskSpec:
        for s in (self.spec_a, self.spec_b):
            if s.name == task:
                return s
        raise KeyError(f"model serves {self.pair}, not {task!r}")

    def combined_loss_graph(self, inputs: ad.Tensor,
                            labels: Mapping[str, np.ndarray]) -> ad.Tensor:
        la = self.task_loss_graph(self.spec_a.name, inputs, labels[self.spec_a.name])
        lb = self.task_loss_graph(self.spec_b.name, inputs, labels[self.spec_b.name])
        return ad.add(la, lb)


class InjectedSTLModel(_ModelBase):
    """STL for a target task over inputs extended with a partner's label."""

    def __init__(self, spec: TaskSpec, partner: TaskSpec, config: BackboneConfig,
                 backbone: _LayerStack, head: _LayerStack):
        self.spec = spec
        self.partner = partner
        self.config = config  # input_dim already includes the encoding width
        self.backbone = backbone
        self.head = head

    @classmethod
    def init(cls, spec: TaskSpec, partner: TaskSpec, half_config: BackboneConfig,
             rng: np.random.Generator) -> "InjectedSTLModel":
        enc_width = partner.output_dim
        config = half_config.with_input_dim(half_config.input_dim + enc_width)
        backbone = _LayerStack.init(rng, config.layer_widths(), "backbone")
        head = _LayerStack.init(rng, [(config.latent_dim, spec.output_dim)], f"head.{spec.name}")
        return cls(spec, partner, config, backbone, head)

    def _heads(self) -> dict[str, _LayerStack]:
        return {self.spec.name: self.head}

    def _spec(self, task: str) -> TaskSpec:
        if task != self.spec.name:
            raise KeyError(f"model serves {self.spec.name!r}, not {task!r}")
        return self.spec

    def extend_inputs(self, inputs: np.ndarray, partner_labels: np.ndarray) -> np.ndarray:
        return np.concatenate([inputs, encode_labels(self.partner, partner_labels)], axis=1)

    def loss_value(self, inputs: np.ndarray, labels: np.ndarray,
                   partner_labels: np.ndarray) -> float:
        extended = self.extend_inputs(inputs, partner_labels)
        return self.task_loss_value(self.spec.name, extended, labels)


def multiply_add_count(obj) -> int:
    """Per-example multiply-adds: sum of in_width x out_width over dense layers.

    A bare config counts the backbone alone; a model counts its backbone
    plus every head it has.
    """
    if isinstance(obj, BackboneConfig):
        return sum(fi * fo for fi, fo in obj.layer_widths())
    if isinstance(obj, _ModelBase):
        total = obj.backbone.multiply_add_count()
        for head in obj._heads().values():
            total += head.multiply_add_count()
        return total
    raise TypeError(f"expected BackboneConfig or a model, got {type(obj).__name__}")


def half_capacity(full: BackboneConfig) -> BackboneConfig:
    """Uniformly shrink hidden widths until the count is at most half.

    Searches integer numerators k = max_width .. 1, scaling every hidden
    width to max(1, floor(w * k / max_width)), and returns the first (i.e.
    largest-factor) config whose multiply-add count is <= 0.5x the full one.
    """
    if not full.hidden_widths:
        raise ValueError("half_capacity needs at least one hidden layer")
    budget = 0.5 * multiply_add_count(full)
    widest = max(full.hidden_widths)
    for k in range(widest, 0, -1):
        widths = tuple(max(1, w * k // widest) for w in full.hidden_widths)
        candidate = BackboneConfig(full.input_dim, widths, full.latent_dim)
        if multiply_add_count(candidate) <= budget:
            return candidate
    raise ValueError(f"no width assignment of {full} fits the half-capacity budget")


# --- training loop ---


def _epoch_batches(rng: np.random.Generator, n: int, batch_size: int):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def _check_finite(value: float, epoch: int) -> float:
    if not math.isfinite(value):
        raise TrainingDivergedError(epoch)
    return value


def _eval_batch(dataset: MultiTaskDataset, size: int) -> np.ndarray:
    test_idx = dataset.splits["test"]
    return test_idx[:min(size, len(test_idx))]


def _backbone_grad_flat(model: _ModelBase, task: str, inputs: np.ndarray,
                        labels: np.ndarray) -> np.ndarray:
    ad.zero_grads(model.params())
    with ad.Tape():
        loss = model.task_loss_graph(task, ad.Tensor(inputs), labels)
        ad.backward(loss)
    flat = np.concatenate([
        (np.zeros_like(p.data) if p.grad is None else p.grad).ravel()
        for p in model.backbone_params()])
    ad.zero_grads(model.params())
    return flat


def _lookahead_losses(model: MTLModel, target: str, partner: str, lr: float,
                      inputs: np.ndarray, labels: Mapping[str, np.ndarray]) -> tuple[float, float]:
    """Target-task eval loss before/after one backbone-only step on the partner loss."""
    pre = model.task_loss_value(target, inputs, labels[target])
    grad = _backbone_grad_flat(model, partner, inputs, labels[partner])
    saved = [p.data.copy() for p in model.backbone_params()]
    offset = 0
    for p in model.backbone_params():
        p.data = p.data - lr * grad[offset:offset + p.data.size].reshape(p.data.shape)
        offset += p.data.size
    post = model.task_loss_value(target, inputs, labels[target])
    for p, s in zip(model.backbone_params(), saved):
        p.data = s
    return pre, post


def _gs_cosine(model: MTLModel, inputs: np.ndarray,
               labels: Mapping[str, np.ndarray]) -> float:
    a, b = model.pair
    ga = _backbone_grad_flat(model, a, inputs, labels[a])
    gb = _backbone_grad_flat(model, b, inputs, labels[b])
    na, nb = np.linalg.norm(ga), np.linalg.norm(gb)
    if na == 0.0 or nb == 0.0:
        return 0.0  # no shared descent direction to speak of
    return float(np.clip(ga @ gb / (na * nb), -1.0, 1.0))


def _run_training(model: _ModelBase, tasks: list[str], dataset: MultiTaskDataset,
                  cfg: TrainConfig, model_key: str,
                  labels_for: Mapping[str, np.ndarray],
                  record_pair_quantities: bool) -> TrainTrace:
    """The shared epoch loop. ``labels_for`` maps task -> full label array."""
    batch_rng = model_stream(cfg.seed, BATCHING, model_key)
    train_idx = dataset.splits["train"]
    val_idx = dataset.splits["val"]
    eval_idx = _eval_batch(dataset, cfg.eval_batch_size)
    eval_inputs = dataset.inputs[eval_idx]
    eval_labels = {t: labels_for[t][eval_idx] for t in tasks}

    def split_loss(idx: np.ndarray) -> dict[str, float]:
        x = dataset.inputs[idx]
        return {t: model.task_loss_value(t, x, labels_for[t][idx]) for t in tasks}

    trace = TrainTrace(train_loss=[], val_loss=[], combined_val=[], best_epoch=0)
    if record_pair_quantities:
        trace.gs_cosine = []
        trace.lookahead = {t: [] for t in tasks}

    for epoch in range(cfg.epochs):
        lr = cfg.lr_at(epoch)
        for batch in _epoch_batches(batch_rng, len(train_idx), cfg.batch_size):
            idx = train_idx[batch]
            x = ad.Tensor(dataset.inputs[idx])
            with ad.Tape():
                losses = [model.task_loss_graph(t, x, labels_for[t][idx]) for t in tasks]
                total = losses[0]
                for extra in losses[1:]:
                    total = ad.add(total, extra)
                _check_finite(total.item(), epoch)
                ad.backward(total)
            ad.sgd_step(model.params(), lr)

        epoch_train = split_loss(train_idx)
        epoch_val = split_loss(val_idx)
        for v in (*epoch_train.values(), *epoch_val.values()):
            _check_finite(v, epoch)
        trace.train_loss.append(epoch_train)
        trace.val_loss.append(epoch_val)
        trace.combined_val.append(sum(epoch_val.values()))
        trace.param_snapshots.append(model.snapshot())

        if record_pair_quantities:
            assert isinstance(model, MTLModel)
            trace.gs_cosine.append(_gs_cosine(model, eval_inputs, eval_labels))
            a, b = model.pair
            trace.lookahead[a].append(
                _lookahead_losses(model, a, b, lr, eval_inputs, eval_labels))
            trace.lookahead[b].append(
                _lookahead_losses(model, b, a, lr, eval_inputs, eval_labels))

    best = min(range(cfg.epochs), key=lambda e: (trace.combined_val[e], e))
    trace.best_epoch = best
    model.set_params(trace.param_snapshots[best])
    return trace


def _require_tasks(dataset: MultiTaskDataset, names: list[str]) -> None:
    missing = [n for n in names if n not in dataset.labels]
    if missing:
        raise KeyError(f"dataset lacks labels for {missing}; has {sorted(dataset.labels)}")


def train_stl(task: TaskSpec, dataset: MultiTaskDataset, backbone: BackboneConfig,
              cfg: TrainConfig) -> tuple[STLModel, TrainTrace]:
    """Train a single-task model; returns it at its best validation epoch."""
    _require_tasks(dataset, [task.name])
    key = f"stl/{task.name}"
    model = STLModel.init(task, backbone, model_stream(cfg.seed, INIT, key))
    trace = _run_training(model, [task.name], dataset, cfg, key,
                          dataset.labels, record_pair_quantities=False)
    return model, trace


def train_mtl(pair: tuple[TaskSpec, TaskSpec], dataset: MultiTaskDataset,
              backbone: BackboneConfig, cfg: TrainConfig) -> tuple[MTLModel, TrainTrace]:
    """Train both tasks on a shared backbone, minimizing the plain loss sum.

    The trace additionally carries, per epoch and measured on the fixed
    evaluation batch: the backbone-gradient cosine between the tasks, and
    look-ahead (pre, post) losses per direction.
    """
    spec_a, spec_b = pair
    _require_tasks(dataset, [spec_a.name, spec_b.name])
    key = f"mtl/{spec_a.name}/{spec_b.name}"
    model = MTLModel.init(spec_a, spec_b, backbone, model_stream(cfg.seed, INIT, key))
    trace = _run_training(model, [spec_a.name, spec_b.name], dataset, cfg, key,
                          dataset.labels, record_pair_quantities=True)
    return model, trace


def train_injected(target: TaskSpec, partner: TaskSpec, dataset: MultiTaskDataset,
                   half_backbone: BackboneConfig, cfg: TrainConfig,
                   ) -> tuple[InjectedSTLModel, TrainTrace]:
    """Train STL for ``target`` with ``partner``'s label appended to the input.

    The backbone keeps the half-capacity hidden widths; only the input layer
    widens by the label encoding (one-hot for classification, raw values for
    regression). ``partner`` may equal ``target``: injecting a task's own
    label is the upper-bound case.
    """
    _require_tasks(dataset, [target.name, partner.name])
    key = f"inj/{target.name}/{partner.name}"
    model = InjectedSTLModel.init(target, partner, half_backbone,
                                  model_stream(cfg.seed, INIT, key))
    extended = np.concatenate(
        [dataset.inputs, encode_labels(partner, dataset.labels[partner.name])], axis=1)
    injected_view = MultiTaskDataset(extended, dict(dataset.labels), dataset.splits,
                                     dataset.seed)
    trace = _run_training(model, [target.name], injected_view, cfg, key,
                          injected_view.labels, record_pair_quantities=False)
    return model, trace


# --- checkpoint I/O ---


def checkpoint_filename(kind: str, tasks: Sequence[str], seed: int, epoch: int) -> str:
    return f"{kind}_{'+'.join(tasks)}_seed{seed}_epoch{epoch:03d}.json"


def save_checkpoint(params: Mapping[str, np.ndarray], path: str | Path) -> None:
    payload = {name: {"shape": list(arr.shape), "data": np.asarray(arr).ravel().tolist()}
               for name, arr in params.items()}
    Path(path).write_text(json.dumps(payload) + "\n", encoding="utf-8")


def load_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    return {name: np.asarray(entry["data"], dtype=np.float64).reshape(entry["shape"])
            for name, entry in payload.items()}
