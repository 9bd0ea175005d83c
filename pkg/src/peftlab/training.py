"""Training loops, the Adam optimizer, and the hyperparameter grid runner.

Cells are fully deterministic: a (seed, lr, epochs, method) tuple always
reproduces the same metric, and report records carry everything needed to
rerun one cell.
"""

from __future__ import annotations

import dataclasses
import json
import time
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import tensor as T
from .configs import parse_config
from .model import REGRESSION, ModelDims
from .registry import AdapterModel
from .tasks import Dataset, TaskSpec, make_task
from .tensor import Tape, Tensor


class Adam:
    """Standard bias-corrected Adam over a list of tensors.

    Tensors without a gradient are skipped; gradients are cleared by
    ``zero_grad`` (accumulation is the caller's choice otherwise).
    """

    def __init__(self, params, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        if isinstance(params, dict):
            params = list(params.values())
        self.params = list(params)
        self.lr = float(lr)
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, m, v in zip(self.params, self._m, self._v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * (g * g)
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


# ---------------------------------------------------------------------------
# losses and metrics


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood; accepts (B, C) or (B, S, C) logits."""
    labels = np.asarray(labels)
    logp = T.log_softmax(logits, axis=-1)
    onehot = np.zeros(logits.shape)
    if logits.ndim == 2:
        onehot[np.arange(labels.shape[0]), labels] = 1.0
        n = labels.shape[0]
    else:
        b_idx, s_idx = np.meshgrid(np.arange(labels.shape[0]), np.arange(labels.shape[1]),
                                   indexing="ij")
        onehot[b_idx, s_idx, labels] = 1.0
        n = labels.size
    return T.scale(T.tsum(T.mul(logp, T.constant(onehot))), -1.0 / n)


def mse_loss(pred: Tensor, target: np.ndarray) -> Tensor:
    target = np.asarray(target, dtype=np.float64).reshape(pred.shape)
    diff = pred - T.constant(target)
    return T.tmean(T.mul(diff, diff))


def task_loss(kind: str, logits: Tensor, y: np.ndarray) -> Tensor:
    if kind == REGRESSION:
        return mse_loss(logits, y)
    return cross_entropy(logits, y)


def task_metric(kind: str, logits: np.ndarray, y: np.ndarray) -> float:
    """Accuracy for (token) classification, mean squared error otherwise."""
    if kind == REGRESSION:
        return float(np.mean((logits.reshape(y.shape) - y) ** 2))
    pred = logits.argmax(axis=-1)
    return float(np.mean(pred == y))


def evaluate(model: AdapterModel, head: str, x: np.ndarray, y: np.ndarray,
             batch_size: int = 64) -> float:
    kind = model.head(head).kind
    outs = []
    for off in range(0, x.shape[0], batch_size):
        state = model.encode(x[off:off + batch_size])
        outs.append(model.logits(state, head).data)
    return task_metric(kind, np.concatenate(outs, axis=0), y)


# ---------------------------------------------------------------------------
# training loops


@dataclass
class TrainResult:
    losses: list
    steps: int
    diverged: bool


def train_model(model: AdapterModel, head: str, x: np.ndarray, y: np.ndarray,
                lr: float, epochs: int, batch_size: int = 16,
                seed: int = 0) -> TrainResult:
    """Minimize the task loss over the model's trainable partition."""
    params = model.trainable_parameters()
    if not params:
        raise RuntimeError("nothing is trainable; call train_adapter or train_full first")
    opt = Adam(params, lr=lr)
    kind = model.head(head).kind
    rng = np.random.default_rng(seed)
    losses = []
    steps = 0
    n = x.shape[0]
    for _ in range(epochs):
        perm = rng.permutation(n)
        for off in range(0, n, batch_size):
            idx = perm[off:off + batch_size]
            with Tape() as tape:
                state = model.encode(x[idx])
                logits = model.logits(state, head)
                loss = task_loss(kind, logits, y[idx])
                val = loss.item()
                if not np.isfinite(val):
                    return TrainResult(losses, steps, diverged=True)
                tape.backward(loss)
            opt.step()
            opt.zero_grad()
            losses.append(val)
            steps += 1
    return TrainResult(losses, steps, diverged=False)


def pretrain_base(model: AdapterModel, spec: TaskSpec, data: Dataset,
                  epochs: int, lr: float = 1e-3, seed: int = 0) -> None:
    """Fit the raw backbone on the held-out pretraining split (full
    fine-tuning with a throwaway head), then freeze it again."""
    if epochs <= 0:
        return
    head = "_pretrain"
    if not model.has_head(head):
        model.add_prediction_head(head, spec.head_kind, spec.head_labels)
    model.train_full(head=head)
    train_model(model, head, data.pretrain_x, data.pretrain_y,
                lr=lr, epochs=epochs, seed=seed)
    model.freeze_all()
    model.set_active(None)


# ---------------------------------------------------------------------------
# grid runner


# Hyperparameter sets mirrored by the harness; the learning-rate list is the
# deduplicated published set.
DEFAULT_LRS = (1e-5, 1e-4, 5e-4, 1e-3)
DEFAULT_EPOCHS = (5, 10, 20, 30)

FULL_FT = "full-ft"


@dataclass(frozen=True)
class GridSpec:
    methods: tuple = ("seq_bn",)
    lrs: tuple = DEFAULT_LRS
    epochs: tuple = DEFAULT_EPOCHS
    batch_size: int = 16
    seed: int = 0
    pretrain_epochs: int = 4
    pretrain_lr: float = 1e-3
    include_full_ft: bool = False
    method_axes: dict = field(default_factory=dict)   # method -> {axis: values}


@dataclass
class CellRecord:
    method: str
    config: dict
    lr: float
    epochs: int
    seed: int
    metric: float
    metric_name: str
    n_params: int
    seconds: float
    diverged: bool = False
    final_loss: Optional[float] = None

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), sort_keys=True)


CSV_FIELDS = ("method", "config", "lr", "epochs", "seed", "metric", "metric_name",
              "n_params", "seconds", "diverged", "final_loss")


def record_to_csv_row(rec: CellRecord) -> str:
    d = dataclasses.asdict(rec)
    d["config"] = json.dumps(d["config"], sort_keys=True).replace(",", ";")
    return ",".join(str(d[k]) for k in CSV_FIELDS)


def _method_configs(method: str, axes: dict):
    """Enumerate (axis_assignment, config) pairs for one method cell axis."""
    if method == FULL_FT:
        yield {}, None
        return
    base = parse_config(method)
    if not axes:
        yield {}, base
        return
    import itertools
    keys = sorted(axes)
    for combo in itertools.product(*(axes[k] for k in keys)):
        assignment = dict(zip(keys, combo))
        yield assignment, replace(base, **assignment)


def prepare_base(dims: ModelDims, spec: TaskSpec, grid: GridSpec):
    """Build the task data and a pretrained-base snapshot shared by cells."""
    data = make_task(spec)
    model = AdapterModel(dims, seed=grid.seed)
    pretrain_base(model, spec, data, epochs=grid.pretrain_epochs,
                  lr=grid.pretrain_lr, seed=grid.seed)
    return data, model.encoder.state_array()


def run_cell(dims: ModelDims, spec: TaskSpec, data: Dataset, base_state: dict,
             method: str, config, lr: float, epochs: int, batch_size: int,
             seed: int, capture: Optional[dict] = None) -> CellRecord:
    """Train one (method, lr, epochs) cell from the shared base snapshot.

    When ``capture`` is a dict, the trained model and head name are stored
    under ``"model"``/``"head"`` so callers can persist the result."""
    start = time.perf_counter()
    model = AdapterModel(dims, seed=seed)
    model.encoder.load_state_array(base_state)
    head = method if method != FULL_FT else "baseline"
    model.add_prediction_head(head, spec.head_kind, spec.head_labels)
    if method == FULL_FT:
        model.train_full(head=head)
        n_params = model.encoder.num_params()
    else:
        model.add_adapter(head, config)
        model.train_adapter(head)
        n_params = model.adapter_instance(head).num_params()
    result = train_model(model, head, data.train_x, data.train_y,
                         lr=lr, epochs=epochs, batch_size=batch_size, seed=seed)
    if result.diverged:
        metric = float("nan")
    else:
        model.set_active(None if method == FULL_FT else head)
        metric = evaluate(model, head, data.eval_x, data.eval_y)
    if capture is not None:
        capture["model"] = model
        capture["head"] = head
    return CellRecord(
        method=method,
        config={} if config is None else _config_axes(config, method),
        lr=lr,
        epochs=epochs,
        seed=seed,
        metric=metric,
        metric_name=spec.metric_name,
        n_params=n_params,
        seconds=round(time.perf_counter() - start, 3),
        diverged=result.diverged,
        final_loss=result.losses[-1] if result.losses else None,
    )


def _config_axes(config, method: str) -> dict:
    """Record only the axes that distinguish this cell from the preset."""
    base = parse_config(method)
    if config == base:
        return {}
    out = {}
    for f in dataclasses.fields(config):
        v = getattr(config, f.name)
        if getattr(base, f.name) != v:
            out[f.name] = list(v) if isinstance(v, tuple) else v
    return out


def run_grid(dims: ModelDims, spec: TaskSpec, grid: GridSpec, sink=None,
             data: Optional[Dataset] = None, base_state: Optional[dict] = None) -> list:
    """Cross methods (and their axes) with lrs and epochs; returns all cell
    records, invoking ``sink(record)`` as each one finishes.

    ``data``/``base_state`` may be supplied to reuse an existing pretrained
    snapshot; otherwise the base is pretrained here."""
    if data is None or base_state is None:
        data, base_state = prepare_base(dims, spec, grid)
    methods = list(grid.methods)
    if grid.include_full_ft and FULL_FT not in methods:
        methods = [FULL_FT] + methods
    records = []
    for method in methods:
        axes = grid.method_axes.get(method, {})
        for _, config in _method_configs(method, axes):
            for lr in grid.lrs:
                for epochs in grid.epochs:
                    rec = run_cell(dims, spec, data, base_state, method, config,
                                   lr, epochs, grid.batch_size, grid.seed)
                    records.append(rec)
                    if sink is not None:
                        sink(rec)
    return records


def best_metric(records, method: str) -> float:
    """Best finite metric across a method's cells (max accuracy / min mse)."""
    vals = [r.metric for r in records if r.method == method and np.isfinite(r.metric)]
    if not vals:
        return float("nan")
    kind = next(r.metric_name for r in records if r.method == method)
    return min(vals) if kind == "mse" else max(vals)
