"""Optimizer, loss, and grid-runner tests.

The Adam oracle is an independent numpy re-derivation of the update rule;
grid determinism is asserted bit-for-bit because every source of randomness
is seeded.
"""

import json

import numpy as np
import pytest
import scipy.special

from peftlab import tensor as T
from peftlab.configs import parse_config
from peftlab.model import ModelDims
from peftlab.registry import AdapterModel
from peftlab.tasks import TaskSpec, make_task
from peftlab.tensor import Tape, Tensor
from peftlab.training import (CSV_FIELDS, DEFAULT_EPOCHS, DEFAULT_LRS, FULL_FT,
                              Adam, CellRecord, GridSpec, best_metric,
                              cross_entropy, evaluate, mse_loss, prepare_base,
                              record_to_csv_row, run_cell, run_grid,
                              task_metric, train_model)

from conftest import SMALL_DIMS

TINY_TASK = TaskSpec(kind="parity", vocab=SMALL_DIMS.vocab, seq_len=6,
                     n_train=48, n_eval=24, n_pretrain=16, seed=5)


def adam_oracle(grads, lr, betas=(0.9, 0.999), eps=1e-8, x0=0.0):
    """Scalar reference implementation of bias-corrected Adam."""
    b1, b2 = betas
    m = v = 0.0
    x = x0
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        x -= lr * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + eps)
    return x


def test_adam_single_step_closed_form():
    p = Tensor(np.array([2.0]), requires_grad=True)
    p.grad = np.array([0.5])
    Adam([p], lr=0.1).step()
    # bias correction makes the first step lr * g / (|g| + eps)
    want = 2.0 - 0.1 * 0.5 / (0.5 + 1e-8)
    assert np.allclose(p.data, [want], atol=1e-12)


def test_adam_trajectory_matches_oracle():
    grads = [0.5, -1.25, 0.0, 3.0, 0.125]
    p = Tensor(np.array([0.7]), requires_grad=True)
    opt = Adam([p], lr=0.05)
    for g in grads:
        p.grad = np.array([g])
        opt.step()
    assert np.allclose(p.data, [adam_oracle(grads, 0.05, x0=0.7)], atol=1e-14)


def test_adam_skips_missing_grads_and_zero_grad_clears():
    a = Tensor(np.ones(3), requires_grad=True)
    b = Tensor(np.ones(3), requires_grad=True)
    a.grad = np.full(3, 2.0)
    opt = Adam({"a": a, "b": b}, lr=0.1)
    opt.step()
    assert not np.array_equal(a.data, np.ones(3))
    assert np.array_equal(b.data, np.ones(3))       # no grad, untouched
    opt.zero_grad()
    assert a.grad is None and b.grad is None


def test_cross_entropy_matches_logsumexp_formula(rng):
    logits = rng.normal(size=(5, 3))
    labels = rng.integers(0, 3, size=5)
    got = cross_entropy(Tensor(logits), labels).item()
    logp = logits - scipy.special.logsumexp(logits, axis=-1, keepdims=True)
    want = -logp[np.arange(5), labels].mean()
    assert np.allclose(got, want, atol=1e-12)


def test_cross_entropy_handles_token_level_labels(rng):
    logits = rng.normal(size=(2, 4, 3))
    labels = rng.integers(0, 3, size=(2, 4))
    got = cross_entropy(Tensor(logits), labels).item()
    logp = logits - scipy.special.logsumexp(logits, axis=-1, keepdims=True)
    want = -logp[np.arange(2)[:, None], np.arange(4)[None, :], labels].mean()
    assert np.allclose(got, want, atol=1e-12)


def test_cross_entropy_gradient_is_softmax_minus_onehot(rng):
    logits = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
    labels = np.array([0, 2, 1, 2])
    with Tape() as tape:
        loss = cross_entropy(logits, labels)
        tape.backward(loss)
    soft = scipy.special.softmax(logits.data, axis=-1)
    onehot = np.zeros((4, 3))
    onehot[np.arange(4), labels] = 1.0
    assert np.allclose(logits.grad, (soft - onehot) / 4.0, atol=1e-12)


def test_mse_loss_closed_form(rng):
    pred = Tensor(rng.normal(size=(6, 1)))
    target = rng.normal(size=(6,))
    got = mse_loss(pred, target).item()
    assert np.allclose(got, np.mean((pred.data.ravel() - target) ** 2), atol=1e-12)


def test_task_metric_paths():
    logits = np.array([[2.0, 1.0], [0.0, 3.0], [5.0, 0.0]])
    assert task_metric("classification", logits, np.array([0, 1, 1])) == pytest.approx(2 / 3)
    pred = np.array([[1.0], [2.0]])
    assert task_metric("regression", pred, np.array([0.0, 2.0])) == pytest.approx(0.5)


# ---------------------------------------------------------------------------
# training loops


def _tiny_setup():
    data = make_task(TINY_TASK)
    model = AdapterModel(SMALL_DIMS, seed=0)
    model.add_prediction_head("bn", TINY_TASK.head_kind, TINY_TASK.head_labels)
    model.add_adapter("bn", "seq_bn")
    model.train_adapter("bn")
    return model, data


def test_train_model_requires_a_trainable_partition():
    model = AdapterModel(SMALL_DIMS, seed=0)
    model.add_prediction_head("h", "classification", 2)
    model.freeze_all()
    data = make_task(TINY_TASK)
    with pytest.raises(RuntimeError, match="nothing is trainable"):
        train_model(model, "h", data.train_x, data.train_y, lr=1e-3, epochs=1)


def test_train_model_reduces_loss_and_counts_steps():
    model, data = _tiny_setup()
    res = train_model(model, "bn", data.train_x, data.train_y,
                      lr=5e-3, epochs=3, batch_size=16, seed=1)
    assert not res.diverged
    assert res.steps == 3 * 3                    # 48 samples / 16 per batch
    assert np.mean(res.losses[-3:]) < np.mean(res.losses[:3])


def test_training_is_bit_deterministic():
    r1 = train_model(*_tiny_setup_pair(), lr=5e-3, epochs=2, batch_size=16, seed=7)
    r2 = train_model(*_tiny_setup_pair(), lr=5e-3, epochs=2, batch_size=16, seed=7)
    assert r1.losses == r2.losses


def _tiny_setup_pair():
    model, data = _tiny_setup()
    return model, "bn", data.train_x, data.train_y


def test_evaluate_agrees_with_direct_metric():
    model, data = _tiny_setup()
    got = evaluate(model, "bn", data.eval_x, data.eval_y, batch_size=7)
    state = model.encode(data.eval_x)
    logits = model.logits(state, "bn").data
    assert got == task_metric("classification", logits, data.eval_y)


# ---------------------------------------------------------------------------
# grid runner


def test_prepare_base_pretrains_the_backbone():
    grid = GridSpec(methods=("seq_bn",), pretrain_epochs=2, pretrain_lr=5e-3)
    data, state = prepare_base(SMALL_DIMS, TINY_TASK, grid)
    fresh = AdapterModel(SMALL_DIMS, seed=grid.seed).encoder.state_array()
    assert set(state) == set(fresh)
    assert any(not np.array_equal(state[k], fresh[k]) for k in state)


def test_prepare_base_with_zero_epochs_is_the_raw_init():
    grid = GridSpec(methods=("seq_bn",), pretrain_epochs=0)
    _, state = prepare_base(SMALL_DIMS, TINY_TASK, grid)
    fresh = AdapterModel(SMALL_DIMS, seed=grid.seed).encoder.state_array()
    assert all(np.array_equal(state[k], fresh[k]) for k in state)


def _mini_grid(**kw):
    defaults = dict(methods=("seq_bn",), lrs=(5e-3,), epochs=(1,),
                    batch_size=16, seed=0, pretrain_epochs=0)
    defaults.update(kw)
    return GridSpec(**defaults)


def test_run_cell_records_the_essentials():
    grid = _mini_grid()
    data, state = prepare_base(SMALL_DIMS, TINY_TASK, grid)
    rec = run_cell(SMALL_DIMS, TINY_TASK, data, state, "seq_bn",
                   parse_config("seq_bn"),
                   lr=5e-3, epochs=1, batch_size=16, seed=0)
    assert rec.method == "seq_bn"
    assert rec.config == {}                       # preset, no axis overrides
    assert rec.metric_name == "accuracy"
    assert 0.0 <= rec.metric <= 1.0
    assert rec.n_params > 0 and not rec.diverged
    assert rec.seconds >= 0
    round_tripped = json.loads(rec.to_json())
    assert round_tripped["method"] == "seq_bn"
    assert round_tripped["lr"] == 5e-3


def test_run_cell_is_deterministic_to_all_digits():
    grid = _mini_grid()
    data, state = prepare_base(SMALL_DIMS, TINY_TASK, grid)
    cfg = parse_config("seq_bn")
    a = run_cell(SMALL_DIMS, TINY_TASK, data, state, "seq_bn", cfg,
                 lr=5e-3, epochs=2, batch_size=16, seed=7)
    b = run_cell(SMALL_DIMS, TINY_TASK, data, state, "seq_bn", cfg,
                 lr=5e-3, epochs=2, batch_size=16, seed=7)
    assert a.metric == b.metric
    assert a.final_loss == b.final_loss


def test_run_cell_captures_the_trained_model():
    grid = _mini_grid()
    data, state = prepare_base(SMALL_DIMS, TINY_TASK, grid)
    capture = {}
    rec = run_cell(SMALL_DIMS, TINY_TASK, data, state, "seq_bn",
                   parse_config("seq_bn"),
                   lr=5e-3, epochs=1, batch_size=16, seed=0, capture=capture)
    assert capture["head"] == "seq_bn"
    model = capture["model"]
    assert evaluate(model, "seq_bn", data.eval_x, data.eval_y) == rec.metric


def test_divergence_is_recorded_not_fatal():
    spec = TaskSpec(kind="masked-sum", vocab=SMALL_DIMS.vocab, seq_len=6,
                    n_train=32, n_eval=16, n_pretrain=8, seed=5)
    grid = _mini_grid()
    data, state = prepare_base(SMALL_DIMS, spec, grid)
    with np.errstate(over="ignore", invalid="ignore"):
        rec = run_cell(SMALL_DIMS, spec, data, state, "seq_bn",
                       parse_config("seq_bn"),
                       lr=1e200, epochs=3, batch_size=16, seed=0)
    assert rec.diverged
    assert np.isnan(rec.metric)


def test_run_grid_crosses_all_axes_and_streams_records():
    grid = _mini_grid(methods=("seq_bn", "lora"), lrs=(1e-3, 5e-3), epochs=(1,),
                      include_full_ft=True)
    seen = []
    records = run_grid(SMALL_DIMS, TINY_TASK, grid, sink=seen.append)
    assert len(records) == 3 * 2 * 1               # (full-ft + 2 methods) x lrs
    assert seen == records
    assert {r.method for r in records} == {FULL_FT, "seq_bn", "lora"}
    full = [r for r in records if r.method == FULL_FT]
    assert all(r.config == {} for r in full)
    assert all(r.n_params == AdapterModel(SMALL_DIMS).encoder.num_params() for r in full)


def test_run_grid_expands_method_axes():
    grid = _mini_grid(methods=("seq_bn",),
                      method_axes={"seq_bn": {"reduction_factor": (2, 4)}})
    records = run_grid(SMALL_DIMS, TINY_TASK, grid)
    assert len(records) == 2
    assert [r.config for r in records] == [{"reduction_factor": 2},
                                           {"reduction_factor": 4}]
    assert records[0].n_params > records[1].n_params


def test_best_metric_direction_depends_on_the_metric():
    recs = [
        CellRecord("m", {}, 1e-3, 5, 0, 0.7, "accuracy", 10, 0.1),
        CellRecord("m", {}, 1e-3, 10, 0, 0.9, "accuracy", 10, 0.1),
        CellRecord("m", {}, 1e-3, 20, 0, float("nan"), "accuracy", 10, 0.1, diverged=True),
        CellRecord("r", {}, 1e-3, 5, 0, 0.05, "mse", 10, 0.1),
        CellRecord("r", {}, 1e-3, 10, 0, 0.02, "mse", 10, 0.1),
    ]
    assert best_metric(recs, "m") == 0.9
    assert best_metric(recs, "r") == 0.02
    assert np.isnan(best_metric(recs, "ghost"))


def test_csv_row_matches_the_field_order():
    rec = CellRecord("seq_bn", {"reduction_factor": 4}, 1e-3, 5, 0,
                     0.75, "accuracy", 123, 1.5, False, 0.31)
    row = record_to_csv_row(rec).split(",")
    assert len(row) == len(CSV_FIELDS)
    assert row[0] == "seq_bn"
    assert row[CSV_FIELDS.index("metric")] == "0.75"
    assert ";" in row[1] or "reduction_factor" in row[1]


def test_default_hyperparameter_sets_are_pinned():
    assert DEFAULT_LRS == (1e-5, 1e-4, 5e-4, 1e-3)
    assert DEFAULT_EPOCHS == (5, 10, 20, 30)
