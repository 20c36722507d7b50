"""Training protocol tests: loss, initialization, the optimizer, the
learning-rate schedule, early stopping, and the stage-two freeze contract."""

import math

import numpy as np
import pytest

import tensorfit as tf
import tensorfit.autodiff as ad
from tensorfit.autodiff import Parameter
from tensorfit.training import _evaluate, split_dataset

SMOKE_MODEL = tf.ModelConfig(L=3, d=16, d_h=8, n_h=2, n_tr=2)


def make_dataset(n_volumes=2, dims=(9, 9, 9), L=3, seed=0, noiseless=True,
                 snr=20.0):
    scheme = tf.skare6()
    pairs = []
    for k in range(n_volumes):
        tensors, labels, s0 = tf.generate_phantom(
            tf.PhantomSpec(dims=dims, seed=seed + k))
        dwi = tf.synthesize_dwi(tensors, s0, scheme)
        if not noiseless:
            dwi = tf.add_rician_noise(
                dwi, tf.NoiseSpec(snr, float(s0.data.mean()), seed=seed + k + 500))
        signals, _ = tf.normalize_dwi(dwi, scheme)
        pairs.append((signals, tensors))
    return tf.build_patch_dataset(pairs, L=L)


# --- loss ---------------------------------------------------------------------

def test_loss_zero_for_identical_inputs(rng):
    x = rng.normal(size=(4, 125, 6))
    assert float(tf.loss_mse(x, x.copy())) == 0.0


def test_loss_unit_offset_is_patch_size_times_channels(rng):
    ref = rng.normal(size=(125, 6))
    assert float(tf.loss_mse(ref + 1.0, ref)) == pytest.approx(750.0)
    batched = rng.normal(size=(4, 125, 6))
    assert float(tf.loss_mse(batched + 1.0, batched)) == pytest.approx(750.0)


def test_loss_gradient_matches_definition(rng):
    pred = Parameter("pred", (3, 10, 6))
    pred.value = rng.normal(size=(3, 10, 6))
    ref = rng.normal(size=(3, 10, 6))
    loss = tf.loss_mse(pred, ref)
    ad.backward(loss)
    np.testing.assert_allclose(pred.grad, 2.0 * (pred.value - ref) / 3.0,
                               rtol=1e-12)


def test_loss_gradient_finite_differences(rng):
    from test_diff_engine import finite_difference_check

    pred = Parameter("pred", (2, 5, 6))
    pred.value = rng.normal(size=(2, 5, 6))
    ref = rng.normal(size=(2, 5, 6))
    err = finite_difference_check(lambda: tf.loss_mse(pred, ref), [pred])
    assert err < 1e-4


# --- initialization -------------------------------------------------------------

def test_he_initialize_weight_variance():
    p = Parameter("w", (64, 512))
    tf.he_initialize([p], seed=0)
    assert abs(p.value.var() - 2.0 / 64.0) / (2.0 / 64.0) < 0.05
    assert abs(p.value.mean()) < 0.01


def test_he_initialize_zero_and_one_kinds():
    z = Parameter("pos", (10, 4), init="zero")
    z.value = np.full((10, 4), 9.0)
    o = Parameter("scale", (4,), init="one")
    o.value = np.full(4, 9.0)
    tf.he_initialize([z, o], seed=1)
    np.testing.assert_array_equal(z.value, 0.0)
    np.testing.assert_array_equal(o.value, 1.0)


def test_he_initialize_deterministic():
    a = tf.ModelS(SMOKE_MODEL)
    b = tf.ModelS(SMOKE_MODEL)
    tf.he_initialize(a.parameters(), seed=7)
    tf.he_initialize(b.parameters(), seed=7)
    for pa, pb in zip(a.parameters(), b.parameters()):
        np.testing.assert_array_equal(pa.value, pb.value)
    tf.he_initialize(b.parameters(), seed=8)
    assert any(not np.array_equal(pa.value, pb.value)
               for pa, pb in zip(a.parameters(), b.parameters()))


# --- optimizer -------------------------------------------------------------------

def test_adam_zero_gradient_is_identity(rng):
    p = Parameter("w", (3, 3))
    p.value = rng.normal(size=(3, 3))
    before = p.value.copy()
    opt = tf.Adam([p], lr=0.1)
    for _ in range(3):
        p.grad[...] = 0.0
        opt.step()
    np.testing.assert_array_equal(p.value, before)


def test_adam_descends_on_quadratic(rng):
    p = Parameter("x", (4,))
    p.value = rng.normal(size=4) * 5.0
    opt = tf.Adam([p], lr=0.1)
    for _ in range(500):
        p.grad = 2.0 * p.value
        opt.step()
    assert np.abs(p.value).max() < 0.05


def test_loss_decreases_over_first_steps():
    # fixed batch, fresh model, paper-default learning rate
    ds = make_dataset(n_volumes=1, dims=(6, 6, 6), L=3, seed=3)
    model = tf.ModelS(SMOKE_MODEL)
    tf.he_initialize(model.parameters(), seed=0)
    opt = tf.Adam(model.parameters(), lr=1e-4)
    x, y = ds.signals[:8], ds.targets[:8]
    losses = []
    for _ in range(6):
        loss = tf.loss_mse(model.forward(x), y)
        losses.append(float(loss.value))
        ad.backward(loss)
        opt.step()
    assert losses[5] < losses[0]


# --- dataset splitting -----------------------------------------------------------

def test_split_by_volume_group():
    ds = make_dataset(n_volumes=5, dims=(6, 6, 6), L=3, seed=1)
    train_idx, val_idx = split_dataset(ds, val_fraction=0.2, seed=0)
    train_groups = set(ds.groups[train_idx].tolist())
    val_groups = set(ds.groups[val_idx].tolist())
    assert val_groups and not (train_groups & val_groups)


def test_split_single_volume_falls_back_to_patches():
    ds = make_dataset(n_volumes=1, dims=(9, 9, 9), L=3, seed=1)
    train_idx, val_idx = split_dataset(ds, val_fraction=0.25, seed=0)
    assert val_idx.size >= 1
    assert train_idx.size + val_idx.size == len(ds)


# --- training loops ---------------------------------------------------------------

def test_smoke_training_reaches_a_tenth_of_initial_loss():
    # ~200 noiseless patches; loss must fall below 10% of the first epoch's
    ds = make_dataset(n_volumes=8, dims=(9, 9, 9), L=3, seed=10)
    assert 180 <= len(ds) <= 240
    config = tf.TrainConfig(max_epochs=50, seed=0, initial_lr=1e-3)
    model, log = tf.train_model_s(ds, config, SMOKE_MODEL)
    first = log.epochs[0]["train_loss"]
    final = log.epochs[-1]["train_loss"]
    assert final < 0.1 * first
    assert len(log.epochs) <= 50


def test_learning_rate_schedule_contract():
    ds = make_dataset(n_volumes=3, dims=(6, 6, 6), L=3, seed=20, noiseless=False)
    config = tf.TrainConfig(max_epochs=30, seed=1, initial_lr=1e-3)
    _, log = tf.train_model_s(ds, config, SMOKE_MODEL)
    rates = log.learning_rates()
    assert all(b <= a for a, b in zip(rates, rates[1:]))
    for a, b in zip(rates, rates[1:]):
        assert b == a or math.isclose(b, a * 0.9, rel_tol=1e-12)
    assert all(log.epochs[i]["epoch"] == i + 1 for i in range(len(log.epochs)))


def test_early_stop_on_frozen_validation_loss():
    # lr = 0 freezes the model, so the validation loss can never improve
    ds = make_dataset(n_volumes=2, dims=(6, 6, 6), L=3, seed=30)
    config = tf.TrainConfig(max_epochs=20, seed=2, initial_lr=0.0)
    _, log = tf.train_model_s(ds, config, SMOKE_MODEL)
    assert log.stop_reason == "early-stop"
    assert len(log.epochs) == 3  # first epoch sets the best, two stalls stop


def test_best_validation_checkpoint_restored():
    ds = make_dataset(n_volumes=3, dims=(6, 6, 6), L=3, seed=40, noiseless=False)
    config = tf.TrainConfig(max_epochs=25, seed=3, initial_lr=2e-3)
    model, log = tf.train_model_s(ds, config, SMOKE_MODEL)
    best = min(r["val_loss"] for r in log.epochs)
    _, val_idx = split_dataset(ds, config.val_fraction, config.seed)
    now = _evaluate(model.forward, ds, val_idx)
    assert now == pytest.approx(best, rel=1e-12)
    assert log.best_epoch == min(
        (i + 1 for i, r in enumerate(log.epochs)
         if r["val_loss"] == pytest.approx(best, rel=1e-12)))


def test_training_rejects_empty_dataset():
    from tensorfit.training import TrainingError

    ds = make_dataset(n_volumes=1, dims=(6, 6, 6), L=3)
    empty = tf.PatchDataset(ds.signals[:0], ds.targets[:0], ds.groups[:0])
    with pytest.raises(TrainingError):
        tf.train_model_s(empty, tf.TrainConfig(max_epochs=1), SMOKE_MODEL)


def test_training_reproducible():
    ds = make_dataset(n_volumes=2, dims=(6, 6, 6), L=3, seed=50, noiseless=False)
    config = tf.TrainConfig(max_epochs=5, seed=4, initial_lr=1e-3)
    _, log_a = tf.train_model_s(ds, config, SMOKE_MODEL)
    _, log_b = tf.train_model_s(ds, config, SMOKE_MODEL)
    assert log_a.epochs == log_b.epochs


def test_stage_two_freezes_stage_one():
    ds = make_dataset(n_volumes=2, dims=(6, 6, 6), L=3, seed=60, noiseless=False)
    config = tf.TrainConfig(max_epochs=4, seed=5, initial_lr=1e-3)
    model_s, _ = tf.train_model_s(ds, config, SMOKE_MODEL)
    before = [p.value.copy() for p in model_s.parameters()]
    stage, log = tf.train_model_st(ds, model_s, config)
    for p, v in zip(stage.model_s.parameters(), before):
        np.testing.assert_array_equal(p.value, v)
    assert log.epochs  # stage two actually trained


def test_stage_two_improves_on_stage_one():
    # paired run on the same data: stage two's best validation loss does not
    # exceed stage one's
    ds = make_dataset(n_volumes=6, dims=(9, 9, 9), L=3, seed=70,
                      noiseless=False, snr=20.0)
    config = tf.TrainConfig(max_epochs=40, seed=0, initial_lr=1e-3)
    model_s, log_s = tf.train_model_s(ds, config, SMOKE_MODEL)
    _, log_st = tf.train_model_st(ds, model_s, config)
    best_s = min(r["val_loss"] for r in log_s.epochs)
    best_st = min(r["val_loss"] for r in log_st.epochs)
    assert best_st <= best_s


def test_train_log_jsonl_round_trip(tmp_path):
    import json

    log = tf.TrainLog(epochs=[{"epoch": 1, "train_loss": 2.0,
                               "val_loss": 3.0, "lr": 1e-4}],
                      stop_reason="max-epochs", best_epoch=1)
    path = tmp_path / "log.jsonl"
    log.write(path)
    lines = [json.loads(line) for line in path.read_text().splitlines()]
    assert lines[0]["epoch"] == 1
    assert lines[-1]["stop_reason"] == "max-epochs"


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nan_loss_aborts():
    from tensorfit.training import TrainingError

    ds = make_dataset(n_volumes=2, dims=(6, 6, 6), L=3, seed=80)
    bad = tf.PatchDataset(ds.signals * 1e300, ds.targets * 1e300, ds.groups)
    with pytest.raises(TrainingError, match="finite"):
        tf.train_model_s(bad, tf.TrainConfig(max_epochs=2, seed=0), SMOKE_MODEL)
