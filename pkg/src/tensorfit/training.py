"""Two-stage training protocol.

Stage one fits ModelS on (normalized signal patch -> reference tensor patch)
pairs with a summed squared-error loss. Stage two trains ModelST on the same
pairs while the stage-one model stays frozen and supplies the tensor-branch
input on the fly.

The optimizer is adaptive moment estimation (decay 0.9/0.999, eps 1e-8).
The learning rate shrinks by ``lr_decay_factor`` on every epoch whose
validation loss fails to improve on the best seen so far (strict comparison),
and training stops after ``early_stop_patience`` consecutive such epochs.
The returned model carries the best-validation parameters.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter
from .phantom import make_rng
from .transformer import (
    ModelConfig,
    ModelS,
    ModelST,
    TwoStage,
    TARGET_SCALE,
    extract_patches,
)
from .volume import Volume4D


class TrainingError(RuntimeError):
    """Aborted training run (empty dataset, NaN loss, or a freeze violation)."""


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 10
    initial_lr: float = 1e-4
    lr_decay_factor: float = 0.9
    plateau_patience: int = 1
    early_stop_patience: int = 2
    max_epochs: int = 100
    seed: int = 0
    val_fraction: float = 0.2

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not (0.0 < self.lr_decay_factor < 1.0):
            raise ValueError("lr_decay_factor must lie in (0, 1)")
        if not (0.0 <= self.val_fraction < 1.0):
            raise ValueError("val_fraction must lie in [0, 1)")


@dataclass
class TrainLog:
    epochs: list[dict] = field(default_factory=list)
    stop_reason: str = ""
    best_epoch: int = 0
    checkpoint_path: str | None = None

    def learning_rates(self) -> list[float]:
        return [row["lr"] for row in self.epochs]

    def write(self, path: str | os.PathLike) -> None:
        """Line-delimited JSON: one line per epoch, then a summary line."""
        with open(path, "w") as f:
            for row in self.epochs:
                f.write(json.dumps(row) + "\n")
            f.write(json.dumps({"stop_reason": self.stop_reason,
                                "best_epoch": self.best_epoch,
                                "checkpoint_path": self.checkpoint_path}) + "\n")


def loss_mse(pred, ref):
    """Squared error summed over patch voxels and channels, averaged over the
    batch axis for 3-D inputs. Differentiable when ``pred`` is a graph node."""
    return ad.mse(pred, ref)


def he_initialize(params: list[Parameter], seed: int) -> None:
    """Deterministically (re)initialize parameters in their creation order:
    weights ~ Normal(0, 2 / fan_in) with fan_in the leading dimension;
    zero-kind parameters (positional encodings, shifts, biases) to 0;
    one-kind parameters (layernorm scales) to 1."""
    rng = make_rng(seed)
    for p in params:
        if p.init == "weight":
            fan_in = p.value.shape[0]
            p.value = rng.normal(0.0, math.sqrt(2.0 / fan_in), size=p.value.shape)
        elif p.init == "zero":
            p.value = np.zeros_like(p.value)
        else:
            p.value = np.ones_like(p.value)
        p.grad = np.zeros_like(p.value)


class Adam:
    """Adaptive moment estimation with bias correction."""

    def __init__(self, params: list[Parameter], lr: float = 1e-4,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = [p for p in params if p.trainable]
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self._m = [np.zeros_like(p.value) for p in self.params]
        self._v = [np.zeros_like(p.value) for p in self.params]

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self._m, self._v):
            g = p.grad
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            p.value = p.value - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


# --- datasets ----------------------------------------------------------------

@dataclass
class PatchDataset:
    """Paired patch sequences: normalized signals and model-space tensor
    targets, with a group id per patch identifying the source volume."""

    signals: np.ndarray   # (N, n, 6)
    targets: np.ndarray   # (N, n, 6), tensor elements scaled by TARGET_SCALE
    groups: np.ndarray    # (N,)

    def __len__(self) -> int:
        return self.signals.shape[0]


def build_patch_dataset(pairs: list[tuple[Volume4D, Volume4D]], L: int,
                        stride: int | None = None) -> PatchDataset:
    """Cut (normalized-signal volume, ground-truth tensor volume) pairs into
    training patches. Default stride L (non-overlapping tiles)."""
    signals, targets, groups = [], [], []
    for gid, (sig_vol, tensor_vol) in enumerate(pairs):
        if sig_vol.dims != tensor_vol.dims:
            raise ValueError("signal and tensor volume dims differ")
        sig_patches = extract_patches(sig_vol, L, stride=stride)
        ref_patches = extract_patches(tensor_vol, L, stride=stride)
        for sp, rp in zip(sig_patches, ref_patches):
            signals.append(sp.features)
            targets.append(rp.features * TARGET_SCALE)
            groups.append(gid)
    if not signals:
        raise TrainingError("empty dataset")
    return PatchDataset(np.stack(signals), np.stack(targets), np.array(groups))


def split_dataset(dataset: PatchDataset, val_fraction: float,
                  seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Train/validation indices. Splitting is by whole source volume when the
    dataset has several (no spatial leakage between the sets); a single-volume
    dataset falls back to a patch-level split."""
    n = len(dataset)
    if val_fraction == 0.0:
        return np.arange(n), np.arange(0)
    rng = make_rng(seed, stream=1)
    group_ids = np.unique(dataset.groups)
    if group_ids.size >= 2:
        perm = rng.permutation(group_ids)
        k = max(1, int(round(val_fraction * group_ids.size)))
        k = min(k, group_ids.size - 1)
        val_groups = set(perm[:k].tolist())
        val_mask = np.isin(dataset.groups, list(val_groups))
    else:
        perm = rng.permutation(n)
        k = max(1, int(round(val_fraction * n)))
        val_mask = np.zeros(n, dtype=bool)
        val_mask[perm[:k]] = True
    return np.flatnonzero(~val_mask), np.flatnonzero(val_mask)


# --- training loops ----------------------------------------------------------

def _evaluate(forward, dataset: PatchDataset, idx: np.ndarray,
              chunk: int = 256) -> float:
    """Mean per-patch summed squared error over a subset, without gradients."""
    total = 0.0
    with ad.no_grad():
        for start in range(0, idx.size, chunk):
            sel = idx[start:start + chunk]
            pred = forward(dataset.signals[sel])
            diff = pred - dataset.targets[sel]
            total += float(np.sum(diff * diff))
    return total / idx.size


def _snapshot(params: list[Parameter]) -> list[np.ndarray]:
    return [p.value.copy() for p in params]


def _restore(params: list[Parameter], snap: list[np.ndarray]) -> None:
    for p, v in zip(params, snap):
        p.value = v.copy()


def _train_loop(forward, params: list[Parameter], dataset: PatchDataset,
                config: TrainConfig) -> TrainLog:
    if len(dataset) == 0:
        raise TrainingError("empty dataset")
    train_idx, val_idx = split_dataset(dataset, config.val_fraction, config.seed)
    if train_idx.size == 0:
        raise TrainingError("empty training split")
    if val_idx.size == 0:
        val_idx = train_idx  # degenerate but keeps the schedule well defined
    rng = make_rng(config.seed, stream=2)
    opt = Adam(params, lr=config.initial_lr)
    log = TrainLog()
    best_val = math.inf
    best_snap = _snapshot(params)
    stalls = 0
    for epoch in range(1, config.max_epochs + 1):
        order = rng.permutation(train_idx)
        running, seen = 0.0, 0
        for start in range(0, order.size, config.batch_size):
            sel = order[start:start + config.batch_size]
            pred = forward(dataset.signals[sel])
            loss = loss_mse(pred, dataset.targets[sel])
            value = float(loss.value)
            if not math.isfinite(value):
                raise TrainingError(
                    f"loss is not finite at epoch {epoch} step {start // config.batch_size}")
            ad.backward(loss)
            opt.step()
            running += value * sel.size
            seen += sel.size
        val_loss = _evaluate(forward, dataset, val_idx)
        log.epochs.append({"epoch": epoch, "train_loss": running / seen,
                           "val_loss": val_loss, "lr": opt.lr})
        if val_loss < best_val:
            best_val = val_loss
            best_snap = _snapshot(params)
            log.best_epoch = epoch
            stalls = 0
        else:
            stalls += 1
            if stalls >= config.plateau_patience:
                opt.lr *= config.lr_decay_factor
            if stalls >= config.early_stop_patience:
                log.stop_reason = "early-stop"
                break
    if not log.stop_reason:
        log.stop_reason = "max-epochs"
    _restore(params, best_snap)
    return log


def train_model_s(dataset: PatchDataset, config: TrainConfig | None = None,
                  model_config: ModelConfig | None = None) -> tuple[ModelS, TrainLog]:
    """Stage one: initialize and train a ModelS on the dataset."""
    config = config or TrainConfig()
    model = ModelS(model_config or ModelConfig())
    he_initialize(model.parameters(), config.seed)
    log = _train_loop(model.forward, model.parameters(), dataset, config)
    return model, log


def train_model_st(dataset: PatchDataset, model_s: ModelS,
                   config: TrainConfig | None = None) -> tuple[TwoStage, TrainLog]:
    """Stage two: train a ModelST with the given stage-one model frozen.

    The tensor-branch input for every batch is the frozen model's prediction,
    computed on the fly. The stage-one parameters are verified bit-identical
    after training.
    """
    config = config or TrainConfig()
    model_st = ModelST(model_s.config)
    he_initialize(model_st.parameters(), config.seed)
    frozen = _snapshot(model_s.parameters())

    def forward(signals):
        with ad.no_grad():
            s_tensors = model_s.forward(signals)
        return model_st.forward(signals, s_tensors)

    log = _train_loop(forward, model_st.parameters(), dataset, config)
    for p, v in zip(model_s.parameters(), frozen):
        if not np.array_equal(p.value, v):
            raise TrainingError(f"frozen stage-one parameter {p.name!r} changed")
    return TwoStage(model_s, model_st), log
