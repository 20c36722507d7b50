"""Patch-sequence attention models for tensor estimation.

A cubic patch of side L becomes a sequence of n = L^3 voxels in row-major
order. Each model embeds the per-voxel features, adds a learnable positional
encoding, runs a stack of multi-head self-attention modules, and projects
each sequence element to the six tensor channels.

* ``ModelS`` maps the six normalized diffusion signals to a tensor patch.
* ``ModelST`` runs two architecturally identical trunks, one on the signals
  and one on a tensor patch estimated by a ModelS, concatenates the trunk
  outputs and projects the pair to the final tensor patch.

Scaling conventions (recorded in checkpoints): signal channels are s/s0
clamped to ``SIGNAL_CLIP``; model-space tensors are mm^2/s times
``TARGET_SCALE`` so the regression targets are order one.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict
from typing import Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter
from .core import GradientScheme
from .volume import Volume4D

SIGNAL_CLIP = (1e-6, 10.0)
TARGET_SCALE = 1000.0

ATTENTION_MODES = ("softmax", "unnormalized")


class PatchingError(ValueError):
    """Volume too small for the requested patch size."""


@dataclass(frozen=True)
class ModelConfig:
    L: int = 5
    d: int = 64
    d_h: int = 64
    n_h: int = 2
    n_tr: int = 2
    attention_mode: str = "softmax"
    stabilizers: bool = True
    inference_stride: int = 1

    def __post_init__(self):
        for name in ("L", "d", "d_h", "n_h", "n_tr", "inference_stride"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be a positive integer")
        if self.attention_mode not in ATTENTION_MODES:
            raise ValueError(f"attention_mode must be one of {ATTENTION_MODES}")

    @property
    def n(self) -> int:
        return self.L ** 3

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class PatchSequence:
    """n x d_in feature rows for one cubic patch, n = L^3, in the patch's
    row-major voxel order, with the patch origin in voxel coordinates."""

    features: np.ndarray
    origin: tuple[int, int, int]

    @property
    def n(self) -> int:
        return self.features.shape[0]


def _origins(size: int, L: int, stride: int, cover: bool) -> list[int]:
    starts = list(range(0, size - L + 1, stride))
    if cover and starts[-1] != size - L:
        starts.append(size - L)
    return starts


def extract_patches(volume: Volume4D | np.ndarray, L: int,
                    stride: int | None = None) -> Iterator[PatchSequence]:
    """Tile a volume into patch sequences. Default stride L gives the
    non-overlapping training tiling; stride 1 visits every origin."""
    data = volume.data if isinstance(volume, Volume4D) else np.asarray(volume, dtype=float)
    if stride is None:
        stride = L
    nx, ny, nz = data.shape[:3]
    if min(nx, ny, nz) < L:
        raise PatchingError(
            f"volume dims {(nx, ny, nz)} smaller than patch side {L}")
    n = L ** 3
    for i in range(0, nx - L + 1, stride):
        for j in range(0, ny - L + 1, stride):
            for k in range(0, nz - L + 1, stride):
                feats = data[i:i + L, j:j + L, k:k + L, :].reshape(n, -1)
                yield PatchSequence(features=feats, origin=(i, j, k))


def reassemble_patches(patches, dims: tuple[int, int, int], channels: int,
                       L: int) -> np.ndarray:
    """Inverse of the non-overlapping tiling (partition round trip)."""
    out = np.zeros(dims + (channels,))
    for p in patches:
        i, j, k = p.origin
        out[i:i + L, j:j + L, k:k + L, :] = p.features.reshape(L, L, L, channels)
    return out


class AttentionModule:
    """One multi-head self-attention module.

    Per head: Q = x W_Q, K = x W_K, V = x W_V, scores = Q K^T / sqrt(d_h);
    in softmax mode the score rows are normalized before weighting V, in
    unnormalized mode they are used as-is. Head outputs are concatenated and
    projected back to width d. With stabilizers on, the module output is
    layernorm(x + projection).
    """

    def __init__(self, name: str, config: ModelConfig):
        self.config = config
        d, d_h = config.d, config.d_h
        self.heads = []
        for h in range(config.n_h):
            self.heads.append((
                Parameter(f"{name}.h{h}.wq", (d, d_h)),
                Parameter(f"{name}.h{h}.wk", (d, d_h)),
                Parameter(f"{name}.h{h}.wv", (d, d_h)),
            ))
        self.w_out = Parameter(f"{name}.w_out", (config.n_h * d_h, d))
        if config.stabilizers:
            self.ln_scale = Parameter(f"{name}.ln_scale", (d,), init="one")
            self.ln_shift = Parameter(f"{name}.ln_shift", (d,), init="zero")

    def parameters(self) -> list[Parameter]:
        ps = [p for head in self.heads for p in head] + [self.w_out]
        if self.config.stabilizers:
            ps += [self.ln_scale, self.ln_shift]
        return ps

    def forward(self, x):
        inv_sqrt = 1.0 / math.sqrt(self.config.d_h)
        outputs = []
        for wq, wk, wv in self.heads:
            q = ad.matmul(x, wq)
            k = ad.matmul(x, wk)
            v = ad.matmul(x, wv)
            scores = ad.scale(ad.matmul(q, k, transpose_b=True), inv_sqrt)
            if self.config.attention_mode == "softmax":
                scores = ad.softmax(scores)
            outputs.append(ad.matmul(scores, v))
        merged = outputs[0]
        for extra in outputs[1:]:
            merged = ad.concat(merged, extra, axis=-1)
        out = ad.matmul(merged, self.w_out)
        if self.config.stabilizers:
            out = ad.layernorm(ad.add(x, out), self.ln_scale, self.ln_shift)
        return out


class TransformerTrunk:
    """Embedding + learnable positional encoding + attention module stack."""

    def __init__(self, name: str, d_in: int, config: ModelConfig):
        self.config = config
        self.w_embed = Parameter(f"{name}.w_embed", (d_in, config.d))
        self.pos = Parameter(f"{name}.pos", (config.n, config.d), init="zero")
        self.modules = [AttentionModule(f"{name}.mod{i}", config)
                        for i in range(config.n_tr)]

    def parameters(self) -> list[Parameter]:
        ps = [self.w_embed, self.pos]
        for m in self.modules:
            ps += m.parameters()
        return ps

    def forward(self, x):
        h = ad.add(ad.matmul(x, self.w_embed), self.pos)
        for m in self.modules:
            h = m.forward(h)
        return h


def _check_patch_input(x, n: int, d_in: int, what: str):
    shape = x.shape if hasattr(x, "shape") else np.shape(x)
    if shape[-2:] != (n, d_in):
        raise ad.ShapeError(
            f"{what}: expected (..., {n}, {d_in}) sequences, got {shape}")


class ModelS:
    """Signal patch -> tensor patch estimator."""

    kind = "model-s"

    def __init__(self, config: ModelConfig | None = None):
        self.config = config or ModelConfig()
        self.trunk = TransformerTrunk("trunk", 6, self.config)
        self.head_w = Parameter("head.w", (self.config.d, 6))
        self.head_b = Parameter("head.b", (6,), init="zero")

    def parameters(self) -> list[Parameter]:
        return self.trunk.parameters() + [self.head_w, self.head_b]

    def forward(self, signals):
        """Sequences (n, 6) or batched (B, n, 6) of normalized signals to
        tensor sequences of the same leading shape, in model-space units."""
        _check_patch_input(signals, self.config.n, 6, "model_s_forward")
        return ad.add(ad.matmul(self.trunk.forward(signals), self.head_w),
                      self.head_b)

    def predict_patch(self, signals: np.ndarray) -> np.ndarray:
        with ad.no_grad():
            return self.forward(signals)


class ModelST:
    """Two-branch estimator: one trunk on signals, one on the tensor patch
    estimated by a ModelS (model-space units); trunk outputs are concatenated
    and projected to the six tensor channels."""

    kind = "model-st"

    def __init__(self, config: ModelConfig | None = None):
        self.config = config or ModelConfig()
        self.signal_trunk = TransformerTrunk("signal_trunk", 6, self.config)
        self.tensor_trunk = TransformerTrunk("tensor_trunk", 6, self.config)
        self.head_w = Parameter("head.w", (2 * self.config.d, 6))
        self.head_b = Parameter("head.b", (6,), init="zero")

    def parameters(self) -> list[Parameter]:
        return (self.signal_trunk.parameters() + self.tensor_trunk.parameters()
                + [self.head_w, self.head_b])

    def forward(self, signals, s_tensors):
        _check_patch_input(signals, self.config.n, 6, "model_st_forward(signals)")
        _check_patch_input(s_tensors, self.config.n, 6, "model_st_forward(s_tensors)")
        merged = ad.concat(self.signal_trunk.forward(signals),
                           self.tensor_trunk.forward(s_tensors), axis=-1)
        return ad.add(ad.matmul(merged, self.head_w), self.head_b)


class TwoStage:
    """A frozen ModelS feeding a ModelST; the inference-time pairing."""

    kind = "model-st"

    def __init__(self, model_s: ModelS, model_st: ModelST):
        if model_s.config.L != model_st.config.L:
            raise ValueError("stage patch sizes differ")
        self.model_s = model_s
        self.model_st = model_st
        self.config = model_st.config

    def predict_patch(self, signals: np.ndarray) -> np.ndarray:
        with ad.no_grad():
            s_tensors = self.model_s.forward(signals)
            return self.model_st.forward(signals, s_tensors)


def normalize_dwi(dwi: Volume4D, scheme: GradientScheme) -> tuple[Volume4D, np.ndarray]:
    """Normalize a raw DWI volume against its b = 0 channel.

    Returns the 6-channel s/s0 volume (clamped to ``SIGNAL_CLIP``) and the
    foreground mask (b0 > 0). Background voxels are zeroed.
    """
    if dwi.channels != len(scheme):
        raise ValueError(
            f"dwi has {dwi.channels} channels, scheme has {len(scheme)} entries")
    b0_idx = scheme.b0_index
    if b0_idx is None:
        raise ValueError("scheme has no b = 0 entry")
    b0 = dwi.data[..., b0_idx]
    mask = b0 > 0
    sig = dwi.data[..., scheme.weighted_mask]
    out = np.zeros_like(sig)
    ratio = sig[mask] / b0[mask][:, None]
    out[mask] = np.clip(ratio, SIGNAL_CLIP[0], SIGNAL_CLIP[1])
    vol = Volume4D(out, voxel_size=dwi.voxel_size, seed=dwi.seed,
                   description="normalized dwi (s/s0)")
    return vol, mask


def predict_volume(model, signals: Volume4D, mask: np.ndarray | None = None,
                   stride: int | None = None, chunk: int = 64) -> Volume4D:
    """Full-volume tensor estimate in mm^2/s.

    The volume must carry the six normalized signal channels. Patches are
    taken at ``stride`` (default: the model config's inference stride, 1);
    overlapping predictions are averaged per voxel and background voxels are
    zeroed.
    """
    if signals.channels != 6:
        raise ValueError(f"expected 6 signal channels, got {signals.channels}")
    config: ModelConfig = model.config
    L, n = config.L, config.n
    nx, ny, nz = signals.dims
    if min(nx, ny, nz) < L:
        raise PatchingError(f"volume dims {signals.dims} smaller than patch side {L}")
    if stride is None:
        stride = config.inference_stride
    origins = [(i, j, k)
               for i in _origins(nx, L, stride, cover=True)
               for j in _origins(ny, L, stride, cover=True)
               for k in _origins(nz, L, stride, cover=True)]
    acc = np.zeros((nx, ny, nz, 6))
    counts = np.zeros((nx, ny, nz, 1))
    data = signals.data
    for start in range(0, len(origins), chunk):
        block = origins[start:start + chunk]
        feats = np.stack([data[i:i + L, j:j + L, k:k + L, :].reshape(n, 6)
                          for i, j, k in block])
        preds = model.predict_patch(feats) / TARGET_SCALE
        for (i, j, k), pred in zip(block, preds):
            acc[i:i + L, j:j + L, k:k + L, :] += pred.reshape(L, L, L, 6)
            counts[i:i + L, j:j + L, k:k + L, 0] += 1.0
    out = acc / np.maximum(counts, 1.0)
    if mask is not None:
        out[~mask] = 0.0
    return Volume4D(out, voxel_size=signals.voxel_size, seed=signals.seed,
                    description=f"{model.kind} tensor estimate")


# --- checkpoints -------------------------------------------------------------

def _normalization_metadata() -> dict:
    return {"signal_clip": list(SIGNAL_CLIP), "target_scale": TARGET_SCALE}


def save_model_s(path, model: ModelS, seed: int | None = None) -> None:
    extra = {"kind": model.kind, "config": model.config.to_dict(),
             "normalization": _normalization_metadata(), "seed": seed}
    ad.save_checkpoint(path, model.parameters(), extra=extra)


def save_two_stage(path, stage: TwoStage, seed: int | None = None) -> None:
    params = {f"model_s.{p.name}": p.value for p in stage.model_s.parameters()}
    params.update({f"model_st.{p.name}": p.value
                   for p in stage.model_st.parameters()})
    extra = {"kind": stage.kind, "config": stage.model_st.config.to_dict(),
             "config_s": stage.model_s.config.to_dict(),
             "normalization": _normalization_metadata(), "seed": seed}
    ad.save_checkpoint(path, params, extra=extra)


def _fill(model, values: dict[str, np.ndarray], prefix: str = "") -> None:
    for p in model.parameters():
        key = prefix + p.name
        if key not in values:
            raise ValueError(f"checkpoint is missing parameter {key!r}")
        if values[key].shape != p.value.shape:
            raise ValueError(f"parameter {key!r} has shape {values[key].shape}, "
                             f"model expects {p.value.shape}")
        p.value = values[key].copy()


def load_model(path) -> ModelS | TwoStage:
    """Load a ModelS or a TwoStage pair, depending on the checkpoint kind."""
    values, extra = ad.load_checkpoint(path)
    kind = extra.get("kind")
    if kind == "model-s":
        model = ModelS(ModelConfig(**extra["config"]))
        _fill(model, values)
        return model
    if kind == "model-st":
        model_s = ModelS(ModelConfig(**extra["config_s"]))
        model_st = ModelST(ModelConfig(**extra["config"]))
        _fill(model_s, values, prefix="model_s.")
        _fill(model_st, values, prefix="model_st.")
        return TwoStage(model_s, model_st)
    raise ValueError(f"unknown checkpoint kind {kind!r}")
