"""Voxel-wise error metrics, per-region breakdowns, noise sweeps, and
Bland-Altman data emission.

Per masked voxel the tensor error is the sum of absolute differences of the
six tensor elements; FA and MD errors are absolute differences of the values
derived from each eigendecomposition; the angle error is the angle between
principal eigenvectors, computed only where the reference FA exceeds a
threshold (default 0.15) since the principal direction of a near-isotropic
tensor is ill-defined.

Errors are reported in raw mm^2/s; display-side scaling by 1000 is the CLI's
concern.
"""

from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .core import GradientScheme, _jacobi3
from .fitters import CnlsConfig, fit_volume
from .phantom import (
    CSF_LABEL,
    GM_LABEL,
    WM_LABEL,
    NoiseSpec,
    add_rician_noise,
    make_rng,
    synthesize_dwi,
)
from .transformer import normalize_dwi, predict_volume
from .volume import Volume4D

ANGLE_FA_THRESHOLD = 0.15

LABEL_NAMES = {WM_LABEL: "wm", GM_LABEL: "gm", CSF_LABEL: "csf"}

METRIC_NAMES = ("tensor_error", "md_error", "fa_error", "angle_error_deg")


@dataclass
class RegionMetrics:
    tensor_error: float
    md_error: float
    fa_error: float
    angle_error_deg: float
    voxels: int
    angle_voxels: int

    def to_dict(self) -> dict:
        return {
            "tensor_error": self.tensor_error,
            "md_error": self.md_error,
            "fa_error": self.fa_error,
            "angle_error_deg": self.angle_error_deg,
            "voxels": self.voxels,
            "angle_voxels": self.angle_voxels,
        }


@dataclass
class MetricsReport:
    method: str
    regions: dict[str, RegionMetrics]
    angle_fa_threshold: float = ANGLE_FA_THRESHOLD

    @property
    def overall(self) -> RegionMetrics:
        return self.regions["all"]

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "angle_fa_threshold": self.angle_fa_threshold,
            "regions": {name: r.to_dict() for name, r in self.regions.items()},
        }


def _eig_stats(vec) -> tuple[float, float, tuple[float, float, float]]:
    """(FA, MD, principal direction) of one tensor vector, via the Jacobi
    eigensolver on plain floats (per-voxel hot path)."""
    d0, d1, d2, d3, d4, d5 = (float(v) for v in vec)
    diag, rot = _jacobi3([[d0, d3, d4], [d3, d1, d5], [d4, d5, d2]])
    order = sorted(range(3), key=lambda k: diag[k], reverse=True)
    l1, l2, l3 = (diag[k] for k in order)
    md = (l1 + l2 + l3) / 3.0
    norm2 = l1 * l1 + l2 * l2 + l3 * l3
    if norm2 == 0.0:
        fa = 0.0
    else:
        dev = (l1 - md) ** 2 + (l2 - md) ** 2 + (l3 - md) ** 2
        fa = min(max(math.sqrt(1.5 * dev / norm2), 0.0), 1.0)
    p = order[0]
    return fa, md, (rot[0][p], rot[1][p], rot[2][p])


def compare_volumes(pred: Volume4D, ref: Volume4D,
                    mask: np.ndarray | None = None,
                    labels: Volume4D | None = None,
                    method: str = "",
                    angle_fa_threshold: float = ANGLE_FA_THRESHOLD) -> MetricsReport:
    """Voxel-wise error metrics of a predicted tensor volume against a
    reference, aggregated over the mask and per region label when labels are
    supplied."""
    if pred.dims != ref.dims or pred.channels != 6 or ref.channels != 6:
        raise ValueError(
            f"volume shapes differ or are not 6-channel: "
            f"{pred.dims}x{pred.channels} vs {ref.dims}x{ref.channels}")
    if mask is None:
        mask = np.ones(pred.dims, dtype=bool)
    if mask.shape != pred.dims:
        raise ValueError(f"mask shape {mask.shape} does not match {pred.dims}")
    if not mask.any():
        raise ValueError("mask is empty")
    if labels is not None and labels.dims != pred.dims:
        raise ValueError("label volume dims differ")

    idx = np.flatnonzero(mask.reshape(-1))
    p = pred.data.reshape(-1, 6)[idx]
    r = ref.data.reshape(-1, 6)[idx]
    tensor_err = np.abs(p - r).sum(axis=1)

    nvox = idx.size
    fa_err = np.empty(nvox)
    md_err = np.empty(nvox)
    angle = np.full(nvox, np.nan)
    for i in range(nvox):
        fa_p, md_p, v_p = _eig_stats(p[i])
        fa_r, md_r, v_r = _eig_stats(r[i])
        fa_err[i] = abs(fa_p - fa_r)
        md_err[i] = abs(md_p - md_r)
        if fa_r > angle_fa_threshold:
            dot = abs(v_p[0] * v_r[0] + v_p[1] * v_r[1] + v_p[2] * v_r[2])
            norms = math.sqrt((v_p[0] ** 2 + v_p[1] ** 2 + v_p[2] ** 2)
                              * (v_r[0] ** 2 + v_r[1] ** 2 + v_r[2] ** 2))
            angle[i] = math.degrees(math.acos(min(dot / norms, 1.0)))

    lab = (labels.data.reshape(-1)[idx].astype(int)
           if labels is not None else None)

    def region(sel: np.ndarray) -> RegionMetrics:
        a = angle[sel]
        a = a[~np.isnan(a)]
        return RegionMetrics(
            tensor_error=float(tensor_err[sel].mean()),
            md_error=float(md_err[sel].mean()),
            fa_error=float(fa_err[sel].mean()),
            angle_error_deg=float(a.mean()) if a.size else float("nan"),
            voxels=int(sel.sum()),
            angle_voxels=int(a.size),
        )

    regions = {"all": region(np.ones(nvox, dtype=bool))}
    if lab is not None:
        for value in np.unique(lab):
            name = LABEL_NAMES.get(int(value), f"label{int(value)}")
            regions[name] = region(lab == value)
    return MetricsReport(method=method, regions=regions,
                         angle_fa_threshold=angle_fa_threshold)


# --- method adapters ---------------------------------------------------------

def classical_method(name: str, cnls_config: CnlsConfig | None = None):
    """A sweep/evaluate method entry for one of the per-voxel fitters."""

    def run(dwi: Volume4D, scheme: GradientScheme,
            mask: np.ndarray | None) -> Volume4D:
        tensors = fit_volume(dwi.data, scheme, method=name, mask=mask,
                             cnls_config=cnls_config)
        return Volume4D(tensors, voxel_size=dwi.voxel_size,
                        description=f"{name} tensor estimate")

    return run


def learned_method(model, stride: int | None = None):
    """A sweep/evaluate method entry for a trained model (ModelS or TwoStage)."""

    def run(dwi: Volume4D, scheme: GradientScheme,
            mask: np.ndarray | None) -> Volume4D:
        signals, fg = normalize_dwi(dwi, scheme)
        if mask is not None:
            fg = fg & mask
        return predict_volume(model, signals, mask=fg, stride=stride)

    return run


# --- noise sweep -------------------------------------------------------------

@dataclass
class SweepEntry:
    snr_db: float                # math.inf marks the no-added-noise column
    method: str
    noise_seed: int
    report: MetricsReport

    def to_dict(self) -> dict:
        return {
            "snr_db": None if math.isinf(self.snr_db) else self.snr_db,
            "method": self.method,
            "noise_seed": self.noise_seed,
            "report": self.report.to_dict(),
        }


@dataclass
class SweepResult:
    entries: list[SweepEntry] = field(default_factory=list)
    seed: int = 0

    def to_dict(self) -> dict:
        return {"seed": self.seed,
                "entries": [e.to_dict() for e in self.entries]}

    def metric(self, method: str, snr_db: float, name: str,
               region: str = "all") -> float:
        for e in self.entries:
            if e.method == method and (e.snr_db == snr_db or
                                       (math.isinf(snr_db) and math.isinf(e.snr_db))):
                return getattr(e.report.regions[region], name)
        raise KeyError(f"no entry for method={method!r} snr={snr_db}")


def noise_sweep(tensors: Volume4D, s0: Volume4D, scheme: GradientScheme,
                snr_list: list[float], methods: dict, seed: int = 0,
                mask: np.ndarray | None = None,
                labels: Volume4D | None = None) -> SweepResult:
    """Corrupt the phantom's noiseless signals once per SNR level (seeded),
    fit with each method, and compare against the ground truth. A
    no-added-noise column always runs first.

    ``methods`` maps names to callables ``(dwi, scheme, mask) -> Volume4D``;
    see ``classical_method`` and ``learned_method``.
    """
    snrs = [float(s) for s in snr_list]
    if len(set(snrs)) != len(snrs):
        raise ValueError("snr levels must be distinct")
    clean = synthesize_dwi(tensors, s0, scheme)
    fg = np.ones(tensors.dims, dtype=bool) if mask is None else mask
    ref_amp = float(s0.data[fg].mean())
    child_seeds = make_rng(seed, stream=3).integers(0, 2 ** 63, size=len(snrs) + 1)
    result = SweepResult(seed=seed)
    for i, snr in enumerate([math.inf] + snrs):
        noise_seed = int(child_seeds[i])
        noisy = add_rician_noise(clean, NoiseSpec(snr, ref_amp, seed=noise_seed))
        for name, fn in methods.items():
            est = fn(noisy, scheme, mask)
            report = compare_volumes(est, tensors, mask=mask, labels=labels,
                                     method=name)
            result.entries.append(SweepEntry(snr_db=snr, method=name,
                                             noise_seed=noise_seed, report=report))
    return result


# --- Bland-Altman ------------------------------------------------------------

@dataclass
class BlandAltman:
    table: np.ndarray            # (N, 2) columns (mean, difference)
    bias: float
    loa_low: float
    loa_high: float

    def to_dict(self) -> dict:
        return {"bias": self.bias, "loa_low": self.loa_low,
                "loa_high": self.loa_high, "count": int(self.table.shape[0])}


def bland_altman_data(pred_scalar: Volume4D, ref_scalar: Volume4D,
                      mask: np.ndarray | None = None) -> BlandAltman:
    """Per masked voxel ((pred + ref) / 2, pred - ref) pairs with the bias
    and 1.96-sigma limits of agreement."""
    if pred_scalar.dims != ref_scalar.dims:
        raise ValueError("volume dims differ")
    p = pred_scalar.scalar()
    r = ref_scalar.scalar()
    if mask is None:
        mask = np.ones(p.shape, dtype=bool)
    diff = (p - r)[mask]
    mean = ((p + r) / 2.0)[mask]
    bias = float(diff.mean())
    sd = float(diff.std(ddof=1)) if diff.size > 1 else 0.0
    return BlandAltman(table=np.stack([mean, diff], axis=1), bias=bias,
                       loa_low=bias - 1.96 * sd, loa_high=bias + 1.96 * sd)


# --- emission ----------------------------------------------------------------

def write_bland_altman_csv(ba: BlandAltman, path: str | os.PathLike) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["mean", "diff"])
        for row in ba.table:
            writer.writerow([repr(float(row[0])), repr(float(row[1]))])


def _metric_rows(method: str, regions: dict[str, RegionMetrics],
                 prefix: tuple = ()) -> list[list]:
    rows = []
    for region, rm in regions.items():
        for metric in METRIC_NAMES:
            voxels = rm.angle_voxels if metric == "angle_error_deg" else rm.voxels
            rows.append(list(prefix) + [method, region, metric,
                                        getattr(rm, metric), voxels])
    return rows


def write_metrics_csv(reports: list[MetricsReport], path: str | os.PathLike) -> None:
    """One row per method x region x metric."""
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["method", "region", "metric", "value", "voxels"])
        for report in reports:
            writer.writerows(_metric_rows(report.method, report.regions))


def write_metrics_json(reports: list[MetricsReport], path: str | os.PathLike) -> None:
    with open(path, "w") as f:
        json.dump([r.to_dict() for r in reports], f, indent=1)
        f.write("\n")


def write_sweep_csv(result: SweepResult, path: str | os.PathLike) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["snr_db", "method", "region", "metric", "value", "voxels"])
        for e in result.entries:
            snr = "" if math.isinf(e.snr_db) else e.snr_db
            writer.writerows(_metric_rows(e.method, e.report.regions,
                                          prefix=(snr,)))


def write_sweep_json(result: SweepResult, path: str | os.PathLike) -> None:
    with open(path, "w") as f:
        json.dump(result.to_dict(), f, indent=1)
        f.write("\n")
