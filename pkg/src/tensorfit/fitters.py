"""Classical per-voxel tensor estimators.

Three fitters share one contract: signals for the b > 0 measurements, the
b = 0 amplitude s0, and a design matrix, returning a FitResult.

* ``fit_ols`` -- ordinary least squares on the log-transformed signals.
* ``fit_wlls_constrained`` -- weighted linear least squares with per-sample
  weights s_i^2 (the variance-optimal choice for log-domain noise), followed
  by an eigenvalue projection onto the PSD cone when needed (CWLLS).
* ``fit_cnls`` -- constrained nonlinear least squares in the signal domain
  over a Cholesky factor L with D = L L^T, solved by Levenberg-Marquardt
  (CNLS). Positivity holds by construction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import (
    DesignMatrix,
    DiffusionTensor,
    GradientScheme,
    build_design_matrix,
    eigendecompose,
    tensor_vec_to_matrix,
    matrix_to_tensor_vec,
)

# Condition number above which a design matrix is treated as rank deficient.
MAX_CONDITION_NUMBER = 1e12

# Eigenvalue floor for the CWLLS positivity projection, mm^2/s.
PROJECTION_EPSILON = 1e-7

# Non-positive signals (possible after magnitude-noise simulation) are clamped
# to this fraction of s0 before the log transform, and flagged.
SIGNAL_CLAMP_FRACTION = 1e-6


class LogDomainError(ValueError):
    """Signals unusable for the log transform (non-finite, or s0 <= 0)."""


class SingularDesignError(ValueError):
    """Design matrix is rank deficient at the working precision."""


class InsufficientMeasurementsError(ValueError):
    """Fewer than six b > 0 measurements."""


class InvalidB0Error(ValueError):
    """Scheme lacks the designated b = 0 normalization entry."""


@dataclass(frozen=True)
class WeightingScheme:
    """Diagonal weighting for the linear fit.

    ``uniform`` gives w_i = 1; ``signal-proportional`` gives w_i = s_i^2,
    matching the log-domain noise variance ~ sigma^2 / s_i^2.
    """

    mode: str = "signal-proportional"

    def __post_init__(self):
        if self.mode not in ("uniform", "signal-proportional"):
            raise ValueError(f"unknown weighting mode {self.mode!r}")

    def weights(self, signals: np.ndarray) -> np.ndarray:
        s = np.asarray(signals, dtype=float)
        if self.mode == "uniform":
            return np.ones_like(s)
        w = s * s
        if not np.isfinite(w).all() or (w <= 0).any():
            raise ValueError("weights must be finite and strictly positive")
        return w


@dataclass(frozen=True)
class FitResult:
    tensor: DiffusionTensor
    residual_norm: float
    iterations: int = 0
    constrained_projection_applied: bool = False
    signals_clamped: bool = False


@dataclass(frozen=True)
class CnlsConfig:
    initial_damping: float = 1e-3
    damping_factor: float = 10.0      # x on reject, / on accept
    max_iterations: int = 100
    objective_tol: float = 1e-10      # relative objective decrease
    gradient_tol: float = 1e-10       # cosine of residual/Jacobian-column angle
    residual_tol: float = 1e-12       # relative residual for a perfect fit


def _validate_design(design: DesignMatrix) -> np.ndarray:
    B = design.rows
    if B.shape[0] < 6:
        raise InsufficientMeasurementsError(
            f"need at least 6 b>0 measurements, got {B.shape[0]}")
    if np.linalg.cond(B) > MAX_CONDITION_NUMBER:
        raise SingularDesignError(
            "design matrix is rank deficient (condition number > 1e12)")
    return B


def _log_ratios(signals, s0: float, m: int) -> tuple[np.ndarray, bool]:
    """S = -ln(s_i / s0) with defensive clamping of non-positive signals."""
    if not np.isfinite(s0) or s0 <= 0:
        raise LogDomainError("s0 must be positive and finite")
    s = np.asarray(signals, dtype=float).reshape(-1)
    if s.size != m:
        raise ValueError(f"expected {m} signals, got {s.size}")
    if not np.isfinite(s).all():
        raise LogDomainError("signals contain non-finite values")
    clamped = bool((s <= 0).any())
    if clamped:
        s = np.maximum(s, SIGNAL_CLAMP_FRACTION * s0)
    return -np.log(s / s0), clamped


def _project_psd(d: np.ndarray) -> tuple[np.ndarray, bool]:
    """Clamp eigenvalues to >= PROJECTION_EPSILON when any is negative."""
    eigs = eigendecompose(d)
    if eigs.eigenvalues[-1] >= 0:
        return d, False
    lam = np.maximum(eigs.eigenvalues, PROJECTION_EPSILON)
    mat = (eigs.eigenvectors * lam) @ eigs.eigenvectors.T
    return matrix_to_tensor_vec(mat), True


def fit_ols(signals, s0: float, design: DesignMatrix) -> FitResult:
    """Ordinary least squares: D = (B^T B)^-1 B^T S with S = -ln(s_i/s0).

    ``residual_norm`` is the log-domain residual ||B D - S||_2.
    """
    B = _validate_design(design)
    S, clamped = _log_ratios(signals, s0, B.shape[0])
    d, *_ = np.linalg.lstsq(B, S, rcond=None)
    resid = float(np.linalg.norm(B @ d - S))
    return FitResult(tensor=DiffusionTensor.from_vector(d),
                     residual_norm=resid,
                     signals_clamped=clamped)


def fit_wlls_constrained(signals, s0: float, design: DesignMatrix,
                         weights: WeightingScheme | None = None) -> FitResult:
    """Weighted linear least squares D = (B^T W B)^-1 B^T W S with the
    positivity projection: if the solution has a negative eigenvalue, all
    eigenvalues are clamped to >= 1e-7 mm^2/s and the tensor reconstructed.

    ``residual_norm`` is the weighted log-domain residual of the returned
    (possibly projected) tensor, ||W^(1/2) (B D - S)||_2.
    """
    if weights is None:
        weights = WeightingScheme()
    B = _validate_design(design)
    S, clamped = _log_ratios(signals, s0, B.shape[0])
    s = np.asarray(signals, dtype=float).reshape(-1)
    if clamped:
        s = np.maximum(s, SIGNAL_CLAMP_FRACTION * s0)
    w = weights.weights(s)
    sw = np.sqrt(w)
    d, *_ = np.linalg.lstsq(B * sw[:, None], S * sw, rcond=None)
    d, projected = _project_psd(d)
    resid = float(np.linalg.norm(sw * (B @ d - S)))
    return FitResult(tensor=DiffusionTensor.from_vector(d, constrained=projected),
                     residual_norm=resid,
                     constrained_projection_applied=projected,
                     signals_clamped=clamped)


# --- CNLS: Cholesky-parametrized nonlinear fit ------------------------------

def _cholesky_to_tensor(theta: np.ndarray) -> np.ndarray:
    """Tensor vector of D = L L^T for theta = [L00, L10, L11, L20, L21, L22]."""
    l00, l10, l11, l20, l21, l22 = theta
    return np.array([
        l00 * l00,
        l10 * l10 + l11 * l11,
        l20 * l20 + l21 * l21 + l22 * l22,
        l00 * l10,
        l00 * l20,
        l10 * l20 + l11 * l21,
    ])


def _cholesky_jacobian(theta: np.ndarray) -> np.ndarray:
    """d(tensor vector)/d(theta), 6x6."""
    l00, l10, l11, l20, l21, l22 = theta
    return np.array([
        [2 * l00, 0, 0, 0, 0, 0],
        [0, 2 * l10, 2 * l11, 0, 0, 0],
        [0, 0, 0, 2 * l20, 2 * l21, 2 * l22],
        [l10, l00, 0, 0, 0, 0],
        [l20, 0, 0, l00, 0, 0],
        [0, l20, l21, l10, l11, 0],
    ])


def _initial_cholesky(signals, s0, design) -> tuple[np.ndarray, bool]:
    init = fit_wlls_constrained(signals, s0, design)
    eigs = eigendecompose(init.tensor)
    lam = np.maximum(eigs.eigenvalues, PROJECTION_EPSILON)
    mat = (eigs.eigenvectors * lam) @ eigs.eigenvectors.T
    return np.linalg.cholesky(mat)[np.tril_indices(3)], init.signals_clamped


def fit_cnls(signals, s0: float, design: DesignMatrix,
             config: CnlsConfig | None = None,
             trace: list | None = None) -> FitResult:
    """Signal-domain nonlinear least squares over a Cholesky factor.

    Minimizes sum_i (s_i - s0 exp(-B_i . d(L)))^2 with D = L L^T, so the
    returned tensor is positive semidefinite by construction. Initialized
    from the CWLLS solution; damping is Marquardt-scaled (lambda diag(J^T J))
    which keeps the iteration invariant to a common rescaling of the signals.

    ``iterations`` counts accepted steps; ``iterations == max_iterations``
    marks a fit that stopped without meeting a convergence test.
    ``residual_norm`` is the signal-domain norm ||s - s0 exp(-B d)||_2.
    When ``trace`` is a list, the objective value at the start and after
    every accepted step is appended to it.
    """
    if config is None:
        config = CnlsConfig()
    B = _validate_design(design)
    s = np.asarray(signals, dtype=float).reshape(-1)
    theta, clamped = _initial_cholesky(signals, s0, design)
    signal_scale = float(np.dot(s, s)) + float(s0) ** 2

    def residual(th):
        return s - s0 * np.exp(-B @ _cholesky_to_tensor(th))

    def jacobian(th):
        model = s0 * np.exp(-B @ _cholesky_to_tensor(th))
        return model[:, None] * (B @ _cholesky_jacobian(th))

    def converged(r, J):
        f = float(np.dot(r, r))
        if f <= config.residual_tol ** 2 * signal_scale:
            return True
        # MINPACK-style first-order test: residual orthogonal to the Jacobian
        # columns up to gradient_tol, dimensionless and scale invariant.
        col_norms = np.linalg.norm(J, axis=0)
        rn = np.sqrt(f)
        if rn == 0 or (col_norms == 0).all():
            return True
        cos = np.abs(J.T @ r) / np.maximum(col_norms * rn, np.finfo(float).tiny)
        return bool(cos.max() <= config.gradient_tol)

    r = residual(theta)
    f = float(np.dot(r, r))
    if trace is not None:
        trace.append(f)
    damping = config.initial_damping
    iterations = 0
    if not converged(r, jacobian(theta)):
        while iterations < config.max_iterations:
            J = jacobian(theta)
            g = J.T @ r
            A = J.T @ J
            diag = np.diag(A).copy()
            diag[diag <= 0] = max(diag.max(), np.finfo(float).tiny)
            accepted = False
            while damping < 1e15:
                try:
                    step = np.linalg.solve(A + damping * np.diag(diag), g)
                except np.linalg.LinAlgError:
                    damping *= config.damping_factor
                    continue
                theta_new = theta - step
                r_new = residual(theta_new)
                f_new = float(np.dot(r_new, r_new))
                if f_new < f:
                    accepted = True
                    break
                damping *= config.damping_factor
            if not accepted:
                break
            decrease = f - f_new
            theta, r, f = theta_new, r_new, f_new
            damping /= config.damping_factor
            iterations += 1
            if trace is not None:
                trace.append(f)
            if decrease <= config.objective_tol * max(f, np.finfo(float).tiny):
                break
            if converged(r, jacobian(theta)):
                break
        else:
            iterations = config.max_iterations
    tensor = DiffusionTensor.from_vector(_cholesky_to_tensor(theta),
                                         constrained=True)
    return FitResult(tensor=tensor,
                     residual_norm=float(np.sqrt(f)),
                     iterations=iterations,
                     signals_clamped=clamped)


FIT_METHODS = ("ols", "cwlls", "cnls")


def fit_voxel(method: str, signals, s0: float, design: DesignMatrix,
              **kwargs) -> FitResult:
    """Dispatch a single-voxel fit by method name."""
    if method == "ols":
        return fit_ols(signals, s0, design)
    if method == "cwlls":
        return fit_wlls_constrained(signals, s0, design, **kwargs)
    if method == "cnls":
        return fit_cnls(signals, s0, design, **kwargs)
    raise ValueError(f"unknown fit method {method!r}")


def fit_volume(dwi: np.ndarray, scheme: GradientScheme, method: str = "cwlls",
               mask: np.ndarray | None = None,
               cnls_config: CnlsConfig | None = None) -> np.ndarray:
    """Fit every masked voxel of a DWI array.

    Parameters
    ----------
    dwi : (nx, ny, nz, m) array
        One channel per scheme entry, in scheme order (the b = 0 channel
        carries s0).
    scheme : GradientScheme with a designated b = 0 entry.
    method : "ols", "cwlls", or "cnls".
    mask : optional (nx, ny, nz) boolean array; unmasked voxels get zeros.

    Returns
    -------
    (nx, ny, nz, 6) tensor array.
    """
    dwi = np.asarray(dwi, dtype=float)
    if dwi.ndim != 4 or dwi.shape[3] != len(scheme):
        raise ValueError(
            f"dwi shape {dwi.shape} does not match scheme of {len(scheme)} entries")
    b0 = scheme.b0_index
    if b0 is None:
        raise InvalidB0Error("scheme has no b = 0 entry to normalize against")
    design = build_design_matrix(scheme)
    B = _validate_design(design)
    nx, ny, nz = dwi.shape[:3]
    if mask is None:
        mask = np.ones((nx, ny, nz), dtype=bool)
    out = np.zeros((nx, ny, nz, 6))
    flat = dwi.reshape(-1, dwi.shape[3])
    idx = np.flatnonzero(mask.reshape(-1))
    s0s = flat[idx, b0]
    sig = flat[idx][:, scheme.weighted_mask]

    if method in ("ols", "cwlls"):
        bad = s0s <= 0
        if bad.any():
            raise LogDomainError(f"{int(bad.sum())} masked voxels have s0 <= 0")
        s_clamped = np.maximum(sig, SIGNAL_CLAMP_FRACTION * s0s[:, None])
        S = -np.log(s_clamped / s0s[:, None])
        if method == "ols":
            d, *_ = np.linalg.lstsq(B, S.T, rcond=None)
            d = d.T
        else:
            w = sig * sig
            w = np.maximum(w, (SIGNAL_CLAMP_FRACTION * s0s[:, None]) ** 2)
            A = np.einsum("mi,vm,mj->vij", B, w, B)
            rhs = np.einsum("mi,vm->vi", B, w * S)
            d = np.linalg.solve(A, rhs[:, :, None])[:, :, 0]
            for k in range(d.shape[0]):
                d[k], _ = _project_psd(d[k])
        out.reshape(-1, 6)[idx] = d
    elif method == "cnls":
        for k, v in enumerate(idx):
            res = fit_cnls(sig[k], float(s0s[k]), design, config=cnls_config)
            out.reshape(-1, 6)[v] = res.tensor.as_vector()
    else:
        raise ValueError(f"unknown fit method {method!r}")
    return out
