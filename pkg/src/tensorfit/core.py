"""Diffusion tensor algebra: tensor representation, gradient schemes, the
design matrix linking tensors to log-signal attenuation, the forward signal
model, a 3x3 symmetric eigensolver, and the scalar maps derived from it
(fractional anisotropy, mean diffusivity, principal direction).

Tensor element order throughout the package is
``[Dxx, Dyy, Dzz, Dxy, Dxz, Dyz]`` (units mm^2/s).
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field

import numpy as np

# Unit-norm tolerance for gradient directions; inputs are renormalized on load.
DIRECTION_NORM_TOL = 1e-6

# Jacobi eigensolver: off-diagonal norm tolerance (relative to the Frobenius
# norm of the input) and sweep cap.
JACOBI_TOL = 1e-12
JACOBI_MAX_SWEEPS = 50

TENSOR_ELEMENT_NAMES = ("d_xx", "d_yy", "d_zz", "d_xy", "d_xz", "d_yz")


class InvalidSchemeError(ValueError):
    """A gradient scheme violates its invariants (zero-norm direction,
    negative b-value, mismatched lengths, or more than one b=0 entry)."""


class InvalidVectorError(ValueError):
    """A direction vector is unusable (zero norm or non-finite)."""


@dataclass(frozen=True)
class DiffusionTensor:
    """Six-element symmetric diffusion tensor, units mm^2/s.

    ``constrained`` marks tensors guaranteed to have all eigenvalues >= 0
    (e.g. produced by an eigenvalue projection or a Cholesky parametrization).
    """

    d_xx: float
    d_yy: float
    d_zz: float
    d_xy: float
    d_xz: float
    d_yz: float
    constrained: bool = False

    def __post_init__(self):
        for name in TENSOR_ELEMENT_NAMES:
            if not math.isfinite(getattr(self, name)):
                raise ValueError(f"tensor element {name} is not finite")

    @classmethod
    def from_vector(cls, vec, constrained: bool = False) -> "DiffusionTensor":
        v = np.asarray(vec, dtype=float).reshape(6)
        return cls(*[float(x) for x in v], constrained=constrained)

    @classmethod
    def from_matrix(cls, mat, constrained: bool = False) -> "DiffusionTensor":
        m = np.asarray(mat, dtype=float)
        if m.shape != (3, 3):
            raise ValueError(f"expected 3x3 matrix, got {m.shape}")
        return cls(m[0, 0], m[1, 1], m[2, 2], m[0, 1], m[0, 2], m[1, 2],
                   constrained=constrained)

    def as_vector(self) -> np.ndarray:
        return np.array([self.d_xx, self.d_yy, self.d_zz,
                         self.d_xy, self.d_xz, self.d_yz])

    def as_matrix(self) -> np.ndarray:
        return np.array([
            [self.d_xx, self.d_xy, self.d_xz],
            [self.d_xy, self.d_yy, self.d_yz],
            [self.d_xz, self.d_yz, self.d_zz],
        ])


def tensor_vec_to_matrix(vec) -> np.ndarray:
    """Expand tensor vectors ``(..., 6)`` to symmetric matrices ``(..., 3, 3)``."""
    v = np.asarray(vec, dtype=float)
    m = np.empty(v.shape[:-1] + (3, 3))
    m[..., 0, 0] = v[..., 0]
    m[..., 1, 1] = v[..., 1]
    m[..., 2, 2] = v[..., 2]
    m[..., 0, 1] = m[..., 1, 0] = v[..., 3]
    m[..., 0, 2] = m[..., 2, 0] = v[..., 4]
    m[..., 1, 2] = m[..., 2, 1] = v[..., 5]
    return m


def matrix_to_tensor_vec(mat) -> np.ndarray:
    """Collapse symmetric matrices ``(..., 3, 3)`` to tensor vectors ``(..., 6)``."""
    m = np.asarray(mat, dtype=float)
    return np.stack([m[..., 0, 0], m[..., 1, 1], m[..., 2, 2],
                     m[..., 0, 1], m[..., 0, 2], m[..., 1, 2]], axis=-1)


@dataclass(frozen=True)
class GradientScheme:
    """Acquisition directions and b-values.

    Directions with b > 0 are renormalized to unit length on construction
    (tolerance ``DIRECTION_NORM_TOL``); a zero-norm direction with b > 0 is an
    error. At most one entry may have b = 0; it is the designated
    normalization measurement. When source data contains several b=0
    measurements the caller selects one before constructing the scheme.
    """

    directions: np.ndarray
    bvalues: np.ndarray

    def __post_init__(self):
        dirs = np.atleast_2d(np.asarray(self.directions, dtype=float))
        bvals = np.asarray(self.bvalues, dtype=float).reshape(-1)
        if dirs.shape != (bvals.size, 3):
            raise InvalidSchemeError(
                f"directions {dirs.shape} do not pair with {bvals.size} b-values")
        if not (np.isfinite(dirs).all() and np.isfinite(bvals).all()):
            raise InvalidSchemeError("scheme contains non-finite entries")
        if (bvals < 0).any():
            raise InvalidSchemeError("negative b-value")
        n_b0 = int(np.sum(bvals == 0))
        if n_b0 > 1:
            raise InvalidSchemeError(
                f"{n_b0} b=0 entries; keep exactly one (select before loading)")
        weighted = bvals > 0
        norms = np.linalg.norm(dirs, axis=1)
        if (norms[weighted] == 0).any():
            raise InvalidSchemeError("zero-norm direction with b > 0")
        dirs = dirs.copy()
        dirs[weighted] /= norms[weighted, None]
        object.__setattr__(self, "directions", dirs)
        object.__setattr__(self, "bvalues", bvals)

    def __len__(self) -> int:
        return self.bvalues.size

    @property
    def b0_index(self) -> int | None:
        idx = np.flatnonzero(self.bvalues == 0)
        return int(idx[0]) if idx.size else None

    @property
    def weighted_mask(self) -> np.ndarray:
        return self.bvalues > 0

    @property
    def n_weighted(self) -> int:
        return int(np.sum(self.bvalues > 0))

    def weighted_directions(self) -> np.ndarray:
        return self.directions[self.weighted_mask]

    def weighted_bvalues(self) -> np.ndarray:
        return self.bvalues[self.weighted_mask]


@dataclass(frozen=True)
class DesignMatrix:
    """m x 6 matrix B with rows
    ``[b*gx^2, b*gy^2, b*gz^2, 2b*gx*gy, 2b*gx*gz, 2b*gy*gz]``,
    one per b > 0 measurement, so that B @ D = S where S holds the negated
    log-ratios -ln(s_i/s0) of the noiseless signals.
    """

    rows: np.ndarray

    def __post_init__(self):
        rows = np.asarray(self.rows, dtype=float)
        if rows.ndim != 2 or rows.shape[1] != 6:
            raise ValueError(f"design matrix must be m x 6, got {rows.shape}")
        object.__setattr__(self, "rows", rows)

    @property
    def n_measurements(self) -> int:
        return self.rows.shape[0]

    def condition_number(self) -> float:
        return float(np.linalg.cond(self.rows))


def build_design_matrix(scheme: GradientScheme) -> DesignMatrix:
    """Build the design matrix for the b > 0 entries of a scheme, in scheme
    order. Rank or conditioning is the fitters' concern, not checked here."""
    g = scheme.weighted_directions()
    b = scheme.weighted_bvalues()
    norms = np.linalg.norm(g, axis=1)
    if (np.abs(norms - 1.0) > DIRECTION_NORM_TOL).any():
        raise InvalidSchemeError("non-unit direction after renormalization")
    gx, gy, gz = g[:, 0], g[:, 1], g[:, 2]
    rows = np.stack([
        b * gx * gx,
        b * gy * gy,
        b * gz * gz,
        2.0 * b * gx * gy,
        2.0 * b * gx * gz,
        2.0 * b * gy * gz,
    ], axis=1)
    return DesignMatrix(rows)


def predict_signals(tensor, scheme: GradientScheme, s0: float) -> np.ndarray:
    """Noiseless signals ``s_i = s0 * exp(-B_i . D)`` for the b > 0 entries.

    Parameters
    ----------
    tensor : DiffusionTensor or (6,) array
    scheme : GradientScheme
    s0 : positive reference signal (the b = 0 amplitude)
    """
    if s0 <= 0:
        raise ValueError("s0 must be positive")
    d = tensor.as_vector() if isinstance(tensor, DiffusionTensor) else \
        np.asarray(tensor, dtype=float).reshape(6)
    design = build_design_matrix(scheme)
    return s0 * np.exp(-design.rows @ d)


@dataclass(frozen=True)
class EigenSystem:
    """Eigenvalues sorted descending with column-paired orthonormal
    eigenvectors: ``eigenvectors[:, k]`` belongs to ``eigenvalues[k]``."""

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray

    @property
    def principal_direction(self) -> np.ndarray:
        return self.eigenvectors[:, 0]

    def reconstruct(self) -> np.ndarray:
        """V diag(lambda) V^T as a 3x3 matrix."""
        return (self.eigenvectors * self.eigenvalues) @ self.eigenvectors.T


def _jacobi3(a: list[list[float]]) -> tuple[list[float], list[list[float]]]:
    """Cyclic Jacobi rotations on a symmetric 3x3 matrix (given as nested
    lists, modified in place). Returns (diagonal, accumulated rotation V)
    with the original matrix equal to V diag V^T. Plain-float arithmetic:
    this is the per-voxel hot path."""
    v = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]
    norm = math.sqrt(
        a[0][0] ** 2 + a[1][1] ** 2 + a[2][2] ** 2
        + 2.0 * (a[0][1] ** 2 + a[0][2] ** 2 + a[1][2] ** 2))
    if norm == 0.0:
        return [0.0, 0.0, 0.0], v
    tol = JACOBI_TOL * norm
    for _ in range(JACOBI_MAX_SWEEPS):
        off = math.sqrt(2.0 * (a[0][1] ** 2 + a[0][2] ** 2 + a[1][2] ** 2))
        if off <= tol:
            break
        for p, q in ((0, 1), (0, 2), (1, 2)):
            apq = a[p][q]
            if apq == 0.0:
                continue
            theta = (a[q][q] - a[p][p]) / (2.0 * apq)
            t = math.copysign(1.0, theta) / (abs(theta) + math.sqrt(theta * theta + 1.0))
            c = 1.0 / math.sqrt(t * t + 1.0)
            s = t * c
            a[p][p] -= t * apq
            a[q][q] += t * apq
            a[p][q] = a[q][p] = 0.0
            r = 3 - p - q
            arp, arq = a[r][p], a[r][q]
            a[r][p] = a[p][r] = c * arp - s * arq
            a[r][q] = a[q][r] = s * arp + c * arq
            for i in range(3):
                vip, viq = v[i][p], v[i][q]
                v[i][p] = c * vip - s * viq
                v[i][q] = s * vip + c * viq
    return [a[0][0], a[1][1], a[2][2]], v


def eigendecompose(tensor) -> EigenSystem:
    """Eigendecomposition of a symmetric tensor via cyclic Jacobi rotations.

    Accepts a DiffusionTensor, a (6,) tensor vector, or a (3,3) symmetric
    matrix. Eigenvalues come back sorted descending; eigenvector signs are
    fixed so the largest-magnitude component of each is positive (the
    antipodal ambiguity is not physical).
    """
    if isinstance(tensor, DiffusionTensor):
        m = tensor.as_matrix()
    else:
        arr = np.asarray(tensor, dtype=float)
        m = tensor_vec_to_matrix(arr) if arr.shape == (6,) else arr
    if m.shape != (3, 3):
        raise ValueError(f"expected tensor vector or 3x3 matrix, got {m.shape}")
    if not np.isfinite(m).all():
        raise ValueError("tensor is not finite")
    diag, vecs = _jacobi3([[float(x) for x in row] for row in m])
    order = sorted(range(3), key=lambda k: diag[k], reverse=True)
    evals = np.array([diag[k] for k in order])
    v = np.array(vecs)[:, order]
    for k in range(3):
        col = v[:, k]
        if col[int(np.argmax(np.abs(col)))] < 0:
            v[:, k] = -col
    return EigenSystem(eigenvalues=evals, eigenvectors=v)


def _as_eigenvalues(eigs) -> np.ndarray:
    if isinstance(eigs, EigenSystem):
        return eigs.eigenvalues
    return np.asarray(eigs, dtype=float).reshape(3)


def fractional_anisotropy(eigs) -> float:
    """FA = sqrt(3/2) * ||lambda - mean|| / ||lambda||, clamped to [0, 1].

    The all-zero tensor maps to 0 (isotropic limit).
    """
    lam = _as_eigenvalues(eigs)
    denom = math.sqrt(float(np.dot(lam, lam)))
    if denom == 0.0:
        return 0.0
    dev = lam - lam.mean()
    fa = math.sqrt(1.5 * float(np.dot(dev, dev))) / denom
    return min(max(fa, 0.0), 1.0)


def mean_diffusivity(eigs) -> float:
    """MD = (l1 + l2 + l3) / 3 = trace(D) / 3, units mm^2/s."""
    return float(_as_eigenvalues(eigs).mean())


def angular_error(v1, v2) -> float:
    """Angle in degrees, range [0, 90], between two directions, invariant to
    sign flips of either vector (eigenvector antipodal ambiguity)."""
    a = np.asarray(v1, dtype=float).reshape(3)
    b = np.asarray(v2, dtype=float).reshape(3)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise InvalidVectorError("zero-norm direction")
    cosang = abs(float(np.dot(a, b)) / (na * nb))
    return math.degrees(math.acos(min(cosang, 1.0)))


# ---------------------------------------------------------------------------
# Scheme construction and FSL-style text IO

# Six diffusion-weighting directions optimized for design-matrix conditioning
# (renormalized to exact unit vectors on load).
SKARE6_DIRECTIONS = np.array([
    [0.910, 0.416, 0.000],
    [0.910, -0.416, 0.000],
    [0.416, 0.000, 0.910],
    [-0.416, 0.000, 0.910],
    [0.000, 0.910, 0.416],
    [0.000, 0.910, -0.416],
])


def skare6(b: float = 1000.0, include_b0: bool = True) -> GradientScheme:
    """The built-in six-direction scheme at a single shell ``b`` (s/mm^2),
    preceded by one b = 0 normalization entry unless ``include_b0`` is False."""
    dirs = SKARE6_DIRECTIONS
    bvals = np.full(6, float(b))
    if include_b0:
        dirs = np.vstack([[0.0, 0.0, 0.0], dirs])
        bvals = np.concatenate([[0.0], bvals])
    return GradientScheme(directions=dirs, bvalues=bvals)


def fibonacci_directions(n: int) -> np.ndarray:
    """n unit vectors spread near-uniformly on the sphere (Fibonacci spiral)."""
    i = np.arange(n)
    phi = math.pi * (3.0 - math.sqrt(5.0))
    y = 1.0 - 2.0 * i / max(n - 1, 1)
    radius = np.sqrt(np.maximum(1.0 - y * y, 0.0))
    theta = phi * i
    return np.stack([np.cos(theta) * radius, y, np.sin(theta) * radius], axis=1)


def uniform_sphere_scheme(n: int = 30, b: float = 1000.0,
                          include_b0: bool = True) -> GradientScheme:
    """A dense single-shell scheme with ``n`` near-uniform directions, as used
    for building high-quality reference fits."""
    dirs = fibonacci_directions(n)
    bvals = np.full(n, float(b))
    if include_b0:
        dirs = np.vstack([[0.0, 0.0, 0.0], dirs])
        bvals = np.concatenate([[0.0], bvals])
    return GradientScheme(directions=dirs, bvalues=bvals)


def load_fsl_scheme(bvec_path: str | os.PathLike,
                    bval_path: str | os.PathLike,
                    b0_index: int | None = None) -> GradientScheme:
    """Load a scheme from FSL-style text files.

    The bvec file holds 3 whitespace-separated rows (x, y, z components, one
    column per measurement); the bval file holds one row of b-values. Columns
    pair positionally. If the files contain several b=0 measurements, pass
    ``b0_index`` (index into the file columns) to keep that one and drop the
    rest; otherwise multiple b=0 entries are an error.
    """
    bvecs = np.atleast_2d(np.loadtxt(bvec_path, dtype=float))
    bvals = np.atleast_1d(np.loadtxt(bval_path, dtype=float)).reshape(-1)
    if bvecs.shape[0] != 3:
        raise InvalidSchemeError(
            f"bvec file must have 3 rows (x, y, z), got {bvecs.shape[0]}")
    if bvecs.shape[1] != bvals.size:
        raise InvalidSchemeError(
            f"{bvecs.shape[1]} directions do not pair with {bvals.size} b-values")
    dirs = bvecs.T
    b0_all = np.flatnonzero(bvals == 0)
    if b0_all.size > 1:
        if b0_index is None:
            raise InvalidSchemeError(
                f"{b0_all.size} b=0 measurements; pass b0_index to select one")
        if b0_index not in b0_all:
            raise InvalidSchemeError(
                f"b0_index {b0_index} is not a b=0 measurement")
        keep = np.ones(bvals.size, dtype=bool)
        keep[b0_all] = False
        keep[b0_index] = True
        dirs, bvals = dirs[keep], bvals[keep]
    return GradientScheme(directions=dirs, bvalues=bvals)


def save_fsl_scheme(scheme: GradientScheme,
                    bvec_path: str | os.PathLike,
                    bval_path: str | os.PathLike) -> None:
    """Write a scheme back to FSL-style bvec/bval text files."""
    np.savetxt(bvec_path, scheme.directions.T, fmt="%.10f")
    np.savetxt(bval_path, scheme.bvalues[None, :], fmt="%.10f")
