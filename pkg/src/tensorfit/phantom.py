"""Synthetic ground-truth phantoms, forward DWI synthesis, and Rician noise.

Phantoms are built from per-voxel eigenvalues sampled inside per-region
FA/MD ranges and a smoothly varying rotation field, so every voxel tensor is
positive semidefinite by construction and the principal-direction field has
spatial autocorrelation at a configurable length scale. Regions mimic a
white-matter analog (high FA), a gray-matter analog (low FA), and a
CSF analog (isotropic, MD near 3.0e-3 mm^2/s).

All randomness flows through the counter-based Philox generator keyed by an
explicit 64-bit seed, which is recorded in the output volume metadata.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .core import GradientScheme, build_design_matrix
from .volume import Volume4D

RNG_NAME = "philox4x64"

WM_LABEL, GM_LABEL, CSF_LABEL = 1, 2, 3


def make_rng(seed: int, stream: int = 0) -> np.random.Generator:
    """The package-wide counter-based generator. ``stream`` separates
    independent uses of the same seed (initialization vs. batch order)."""
    key = np.array([seed, stream], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


@dataclass(frozen=True)
class RegionSpec:
    label: int
    fa_range: tuple[float, float]
    md_range: tuple[float, float]   # mm^2/s

    def __post_init__(self):
        lo, hi = self.fa_range
        if not (0.0 <= lo <= hi < 1.0):
            raise ValueError(f"fa_range {self.fa_range} must lie in [0, 1)")
        lo, hi = self.md_range
        if not (0.0 < lo <= hi):
            raise ValueError(f"md_range {self.md_range} must be positive")


def default_regions() -> dict[str, RegionSpec]:
    return {
        "wm": RegionSpec(WM_LABEL, fa_range=(0.60, 0.90), md_range=(0.7e-3, 1.0e-3)),
        "gm": RegionSpec(GM_LABEL, fa_range=(0.05, 0.25), md_range=(0.8e-3, 1.2e-3)),
        "csf": RegionSpec(CSF_LABEL, fa_range=(0.00, 0.04), md_range=(2.85e-3, 3.15e-3)),
    }


@dataclass(frozen=True)
class PhantomSpec:
    dims: tuple[int, int, int]
    seed: int = 0
    region_model: str = "layered"      # or "curved-tract"
    regions: dict[str, RegionSpec] = field(default_factory=default_regions)
    length_scale: float = 8.0          # voxels; 1 gives an i.i.d. field
    voxel_size: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        if len(self.dims) != 3 or any(int(d) < 1 for d in self.dims):
            raise ValueError(f"bad dims {self.dims}")
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        if self.region_model not in ("layered", "curved-tract"):
            raise ValueError(f"unknown region model {self.region_model!r}")
        if self.length_scale < 1:
            raise ValueError("length_scale must be >= 1 voxel")
        for key in ("wm", "gm", "csf"):
            if key not in self.regions:
                raise ValueError(f"regions must define {key!r}")


@dataclass(frozen=True)
class NoiseSpec:
    """Rician noise level. sigma = reference_amplitude / 10^(snr_db/20).

    ``snr_db = math.inf`` is the no-noise sentinel.
    """

    snr_db: float
    reference_amplitude: float
    seed: int = 0

    def __post_init__(self):
        if math.isnan(self.snr_db):
            raise ValueError("snr_db must not be NaN")
        if not math.isinf(self.snr_db) and self.sigma <= 0:
            raise ValueError("noise sigma must be positive")

    @property
    def sigma(self) -> float:
        if math.isinf(self.snr_db):
            return 0.0
        return self.reference_amplitude / 10.0 ** (self.snr_db / 20.0)


# --- smooth random fields ---------------------------------------------------

def _control_shape(dims, spacing: float) -> tuple[int, int, int]:
    return tuple(int(math.ceil((n - 1) / spacing)) + 1 if n > 1 else 1
                 for n in dims)


def _trilinear(control: np.ndarray, dims, spacing: float) -> np.ndarray:
    """Interpolate a (cx, cy, cz, k) control grid onto the voxel grid."""
    out_axes = []
    for axis, n in enumerate(dims):
        coord = np.arange(n) / spacing
        c = control.shape[axis]
        i0 = np.minimum(np.floor(coord).astype(int), max(c - 2, 0))
        t = np.clip(coord - i0, 0.0, 1.0) if c > 1 else np.zeros(n)
        i1 = np.minimum(i0 + 1, c - 1)
        out_axes.append((i0, i1, t))
    (x0, x1, tx), (y0, y1, ty) = out_axes[0], out_axes[1]
    (z0, z1, tz) = out_axes[2]
    tx = tx[:, None, None, None]
    ty = ty[None, :, None, None]
    tz = tz[None, None, :, None]

    def corner(ix, iy, iz):
        return control[np.ix_(ix, iy, iz)]

    c000, c100 = corner(x0, y0, z0), corner(x1, y0, z0)
    c010, c110 = corner(x0, y1, z0), corner(x1, y1, z0)
    c001, c101 = corner(x0, y0, z1), corner(x1, y0, z1)
    c011, c111 = corner(x0, y1, z1), corner(x1, y1, z1)
    c00 = c000 * (1 - tx) + c100 * tx
    c10 = c010 * (1 - tx) + c110 * tx
    c01 = c001 * (1 - tx) + c101 * tx
    c11 = c011 * (1 - tx) + c111 * tx
    c0 = c00 * (1 - ty) + c10 * ty
    c1 = c01 * (1 - ty) + c11 * ty
    return c0 * (1 - tz) + c1 * tz


def _aligned_quaternions(rng: np.random.Generator, shape) -> np.ndarray:
    """Random unit quaternions on the control grid, sign-aligned with already
    visited neighbors so interpolation never crosses the antipode."""
    q = rng.normal(size=shape + (4,))
    q /= np.linalg.norm(q, axis=-1, keepdims=True)
    cx, cy, cz = shape
    for i in range(cx):
        for j in range(cy):
            for k in range(cz):
                if i == 0 and j == 0 and k == 0:
                    continue
                if i > 0:
                    ref = q[i - 1, j, k]
                elif j > 0:
                    ref = q[i, j - 1, k]
                else:
                    ref = q[i, j, k - 1]
                if float(np.dot(q[i, j, k], ref)) < 0:
                    q[i, j, k] = -q[i, j, k]
    return q


def _quaternions_to_rotations(q: np.ndarray) -> np.ndarray:
    """Unit quaternions (..., 4) as (w, x, y, z) to rotation matrices (..., 3, 3)."""
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    r = np.empty(q.shape[:-1] + (3, 3))
    r[..., 0, 0] = 1 - 2 * (y * y + z * z)
    r[..., 0, 1] = 2 * (x * y - w * z)
    r[..., 0, 2] = 2 * (x * z + w * y)
    r[..., 1, 0] = 2 * (x * y + w * z)
    r[..., 1, 1] = 1 - 2 * (x * x + z * z)
    r[..., 1, 2] = 2 * (y * z - w * x)
    r[..., 2, 0] = 2 * (x * z - w * y)
    r[..., 2, 1] = 2 * (y * z + w * x)
    r[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return r


def _region_labels(spec: PhantomSpec) -> np.ndarray:
    nx, ny, nz = spec.dims
    labels = np.full(spec.dims, GM_LABEL, dtype=np.int64)
    if spec.region_model == "layered":
        yfrac = (np.arange(ny) + 0.5) / ny
        row = np.full(ny, GM_LABEL, dtype=np.int64)
        row[(yfrac < 0.10) | (yfrac >= 0.90)] = CSF_LABEL
        row[(yfrac >= 0.30) & (yfrac < 0.70)] = WM_LABEL
        labels[:] = row[None, :, None]
    else:  # curved-tract: an arc of WM through GM with a CSF rim
        scale = min(nx, ny)
        x = (np.arange(nx) + 0.5)[:, None] / scale
        y = (np.arange(ny) + 0.5)[None, :] / scale
        r = np.hypot(x, y)
        plane = np.full((nx, ny), GM_LABEL, dtype=np.int64)
        plane[(r >= 0.40) & (r < 0.65)] = WM_LABEL
        plane[(r < 0.15) | (r >= 0.95)] = CSF_LABEL
        labels[:] = plane[:, :, None]
    return labels


def _eigenvalues_from_fa_md(fa: np.ndarray, md: np.ndarray) -> np.ndarray:
    """Axially symmetric eigenvalues (l1 >= l2 = l3) with the given FA and MD."""
    delta = fa / np.sqrt(3.0 - 2.0 * fa * fa)
    lam = np.empty(fa.shape + (3,))
    lam[..., 0] = md * (1 + 2 * delta)
    lam[..., 1] = md * (1 - delta)
    lam[..., 2] = md * (1 - delta)
    return lam


def generate_phantom(spec: PhantomSpec) -> tuple[Volume4D, Volume4D, Volume4D]:
    """Build (tensor volume [c=6], label volume [c=1], s0 volume [c=1]).

    Deterministic given ``spec.seed``. Every voxel tensor is PSD by
    construction; FA and MD land inside each region's configured range; the
    principal-direction field varies smoothly at ``spec.length_scale`` voxels
    (length_scale 1 degenerates to i.i.d. directions, useful as a control).
    """
    rng = make_rng(spec.seed)
    cshape = _control_shape(spec.dims, spec.length_scale)

    quats = _aligned_quaternions(rng, cshape)
    u_fa = rng.random(size=cshape + (1,))
    u_md = rng.random(size=cshape + (1,))
    u_s0 = rng.random(size=cshape + (1,))

    q = _trilinear(quats, spec.dims, spec.length_scale)
    norms = np.linalg.norm(q, axis=-1, keepdims=True)
    small = norms[..., 0] < 1e-8
    if small.any():
        q[small] = np.array([1.0, 0.0, 0.0, 0.0])
        norms = np.linalg.norm(q, axis=-1, keepdims=True)
    q /= norms
    rot = _quaternions_to_rotations(q)

    fa_u = _trilinear(u_fa, spec.dims, spec.length_scale)[..., 0]
    md_u = _trilinear(u_md, spec.dims, spec.length_scale)[..., 0]
    s0_u = _trilinear(u_s0, spec.dims, spec.length_scale)[..., 0]

    labels = _region_labels(spec)
    fa = np.empty(spec.dims)
    md = np.empty(spec.dims)
    for region in spec.regions.values():
        m = labels == region.label
        fa[m] = region.fa_range[0] + (region.fa_range[1] - region.fa_range[0]) * fa_u[m]
        md[m] = region.md_range[0] + (region.md_range[1] - region.md_range[0]) * md_u[m]

    lam = _eigenvalues_from_fa_md(fa, md)
    tensors = np.einsum("...ik,...k,...jk->...ij", rot, lam, rot)
    vecs = np.stack([tensors[..., 0, 0], tensors[..., 1, 1], tensors[..., 2, 2],
                     tensors[..., 0, 1], tensors[..., 0, 2], tensors[..., 1, 2]],
                    axis=-1)
    s0 = 0.9 + 0.2 * s0_u

    meta = dict(voxel_size=spec.voxel_size, seed=spec.seed)
    tensor_vol = Volume4D(vecs, description=f"phantom tensors ({spec.region_model}, {RNG_NAME})", **meta)
    label_vol = Volume4D(labels.astype(float)[..., None],
                         description="phantom region labels (1=wm 2=gm 3=csf)", **meta)
    s0_vol = Volume4D(s0[..., None], description="phantom b0 amplitude", **meta)
    return tensor_vol, label_vol, s0_vol


def synthesize_dwi(tensors: Volume4D, s0: Volume4D,
                   scheme: GradientScheme) -> Volume4D:
    """Noiseless DWI volume with one channel per scheme entry in scheme
    order; the b = 0 channel carries s0, the rest s0 * exp(-B_i . D)."""
    if tensors.dims != s0.dims:
        raise ValueError(f"tensor dims {tensors.dims} != s0 dims {s0.dims}")
    if tensors.channels != 6:
        raise ValueError(f"tensor volume must have 6 channels, got {tensors.channels}")
    if s0.channels != 1:
        raise ValueError(f"s0 volume must have 1 channel, got {s0.channels}")
    design = build_design_matrix(scheme)
    vecs = tensors.data.reshape(-1, 6)
    amp = s0.data.reshape(-1)
    att = np.exp(-(vecs @ design.rows.T))
    out = np.empty((vecs.shape[0], len(scheme)))
    out[:, scheme.weighted_mask] = amp[:, None] * att
    b0 = scheme.b0_index
    if b0 is not None:
        out[:, b0] = amp
    return Volume4D(out.reshape(tensors.dims + (len(scheme),)),
                    voxel_size=tensors.voxel_size, seed=tensors.seed,
                    description="synthesized dwi")


def add_rician_noise(signals: Volume4D, noise: NoiseSpec) -> Volume4D:
    """Per channel value A -> sqrt((A + n1)^2 + n2^2), n1, n2 ~ N(0, sigma^2)
    i.i.d. Deterministic given ``noise.seed``; identity when sigma is 0."""
    if (signals.data < 0).any():
        raise ValueError("signals must be non-negative")
    sigma = noise.sigma
    if sigma == 0.0:
        data = signals.data.copy()
    else:
        rng = make_rng(noise.seed)
        n1 = rng.normal(0.0, sigma, size=signals.data.shape)
        n2 = rng.normal(0.0, sigma, size=signals.data.shape)
        data = np.sqrt((signals.data + n1) ** 2 + n2 ** 2)
    return Volume4D(data, voxel_size=signals.voxel_size, seed=noise.seed,
                    description=f"{signals.description} + rician snr={noise.snr_db}dB")
