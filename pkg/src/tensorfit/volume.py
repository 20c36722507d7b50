"""Volume container and on-disk format.

A Volume4D is a 3-D grid of per-voxel channel vectors (signals, tensor
elements, or labels), held as a C-contiguous ``(nx, ny, nz, c)`` float64
array (row major, channel fastest).

On disk a volume is a raw little-endian 32-bit float data file plus a JSON
sidecar ``{dims, channels, voxel_size, dtype, seed, description}`` named
after the same stem. The save/load pair is a bit-exact round trip at the
file level.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

_DTYPES = {"float32": "<f4", "float64": "<f8"}


@dataclass
class Volume4D:
    data: np.ndarray                 # (nx, ny, nz, c)
    voxel_size: tuple[float, float, float] = (1.0, 1.0, 1.0)
    seed: int | None = None
    description: str = ""

    def __post_init__(self):
        arr = np.ascontiguousarray(self.data, dtype=np.float64)
        if arr.ndim == 3:
            arr = arr[..., None]
        if arr.ndim != 4:
            raise ValueError(f"volume data must be (nx, ny, nz, c), got {arr.shape}")
        if not np.isfinite(arr).all():
            raise ValueError("volume contains non-finite values")
        self.data = arr
        self.voxel_size = tuple(float(v) for v in self.voxel_size)
        if len(self.voxel_size) != 3:
            raise ValueError("voxel_size must have 3 entries")

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape[:3]

    @property
    def channels(self) -> int:
        return self.data.shape[3]

    def scalar(self) -> np.ndarray:
        """The (nx, ny, nz) array of a single-channel volume."""
        if self.channels != 1:
            raise ValueError(f"expected 1 channel, got {self.channels}")
        return self.data[..., 0]


def _sidecar_path(path: str | os.PathLike) -> str:
    return os.path.splitext(os.fspath(path))[0] + ".json"


def save_volume(volume: Volume4D, path: str | os.PathLike,
                dtype: str = "float32") -> None:
    """Write the raw data file at ``path`` and its JSON sidecar next to it.

    The default on-disk dtype is float32; in-memory float64 values are
    truncated once at save time.
    """
    if dtype not in _DTYPES:
        raise ValueError(f"unsupported dtype {dtype!r}")
    path = os.fspath(path)
    volume.data.astype(_DTYPES[dtype]).tofile(path)
    sidecar = {
        "dims": list(volume.dims),
        "channels": volume.channels,
        "voxel_size": list(volume.voxel_size),
        "dtype": dtype,
        "seed": volume.seed,
        "description": volume.description,
    }
    tmp = _sidecar_path(path) + ".tmp"
    with open(tmp, "w") as f:
        json.dump(sidecar, f, indent=1)
        f.write("\n")
    os.replace(tmp, _sidecar_path(path))


def load_volume(path: str | os.PathLike) -> Volume4D:
    path = os.fspath(path)
    with open(_sidecar_path(path)) as f:
        sidecar = json.load(f)
    dims = tuple(int(d) for d in sidecar["dims"])
    channels = int(sidecar["channels"])
    dtype = sidecar.get("dtype", "float32")
    if dtype not in _DTYPES:
        raise ValueError(f"unsupported dtype {dtype!r} in sidecar")
    raw = np.fromfile(path, dtype=_DTYPES[dtype])
    expected = dims[0] * dims[1] * dims[2] * channels
    if raw.size != expected:
        raise ValueError(
            f"data file holds {raw.size} values, sidecar expects {expected}")
    return Volume4D(
        data=raw.astype(np.float64).reshape(dims + (channels,)),
        voxel_size=tuple(sidecar.get("voxel_size", (1.0, 1.0, 1.0))),
        seed=sidecar.get("seed"),
        description=sidecar.get("description", ""),
    )
