"""Regular voxel grids and the VXF1 binary grid format."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"VXF1"
_HEADER = struct.Struct("<4s3I4d")


@dataclass(frozen=True)
class VoxelField:
    """Scalar samples on an isotropic Cartesian grid.

    ``values`` is indexed ``[i, j, k]`` along x, y, z; node ``(i, j, k)`` sits at
    ``origin + spacing * (i, j, k)``. On disk the layout is x-fastest.
    """

    origin: np.ndarray
    spacing: float
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        origin = np.asarray(self.origin, dtype=float).reshape(3)
        values = np.asarray(self.values, dtype=float)
        if values.ndim != 3 or min(values.shape) < 2:
            raise ValueError(f"grid needs >= 2 nodes per axis, got shape {values.shape}")
        if not self.spacing > 0:
            raise ValueError("spacing must be positive")
        object.__setattr__(self, "origin", origin)
        object.__setattr__(self, "spacing", float(self.spacing))
        object.__setattr__(self, "values", values)

    @classmethod
    def centered(cls, dims, spacing: float, fill: float = 0.0) -> "VoxelField":
        """Grid of ``dims`` nodes centred on the origin."""
        dims = tuple(int(d) for d in dims)
        origin = -0.5 * spacing * (np.array(dims, dtype=float) - 1.0)
        return cls(origin, spacing, np.full(dims, fill, dtype=float))

    @classmethod
    def covering(cls, half_width: float, spacing: float, fill: float = 0.0) -> "VoxelField":
        """Smallest centred grid whose nodes span ``[-half_width, half_width]^3``."""
        n = int(np.ceil(2.0 * half_width / spacing - 1e-9)) + 1
        return cls.centered((n, n, n), spacing, fill)

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.values.shape)

    @property
    def upper(self) -> np.ndarray:
        return self.origin + self.spacing * (np.array(self.dims) - 1)

    def axes(self) -> list[np.ndarray]:
        return [self.origin[a] + self.spacing * np.arange(self.dims[a]) for a in range(3)]

    def node_coords(self) -> np.ndarray:
        """Coordinates of every node, shape ``dims + (3,)``."""
        ax = self.axes()
        return np.stack(np.meshgrid(*ax, indexing="ij"), axis=-1)

    def with_values(self, values) -> "VoxelField":
        values = np.asarray(values, dtype=float)
        if values.shape != self.dims:
            raise ValueError(f"shape {values.shape} does not match grid {self.dims}")
        return VoxelField(self.origin, self.spacing, values)

    def same_lattice(self, other: "VoxelField") -> bool:
        return (
            self.dims == other.dims
            and np.isclose(self.spacing, other.spacing, rtol=1e-12)
            and np.allclose(self.origin, other.origin, rtol=0, atol=1e-12 * self.spacing)
        )

    def contains(self, points, pad: float = 0.0) -> np.ndarray:
        p = np.asarray(points, dtype=float)
        lo = self.origin - pad
        hi = self.upper + pad
        return np.all((p >= lo) & (p <= hi), axis=-1)

    def interpolate(self, points, values: np.ndarray | None = None) -> np.ndarray:
        """Trilinear interpolation at ``points`` (shape ``(..., 3)``)."""
        vals = self.values if values is None else values
        p = np.asarray(points, dtype=float)
        if not np.all(self.contains(p, pad=1e-9 * self.spacing)):
            raise ValueError("interpolation point outside grid box")
        u = (p - self.origin) / self.spacing
        dims = np.array(self.dims)
        i0 = np.clip(np.floor(u).astype(np.int64), 0, dims - 2)
        t = np.clip(u - i0, 0.0, 1.0)
        out = np.zeros(p.shape[:-1])
        for di in (0, 1):
            wx = t[..., 0] if di else 1.0 - t[..., 0]
            for dj in (0, 1):
                wy = t[..., 1] if dj else 1.0 - t[..., 1]
                for dk in (0, 1):
                    wz = t[..., 2] if dk else 1.0 - t[..., 2]
                    out += wx * wy * wz * vals[i0[..., 0] + di, i0[..., 1] + dj, i0[..., 2] + dk]
        return out

    def ball_mask(self, radius: float, center=(0.0, 0.0, 0.0)) -> np.ndarray:
        r = np.linalg.norm(self.node_coords() - np.asarray(center, dtype=float), axis=-1)
        return r < radius

    def to_bytes(self) -> bytes:
        nx, ny, nz = self.dims
        head = _HEADER.pack(MAGIC, nx, ny, nz, *self.origin, self.spacing)
        body = np.ascontiguousarray(self.values.ravel(order="F"), dtype="<f8").tobytes()
        return head + body

    @classmethod
    def from_bytes(cls, data: bytes) -> "VoxelField":
        if len(data) < _HEADER.size:
            raise ValueError("truncated VXF1 header")
        magic, nx, ny, nz, ox, oy, oz, h = _HEADER.unpack_from(data)
        if magic != MAGIC:
            raise ValueError(f"bad magic {magic!r}")
        count = nx * ny * nz
        body = np.frombuffer(data, dtype="<f8", count=count, offset=_HEADER.size)
        if body.size != count:
            raise ValueError("truncated VXF1 body")
        return cls(np.array([ox, oy, oz]), h, body.reshape((nx, ny, nz), order="F").astype(float))


def save_grid(path, grid: VoxelField) -> None:
    Path(path).write_bytes(grid.to_bytes())


def load_grid(path) -> VoxelField:
    return VoxelField.from_bytes(Path(path).read_bytes())
