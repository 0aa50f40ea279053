"""Dense scalar grids, deterministic randomness, and raw volume I/O.

Compute precision is float64 throughout; files store float32 payloads and
loading widens back to float64.
"""

import json
import os
from dataclasses import dataclass, field

import numpy as np


class SizeMismatchError(ValueError):
    """Raw payload does not match the byte count implied by its sidecar."""

    def __init__(self, path, expected_bytes, actual_bytes):
        self.expected_bytes = expected_bytes
        self.actual_bytes = actual_bytes
        super().__init__(
            f"{path}: expected {expected_bytes} payload bytes, found {actual_bytes}"
        )


class NonFiniteError(RuntimeError):
    """A numerical routine produced NaN/Inf values."""


def _as_f64(a):
    return np.ascontiguousarray(np.asarray(a, dtype=np.float64))


@dataclass
class Volume:
    """3D attenuation grid, z-major layout (slice, row, column).

    data  : float64 array of shape (nz, ny, nx)
    spacing : voxel pitch (sz, sy, sx) in mm
    """

    data: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        self.data = _as_f64(self.data)
        if self.data.ndim != 3:
            raise ValueError(f"volume data must be 3D, got shape {self.data.shape}")
        if len(self.spacing) != 3 or any(s <= 0 for s in self.spacing):
            raise ValueError(f"bad spacing {self.spacing}")
        self.spacing = tuple(float(s) for s in self.spacing)
        if not np.isfinite(self.data).all():
            raise NonFiniteError("volume contains non-finite entries")

    @property
    def dims(self):
        return self.data.shape

    def copy(self):
        return Volume(self.data.copy(), self.spacing)

    def like(self, data):
        """New volume with the same spacing."""
        return Volume(data, self.spacing)


@dataclass
class Sinogram:
    """Per-slice projection data of shape (nz, n_views, n_det)."""

    data: np.ndarray
    angles: np.ndarray = field(default=None)

    def __post_init__(self):
        self.data = _as_f64(self.data)
        if self.data.ndim != 3:
            raise ValueError(f"sinogram data must be 3D, got shape {self.data.shape}")
        self.angles = np.asarray(self.angles, dtype=np.float64)
        if self.angles.shape != (self.data.shape[1],):
            raise ValueError(
                f"need one angle per view: {self.angles.shape} vs {self.data.shape}"
            )
        if self.angles.size and (
            np.any(np.diff(self.angles) <= 0)
            or self.angles[0] < 0
            or self.angles[-1] >= np.pi
        ):
            raise ValueError("view angles must be strictly increasing within [0, pi)")
        if not np.isfinite(self.data).all():
            raise NonFiniteError("sinogram contains non-finite entries")

    @property
    def dims(self):
        return self.data.shape


class Rng:
    """Deterministic counter-based random stream (Philox 4x64).

    Identical seeds give identical sample streams across runs and platforms.
    An Rng is single-owner: parallel workers must use split(), never share
    one instance.
    """

    def __init__(self, seed, _spawn_key=()):
        self.seed = int(seed)
        self._seq = np.random.SeedSequence(self.seed, spawn_key=_spawn_key)
        self._gen = np.random.Generator(np.random.Philox(self._seq))

    def randn(self, *shape):
        """Standard normal samples (ziggurat transform over Philox)."""
        if len(shape) == 1 and not np.isscalar(shape[0]):
            shape = tuple(shape[0])
        return self._gen.standard_normal(size=shape, dtype=np.float64)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self._gen.uniform(low, high, size=size)

    def integers(self, low, high, size=None):
        return self._gen.integers(low, high, size=size)

    def split(self, n):
        """n independent child streams; deterministic in (seed, call order)."""
        children = self._seq.spawn(n)
        out = []
        for child in children:
            r = Rng.__new__(Rng)
            r.seed = self.seed
            r._seq = child
            r._gen = np.random.Generator(np.random.Philox(child))
            out.append(r)
        return out


def dot(a, b):
    """Flat 64-bit inner product; lengths must match."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.size != b.size:
        raise ValueError(f"length mismatch: {a.size} vs {b.size}")
    return float(np.dot(a, b))


def randn(rng, n):
    """n i.i.d. standard normal samples from the given stream."""
    if n < 1:
        raise ValueError(f"need n >= 1, got {n}")
    return rng.randn(int(n))


def save_raw(v, path):
    """Write little-endian float32 payload plus a JSON sidecar at path + '.json'."""
    data32 = v.data.astype("<f4")
    header = {
        "dims": list(v.data.shape),
        "spacing": list(v.spacing),
        "dtype": "f32",
        "order": "zyx",
    }
    with open(path, "wb") as f:
        f.write(data32.tobytes())
    with open(path + ".json", "w", encoding="utf-8") as f:
        json.dump(header, f)
        f.write("\n")


def load_raw(path):
    """Load a raw volume written by save_raw; widens storage f32 to f64."""
    with open(path + ".json", "r", encoding="utf-8") as f:
        header = json.load(f)
    dims = tuple(int(d) for d in header["dims"])
    spacing = tuple(float(s) for s in header.get("spacing", (1.0, 1.0, 1.0)))
    expected = int(np.prod(dims)) * 4
    actual = os.path.getsize(path)
    if expected != actual:
        raise SizeMismatchError(path, expected, actual)
    payload = np.fromfile(path, dtype="<f4").reshape(dims)
    return Volume(payload.astype(np.float64), spacing)


def save_sinogram(s, path):
    """Same raw+sidecar scheme as volumes, with view angles in the sidecar."""
    data32 = s.data.astype("<f4")
    header = {
        "dims": list(s.data.shape),
        "angles": [float(a) for a in s.angles],
        "dtype": "f32",
        "order": "z,view,det",
    }
    with open(path, "wb") as f:
        f.write(data32.tobytes())
    with open(path + ".json", "w", encoding="utf-8") as f:
        json.dump(header, f)
        f.write("\n")


def load_sinogram(path):
    with open(path + ".json", "r", encoding="utf-8") as f:
        header = json.load(f)
    dims = tuple(int(d) for d in header["dims"])
    expected = int(np.prod(dims)) * 4
    actual = os.path.getsize(path)
    if expected != actual:
        raise SizeMismatchError(path, expected, actual)
    payload = np.fromfile(path, dtype="<f4").reshape(dims)
    return Sinogram(payload.astype(np.float64), np.asarray(header["angles"]))
