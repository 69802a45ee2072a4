"""State and grid data model, per-level normalization, and the OSTX file format.

Array convention used everywhere in this package: 3D fields are indexed
``[k][i][j]`` = (level, longitude, latitude), level-major, with ``k``
increasing downward.  Diffusion-model tensors stack temperature levels then
salinity levels into ``2Z`` channels over the ``W x H`` horizontal plane.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import FormatError, ValidationError

# Unnormalized sanity bounds used to reject corrupt files.
TEMP_BOUNDS = (-5.0, 45.0)
SALT_BOUNDS = (0.0, 45.0)

# Std below this is treated as a constant level and replaced by 1.0.
STD_FLOOR = 1e-6

OSTX_MAGIC = b"OSTX"
OSTX_VERSION = 1
_OSTX_HEADER = struct.Struct("<4sIIIIIQ")  # magic, version, Z, W, H, flags, reserved
OSTX_HEADER_SIZE = _OSTX_HEADER.size
assert OSTX_HEADER_SIZE == 32


def _readonly(a: np.ndarray) -> np.ndarray:
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class GridGeometry:
    """Regular box grid: level depths, horizontal coordinates, cell volumes."""

    depth_m: np.ndarray        # (Z,), strictly increasing downward
    lon_deg: np.ndarray        # (W,)
    lat_deg: np.ndarray        # (H,)
    cell_volume: np.ndarray    # (Z, W, H), m^3

    def __post_init__(self):
        object.__setattr__(self, "depth_m", _readonly(np.asarray(self.depth_m, dtype=np.float64)))
        object.__setattr__(self, "lon_deg", _readonly(np.asarray(self.lon_deg, dtype=np.float64)))
        object.__setattr__(self, "lat_deg", _readonly(np.asarray(self.lat_deg, dtype=np.float64)))
        object.__setattr__(self, "cell_volume", _readonly(np.asarray(self.cell_volume, dtype=np.float64)))
        z, w, h = self.depth_m.size, self.lon_deg.size, self.lat_deg.size
        if z < 2 or w < 1 or h < 1:
            raise ValidationError(f"grid needs Z >= 2, W >= 1, H >= 1, got Z={z} W={w} H={h}")
        if self.cell_volume.shape != (z, w, h):
            raise ValidationError(
                f"cell_volume shape {self.cell_volume.shape} does not match (Z,W,H)=({z},{w},{h})"
            )
        if not np.all(np.diff(self.depth_m) > 0):
            raise ValidationError("depth_m must be strictly increasing with level index")
        if not np.all(self.cell_volume > 0):
            raise ValidationError("all cell volumes must be positive")

    @property
    def n_levels(self) -> int:
        return self.depth_m.size

    @property
    def n_lon(self) -> int:
        return self.lon_deg.size

    @property
    def n_lat(self) -> int:
        return self.lat_deg.size

    @property
    def dims(self) -> tuple[int, int, int]:
        return (self.n_levels, self.n_lon, self.n_lat)


def build_box_geometry(
    n_levels: int,
    n_lon: int,
    n_lat: int,
    max_depth_m: float = 4000.0,
    stretch: float = 3.0,
    lat_extent_deg: float = 70.0,
    lon_extent_deg: float = 60.0,
) -> GridGeometry:
    """Idealized basin: exponentially stretched levels, lat/lon box, cos(lat) areas."""
    k = np.arange(n_levels, dtype=np.float64)
    # Level centers; exponential stretching concentrates levels near the surface.
    centers = max_depth_m * (np.expm1(stretch * (k + 0.5) / n_levels)) / np.expm1(stretch)
    ifaces = max_depth_m * (np.expm1(stretch * np.arange(n_levels + 1) / n_levels)) / np.expm1(stretch)
    thickness = np.diff(ifaces)

    lat = np.linspace(-lat_extent_deg, lat_extent_deg, n_lat)
    lon = np.linspace(0.0, lon_extent_deg, n_lon)
    m_per_deg = 111_320.0
    dlat = (2 * lat_extent_deg / max(n_lat - 1, 1)) * m_per_deg
    dlon = (lon_extent_deg / max(n_lon - 1, 1)) * m_per_deg
    area = dlon * dlat * np.cos(np.deg2rad(lat))  # (H,)
    volume = thickness[:, None, None] * area[None, None, :] * np.ones((1, n_lon, 1))
    return GridGeometry(depth_m=centers, lon_deg=lon, lat_deg=lat, cell_volume=volume)


def level_thickness(geometry: GridGeometry) -> np.ndarray:
    """Cell thickness (Z,) from interfaces placed midway between level centers."""
    d = geometry.depth_m
    upper = np.concatenate(([0.0], 0.5 * (d[:-1] + d[1:])))
    lower = np.concatenate((0.5 * (d[:-1] + d[1:]), [d[-1] + 0.5 * (d[-1] - d[-2])]))
    return lower - upper


@dataclass(frozen=True)
class OceanState:
    """Paired 3D temperature/salinity fields; `normalized` flags standardized units."""

    temperature: np.ndarray  # (Z, W, H), degC when unnormalized
    salinity: np.ndarray     # (Z, W, H), g/kg when unnormalized
    normalized: bool = False

    def __post_init__(self):
        t = np.asarray(self.temperature)
        s = np.asarray(self.salinity)
        if t.ndim != 3 or t.shape != s.shape:
            raise ValidationError(
                f"temperature/salinity must share a (Z,W,H) shape, got {t.shape} vs {s.shape}"
            )
        if min(t.shape) < 1:
            raise ValidationError(f"degenerate state dims {t.shape}")
        if not (np.all(np.isfinite(t)) and np.all(np.isfinite(s))):
            raise ValidationError("state contains non-finite values")
        object.__setattr__(self, "temperature", _readonly(t))
        object.__setattr__(self, "salinity", _readonly(s))

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.temperature.shape

    def within_sanity_bounds(self) -> bool:
        """Unnormalized plausibility check used to reject corrupt files."""
        t, s = self.temperature, self.salinity
        return bool(
            t.min() >= TEMP_BOUNDS[0]
            and t.max() <= TEMP_BOUNDS[1]
            and s.min() >= SALT_BOUNDS[0]
            and s.max() <= SALT_BOUNDS[1]
        )


def as_channels(state: OceanState, dtype=np.float64) -> np.ndarray:
    """Stack T then S levels into a (2Z, W, H) channel tensor."""
    return np.concatenate(
        [state.temperature.astype(dtype), state.salinity.astype(dtype)], axis=0
    )


def channels_to_state(x: np.ndarray, normalized: bool) -> OceanState:
    """Inverse of :func:`as_channels`; `x` is (2Z, W, H)."""
    if x.ndim != 3 or x.shape[0] % 2 != 0:
        raise ValidationError(f"channel tensor must be (2Z, W, H), got {x.shape}")
    z = x.shape[0] // 2
    return OceanState(temperature=x[:z].copy(), salinity=x[z:].copy(), normalized=normalized)


@dataclass(frozen=True)
class NormStats:
    """Per-level means/stds for both variables (population statistics)."""

    mean_T: np.ndarray
    std_T: np.ndarray
    mean_S: np.ndarray
    std_S: np.ndarray

    def __post_init__(self):
        for name in ("mean_T", "std_T", "mean_S", "std_S"):
            object.__setattr__(self, name, _readonly(np.asarray(getattr(self, name), dtype=np.float64)))
        z = self.mean_T.size
        if not all(getattr(self, n).shape == (z,) for n in ("std_T", "mean_S", "std_S")):
            raise ValidationError("norm stats arrays must all have length Z")
        if np.any(self.std_T <= 0) or np.any(self.std_S <= 0):
            raise ValidationError("std values must be positive (floor applied upstream)")

    def to_json(self, path: str | Path) -> None:
        payload = {
            "mean_T": self.mean_T.tolist(),
            "std_T": self.std_T.tolist(),
            "mean_S": self.mean_S.tolist(),
            "std_S": self.std_S.tolist(),
        }
        Path(path).write_text(json.dumps(payload))

    @classmethod
    def from_json(cls, path: str | Path) -> "NormStats":
        try:
            payload = json.loads(Path(path).read_text())
            return cls(
                mean_T=np.array(payload["mean_T"]),
                std_T=np.array(payload["std_T"]),
                mean_S=np.array(payload["mean_S"]),
                std_S=np.array(payload["std_S"]),
            )
        except (KeyError, json.JSONDecodeError) as exc:
            raise FormatError(f"bad norm-stats file {path}: {exc}") from exc

    def channel_means(self) -> np.ndarray:
        return np.concatenate([self.mean_T, self.mean_S])

    def channel_stds(self) -> np.ndarray:
        return np.concatenate([self.std_T, self.std_S])


def compute_norm_stats(dataset: Sequence[OceanState]) -> NormStats:
    """Per-level mean/std of T and S over all states and horizontal cells."""
    if len(dataset) == 0:
        raise ValidationError("cannot compute norm stats from an empty dataset")
    dims = dataset[0].dims
    for st in dataset:
        if st.dims != dims:
            raise ValidationError(f"mixed state dims: {st.dims} vs {dims}")
        if st.normalized:
            raise ValidationError("norm stats must be computed on unnormalized states")
    t = np.stack([st.temperature for st in dataset]).astype(np.float64)  # (N, Z, W, H)
    s = np.stack([st.salinity for st in dataset]).astype(np.float64)

    def _stats(a):
        mean = a.mean(axis=(0, 2, 3))
        std = a.std(axis=(0, 2, 3))  # population
        return mean, np.where(std < STD_FLOOR, 1.0, std)

    mean_t, std_t = _stats(t)
    mean_s, std_s = _stats(s)
    return NormStats(mean_T=mean_t, std_T=std_t, mean_S=mean_s, std_S=std_s)


def normalize_state(state: OceanState, stats: NormStats) -> OceanState:
    if state.normalized:
        raise ValidationError("state is already normalized")
    t = (state.temperature.astype(np.float64) - stats.mean_T[:, None, None]) / stats.std_T[:, None, None]
    s = (state.salinity.astype(np.float64) - stats.mean_S[:, None, None]) / stats.std_S[:, None, None]
    return OceanState(temperature=t, salinity=s, normalized=True)


def denormalize_state(state: OceanState, stats: NormStats) -> OceanState:
    if not state.normalized:
        raise ValidationError("state is not normalized")
    t = state.temperature.astype(np.float64) * stats.std_T[:, None, None] + stats.mean_T[:, None, None]
    s = state.salinity.astype(np.float64) * stats.std_S[:, None, None] + stats.mean_S[:, None, None]
    return OceanState(temperature=t, salinity=s, normalized=False)


def write_state(state: OceanState, geometry: GridGeometry | None, path: str | Path) -> None:
    """Write the bit-exact OSTX binary format (float32 payload, T then S)."""
    if geometry is not None and state.dims != geometry.dims:
        raise ValidationError(f"state dims {state.dims} do not match geometry {geometry.dims}")
    z, w, h = state.dims
    flags = 1 if state.normalized else 0
    header = _OSTX_HEADER.pack(OSTX_MAGIC, OSTX_VERSION, z, w, h, flags, 0)
    payload_t = np.ascontiguousarray(state.temperature, dtype="<f4").tobytes()
    payload_s = np.ascontiguousarray(state.salinity, dtype="<f4").tobytes()
    try:
        Path(path).write_bytes(header + payload_t + payload_s)
    except OSError as exc:
        raise OSError(f"cannot write OSTX file {path}: {exc}") from exc


def read_state(path: str | Path) -> tuple[OceanState, tuple[int, int, int]]:
    """Read an OSTX file; returns the state and its (Z, W, H) dims."""
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise OSError(f"cannot read OSTX file {path}: {exc}") from exc
    if len(raw) < OSTX_HEADER_SIZE:
        raise FormatError(f"{path}: shorter than the 32-byte OSTX header")
    magic, version, z, w, h, flags, reserved = _OSTX_HEADER.unpack_from(raw)
    if magic != OSTX_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != OSTX_VERSION:
        raise FormatError(f"{path}: unsupported OSTX version {version}")
    if z < 1 or w < 1 or h < 1:
        raise FormatError(f"{path}: degenerate dims ({z},{w},{h})")
    n = z * w * h
    expected = OSTX_HEADER_SIZE + 2 * n * 4
    if len(raw) != expected:
        raise FormatError(f"{path}: payload is {len(raw)} bytes, expected {expected}")
    data = np.frombuffer(raw, dtype="<f4", offset=OSTX_HEADER_SIZE)
    t = data[:n].reshape(z, w, h).copy()
    s = data[n:].reshape(z, w, h).copy()
    if not (np.all(np.isfinite(t)) and np.all(np.isfinite(s))):
        raise ValidationError(f"{path}: non-finite values in payload")
    state = OceanState(temperature=t, salinity=s, normalized=bool(flags & 1))
    return state, (z, w, h)
