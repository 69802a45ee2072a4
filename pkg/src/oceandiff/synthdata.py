"""Deterministic synthetic dataset of stably stratified ocean states.

The fields mimic the qualitative structure of an idealized basin: warm salty
tropics, cold fresh high latitudes, an exponential thermocline, and smooth
per-snapshot variability.  Every emitted state is repaired to exact static
stability so the training distribution has zero density error.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import ConfigError, FormatError, ValidationError
from .grid import (
    GridGeometry,
    NormStats,
    OceanState,
    build_box_geometry,
    compute_norm_stats,
    read_state,
    write_state,
)
from .integrator import _adjust_field
from .physics import EosParams, density, unstable_cell_mask


@dataclass(frozen=True)
class SynthParams:
    seed: int = 0
    n_levels: int = 12
    n_lon: int = 48
    n_lat: int = 32
    surface_T_equator: float = 25.0   # degC
    surface_T_pole: float = 5.0       # degC
    deep_T: float = 2.0               # degC
    thermocline_depth_m: float = 800.0
    surface_S_mid: float = 35.2       # g/kg
    S_contrast: float = 1.5           # g/kg
    noise_amp: float = 0.3            # in units of per-level field std
    noise_smooth_cells: float = 4.0   # gaussian sigma, horizontal cells

    def __post_init__(self):
        if not (self.surface_T_equator > self.surface_T_pole > self.deep_T):
            raise ConfigError("need surface_T_equator > surface_T_pole > deep_T")
        if self.thermocline_depth_m <= 0:
            raise ConfigError("thermocline_depth_m must be positive")
        if self.noise_amp < 0:
            raise ConfigError("noise_amp must be nonnegative")


def geometry_for(params: SynthParams) -> GridGeometry:
    return build_box_geometry(params.n_levels, params.n_lon, params.n_lat)


def _base_profiles(params: SynthParams, geometry: GridGeometry) -> tuple[np.ndarray, np.ndarray]:
    """Stable analytic (Z, W, H) T/S fields before perturbation."""
    lat = geometry.lat_deg
    lat_extent = float(np.max(np.abs(lat)))
    depth = geometry.depth_m

    surf_t = params.surface_T_pole + (params.surface_T_equator - params.surface_T_pole) * np.cos(
        np.pi * lat / (2.0 * lat_extent)
    )
    # Subtropical salinity maximum near 25 deg, fresher toward the poles.
    shape = 1.2 * np.exp(-((np.abs(lat) - 25.0) ** 2) / (2 * 15.0**2)) - 0.8 * (
        np.abs(lat) / lat_extent
    ) ** 2
    surf_s = params.surface_S_mid + params.S_contrast * shape
    deep_s = params.surface_S_mid - 0.3 * params.S_contrast

    decay = np.exp(-depth / params.thermocline_depth_m)  # (Z,)
    t = params.deep_T + (surf_t[None, :] - params.deep_T) * decay[:, None]   # (Z, H)
    s = deep_s + (surf_s[None, :] - deep_s) * decay[:, None]
    ones = np.ones((1, geometry.n_lon, 1))
    return t[:, None, :] * ones, s[:, None, :] * ones


def _smooth_noise(rng: np.random.Generator, shape, sigma_cells: float) -> np.ndarray:
    """Gaussian-filtered white noise, renormalized to unit global std."""
    white = rng.standard_normal(shape)
    smoothed = gaussian_filter(white, sigma=(1.0, sigma_cells, sigma_cells), mode="nearest")
    std = smoothed.std()
    return smoothed / std if std > 0 else smoothed


def generate_state(params: SynthParams, snapshot_index: int, eos: EosParams = EosParams()) -> OceanState:
    """One deterministic snapshot; output has exactly zero density error."""
    if snapshot_index < 0:
        raise ValidationError("snapshot_index must be nonnegative")
    geometry = geometry_for(params)
    t, s = _base_profiles(params, geometry)

    if params.noise_amp > 0:
        # Per-snapshot stream so parallel and serial generation agree.
        rng = np.random.default_rng([params.seed, snapshot_index])
        scale_t = t.std(axis=(1, 2))
        scale_s = s.std(axis=(1, 2))
        # Keep a small noise floor at depth so no level is exactly constant.
        scale_t = np.maximum(scale_t, 0.05 * scale_t.max())
        scale_s = np.maximum(scale_s, 0.05 * scale_s.max())
        t = t + params.noise_amp * scale_t[:, None, None] * _smooth_noise(
            rng, t.shape, params.noise_smooth_cells
        )
        s = s + params.noise_amp * scale_s[:, None, None] * _smooth_noise(
            rng, s.shape, params.noise_smooth_cells
        )

    # Repair on float32-rounded values so the *stored* state is exactly stable.
    for _ in range(params.n_levels + 1):
        t = t.astype(np.float32).astype(np.float64)
        s = s.astype(np.float32).astype(np.float64)
        state = OceanState(
            temperature=t.astype(np.float32), salinity=s.astype(np.float32), normalized=False
        )
        if not unstable_cell_mask(density(state, eos)).any():
            return state
        t, s, _ = _adjust_field(t, s, geometry.cell_volume, eos)
    raise ValidationError("stability repair did not converge")  # unreachable for sane params


def generate_dataset(
    params: SynthParams, n_states: int, out_dir: str | Path
) -> Path:
    """Write n_states OSTX files, norm stats, and a manifest; returns the manifest path."""
    if n_states < 1:
        raise ValidationError("n_states must be >= 1")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    geometry = geometry_for(params)

    states = []
    entries = []
    for idx in range(n_states):
        state = generate_state(params, idx)
        name = f"state_{idx:04d}.ostx"
        path = out / name
        write_state(state, geometry, path)
        digest = hashlib.sha256(path.read_bytes()).hexdigest()
        entries.append({"path": name, "checksum_sha256": digest})
        states.append(state)

    stats = compute_norm_stats(states)
    stats_name = "norm_stats.json"
    stats.to_json(out / stats_name)

    manifest = {
        "params": dataclasses.asdict(params),
        "files": entries,
        "norm_stats_path": stats_name,
    }
    manifest_path = out / "manifest.json"
    manifest_path.write_text(json.dumps(manifest, indent=1))
    return manifest_path


@dataclass(frozen=True)
class Manifest:
    params: SynthParams
    file_paths: list[Path]
    checksums: list[str]
    norm_stats_path: Path

    @property
    def geometry(self) -> GridGeometry:
        return geometry_for(self.params)

    def load_norm_stats(self) -> NormStats:
        return NormStats.from_json(self.norm_stats_path)

    def load_states(self, verify: bool = True) -> list[OceanState]:
        states = []
        for path, checksum in zip(self.file_paths, self.checksums):
            if verify:
                digest = hashlib.sha256(Path(path).read_bytes()).hexdigest()
                if digest != checksum:
                    raise FormatError(f"{path}: checksum mismatch against manifest")
            state, _ = read_state(path)
            states.append(state)
        return states


def load_manifest(path: str | Path) -> Manifest:
    from .config import dataclass_from_dict

    p = Path(path)
    try:
        payload = json.loads(p.read_text())
        files = payload["files"]
        params = dataclass_from_dict(SynthParams, payload["params"], context="manifest params")
        return Manifest(
            params=params,
            file_paths=[p.parent / f["path"] for f in files],
            checksums=[f["checksum_sha256"] for f in files],
            norm_stats_path=p.parent / payload["norm_stats_path"],
        )
    except (KeyError, TypeError, json.JSONDecodeError) as exc:
        raise FormatError(f"bad manifest {path}: {exc}") from exc
