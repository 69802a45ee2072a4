"""Equation of state and a-priori consistency metrics for ocean states.

Density uses a linear EOS (monotone and differentiable, adequate for
stability ordering); the instability metric is the volume fraction of cells
whose underlying neighbor is lighter.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ValidationError
from .grid import GridGeometry, OceanState


@dataclass(frozen=True)
class EosParams:
    """Linear equation of state rho = rho0*(1 - alpha_T*(T-T_ref) + beta_S*(S-S_ref))."""

    rho0: float = 1026.0       # kg/m^3
    alpha_T: float = 2e-4      # 1/degC
    beta_S: float = 7.6e-4     # (g/kg)^-1
    T_ref: float = 10.0        # degC
    S_ref: float = 35.0        # g/kg

    def __post_init__(self):
        if self.rho0 <= 0 or self.alpha_T <= 0 or self.beta_S <= 0:
            raise ValidationError("rho0, alpha_T and beta_S must be positive")


@dataclass(frozen=True)
class WaterMassBox:
    """Inclusive index ranges selecting a named sub-volume of the grid."""

    name: str
    k_range: tuple[int, int]
    i_range: tuple[int, int]
    j_range: tuple[int, int]

    def __post_init__(self):
        for lo, hi in (self.k_range, self.i_range, self.j_range):
            if lo > hi or lo < 0:
                raise ValidationError(f"box {self.name}: bad range [{lo},{hi}]")

    def check_within(self, dims: tuple[int, int, int]) -> None:
        z, w, h = dims
        if self.k_range[1] >= z or self.i_range[1] >= w or self.j_range[1] >= h:
            raise ValidationError(f"box {self.name} exceeds grid dims {dims}")

    def slices(self) -> tuple[slice, slice, slice]:
        return (
            slice(self.k_range[0], self.k_range[1] + 1),
            slice(self.i_range[0], self.i_range[1] + 1),
            slice(self.j_range[0], self.j_range[1] + 1),
        )


def default_boxes(geometry: GridGeometry) -> tuple[WaterMassBox, WaterMassBox]:
    """Bottom-water (deepest quarter of levels, southern 20% of latitudes)
    and deep-water (40-75% depth fraction, northern quarter) boxes."""
    z, w, h = geometry.dims
    bw_levels = max(1, int(np.ceil(0.25 * z)))
    bw = WaterMassBox(
        name="bottom_water",
        k_range=(z - bw_levels, z - 1),
        i_range=(0, w - 1),
        j_range=(0, max(1, int(np.ceil(0.2 * h))) - 1),
    )
    depth = geometry.depth_m
    dmax = depth[-1]
    in_band = np.nonzero((depth >= 0.40 * dmax) & (depth <= 0.75 * dmax))[0]
    if in_band.size == 0:
        in_band = np.array([z // 2])
    dw = WaterMassBox(
        name="deep_water",
        k_range=(int(in_band[0]), int(in_band[-1])),
        i_range=(0, w - 1),
        j_range=(h - max(1, int(np.ceil(0.25 * h))), h - 1),
    )
    return bw, dw


def boxes_from_json(path: str | Path) -> tuple[WaterMassBox, WaterMassBox]:
    import json

    payload = json.loads(Path(path).read_text())

    def _box(name, d):
        return WaterMassBox(
            name=name,
            k_range=tuple(d["k_range"]),
            i_range=tuple(d["i_range"]),
            j_range=tuple(d["j_range"]),
        )

    return _box("bottom_water", payload["bottom_water"]), _box("deep_water", payload["deep_water"])


def density(state: OceanState, eos: EosParams = EosParams()) -> np.ndarray:
    """Potential density (Z, W, H) from the linear EOS; requires physical units."""
    if state.normalized:
        raise ValidationError("density needs an unnormalized state")
    t = state.temperature.astype(np.float64)
    s = state.salinity.astype(np.float64)
    return eos.rho0 * (1.0 - eos.alpha_T * (t - eos.T_ref) + eos.beta_S * (s - eos.S_ref))


def unstable_cell_mask(rho: np.ndarray) -> np.ndarray:
    """Boolean (Z, W, H) mask of cells whose cell below is strictly lighter.

    The deepest level has no neighbor below and is never flagged; exact ties
    count as stable.
    """
    mask = np.zeros(rho.shape, dtype=bool)
    mask[:-1] = (rho[1:] - rho[:-1]) < 0
    return mask


def density_error(rho: np.ndarray, geometry: GridGeometry) -> float:
    """Percentage of total volume sitting above a strictly lighter cell."""
    if rho.shape != geometry.cell_volume.shape:
        raise ValidationError(
            f"density field {rho.shape} does not match geometry {geometry.cell_volume.shape}"
        )
    v = geometry.cell_volume
    flagged = unstable_cell_mask(rho)
    return float(100.0 * (v[flagged].sum() / v.sum()))


def water_mass_stats(
    state: OceanState, box: WaterMassBox, geometry: GridGeometry
) -> tuple[float, float]:
    """Volume-weighted (mean_T, mean_S) over the box."""
    if state.normalized:
        raise ValidationError("water-mass stats need an unnormalized state")
    box.check_within(state.dims)
    sl = box.slices()
    v = geometry.cell_volume[sl]
    vsum = v.sum()
    if vsum <= 0:
        raise ValidationError(f"box {box.name} selects no volume")
    mean_t = float((v * state.temperature[sl]).sum() / vsum)
    mean_s = float((v * state.salinity[sl]).sum() / vsum)
    return mean_t, mean_s


def zonal_mean_density(rho: np.ndarray) -> np.ndarray:
    """Average over longitude: (Z, W, H) -> (Z, H) meridional section."""
    if rho.ndim != 3:
        raise ValidationError(f"density field must be 3D, got {rho.shape}")
    return rho.mean(axis=1)


def surface_variance(states: Sequence[OceanState]) -> list[tuple[float, float]]:
    """Per-state population variance of the k=0 level, (var_T, var_S)."""
    if len(states) == 0:
        raise ValidationError("surface_variance needs at least one state")
    out = []
    for st in states:
        if st.normalized:
            raise ValidationError("surface variance needs unnormalized states")
        out.append(
            (float(st.temperature[0].var()), float(st.salinity[0].var()))
        )
    return out


METRICS_CSV_HEADER = (
    "state_path,density_error_pct,bw_mean_T,bw_mean_S,dw_mean_T,dw_mean_S,surf_var_T,surf_var_S"
)


@dataclass(frozen=True)
class MetricsReport:
    """One state's a-priori metrics; serializes to a metrics CSV row."""

    state_path: str
    density_error_pct: float
    bw_mean_T: float
    bw_mean_S: float
    dw_mean_T: float
    dw_mean_S: float
    surf_var_T: float
    surf_var_S: float

    def __post_init__(self):
        if not (0.0 <= self.density_error_pct <= 100.0):
            raise ValidationError(f"density error {self.density_error_pct} outside [0, 100]")
        if self.surf_var_T < 0 or self.surf_var_S < 0:
            raise ValidationError("variances must be nonnegative")

    def to_csv_row(self) -> str:
        buf = io.StringIO()
        csv.writer(buf, lineterminator="").writerow(
            [
                self.state_path,
                repr(self.density_error_pct),
                repr(self.bw_mean_T),
                repr(self.bw_mean_S),
                repr(self.dw_mean_T),
                repr(self.dw_mean_S),
                repr(self.surf_var_T),
                repr(self.surf_var_S),
            ]
        )
        return buf.getvalue()

    @classmethod
    def from_csv_row(cls, row: str) -> "MetricsReport":
        fields = next(csv.reader(io.StringIO(row)))
        return cls(
            state_path=fields[0],
            density_error_pct=float(fields[1]),
            bw_mean_T=float(fields[2]),
            bw_mean_S=float(fields[3]),
            dw_mean_T=float(fields[4]),
            dw_mean_S=float(fields[5]),
            surf_var_T=float(fields[6]),
            surf_var_S=float(fields[7]),
        )


def evaluate(
    state: OceanState,
    geometry: GridGeometry,
    eos: EosParams = EosParams(),
    boxes: tuple[WaterMassBox, WaterMassBox] | None = None,
    state_path: str = "",
) -> MetricsReport:
    """Assemble all a-priori metrics for one state."""
    bw, dw = boxes if boxes is not None else default_boxes(geometry)
    rho = density(state, eos)
    bw_t, bw_s = water_mass_stats(state, bw, geometry)
    dw_t, dw_s = water_mass_stats(state, dw, geometry)
    (var_t, var_s), = surface_variance([state])
    return MetricsReport(
        state_path=state_path,
        density_error_pct=density_error(rho, geometry),
        bw_mean_T=bw_t,
        bw_mean_S=bw_s,
        dw_mean_T=dw_t,
        dw_mean_S=dw_s,
        surf_var_T=var_t,
        surf_var_S=var_s,
    )
