"""Command-line pipeline: synth -> train -> sample -> eval/integrate/compare.

JSON config files provide defaults; explicit flags win.  Exit codes are
stable per error class: 1 usage, 2 config, 3 data/format, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Optional

import numpy as np

from .config import dataclass_from_dict, load_json
from .constraint import ConstraintConfig
from .denoiser import Denoiser, load_checkpoint
from .diffusion import build_schedule, sample
from .errors import ConfigError, FormatError, NumericError, ValidationError
from .grid import NormStats, OceanState, read_state, write_state
from .integrator import DRIFT_CSV_HEADER, DriftReport, IntegratorConfig, integrate
from .physics import (
    METRICS_CSV_HEADER,
    EosParams,
    boxes_from_json,
    default_boxes,
    evaluate,
)
from .synthdata import Manifest, SynthParams, generate_dataset, load_manifest
from .trainer import train, train_config_from_dict

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit(2); we map usage errors to 1
        raise UsageError(message)


def n_workers() -> int:
    env = os.environ.get("OSTX_THREADS", "").strip()
    if env:
        try:
            return max(1, int(env))
        except ValueError as exc:
            raise ConfigError(f"OSTX_THREADS must be an integer, got '{env}'") from exc
    return os.cpu_count() or 1


def _map_states(fn, items):
    """Order-preserving parallel map over independent per-state work."""
    workers = min(n_workers(), max(1, len(items)))
    if workers == 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def _bool(value: str) -> bool:
    low = value.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got '{value}'")


def _load_config(path: Optional[str]) -> dict:
    return load_json(path) if path else {}


# ---------------------------------------------------------------------------
# sampling configuration (JSON keys use the wire names, e.g. "lambda")

@dataclasses.dataclass
class SamplingSettings:
    n: int = 8
    n_steps: Optional[int] = None  # default: the checkpoint's training value
    seed: int = 0
    constrained: bool = False
    trace: bool = False
    eta: float = 1e-3
    lam: float = 40.0
    k_exp: float = 20.0
    mu: Optional[list[float]] = None

    @classmethod
    def from_json_dict(cls, payload: dict) -> "SamplingSettings":
        mapping = {"S": "n_steps", "lambda": "lam"}
        kwargs = {}
        for key, value in payload.items():
            field = mapping.get(key, key)
            if field not in {f.name for f in dataclasses.fields(cls)}:
                raise ConfigError(f"sampling config: unknown field '{key}'")
            kwargs[field] = value
        return cls(**kwargs)


def _constraint_from_settings(settings: SamplingSettings, n_channels: int) -> ConstraintConfig:
    mu = np.zeros(n_channels) if settings.mu is None else np.asarray(settings.mu, dtype=float)
    if mu.size != n_channels:
        raise ConfigError(f"sampling config: mu has length {mu.size}, model needs {n_channels}")
    return ConstraintConfig(mu=mu, eta=settings.eta, lam=settings.lam, k_exp=settings.k_exp)


def _run_sampler(checkpoint: str, settings: SamplingSettings):
    params, header = load_checkpoint(checkpoint)
    net = Denoiser(params.cfg)
    grid_dims = tuple(header["grid_dims"])
    stats = NormStats.from_json(header["norm_stats_path"])
    n_steps = settings.n_steps or int(header["n_diffusion_steps"])
    if n_steps != int(header["n_diffusion_steps"]):
        print(
            f"warning: sampling with S={n_steps} but the checkpoint was trained "
            f"with S={header['n_diffusion_steps']}",
            file=sys.stderr,
        )
    sched = build_schedule(n_steps)
    constraint = (
        _constraint_from_settings(settings, 2 * grid_dims[0]) if settings.constrained else None
    )
    states, trace = sample(
        net.as_denoise_fn(params),
        sched,
        grid_dims=grid_dims,
        padded_dims=(params.cfg.padded_w, params.cfg.padded_h),
        stats=stats,
        constraint=constraint,
        n=settings.n,
        seed=settings.seed,
        trace=settings.trace,
    )
    return states, trace, header


def _write_trace(path: Path, trace) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["s", "kappa", "constraint_value", "mean_dev_norm"])
        for i in range(len(trace.steps)):
            writer.writerow(
                [int(trace.steps[i]), repr(float(trace.kappa[i])),
                 repr(float(trace.constraint_value[i])), repr(float(trace.mean_dev_norm[i]))]
            )


def _dataset_climatology(manifest: Manifest) -> tuple[np.ndarray, np.ndarray]:
    """Surface zonal means of the training set, averaged over snapshots."""
    states = manifest.load_states()
    clim_t = np.mean([s.temperature[0].mean(axis=0) for s in states], axis=0)
    clim_s = np.mean([s.salinity[0].mean(axis=0) for s in states], axis=0)
    return clim_t, clim_s


def _integrator_config(payload: dict, years: Optional[float], clim) -> IntegratorConfig:
    payload = dict(payload)
    if years is not None:
        payload["years"] = years
    base = dataclass_from_dict(IntegratorConfig, payload, context="integrator config")
    return dataclasses.replace(base, climatology_T=clim[0], climatology_S=clim[1])


# ---------------------------------------------------------------------------
# subcommands

def cmd_synth(args) -> list[Path]:
    payload = _load_config(args.config)
    if args.seed is not None:
        payload["seed"] = args.seed
    params = dataclass_from_dict(SynthParams, payload, context="synth config")
    n = args.n if args.n is not None else 16
    manifest = generate_dataset(params, n, args.out)
    return [manifest]


def cmd_train(args) -> list[Path]:
    payload = _load_config(args.config)
    if args.out is not None:
        payload["out_dir"] = args.out
    if args.seed is not None:
        payload["seed"] = args.seed
    if args.steps is not None:
        payload["total_steps"] = args.steps
    cfg = train_config_from_dict(payload)
    final = train(cfg, resume_from=args.checkpoint)
    return [final, Path(cfg.out_dir) / "loss_log.csv"]


def cmd_sample(args) -> list[Path]:
    settings = SamplingSettings.from_json_dict(_load_config(args.config))
    if args.n is not None:
        settings.n = args.n
    if args.seed is not None:
        settings.seed = args.seed
    if args.steps is not None:
        settings.n_steps = args.steps
    if args.constrained is not None:
        settings.constrained = args.constrained
    if args.trace is not None:
        settings.trace = args.trace
    states, trace, _ = _run_sampler(args.checkpoint, settings)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    artifacts = []
    for i, state in enumerate(states):
        path = out / f"sample_{i:03d}.ostx"
        write_state(_to_f32(state), None, path)
        artifacts.append(path)
    if trace is not None:
        trace_path = out / "trace.csv"
        _write_trace(trace_path, trace)
        artifacts.append(trace_path)
    return artifacts


def _to_f32(state: OceanState) -> OceanState:
    return OceanState(
        temperature=state.temperature.astype(np.float32),
        salinity=state.salinity.astype(np.float32),
        normalized=state.normalized,
    )


def _eval_states(paths, manifest: Manifest, boxes, eos: EosParams):
    geometry = manifest.geometry

    def one(path):
        state, dims = read_state(path)
        if dims != geometry.dims:
            raise ValidationError(f"{path}: dims {dims} do not match dataset grid {geometry.dims}")
        return evaluate(state, geometry, eos, boxes, state_path=str(path))

    return _map_states(one, list(paths))


def cmd_eval(args) -> list[Path]:
    manifest = load_manifest(args.manifest)
    boxes = boxes_from_json(args.boxes) if args.boxes else default_boxes(manifest.geometry)
    reports = _eval_states(args.states, manifest, boxes, EosParams())
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "metrics.csv"
    with open(path, "w", newline="") as fh:
        fh.write(METRICS_CSV_HEADER + "\n")
        for rep in reports:
            fh.write(rep.to_csv_row() + "\n")
    return [path]


def _integrate_states(paths, manifest: Manifest, cfg: IntegratorConfig, eos: EosParams):
    geometry = manifest.geometry

    def one(path):
        state, dims = read_state(path)
        if dims != geometry.dims:
            raise ValidationError(f"{path}: dims {dims} do not match dataset grid {geometry.dims}")
        return integrate(state, geometry, cfg, eos)

    return _map_states(one, list(paths))


def _write_drift_csv(path: Path, paths, years: float, reports: list[DriftReport]) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(DRIFT_CSV_HEADER + "\n")
        writer = csv.writer(fh)
        for state_path, rep in zip(paths, reports):
            writer.writerow(
                [state_path, repr(years), repr(rep.rms_T_drift), repr(rep.rms_S_drift),
                 rep.convective_events, repr(rep.density_error_final)]
            )


def cmd_integrate(args) -> list[Path]:
    manifest = load_manifest(args.manifest)
    clim = _dataset_climatology(manifest)
    cfg = _integrator_config(_load_config(args.config), args.years, clim)
    reports = _integrate_states(args.states, manifest, cfg, EosParams())
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "drift.csv"
    _write_drift_csv(path, args.states, cfg.years, reports)
    return [path]


SUMMARY_COLUMNS = [
    "bw_mean_S", "bw_mean_T", "dw_mean_S", "dw_mean_T",
    "density_error_pct", "surf_var_T", "surf_var_S",
]


def _summarize(source, metric_reports, drift_reports):
    row = {"source": source, "n": len(metric_reports)}
    for col in SUMMARY_COLUMNS:
        vals = np.array([getattr(r, col) for r in metric_reports], dtype=float)
        row[f"{col}_mean"] = float(vals.mean())
        row[f"{col}_std"] = float(vals.std())
    if drift_reports:
        for col in ("rms_T_drift", "rms_S_drift", "convective_events"):
            vals = np.array([getattr(r, col) for r in drift_reports], dtype=float)
            row[f"{col}_mean"] = float(vals.mean())
            row[f"{col}_std"] = float(vals.std())
    return row


def cmd_compare(args) -> list[Path]:
    manifest = load_manifest(args.manifest)
    geometry = manifest.geometry
    eos = EosParams()
    boxes = boxes_from_json(args.boxes) if args.boxes else default_boxes(geometry)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    settings = SamplingSettings.from_json_dict(_load_config(args.config))
    if args.n is not None:
        settings.n = args.n
    if args.seed is not None:
        settings.seed = args.seed
    if args.steps is not None:
        settings.n_steps = args.steps
    settings.trace = False

    ensembles: dict[str, list[Path]] = {}
    for label, constrained in (("constrained", True), ("unconstrained", False)):
        settings.constrained = constrained
        states, _, _ = _run_sampler(args.checkpoint, settings)
        paths = []
        for i, state in enumerate(states):
            path = out / f"sample_{label}_{i:03d}.ostx"
            write_state(_to_f32(state), None, path)
            paths.append(path)
        ensembles[label] = paths
    data_paths = manifest.file_paths[: settings.n]

    clim = _dataset_climatology(manifest)
    integ_cfg = _integrator_config(_load_config(args.integrator_config), args.years, clim)

    artifacts = []
    summary_rows = []
    for source, paths in (
        ("data", data_paths),
        ("constrained", ensembles["constrained"]),
        ("unconstrained", ensembles["unconstrained"]),
    ):
        metrics = _eval_states(paths, manifest, boxes, eos)
        metrics_path = out / f"metrics_{source}.csv"
        with open(metrics_path, "w", newline="") as fh:
            fh.write(METRICS_CSV_HEADER + "\n")
            for rep in metrics:
                fh.write(rep.to_csv_row() + "\n")
        drifts = _integrate_states(paths, manifest, integ_cfg, eos)
        drift_path = out / f"drift_{source}.csv"
        _write_drift_csv(drift_path, paths, integ_cfg.years, drifts)
        artifacts += [metrics_path, drift_path]
        summary_rows.append(_summarize(source, metrics, drifts))

    summary_path = out / "summary.csv"
    fieldnames = list(summary_rows[0])
    with open(summary_path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fieldnames)
        writer.writeheader()
        for row in summary_rows:
            writer.writerow(row)
    artifacts.append(summary_path)
    return artifacts


# ---------------------------------------------------------------------------
# parser and entry point

def build_parser() -> _Parser:
    parser = _Parser(prog="oceandiff", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, help_text):
        p = sub.add_parser(name, help=help_text)
        p.set_defaults(fn=fn)
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--seed", type=int, help="RNG seed override")
        return p

    p = add("synth", cmd_synth, "generate a synthetic stable dataset + manifest")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--n", type=int, help="number of states (default 16)")

    p = add("train", cmd_train, "train the denoiser on a dataset manifest")
    p.add_argument("--out", help="override the config's out_dir")
    p.add_argument("--steps", type=int, help="override total training steps")
    p.add_argument("--checkpoint", help="resume from this checkpoint")

    p = add("sample", cmd_sample, "draw new states from a trained checkpoint")
    p.add_argument("--out", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--n", type=int)
    p.add_argument("--steps", type=int, help="override the diffusion chain length S")
    p.add_argument("--constrained", type=_bool)
    p.add_argument("--trace", type=_bool)

    p = add("eval", cmd_eval, "physical-consistency metrics CSV for states")
    p.add_argument("--out", required=True)
    p.add_argument("--manifest", required=True, help="dataset manifest (grid geometry source)")
    p.add_argument("--boxes", help="water-mass boxes JSON")
    p.add_argument("states", nargs="+", help="OSTX state files")

    p = add("integrate", cmd_integrate, "column-physics drift report CSV for states")
    p.add_argument("--out", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--years", type=float)
    p.add_argument("states", nargs="+")

    p = add("compare", cmd_compare, "constrained vs unconstrained ensemble summary")
    p.add_argument("--out", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--n", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--years", type=float)
    p.add_argument("--boxes", help="water-mass boxes JSON")
    p.add_argument("--integrator-config", help="integrator JSON config")

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        artifacts = args.fn(args)
        for path in artifacts:
            print(path)
        return EXIT_OK
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        print(f"data error: {exc.filename or exc} not found", file=sys.stderr)
        return EXIT_DATA
    except (FormatError, ValidationError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
