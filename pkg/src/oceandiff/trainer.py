"""End-to-end training loop: synthetic dataset -> normalized tensors ->
denoising loss -> AdamW, with periodic checkpoints and a CSV loss log.

Every random draw is keyed by (seed, purpose, step), so a run can be split
and resumed at any checkpoint and still produce bit-identical parameters.
"""

from __future__ import annotations

import csv
import dataclasses
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .denoiser import (
    Denoiser,
    NetConfig,
    adamw_update,
    cosine_lr,
    init_params,
    load_checkpoint,
    net_config_from_dict,
    net_config_to_dict,
    pad_channels,
    save_checkpoint,
)
from .diffusion import build_schedule, training_loss
from .errors import ConfigError, NumericError, ValidationError
from .grid import NormStats, OceanState, as_channels, normalize_state
from .synthdata import load_manifest

LOSS_LOG_NAME = "loss_log.csv"
FINAL_CHECKPOINT_NAME = "checkpoint.ckpt"


@dataclass(frozen=True)
class TrainConfig:
    manifest_path: str
    out_dir: str
    net: NetConfig
    n_diffusion_steps: int = 250
    batch_size: int = 8
    total_steps: int = 2000
    checkpoint_every: int = 500
    seed: int = 0
    base_lr: float = 1e-4
    weight_decay: float = 1e-2

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.total_steps < 1:
            raise ConfigError("total_steps must be >= 1")
        if self.checkpoint_every < 1:
            raise ConfigError("checkpoint_every must be >= 1")
        if self.n_diffusion_steps < 2:
            raise ConfigError("n_diffusion_steps must be >= 2")


def train_config_to_dict(cfg: TrainConfig) -> dict:
    d = dataclasses.asdict(cfg)
    d["net"] = net_config_to_dict(cfg.net)
    return d


def train_config_from_dict(payload: dict) -> TrainConfig:
    payload = dict(payload)
    if "net" not in payload:
        raise ConfigError("train config: missing field 'net'")
    net = net_config_from_dict(payload.pop("net"))
    names = {f.name for f in dataclasses.fields(TrainConfig)} - {"net"}
    unknown = set(payload) - names
    if unknown:
        raise ConfigError(f"train config: unknown field '{sorted(unknown)[0]}'")
    for required in ("manifest_path", "out_dir"):
        if required not in payload:
            raise ConfigError(f"train config: missing field '{required}'")
    try:
        return TrainConfig(net=net, **payload)
    except TypeError as exc:
        raise ConfigError(f"train config: {exc}") from exc


def batch_indices(seed: int, step: int, n_states: int, batch_size: int) -> np.ndarray:
    """Shuffled-epoch batch for a given step, recomputable at any point."""
    per_epoch = math.ceil(n_states / batch_size)
    epoch, pos = divmod(step, per_epoch)
    perm = np.random.default_rng([seed, 1, epoch]).permutation(n_states)
    return perm[pos * batch_size : (pos + 1) * batch_size]


def prepare_training_tensors(
    states: list[OceanState], stats: NormStats, net_cfg: NetConfig
) -> np.ndarray:
    """Normalize, stack channels, and pad to network resolution: (N, 2Z, pW, pH)."""
    tensors = []
    for st in states:
        norm = normalize_state(st, stats)
        if not norm.normalized:  # the flag is the training-data guard
            raise ValidationError("training tensor built from unnormalized state")
        x = as_channels(norm, dtype=np.float32)
        tensors.append(pad_channels(x, net_cfg.padded_w, net_cfg.padded_h))
    return np.stack(tensors)


def _check_cfg_against_data(cfg: TrainConfig, grid_dims: tuple[int, int, int]) -> None:
    z, w, h = grid_dims
    if cfg.net.in_channels != 2 * z:
        raise ConfigError(f"net.in_channels = {cfg.net.in_channels} but dataset needs {2 * z}")
    if cfg.net.padded_w < w or cfg.net.padded_h < h:
        raise ConfigError(
            f"net padded dims ({cfg.net.padded_w}, {cfg.net.padded_h}) smaller than grid ({w}, {h})"
        )


@dataclass
class _LossHistory:
    first: list[float]
    last: list[float]
    count: int

    @classmethod
    def fresh(cls):
        return cls(first=[], last=[], count=0)

    @classmethod
    def from_header(cls, h: dict):
        hist = h.get("loss_history", {})
        return cls(
            first=list(hist.get("first", [])),
            last=list(hist.get("last", [])),
            count=int(hist.get("count", 0)),
        )

    def push(self, loss: float):
        self.count += 1
        if len(self.first) < 10:
            self.first.append(loss)
        self.last.append(loss)
        if len(self.last) > 10:
            self.last.pop(0)

    def as_dict(self) -> dict:
        summary = {
            "first": self.first,
            "last": self.last,
            "count": self.count,
        }
        if self.first:
            summary["first10_mean"] = float(np.mean(self.first))
        if self.last:
            summary["last10_mean"] = float(np.mean(self.last))
        return summary


def train(
    cfg: TrainConfig,
    resume_from: Optional[str | Path] = None,
    stop_after_step: Optional[int] = None,
) -> Path:
    """Run (or continue) training; returns the final checkpoint path.

    `stop_after_step` ends the session early (e.g. to fit a time budget);
    the run can be continued later with :func:`resume` and will match the
    uninterrupted run bit for bit.
    """
    manifest = load_manifest(cfg.manifest_path)
    states = manifest.load_states()
    stats = manifest.load_norm_stats()
    grid_dims = states[0].dims
    _check_cfg_against_data(cfg, grid_dims)
    data = prepare_training_tensors(states, stats, cfg.net)

    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    net = Denoiser(cfg.net)
    sched = build_schedule(cfg.n_diffusion_steps)

    if resume_from is not None:
        params, header = load_checkpoint(resume_from)
        for key, want in (
            ("batch_size", cfg.batch_size),
            ("total_steps", cfg.total_steps),
            ("seed", cfg.seed),
            ("n_diffusion_steps", cfg.n_diffusion_steps),
        ):
            if header.get(key) != want:
                raise ConfigError(f"resume mismatch on '{key}': checkpoint has {header.get(key)}, config has {want}")
        if net_config_to_dict(params.cfg) != net_config_to_dict(cfg.net):
            raise ConfigError("resume mismatch: checkpoint NetConfig differs from config")
        history = _LossHistory.from_header(header)
        start_step = params.opt_step
        log_mode = "a"
    else:
        params = init_params(cfg.net, cfg.seed)
        history = _LossHistory.fresh()
        start_step = 0
        log_mode = "w"

    extra_base = {
        "batch_size": cfg.batch_size,
        "total_steps": cfg.total_steps,
        "seed": cfg.seed,
        "n_diffusion_steps": cfg.n_diffusion_steps,
        "base_lr": cfg.base_lr,
        "weight_decay": cfg.weight_decay,
        "grid_dims": list(grid_dims),
        "norm_stats_path": str(Path(manifest.norm_stats_path).resolve()),
        "manifest_path": str(Path(cfg.manifest_path).resolve()),
    }

    def write_ckpt(path: Path):
        save_checkpoint(path, params, {**extra_base, "loss_history": history.as_dict()})

    end_step = cfg.total_steps if stop_after_step is None else min(stop_after_step, cfg.total_steps)
    log_path = out_dir / LOSS_LOG_NAME
    with open(log_path, log_mode, newline="") as log_file:
        log = csv.writer(log_file)
        if log_mode == "w":
            log.writerow(["step", "loss", "lr"])
        for step in range(start_step, end_step):
            x0 = data[batch_indices(cfg.seed, step, len(states), cfg.batch_size)]
            rng = np.random.default_rng([cfg.seed, 2, step])
            lr = cosine_lr(step, cfg.total_steps, cfg.base_lr)
            try:
                loss, grads = training_loss(net, params, x0, sched, rng)
            except NumericError as exc:
                raise NumericError(f"training diverged at step {step + 1}: {exc}") from exc
            adamw_update(params, grads, cfg.total_steps, cfg.base_lr, cfg.weight_decay)
            history.push(loss)
            log.writerow([step + 1, repr(loss), repr(float(lr))])
            if (step + 1) % cfg.checkpoint_every == 0 and (step + 1) < end_step:
                write_ckpt(out_dir / f"ckpt_{step + 1:06d}.ckpt")

    final_path = out_dir / FINAL_CHECKPOINT_NAME
    write_ckpt(final_path)
    return final_path


def resume(checkpoint: str | Path, cfg: TrainConfig) -> Path:
    """Continue a run from a checkpoint; equivalent to the uninterrupted run."""
    return train(cfg, resume_from=checkpoint)
