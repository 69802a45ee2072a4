import csv
import json

import numpy as np
import pytest

from oceandiff.denoiser import NetConfig, load_checkpoint
from oceandiff.errors import ConfigError, FormatError
from oceandiff.synthdata import SynthParams, generate_dataset
from oceandiff.trainer import (
    TrainConfig,
    batch_indices,
    resume,
    train,
    train_config_from_dict,
    train_config_to_dict,
)

TINY_NET = NetConfig(
    in_channels=6,
    base_widths=(4, 4),
    resnet_blocks_per_stage=1,
    middle_attention=False,
    time_embed_dim=4,
    padded_w=8,
    padded_h=8,
    norm_groups=2,
)


@pytest.fixture(scope="module")
def tiny_dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("data")
    params = SynthParams(n_levels=3, n_lon=8, n_lat=8, noise_smooth_cells=1.5)
    return generate_dataset(params, 6, out)


def tiny_cfg(manifest, out_dir, total_steps=8, seed=5, **overrides):
    kwargs = dict(
        manifest_path=str(manifest),
        out_dir=str(out_dir),
        net=TINY_NET,
        n_diffusion_steps=12,
        batch_size=4,
        total_steps=total_steps,
        checkpoint_every=4,
        seed=seed,
    )
    kwargs.update(overrides)
    return TrainConfig(**kwargs)


def blob_hash(path):
    _, header = load_checkpoint(path)
    return header["blob_sha256"]


def test_training_runs_are_bitwise_reproducible(tiny_dataset, tmp_path):
    a = train(tiny_cfg(tiny_dataset, tmp_path / "a"))
    b = train(tiny_cfg(tiny_dataset, tmp_path / "b"))
    assert blob_hash(a) == blob_hash(b)
    c = train(tiny_cfg(tiny_dataset, tmp_path / "c", seed=6))
    assert blob_hash(c) != blob_hash(a)


def test_loss_log_format(tiny_dataset, tmp_path):
    train(tiny_cfg(tiny_dataset, tmp_path / "run"))
    rows = list(csv.reader(open(tmp_path / "run" / "loss_log.csv")))
    assert rows[0] == ["step", "loss", "lr"]
    steps = [int(r[0]) for r in rows[1:]]
    losses = [float(r[1]) for r in rows[1:]]
    assert steps == sorted(steps) and len(steps) == 8
    assert all(l >= 0 for l in losses)


def test_resume_split_equivalence(tiny_dataset, tmp_path):
    # the 8-step run writes a periodic checkpoint at step 4; resuming from it
    # into a fresh directory must reproduce the uninterrupted result exactly
    full = train(tiny_cfg(tiny_dataset, tmp_path / "full8"))
    mid_ckpt = tmp_path / "full8" / "ckpt_000004.ckpt"
    assert mid_ckpt.exists()
    resumed = resume(mid_ckpt, tiny_cfg(tiny_dataset, tmp_path / "resumed"))
    assert blob_hash(resumed) == blob_hash(full)


def test_stop_after_step_then_resume(tiny_dataset, tmp_path):
    full = train(tiny_cfg(tiny_dataset, tmp_path / "full"))
    part = train(tiny_cfg(tiny_dataset, tmp_path / "part"), stop_after_step=5)
    parked, _ = load_checkpoint(part)
    assert parked.opt_step == 5
    resumed = resume(part, tiny_cfg(tiny_dataset, tmp_path / "res"))
    assert blob_hash(resumed) == blob_hash(full)


def test_resume_rejects_config_mismatch(tiny_dataset, tmp_path):
    train(tiny_cfg(tiny_dataset, tmp_path / "run"))
    ckpt = tmp_path / "run" / "ckpt_000004.ckpt"
    with pytest.raises(ConfigError):
        resume(ckpt, tiny_cfg(tiny_dataset, tmp_path / "r2", batch_size=2))
    with pytest.raises(ConfigError):
        resume(ckpt, tiny_cfg(tiny_dataset, tmp_path / "r3", seed=99))


def test_resume_rejects_corrupted_blob(tiny_dataset, tmp_path):
    train(tiny_cfg(tiny_dataset, tmp_path / "run"))
    ckpt = tmp_path / "run" / "ckpt_000004.ckpt"
    raw = bytearray(ckpt.read_bytes())
    raw[-3] ^= 0xFF
    ckpt.write_bytes(bytes(raw))
    with pytest.raises(FormatError):
        resume(ckpt, tiny_cfg(tiny_dataset, tmp_path / "r4"))


def test_net_mismatch_with_dataset(tiny_dataset, tmp_path):
    bad_net = NetConfig(
        in_channels=10,  # dataset has 2Z = 6 channels
        base_widths=(4,),
        resnet_blocks_per_stage=1,
        time_embed_dim=4,
        padded_w=8,
        padded_h=8,
        norm_groups=2,
    )
    with pytest.raises(ConfigError):
        train(tiny_cfg(tiny_dataset, tmp_path / "bad", net=bad_net))


def test_batch_indices_cover_epoch():
    seen = np.concatenate([batch_indices(0, step, 6, 4) for step in (0, 1)])
    assert sorted(seen.tolist()) == list(range(6))
    again = batch_indices(0, 0, 6, 4)
    assert np.array_equal(again, batch_indices(0, 0, 6, 4))


def test_config_json_round_trip(tiny_dataset, tmp_path):
    cfg = tiny_cfg(tiny_dataset, tmp_path / "x")
    payload = json.loads(json.dumps(train_config_to_dict(cfg)))
    back = train_config_from_dict(payload)
    assert back == cfg
    with pytest.raises(ConfigError):
        train_config_from_dict({**payload, "bogus_field": 1})
    missing = dict(payload)
    del missing["manifest_path"]
    with pytest.raises(ConfigError):
        train_config_from_dict(missing)


def test_checkpoint_header_records_run_metadata(tiny_dataset, tmp_path):
    final = train(tiny_cfg(tiny_dataset, tmp_path / "meta"))
    params, header = load_checkpoint(final)
    assert header["grid_dims"] == [3, 8, 8]
    assert header["n_diffusion_steps"] == 12
    assert params.opt_step == 8
    assert "loss_history" in header and header["loss_history"]["count"] == 8
