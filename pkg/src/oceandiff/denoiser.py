"""Convolutional U-Net noise predictor with explicit parameters and
hand-written gradients, plus its AdamW optimizer and checkpoint format.

Layout: stages of residual blocks with stride-2 downsampling between stages,
a middle block (optional single-head attention), and a mirrored up path that
concatenates skip tensors and upsamples bilinearly.  The diffusion step
enters every residual block through a projected sinusoidal embedding.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from . import nn
from .errors import ConfigError, FormatError, ValidationError

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
BASE_LR = 1e-4
WEIGHT_DECAY = 1e-2

CHECKPOINT_FORMAT = "ODCKPT"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class NetConfig:
    in_channels: int
    base_widths: tuple[int, ...] = (32, 32, 64, 64)
    resnet_blocks_per_stage: int = 2
    middle_attention: bool = False
    time_embed_dim: int = 64
    padded_w: int = 48
    padded_h: int = 32
    norm_groups: int = 8
    # "scale_shift": the step embedding rescales and shifts the normalized
    # features (fast step conditioning at short training budgets);
    # "shift": plain additive conditioning.
    temb_mode: str = "scale_shift"

    def __post_init__(self):
        object.__setattr__(self, "base_widths", tuple(int(w) for w in self.base_widths))
        if self.in_channels < 1:
            raise ConfigError("in_channels must be >= 1")
        if len(self.base_widths) < 1 or min(self.base_widths) < 1:
            raise ConfigError("base_widths must be a nonempty list of positive counts")
        if self.resnet_blocks_per_stage < 1:
            raise ConfigError("resnet_blocks_per_stage must be >= 1")
        if self.time_embed_dim < 2 or self.time_embed_dim % 2:
            raise ConfigError("time_embed_dim must be even and >= 2")
        if self.temb_mode not in ("shift", "scale_shift"):
            raise ConfigError(f"unknown temb_mode '{self.temb_mode}'")
        div = 2 ** len(self.base_widths)
        if self.padded_w % div or self.padded_h % div:
            raise ConfigError(
                f"padded dims ({self.padded_w}, {self.padded_h}) must be divisible by {div}"
            )

    @property
    def n_stages(self) -> int:
        return len(self.base_widths)


def net_config_to_dict(cfg: NetConfig) -> dict:
    d = dataclasses.asdict(cfg)
    d["base_widths"] = list(cfg.base_widths)
    return d


def net_config_from_dict(d: dict) -> NetConfig:
    from .config import dataclass_from_dict

    d = dict(d)
    if "base_widths" in d:
        d["base_widths"] = tuple(d["base_widths"])
    return dataclass_from_dict(NetConfig, d, context="net config")


class TensorBlock(dict):
    """Named views into one flat buffer; declaration order fixes the layout."""

    def __init__(self, specs, dtype, buffer: Optional[np.ndarray] = None):
        super().__init__()
        total = sum(int(np.prod(shape)) for _, shape, _ in specs)
        self.flat = np.zeros(total, dtype=dtype) if buffer is None else buffer
        if self.flat.shape != (total,):
            raise ValidationError(f"buffer has {self.flat.size} scalars, layout needs {total}")
        offset = 0
        for name, shape, _ in specs:
            size = int(np.prod(shape))
            self[name] = self.flat[offset : offset + size].reshape(shape)
            offset += size


@dataclass
class DenoiserParams:
    """Trainable tensors plus AdamW moments, keyed by declaration order."""

    cfg: NetConfig
    tensors: TensorBlock
    opt_m: TensorBlock
    opt_v: TensorBlock
    opt_step: int = 0

    @property
    def dtype(self):
        return self.tensors.flat.dtype

    def n_params(self) -> int:
        return int(self.tensors.flat.size)


@dataclass(frozen=True)
class _ResBlockDef:
    name: str
    cin: int
    cout: int


def _resblock_specs(
    block: _ResBlockDef, temb_dim: int, temb_mode: str
) -> list[tuple[str, tuple, str]]:
    n, cin, cout = block.name, block.cin, block.cout
    temb_out = 2 * cout if temb_mode == "scale_shift" else cout
    specs = [
        (f"{n}.norm1.scale", (cin,), "ones"),
        (f"{n}.norm1.offset", (cin,), "zeros"),
        (f"{n}.conv1.kernel", (3, 3, cin, cout), "conv"),
        (f"{n}.conv1.bias", (cout,), "zeros"),
        (f"{n}.temb.weight", (temb_dim, temb_out), "linear"),
        (f"{n}.temb.bias", (temb_out,), "zeros"),
        (f"{n}.norm2.scale", (cout,), "ones"),
        (f"{n}.norm2.offset", (cout,), "zeros"),
        (f"{n}.conv2.kernel", (3, 3, cout, cout), "conv"),
        (f"{n}.conv2.bias", (cout,), "zeros"),
    ]
    if cin != cout:
        specs += [
            (f"{n}.skip.kernel", (1, 1, cin, cout), "conv"),
            (f"{n}.skip.bias", (cout,), "zeros"),
        ]
    return specs


class Denoiser:
    """Static network graph for a given NetConfig; parameters are passed in."""

    def __init__(self, cfg: NetConfig):
        self.cfg = cfg
        widths = cfg.base_widths
        n_rb = cfg.resnet_blocks_per_stage

        self.down_blocks: list[list[_ResBlockDef]] = []
        prev = widths[0]
        for i, w in enumerate(widths):
            blocks = []
            for j in range(n_rb):
                cin = prev if j == 0 else w
                blocks.append(_ResBlockDef(f"down{i}.rb{j}", cin, w))
            self.down_blocks.append(blocks)
            prev = w
        w_mid = widths[-1]
        self.mid_blocks = [
            _ResBlockDef("mid.rb0", w_mid, w_mid),
            _ResBlockDef("mid.rb1", w_mid, w_mid),
        ]
        self.up_blocks: list[list[_ResBlockDef]] = []
        below = w_mid
        for i in reversed(range(len(widths))):
            blocks = []
            for j in range(n_rb):
                cin = below + widths[i] if j == 0 else widths[i]
                blocks.append(_ResBlockDef(f"up{i}.rb{j}", cin, widths[i]))
            self.up_blocks.append(blocks)  # stored deepest-first
            below = widths[i]

        # Every normalized channel count must split into groups.
        for blocks in [*self.down_blocks, self.mid_blocks, *self.up_blocks]:
            for blk in blocks:
                nn.norm_groups_for(blk.cin, cfg.norm_groups)
                nn.norm_groups_for(blk.cout, cfg.norm_groups)

        self._specs = self._build_specs()
        self._spec_index = {name: (shape, kind) for name, shape, kind in self._specs}

    def _build_specs(self) -> list[tuple[str, tuple, str]]:
        cfg = self.cfg
        t = cfg.time_embed_dim
        widths = cfg.base_widths
        specs: list[tuple[str, tuple, str]] = [
            ("time.lin1.weight", (t, t), "linear"),
            ("time.lin1.bias", (t,), "zeros"),
            ("time.lin2.weight", (t, t), "linear"),
            ("time.lin2.bias", (t,), "zeros"),
            ("conv_in.kernel", (3, 3, cfg.in_channels, widths[0]), "conv"),
            ("conv_in.bias", (widths[0],), "zeros"),
        ]
        for i, blocks in enumerate(self.down_blocks):
            for blk in blocks:
                specs += _resblock_specs(blk, t, cfg.temb_mode)
            if i < len(widths) - 1:
                specs += [
                    (f"down{i}.down.kernel", (3, 3, widths[i], widths[i]), "conv"),
                    (f"down{i}.down.bias", (widths[i],), "zeros"),
                ]
        specs += _resblock_specs(self.mid_blocks[0], t, cfg.temb_mode)
        c = widths[-1]
        specs += [
            ("mid.attn.norm.scale", (c,), "ones"),
            ("mid.attn.norm.offset", (c,), "zeros"),
            ("mid.attn.wq", (c, c), "linear"),
            ("mid.attn.bq", (c,), "zeros"),
            ("mid.attn.wk", (c, c), "linear"),
            ("mid.attn.bk", (c,), "zeros"),
            ("mid.attn.wv", (c, c), "linear"),
            ("mid.attn.bv", (c,), "zeros"),
            ("mid.attn.wo", (c, c), "zeros"),
            ("mid.attn.bo", (c,), "zeros"),
        ]
        specs += _resblock_specs(self.mid_blocks[1], t, cfg.temb_mode)
        for blocks in self.up_blocks:
            for blk in blocks:
                specs += _resblock_specs(blk, t, cfg.temb_mode)
        specs += [
            ("out.norm.scale", (widths[0],), "ones"),
            ("out.norm.offset", (widths[0],), "zeros"),
            ("out.conv.kernel", (3, 3, widths[0], cfg.in_channels), "zeros"),
            ("out.conv.bias", (cfg.in_channels,), "zeros"),
        ]
        return specs

    def param_specs(self) -> list[tuple[str, tuple, str]]:
        return list(self._specs)

    def n_params(self) -> int:
        return sum(int(np.prod(shape)) for _, shape, _ in self._specs)

    # -- forward -----------------------------------------------------------

    def _resblock_forward(self, p, blk: _ResBlockDef, x, temb_silu):
        g = self.cfg.norm_groups
        scale_shift = self.cfg.temb_mode == "scale_shift"
        n = blk.name
        h, c_gn1 = nn.groupnorm_forward(x, p[f"{n}.norm1.scale"], p[f"{n}.norm1.offset"], g)
        h, c_act1 = nn.silu_forward(h)
        h, c_conv1 = nn.conv2d_forward(h, p[f"{n}.conv1.kernel"], p[f"{n}.conv1.bias"])
        proj, c_proj = nn.linear_forward(temb_silu, p[f"{n}.temb.weight"], p[f"{n}.temb.bias"])
        if scale_shift:
            h2, c_gn2 = nn.groupnorm_forward(h, p[f"{n}.norm2.scale"], p[f"{n}.norm2.offset"], g)
            scale, shift = proj[:, : blk.cout], proj[:, blk.cout :]
            gn2_out = h2
            h2 = gn2_out * (1.0 + scale[:, None, None, :]) + shift[:, None, None, :]
            c_mod = (gn2_out, scale)
        else:
            h = h + proj[:, None, None, :]
            h2, c_gn2 = nn.groupnorm_forward(h, p[f"{n}.norm2.scale"], p[f"{n}.norm2.offset"], g)
            c_mod = None
        h2, c_act2 = nn.silu_forward(h2)
        h2, c_conv2 = nn.conv2d_forward(h2, p[f"{n}.conv2.kernel"], p[f"{n}.conv2.bias"])
        if blk.cin != blk.cout:
            shortcut, c_skip = nn.conv2d_forward(x, p[f"{n}.skip.kernel"], p[f"{n}.skip.bias"])
        else:
            shortcut, c_skip = x, None
        out = h2 + shortcut
        return out, (c_gn1, c_act1, c_conv1, c_proj, c_gn2, c_mod, c_act2, c_conv2, c_skip)

    def _resblock_backward(self, p, grads, blk: _ResBlockDef, dout, cache):
        c_gn1, c_act1, c_conv1, c_proj, c_gn2, c_mod, c_act2, c_conv2, c_skip = cache
        n = blk.name
        if c_skip is not None:
            dx_skip, dk, db = nn.conv2d_backward(dout, c_skip, p[f"{n}.skip.kernel"])
            grads[f"{n}.skip.kernel"] += dk
            grads[f"{n}.skip.bias"] += db
        else:
            dx_skip = dout
        dh, dk, db = nn.conv2d_backward(dout, c_conv2, p[f"{n}.conv2.kernel"])
        grads[f"{n}.conv2.kernel"] += dk
        grads[f"{n}.conv2.bias"] += db
        dh = nn.silu_backward(dh, c_act2)
        if c_mod is not None:
            gn2_out, scale = c_mod
            dscale = (dh * gn2_out).sum(axis=(1, 2))
            dshift = dh.sum(axis=(1, 2))
            dproj = np.concatenate([dscale, dshift], axis=1)
            dh = dh * (1.0 + scale[:, None, None, :])
            dh, dsc, doff = nn.groupnorm_backward(dh, c_gn2)
            grads[f"{n}.norm2.scale"] += dsc
            grads[f"{n}.norm2.offset"] += doff
        else:
            dh, dsc, doff = nn.groupnorm_backward(dh, c_gn2)
            grads[f"{n}.norm2.scale"] += dsc
            grads[f"{n}.norm2.offset"] += doff
            dproj = dh.sum(axis=(1, 2))
        dtemb_silu, dw, db = nn.linear_backward(dproj, c_proj, p[f"{n}.temb.weight"])
        grads[f"{n}.temb.weight"] += dw
        grads[f"{n}.temb.bias"] += db
        dh, dk, db = nn.conv2d_backward(dh, c_conv1, p[f"{n}.conv1.kernel"])
        grads[f"{n}.conv1.kernel"] += dk
        grads[f"{n}.conv1.bias"] += db
        dh = nn.silu_backward(dh, c_act1)
        dh, dsc, doff = nn.groupnorm_backward(dh, c_gn1)
        grads[f"{n}.norm1.scale"] += dsc
        grads[f"{n}.norm1.offset"] += doff
        return dh + dx_skip, dtemb_silu

    def forward_cached(self, params: DenoiserParams, x: np.ndarray, s):
        """Run the net and keep every intermediate needed for backward.

        `x` is (B, C, W, H) or (C, W, H) in the public channel-first layout;
        `s` is an int or a (B,) array of 1-based diffusion steps.
        """
        p = params.tensors
        dtype = params.dtype
        cfg = self.cfg
        squeeze = x.ndim == 3
        if squeeze:
            x = x[None]
        if x.ndim != 4 or x.shape[1] != cfg.in_channels:
            raise ValidationError(f"input shape {x.shape} does not match in_channels={cfg.in_channels}")
        if x.shape[2] != cfg.padded_w or x.shape[3] != cfg.padded_h:
            raise ValidationError(
                f"input spatial dims {x.shape[2:]} != padded ({cfg.padded_w}, {cfg.padded_h})"
            )
        b = x.shape[0]
        h = np.ascontiguousarray(x.transpose(0, 2, 3, 1), dtype=dtype)

        s_arr = np.broadcast_to(np.asarray(s), (b,))
        sin = time_embedding(s_arr, cfg.time_embed_dim).astype(dtype)
        t1, c_lin1 = nn.linear_forward(sin, p["time.lin1.weight"], p["time.lin1.bias"])
        t1, c_tact = nn.silu_forward(t1)
        temb, c_lin2 = nn.linear_forward(t1, p["time.lin2.weight"], p["time.lin2.bias"])
        temb_silu, c_tact2 = nn.silu_forward(temb)

        h, c_conv_in = nn.conv2d_forward(h, p["conv_in.kernel"], p["conv_in.bias"])

        down_caches = []
        skips = []
        for i, blocks in enumerate(self.down_blocks):
            rb_caches = []
            for blk in blocks:
                h, c = self._resblock_forward(p, blk, h, temb_silu)
                rb_caches.append(c)
            skips.append(h)
            if i < cfg.n_stages - 1:
                h, c_down = nn.conv2d_forward(
                    h, p[f"down{i}.down.kernel"], p[f"down{i}.down.bias"], stride=2
                )
            else:
                c_down = None
            down_caches.append((rb_caches, c_down))

        h, c_mid0 = self._resblock_forward(p, self.mid_blocks[0], h, temb_silu)
        if cfg.middle_attention:
            hn, c_attn_gn = nn.groupnorm_forward(
                h, p["mid.attn.norm.scale"], p["mid.attn.norm.offset"], cfg.norm_groups
            )
            attn_out, c_attn = nn.attention_forward(
                hn,
                p["mid.attn.wq"], p["mid.attn.bq"],
                p["mid.attn.wk"], p["mid.attn.bk"],
                p["mid.attn.wv"], p["mid.attn.bv"],
                p["mid.attn.wo"], p["mid.attn.bo"],
            )
            h = h + attn_out
        else:
            c_attn_gn = c_attn = None
        h, c_mid1 = self._resblock_forward(p, self.mid_blocks[1], h, temb_silu)

        up_caches = []
        for blocks, skip in zip(self.up_blocks, reversed(skips)):
            h = np.concatenate([h, skip], axis=-1)
            rb_caches = []
            for blk in blocks:
                h, c = self._resblock_forward(p, blk, h, temb_silu)
                rb_caches.append(c)
            stage_idx = int(blocks[0].name[2:].split(".")[0])
            did_upsample = stage_idx > 0
            if did_upsample:
                h = nn.upsample2x_forward(h)
            up_caches.append((rb_caches, did_upsample))

        h, c_out_gn = nn.groupnorm_forward(h, p["out.norm.scale"], p["out.norm.offset"], cfg.norm_groups)
        h, c_out_act = nn.silu_forward(h)
        out, c_out_conv = nn.conv2d_forward(h, p["out.conv.kernel"], p["out.conv.bias"])

        result = np.ascontiguousarray(out.transpose(0, 3, 1, 2))
        if squeeze:
            result = result[0]
        cache = {
            "squeeze": squeeze,
            "time": (c_lin1, c_tact, c_lin2, c_tact2),
            "conv_in": c_conv_in,
            "down": down_caches,
            "mid": (c_mid0, c_attn_gn, c_attn, c_mid1),
            "up": up_caches,
            "out": (c_out_gn, c_out_act, c_out_conv),
        }
        return result, cache

    def forward(self, params: DenoiserParams, x: np.ndarray, s) -> np.ndarray:
        out, _ = self.forward_cached(params, x, s)
        return out

    def backward_cached(self, params: DenoiserParams, cache, upstream: np.ndarray):
        """Gradients of sum(upstream * forward) w.r.t. every parameter tensor."""
        p = params.tensors
        cfg = self.cfg
        dtype = params.dtype
        if cache["squeeze"]:
            upstream = upstream[None]
        grads = TensorBlock(self._specs, dtype)
        dh = np.ascontiguousarray(upstream.transpose(0, 2, 3, 1), dtype=dtype)

        c_out_gn, c_out_act, c_out_conv = cache["out"]
        dh, dk, db = nn.conv2d_backward(dh, c_out_conv, p["out.conv.kernel"])
        grads["out.conv.kernel"] += dk
        grads["out.conv.bias"] += db
        dh = nn.silu_backward(dh, c_out_act)
        dh, dsc, doff = nn.groupnorm_backward(dh, c_out_gn)
        grads["out.norm.scale"] += dsc
        grads["out.norm.offset"] += doff

        dtemb_silu = np.zeros_like(cache["time"][3][0])
        dskips = []
        for (rb_caches, did_upsample), blocks in zip(reversed(cache["up"]), reversed(self.up_blocks)):
            if did_upsample:
                dh = nn.upsample2x_backward(dh)
            for blk, c in zip(reversed(blocks), reversed(rb_caches)):
                dh, dts = self._resblock_backward(p, grads, blk, dh, c)
                dtemb_silu += dts
            # forward concatenated [below, skip] on the channel axis
            below_ch = blocks[0].cin - self._skip_width(blocks[0])
            dskips.append(dh[..., below_ch:])
            dh = dh[..., :below_ch]
        # backward visited up0 first, so dskips is already in down-stage order

        c_mid0, c_attn_gn, c_attn, c_mid1 = cache["mid"]
        dh, dts = self._resblock_backward(p, grads, self.mid_blocks[1], dh, c_mid1)
        dtemb_silu += dts
        if cfg.middle_attention:
            dattn_in, attn_grads = nn.attention_backward(
                dh, c_attn, p["mid.attn.wq"], p["mid.attn.wk"], p["mid.attn.wv"], p["mid.attn.wo"]
            )
            dwq, dbq, dwk, dbk, dwv, dbv, dwo, dbo = attn_grads
            grads["mid.attn.wq"] += dwq
            grads["mid.attn.bq"] += dbq
            grads["mid.attn.wk"] += dwk
            grads["mid.attn.bk"] += dbk
            grads["mid.attn.wv"] += dwv
            grads["mid.attn.bv"] += dbv
            grads["mid.attn.wo"] += dwo
            grads["mid.attn.bo"] += dbo
            dgn, dsc, doff = nn.groupnorm_backward(dattn_in, c_attn_gn)
            grads["mid.attn.norm.scale"] += dsc
            grads["mid.attn.norm.offset"] += doff
            dh = dh + dgn
        dh, dts = self._resblock_backward(p, grads, self.mid_blocks[0], dh, c_mid0)
        dtemb_silu += dts

        for i in reversed(range(cfg.n_stages)):
            rb_caches, c_down = cache["down"][i]
            if c_down is not None:
                dh, dk, db = nn.conv2d_backward(dh, c_down, p[f"down{i}.down.kernel"])
                grads[f"down{i}.down.kernel"] += dk
                grads[f"down{i}.down.bias"] += db
            dh = dh + dskips[i]
            for blk, c in zip(reversed(self.down_blocks[i]), reversed(rb_caches)):
                dh, dts = self._resblock_backward(p, grads, blk, dh, c)
                dtemb_silu += dts

        _, dk, db = nn.conv2d_backward(dh, cache["conv_in"], p["conv_in.kernel"])
        grads["conv_in.kernel"] += dk
        grads["conv_in.bias"] += db

        c_lin1, c_tact, c_lin2, c_tact2 = cache["time"]
        dtemb = nn.silu_backward(dtemb_silu, c_tact2)
        dt1, dw, db = nn.linear_backward(dtemb, c_lin2, p["time.lin2.weight"])
        grads["time.lin2.weight"] += dw
        grads["time.lin2.bias"] += db
        dt1 = nn.silu_backward(dt1, c_tact)
        _, dw, db = nn.linear_backward(dt1, c_lin1, p["time.lin1.weight"])
        grads["time.lin1.weight"] += dw
        grads["time.lin1.bias"] += db
        return grads

    def _skip_width(self, first_up_block: _ResBlockDef) -> int:
        stage_idx = int(first_up_block.name[2:].split(".")[0])
        return self.cfg.base_widths[stage_idx]

    def backward(self, params: DenoiserParams, x: np.ndarray, s, upstream: np.ndarray):
        _, cache = self.forward_cached(params, x, s)
        return self.backward_cached(params, cache, upstream)

    def as_denoise_fn(self, params: DenoiserParams):
        return lambda x, s: self.forward(params, x, s)


def time_embedding(s, dim: int) -> np.ndarray:
    """Sinusoidal encoding of the diffusion step: half sines then half
    cosines, geometric frequencies from 1 down to 1e-4."""
    if dim % 2 or dim < 2:
        raise ValidationError("time embedding dim must be even and >= 2")
    s_arr = np.asarray(s, dtype=np.float64)
    scalar = s_arr.ndim == 0
    s_arr = np.atleast_1d(s_arr)
    half = dim // 2
    freqs = np.exp(-np.log(1e4) * np.arange(half) / max(half - 1, 1))
    ang = s_arr[:, None] * freqs[None, :]
    emb = np.concatenate([np.sin(ang), np.cos(ang)], axis=1)
    return emb[0] if scalar else emb


def init_params(cfg: NetConfig, seed: int, dtype=np.float32) -> DenoiserParams:
    """Deterministic fan-in-uniform init; biases and the output conv are zero
    so an untrained net predicts zero noise."""
    net = Denoiser(cfg)
    rng = np.random.default_rng([int(seed)])
    specs = net.param_specs()
    tensors = TensorBlock(specs, dtype)
    for name, shape, kind in specs:
        if kind == "conv":
            fan_in = int(np.prod(shape[:3]))
            tensors[name][...] = rng.uniform(-1.0, 1.0, size=shape) / np.sqrt(fan_in)
        elif kind == "linear":
            tensors[name][...] = rng.uniform(-1.0, 1.0, size=shape) / np.sqrt(shape[0])
        elif kind == "ones":
            tensors[name][...] = 1.0
        elif kind == "zeros":
            pass
        else:  # pragma: no cover
            raise ValidationError(f"unknown init kind {kind}")
    return DenoiserParams(
        cfg=cfg,
        tensors=tensors,
        opt_m=TensorBlock(specs, dtype),
        opt_v=TensorBlock(specs, dtype),
        opt_step=0,
    )


def cosine_lr(step: int, total_steps: int, base_lr: float = BASE_LR) -> float:
    """No-warmup cosine decay from base_lr to 0 at step == total_steps."""
    frac = min(max(step, 0), total_steps) / total_steps
    return base_lr * 0.5 * (1.0 + np.cos(np.pi * frac))


def adamw_update(
    params: DenoiserParams,
    grads: dict[str, np.ndarray],
    total_steps: int,
    base_lr: float = BASE_LR,
    weight_decay: float = WEIGHT_DECAY,
) -> DenoiserParams:
    """One decoupled-weight-decay Adam step, in place; lr follows the cosine
    schedule evaluated at the pre-increment step counter."""
    lr = cosine_lr(params.opt_step, total_steps, base_lr)
    t = params.opt_step + 1
    bc1 = 1.0 - ADAM_BETA1**t
    bc2 = 1.0 - ADAM_BETA2**t

    def update(p, m, v, g):
        g = g.astype(p.dtype, copy=False)
        m *= ADAM_BETA1
        m += (1.0 - ADAM_BETA1) * g
        v *= ADAM_BETA2
        v += (1.0 - ADAM_BETA2) * g * g
        p -= (lr * ((m / bc1) / (np.sqrt(v / bc2) + ADAM_EPS)) + lr * weight_decay * p).astype(
            p.dtype, copy=False
        )

    if isinstance(grads, TensorBlock) and isinstance(params.tensors, TensorBlock):
        update(params.tensors.flat, params.opt_m.flat, params.opt_v.flat, grads.flat)
    else:
        for name, p in params.tensors.items():
            update(p, params.opt_m[name], params.opt_v[name], grads[name])
    params.opt_step = t
    return params


# ---------------------------------------------------------------------------
# padding between raw grid and network resolution

def pad_channels(x: np.ndarray, padded_w: int, padded_h: int) -> np.ndarray:
    """Edge-replicate the high side of both horizontal axes of (..., W, H)."""
    w, h = x.shape[-2], x.shape[-1]
    if padded_w < w or padded_h < h:
        raise ValidationError(f"padded dims ({padded_w}, {padded_h}) smaller than raw ({w}, {h})")
    pad = [(0, 0)] * (x.ndim - 2) + [(0, padded_w - w), (0, padded_h - h)]
    return np.pad(x, pad, mode="edge")


def crop_channels(x: np.ndarray, w: int, h: int) -> np.ndarray:
    """Inverse of :func:`pad_channels`."""
    if x.shape[-2] < w or x.shape[-1] < h:
        raise ValidationError(f"cannot crop {x.shape} to ({w}, {h})")
    return x[..., :w, :h]


# ---------------------------------------------------------------------------
# checkpoints: one-line JSON header + float32 blob (params, then m, then v)

def save_checkpoint(path: str | Path, params: DenoiserParams, extra: Optional[dict] = None) -> None:
    blob = b"".join(
        np.ascontiguousarray(section.flat, dtype="<f4").tobytes()
        for section in (params.tensors, params.opt_m, params.opt_v)
    )
    header = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "net_config": net_config_to_dict(params.cfg),
        "opt_step": params.opt_step,
        "blob_sha256": hashlib.sha256(blob).hexdigest(),
    }
    header.update(extra or {})
    Path(path).write_bytes(json.dumps(header).encode() + b"\n" + blob)


def load_checkpoint(path: str | Path) -> tuple[DenoiserParams, dict]:
    raw = Path(path).read_bytes()
    nl = raw.find(b"\n")
    if nl < 0:
        raise FormatError(f"{path}: missing checkpoint header")
    try:
        header = json.loads(raw[:nl].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: bad checkpoint header: {exc}") from exc
    if header.get("format") != CHECKPOINT_FORMAT or header.get("version") != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: not a version-{CHECKPOINT_VERSION} {CHECKPOINT_FORMAT} file")
    blob = raw[nl + 1 :]
    if hashlib.sha256(blob).hexdigest() != header.get("blob_sha256"):
        raise FormatError(f"{path}: parameter blob fails its integrity checksum")
    cfg = net_config_from_dict(header["net_config"])
    net = Denoiser(cfg)
    specs = net.param_specs()
    n_scalars = net.n_params()
    data = np.frombuffer(blob, dtype="<f4")
    if data.size != 3 * n_scalars:
        raise FormatError(f"{path}: blob holds {data.size} floats, expected {3 * n_scalars}")
    sections = [
        TensorBlock(specs, np.float32, buffer=data[i * n_scalars : (i + 1) * n_scalars].astype(np.float32))
        for i in range(3)
    ]
    return (
        DenoiserParams(
            cfg=cfg,
            tensors=sections[0],
            opt_m=sections[1],
            opt_v=sections[2],
            opt_step=int(header["opt_step"]),
        ),
        header,
    )
