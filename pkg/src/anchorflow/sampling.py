"""Euler flow integration with per-step anchor injection and CFG.

The schedule walks diffusion time down a uniform grid from 1 (noise) to 0
(clean); each step applies z <- z + dt * v with v the (guided) velocity. In
anchored modes frame 0 is overwritten with the clean anchor latent before
every network call and once more after the last step, so the output's first
frame is the anchor bit-for-bit.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from anchorflow.errors import ShapeError
from anchorflow.model import (
    ModelConfig, check_adapter_base, forward_batch, load_checkpoint,
)
from anchorflow.prompts import (
    PromptAst, TokenSequence, pad_tokens, parse_prompt, reduce_to_first_frame,
    serialize_prompt, tokenize,
)
from anchorflow.rng import stream
from anchorflow.world import render_frame, scene_from_ast

MODES = ("t2v", "i2v", "i2v_text", "factorized")


@dataclass
class SampleConfig:
    steps: int = 50
    cfg_scale: float = 2.0
    mode: str = "t2v"
    seed: int = 0

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.cfg_scale < 0:
            raise ValueError("cfg_scale must be >= 0")
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")


def make_schedule(n: int) -> list[tuple[float, float]]:
    """Descending uniform grid: (t_i, dt_i) for i = 0..n-1 with t_0 = 1.
    The last step absorbs rounding so the dts sum to exactly 1."""
    if n < 1:
        raise ValueError("n must be >= 1")
    ts = [1.0 - i / n for i in range(n + 1)]
    ts[-1] = 0.0
    dts, partial = [], 0.0
    for i in range(n - 1):
        dt = ts[i] - ts[i + 1]
        dts.append(dt)
        partial += dt
    dts.append(1.0 - partial)
    return list(zip(ts[:-1], dts))


def cfg_velocity(v_cond, v_uncond, s: float):
    """Classifier-free guidance: v_uncond + s * (v_cond - v_uncond).
    The endpoints s=0 and s=1 return their branch exactly."""
    if getattr(v_cond, "shape", None) != getattr(v_uncond, "shape", None):
        raise ShapeError("cfg branches disagree in shape")
    if s == 1.0:
        return v_cond
    if s == 0.0:
        return v_uncond
    return v_uncond + s * (v_cond - v_uncond)


# --------------------------------------------------------------- sampler

def sample_batch(params, model_config: ModelConfig, token_batch: list[TokenSequence],
                 seeds: list[int], steps: int, cfg_scale: float,
                 anchors: np.ndarray | None = None, adapters=None,
                 velocity_fn=None) -> np.ndarray:
    """Integrate a batch of videos with independent noise streams, one per
    seed. `anchors` (B,H,W,3 pixels) switches on per-step injection.
    `velocity_fn` substitutes the network (testing hook). Returns pixels."""
    b = len(seeds)
    fr, side, ch = model_config.frames, model_config.image_size, model_config.channels
    dtype = model_config.torch_dtype
    noise = np.stack([
        stream("sample-noise", s).standard_normal((fr, side, side, ch))
        for s in seeds])
    z = torch.tensor(noise, dtype=dtype)

    ids = torch.tensor(np.stack([t.ids for t in token_batch]))
    mask = torch.tensor(np.stack([t.mask for t in token_batch]))
    pad = pad_tokens()
    pad_ids = torch.tensor(np.stack([pad.ids] * b))
    pad_mask = torch.tensor(np.stack([pad.mask] * b))
    all_pad = not bool(mask.any())

    za = None
    if anchors is not None:
        if anchors.shape != (b, side, side, ch):
            raise ShapeError(f"anchor batch shape {anchors.shape}")
        za = torch.tensor(anchors, dtype=dtype) * 2.0 - 1.0

    with torch.no_grad():
        for t_i, dt in make_schedule(steps):
            if za is not None:
                z[:, 0] = za
                t_vec = torch.full((b, fr), t_i, dtype=dtype)
                t_vec[:, 0] = 0.0
            else:
                t_vec = torch.full((b, fr), t_i, dtype=dtype)
            if velocity_fn is not None:
                v = velocity_fn(z, t_vec)
            elif all_pad:
                v = forward_batch(params, z, t_vec, pad_ids, pad_mask,
                                  model_config, adapters)
            else:
                # fused CFG: conditional rows ahead of unconditional rows
                vv = forward_batch(
                    params, torch.cat([z, z]), torch.cat([t_vec, t_vec]),
                    torch.cat([ids, pad_ids]), torch.cat([mask, pad_mask]),
                    model_config, adapters)
                v = cfg_velocity(vv[:b], vv[b:], cfg_scale)
            z = z + dt * v
        if za is not None:
            z[:, 0] = za
        pixels = torch.clamp((z + 1.0) / 2.0, 0.0, 1.0)
    return pixels.numpy().astype(np.float32, copy=False)


def sample_t2v(params, model_config: ModelConfig, tokens: TokenSequence,
               cfg: SampleConfig, adapters=None) -> np.ndarray:
    """Text-only sampling of a single video; pixels in [0,1]."""
    return sample_batch(params, model_config, [tokens], [cfg.seed],
                        cfg.steps, cfg.cfg_scale, adapters=adapters)[0]


def sample_anchored(params, adapters, model_config: ModelConfig, anchor: np.ndarray,
                    tokens: TokenSequence, cfg: SampleConfig) -> np.ndarray:
    """Anchored sampling: frame 0 of the output equals `anchor` exactly."""
    return sample_batch(params, model_config, [tokens], [cfg.seed],
                        cfg.steps, cfg.cfg_scale,
                        anchors=anchor[None], adapters=adapters)[0]


def run_factorized_pipeline(params, adapters, model_config: ModelConfig,
                            prompt_text: str, anchor_seed: int,
                            cfg: SampleConfig) -> tuple[np.ndarray, np.ndarray, PromptAst]:
    """Reason -> compose -> animate. The anchor renders the reduced prompt;
    the video model is conditioned on the full prompt."""
    ast = parse_prompt(prompt_text)
    anchor = render_frame(scene_from_ast(reduce_to_first_frame(ast), anchor_seed))
    tokens = tokenize(serialize_prompt(ast))
    video = sample_anchored(params, adapters, model_config, anchor, tokens, cfg)
    return video, anchor, ast


# ------------------------------------------------------ checkpoint facade

def load_for_sampling(base_ckpt, lora_ckpt=None):
    """(params, adapters, config) with the adapter/base hash verified."""
    params, _, config, _ = load_checkpoint(base_ckpt)
    adapters = None
    if lora_ckpt is not None:
        _, adapters, lora_config, extra = load_checkpoint(lora_ckpt)
        if lora_config != config:
            raise ShapeError("adapter checkpoint config disagrees with base config")
        check_adapter_base(extra, base_ckpt)
    return params, adapters, config
