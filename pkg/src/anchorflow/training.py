"""Stage-1 flow-matching pretraining and stage-2 anchor-grounding finetuning.

Time convention: diffusion time t in [0,1] with t=0 clean and t=1 pure
noise, interpolant z_t = (1-t)*data + t*eps, regression target data - eps
(the velocity pointing from noise to data). Anchor examples overwrite one
random frame with the clean latent and pin its timestep to 0.
"""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch

from anchorflow.errors import DivergenceError, ShapeError
from anchorflow.model import (
    ModelConfig, file_hash, flow_loss_torch, forward_batch, init_adapters,
    init_params, load_checkpoint, save_checkpoint,
)
from anchorflow.prompts import TokenSequence, pad_tokens, tokenize
from anchorflow.rng import stream
from anchorflow.world import DatasetIndex


@dataclass
class TrainConfig:
    lr: float = 3e-4
    steps: int = 20000
    batch_size: int = 16
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    grad_clip: float = 1.0
    cond_drop: float = 0.1
    anchor_loss: str = "full"  # or "masked": exclude the anchor frame
    log_every: int = 100

    def __post_init__(self):
        if self.lr <= 0 or self.steps < 1 or self.batch_size < 1:
            raise ValueError("rates and counts must be positive")
        if not 0.0 <= self.cond_drop < 1.0:
            raise ValueError("cond_drop must be in [0,1)")
        if self.anchor_loss not in ("full", "masked"):
            raise ValueError(f"unknown anchor_loss policy {self.anchor_loss!r}")

    @classmethod
    def pretrain_defaults(cls) -> "TrainConfig":
        return cls(lr=3e-4, steps=20000)

    @classmethod
    def finetune_defaults(cls) -> "TrainConfig":
        return cls(lr=1e-4, steps=6000)


@dataclass
class TrainingExample:
    z_t: np.ndarray
    t_vec: np.ndarray
    target: np.ndarray
    loss_mask: np.ndarray
    tokens: TokenSequence
    anchor_index: int | None = None


def make_pretrain_example(video: np.ndarray, tokens: TokenSequence,
                          rng: np.random.Generator, cond_drop: float = 0.1) -> TrainingExample:
    """Shared-t flow matching example. Draw order: t, eps, cond-drop coin."""
    data = 2.0 * np.asarray(video, dtype=np.float64) - 1.0
    t = rng.random()
    eps = rng.standard_normal(data.shape)
    z_t = (1.0 - t) * data + t * eps
    target = data - eps
    if rng.random() < cond_drop:
        tokens = pad_tokens()
    frames = video.shape[0]
    return TrainingExample(
        z_t=z_t.astype(np.float32), t_vec=np.full(frames, t, dtype=np.float32),
        target=target.astype(np.float32), loss_mask=np.ones(frames, dtype=np.float32),
        tokens=tokens)


def make_anchor_example(video: np.ndarray, tokens: TokenSequence,
                        rng: np.random.Generator, anchor_loss: str = "full") -> TrainingExample:
    """Hybrid example: frame k stays clean with t_vec[k]=0, the rest share
    one noise level. Draw order: k, t, eps."""
    data = 2.0 * np.asarray(video, dtype=np.float64) - 1.0
    frames = video.shape[0]
    k = int(rng.integers(frames))
    t = rng.random()
    eps = rng.standard_normal(data.shape)
    z_t = ((1.0 - t) * data + t * eps).astype(np.float32)
    data32 = data.astype(np.float32)
    z_t[k] = data32[k]
    t_vec = np.full(frames, t, dtype=np.float32)
    t_vec[k] = 0.0
    loss_mask = np.ones(frames, dtype=np.float32)
    if anchor_loss == "masked":
        loss_mask[k] = 0.0
    return TrainingExample(
        z_t=z_t, t_vec=t_vec, target=(data - eps).astype(np.float32),
        loss_mask=loss_mask, tokens=tokens, anchor_index=k)


def flow_loss(v_hat, target, loss_mask) -> float:
    """Mean squared error over unmasked frame entries."""
    v = torch.as_tensor(np.asarray(v_hat, dtype=np.float64))
    tg = torch.as_tensor(np.asarray(target, dtype=np.float64))
    if v.shape != tg.shape:
        raise ShapeError(f"{tuple(v.shape)} vs {tuple(tg.shape)}")
    m = torch.as_tensor(np.asarray(loss_mask, dtype=np.float64))
    return float(flow_loss_torch(v, tg, m))


# ------------------------------------------------------------ train loops

def _dataset_tokens(dataset: DatasetIndex, indices: list[int]) -> list[TokenSequence]:
    return [tokenize(dataset.records[i].prompt) for i in indices]


def _batch_indices(n: int, seed, step: int, batch_size: int) -> list[int]:
    """Epoch-shuffled batch composition, independent of worker layout."""
    per_epoch = max(1, n // batch_size)
    epoch, slot = divmod(step, per_epoch)
    order = stream("order", seed, epoch).permutation(n)
    return [int(i) for i in order[slot * batch_size:(slot + 1) * batch_size]]


def _stack_examples(examples: list[TrainingExample], dtype):
    z = torch.tensor(np.stack([e.z_t for e in examples]), dtype=dtype)
    tv = torch.tensor(np.stack([e.t_vec for e in examples]), dtype=dtype)
    tg = torch.tensor(np.stack([e.target for e in examples]), dtype=dtype)
    lm = torch.tensor(np.stack([e.loss_mask for e in examples]), dtype=dtype)
    ids = torch.tensor(np.stack([e.tokens.ids for e in examples]))
    msk = torch.tensor(np.stack([e.tokens.mask for e in examples]))
    return z, tv, tg, lm, ids, msk


class _LossLog:
    def __init__(self, path: Path | None, log_every: int):
        self.rows = []
        self.losses = []
        self.path = path
        self.log_every = log_every
        self.t0 = time.perf_counter()

    def record(self, step: int, loss: float, lr: float):
        self.losses.append(loss)
        if step % self.log_every == 0 or step == 0:
            self.rows.append((step, loss, lr, time.perf_counter() - self.t0))

    def window_mean(self, first: bool, window: int = 100) -> float:
        chunk = self.losses[:window] if first else self.losses[-window:]
        return float(np.mean(chunk))

    def write(self):
        if self.path is None:
            return
        self.path.parent.mkdir(parents=True, exist_ok=True)
        with open(self.path, "w", encoding="utf-8") as f:
            f.write("step,loss,lr,wallclock_s\n")
            for step, loss, lr, wc in self.rows:
                f.write(f"{step},{loss:.8g},{lr:.8g},{wc:.3f}\n")


def pretrain_t2v(dataset: DatasetIndex, config: TrainConfig, model_config: ModelConfig,
                 seed: int, out_dir) -> Path:
    """Flow-matching pretraining over the train split; returns the
    checkpoint path. Deterministic given (dataset, configs, seed)."""
    out_dir = Path(out_dir)
    train_idx = dataset.split_indices("train")
    tokens = _dataset_tokens(dataset, train_idx)
    params = init_params(model_config, seed)
    for p in params.values():
        p.requires_grad_(True)
    opt = torch.optim.Adam([params[k] for k in sorted(params)], lr=config.lr,
                           betas=(config.beta1, config.beta2), eps=config.eps)
    log = _LossLog(out_dir / "pretrain_log.csv", config.log_every)
    dtype = model_config.torch_dtype

    for step in range(config.steps):
        batch = _batch_indices(len(train_idx), ("pre", seed), step, config.batch_size)
        examples = []
        for slot, j in enumerate(batch):
            rng = stream("ex", "pre", seed, step, slot)
            examples.append(make_pretrain_example(
                dataset.videos[train_idx[j]], tokens[j], rng, config.cond_drop))
        z, tv, tg, lm, ids, msk = _stack_examples(examples, dtype)
        opt.zero_grad()
        loss = flow_loss_torch(forward_batch(params, z, tv, ids, msk, model_config), tg, lm)
        value = loss.detach().item()
        if not math.isfinite(value):
            raise DivergenceError(f"loss {value} at step {step}")
        loss.backward()
        torch.nn.utils.clip_grad_norm_([params[k] for k in sorted(params)], config.grad_clip)
        opt.step()
        log.record(step, value, config.lr)

    log.write()
    ckpt = out_dir / "base.fvgc"
    extra = {
        "kind": "base", "seed": seed, "train": asdict(config),
        "initial_smoothed_loss": log.window_mean(first=True),
        "final_smoothed_loss": log.window_mean(first=False),
    }
    save_checkpoint(ckpt, model_config, params={k: v.detach() for k, v in params.items()},
                    extra=extra)
    return ckpt


def finetune_anchor(base_ckpt, dataset: DatasetIndex, config: TrainConfig,
                    seed: int, out_dir) -> Path:
    """LoRA-only anchor-grounding finetune; the base stays frozen and the
    adapter checkpoint records the base file hash."""
    out_dir = Path(out_dir)
    params, _, model_config, _ = load_checkpoint(base_ckpt)
    for p in params.values():
        p.requires_grad_(False)
    adapters = init_adapters(model_config, seed)
    for a in adapters.values():
        a.requires_grad_(True)
    opt = torch.optim.Adam([adapters[k] for k in sorted(adapters)], lr=config.lr,
                           betas=(config.beta1, config.beta2), eps=config.eps)

    train_idx = dataset.split_indices("train")
    tokens = _dataset_tokens(dataset, train_idx)
    log = _LossLog(out_dir / "finetune_log.csv", config.log_every)
    dtype = model_config.torch_dtype

    for step in range(config.steps):
        batch = _batch_indices(len(train_idx), ("ft", seed), step, config.batch_size)
        examples = []
        for slot, j in enumerate(batch):
            rng = stream("ex", "ft", seed, step, slot)
            examples.append(make_anchor_example(
                dataset.videos[train_idx[j]], tokens[j], rng, config.anchor_loss))
        z, tv, tg, lm, ids, msk = _stack_examples(examples, dtype)
        opt.zero_grad()
        loss = flow_loss_torch(
            forward_batch(params, z, tv, ids, msk, model_config, adapters=adapters), tg, lm)
        value = loss.detach().item()
        if not math.isfinite(value):
            raise DivergenceError(f"loss {value} at step {step}")
        loss.backward()
        torch.nn.utils.clip_grad_norm_([adapters[k] for k in sorted(adapters)], config.grad_clip)
        opt.step()
        log.record(step, value, config.lr)

    log.write()
    ckpt = out_dir / "lora.fvgc"
    extra = {
        "kind": "lora", "seed": seed, "train": asdict(config),
        "base_hash": file_hash(base_ckpt),
        "initial_smoothed_loss": log.window_mean(first=True),
        "final_smoothed_loss": log.window_mean(first=False),
    }
    save_checkpoint(ckpt, model_config,
                    adapters={k: v.detach() for k, v in adapters.items()}, extra=extra)
    return ckpt
