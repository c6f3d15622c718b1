"""Conditional velocity-field network with per-frame timestep conditioning.

Architecture: patchify each frame into 4x4 patches (64 tokens/frame, 512
total), add fixed sinusoidal space/frame position codes plus a sinusoidal
embedding of that frame's noise level, then run pre-norm transformer blocks
of [self-attention over all tokens -> cross-attention into the embedded text
-> MLP], and project back to pixels. Parameters live in a flat name->tensor
dict; LoRA adapters are a separate (A, B) dict applied additively, so a
zero-initialized B leaves the base model bit-identical.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from anchorflow import formats
from anchorflow.errors import FormatError, HashMismatchError, ShapeError
from anchorflow.rng import stream

# single-threaded torch keeps every run bit-reproducible and plays nicely
# with process-level parallelism in the harness
torch.set_num_threads(1)

PAPER_LORA_RANK = 256  # rank used by the full-scale systems; toy default is 8


@dataclass(frozen=True)
class ModelConfig:
    embed_dim: int = 64
    blocks: int = 2
    patch: int = 4
    heads: int = 4
    vocab_size: int = 25
    text_len: int = 32
    frames: int = 8
    image_size: int = 32
    channels: int = 3
    dtype: str = "float32"
    lora_rank: int = 8
    lora_alpha: float = 8.0

    def __post_init__(self):
        if self.embed_dim % self.heads:
            raise ShapeError("embed_dim must be divisible by heads")
        if self.image_size % self.patch:
            raise ShapeError("patch must divide image_size")

    @property
    def patches_per_side(self) -> int:
        return self.image_size // self.patch

    @property
    def tokens_per_frame(self) -> int:
        return self.patches_per_side ** 2

    @property
    def patch_dim(self) -> int:
        return self.patch * self.patch * self.channels

    @property
    def torch_dtype(self):
        return {"float32": torch.float32, "float64": torch.float64}[self.dtype]


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, pd = config.embed_dim, config.patch_dim
    shapes = {
        "token_emb": (config.vocab_size, d),
        "patch_embed.w": (d, pd),
        "patch_embed.b": (d,),
        "out_proj.w": (pd, d),
        "out_proj.b": (pd,),
    }
    for i in range(config.blocks):
        p = f"blocks.{i}."
        for ln in ("ln1", "ln2", "ln3"):
            shapes[p + ln + ".scale"] = (d,)
            shapes[p + ln + ".offset"] = (d,)
        for attn in ("attn", "xattn"):
            for w in ("wq", "wk", "wv", "wo"):
                shapes[p + attn + "." + w] = (d, d)
        shapes[p + "mlp.w1"] = (4 * d, d)
        shapes[p + "mlp.b1"] = (4 * d,)
        shapes[p + "mlp.w2"] = (d, 4 * d)
        shapes[p + "mlp.b2"] = (d,)
    return shapes


def lora_target_names(config: ModelConfig) -> list[str]:
    """All attention and MLP weight matrices; embeddings and norms stay frozen."""
    names = []
    for i in range(config.blocks):
        p = f"blocks.{i}."
        names += [p + a + "." + w for a in ("attn", "xattn") for w in ("wq", "wk", "wv", "wo")]
        names += [p + "mlp.w1", p + "mlp.w2"]
    return names


def _trunc_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    x = rng.standard_normal(shape) * std
    bad = np.abs(x) > 2 * std
    while bad.any():
        x[bad] = rng.standard_normal(int(bad.sum())) * std
        bad = np.abs(x) > 2 * std
    return x


def init_params(config: ModelConfig, seed: int) -> dict[str, torch.Tensor]:
    """Truncated normal (sigma=0.02) weights, zero biases, unit norm scales."""
    params = {}
    for name, shape in param_shapes(config).items():
        rng = stream("init", seed, name)
        if name.endswith((".b", ".b1", ".b2", ".offset")):
            arr = np.zeros(shape)
        elif name.endswith(".scale"):
            arr = np.ones(shape)
        else:
            arr = _trunc_normal(rng, shape, 0.02)
        params[name] = torch.tensor(arr, dtype=config.torch_dtype)
    return params


def init_adapters(config: ModelConfig, seed: int) -> dict[str, torch.Tensor]:
    """A ~ N(0, 0.02^2), B = 0, so the adapted model starts as the base."""
    shapes = param_shapes(config)
    adapters = {}
    for name in lora_target_names(config):
        out_dim, in_dim = shapes[name]
        rng = stream("lora", seed, name)
        adapters[name + ".A"] = torch.tensor(
            rng.standard_normal((config.lora_rank, in_dim)) * 0.02, dtype=config.torch_dtype)
        adapters[name + ".B"] = torch.zeros(out_dim, config.lora_rank, dtype=config.torch_dtype)
    return adapters


def apply_lora(weight, adapter) -> torch.Tensor:
    """Effective weight W + (alpha/r) * B @ A for an (A, B, r, alpha) tuple."""
    a, b, rank, alpha = adapter
    w = torch.as_tensor(weight)
    a = torch.as_tensor(a, dtype=w.dtype)
    b = torch.as_tensor(b, dtype=w.dtype)
    if a.shape[0] != rank or b.shape[1] != rank or (b.shape[0], a.shape[1]) != tuple(w.shape):
        raise ShapeError(
            f"adapter shapes A{tuple(a.shape)} B{tuple(b.shape)} incompatible with W{tuple(w.shape)}")
    return w + (alpha / rank) * (b @ a)


def parameter_count(params: dict) -> int:
    return sum(int(t.numel()) for t in params.values())


# ---------------------------------------------------------------- buffers

_BUFFER_CACHE: dict = {}


def _sinusoid(positions: torch.Tensor, dim: int) -> torch.Tensor:
    """Standard sin/cos code of scalar positions, output (..., dim)."""
    half = dim // 2
    freqs = torch.exp(
        -np.log(10000.0) * torch.arange(half, dtype=positions.dtype) / half)
    ang = positions[..., None] * freqs
    return torch.cat([torch.sin(ang), torch.cos(ang)], dim=-1)


def _buffers(config: ModelConfig):
    key = (config, config.dtype)
    if key not in _BUFFER_CACHE:
        d, dt = config.embed_dim, config.torch_dtype
        patch_pos = _sinusoid(torch.arange(config.tokens_per_frame, dtype=dt), d // 2)
        frame_pos = _sinusoid(torch.arange(config.frames, dtype=dt), d - d // 2)
        pos = torch.cat([
            patch_pos[None, :, :].expand(config.frames, -1, -1),
            frame_pos[:, None, :].expand(-1, config.tokens_per_frame, -1),
        ], dim=-1).reshape(config.frames * config.tokens_per_frame, d)
        text_pos = _sinusoid(torch.arange(config.text_len, dtype=dt), d)
        _BUFFER_CACHE[key] = (pos, text_pos)
    return _BUFFER_CACHE[key]


# ---------------------------------------------------------------- forward

def _linear(x, params, adapters, name, scale):
    out = x @ params[name].T
    if adapters is not None and name + ".A" in adapters:
        out = out + scale * ((x @ adapters[name + ".A"].T) @ adapters[name + ".B"].T)
    return out


def _layer_norm(x, params, name):
    return F.layer_norm(x, x.shape[-1:], params[name + ".scale"], params[name + ".offset"])


def _self_attention(x, params, adapters, prefix, heads, scale):
    b, t, d = x.shape
    hd = d // heads
    q = _linear(x, params, adapters, prefix + ".wq", scale).view(b, t, heads, hd).transpose(1, 2)
    k = _linear(x, params, adapters, prefix + ".wk", scale).view(b, t, heads, hd).transpose(1, 2)
    v = _linear(x, params, adapters, prefix + ".wv", scale).view(b, t, heads, hd).transpose(1, 2)
    o = F.scaled_dot_product_attention(q, k, v)
    o = o.transpose(1, 2).reshape(b, t, d)
    return _linear(o, params, adapters, prefix + ".wo", scale)


def _cross_attention(x, text, token_mask, params, adapters, prefix, heads, scale):
    """Queries from the latent tokens, keys/values from valid text tokens.
    Sequences with no valid token contribute exactly zero."""
    b, t, d = x.shape
    valid_rows = token_mask.any(dim=1)
    out = torch.zeros_like(x)
    if not bool(valid_rows.any()):
        return out
    idx = valid_rows.nonzero(as_tuple=True)[0]
    xs, es, ms = x[idx], text[idx], token_mask[idx]
    hd = d // heads
    bs, s = es.shape[0], es.shape[1]
    q = _linear(xs, params, adapters, prefix + ".wq", scale).view(bs, t, heads, hd).transpose(1, 2)
    k = _linear(es, params, adapters, prefix + ".wk", scale).view(bs, s, heads, hd).transpose(1, 2)
    v = _linear(es, params, adapters, prefix + ".wv", scale).view(bs, s, heads, hd).transpose(1, 2)
    attn_mask = ms[:, None, None, :].bool()
    o = F.scaled_dot_product_attention(q, k, v, attn_mask=attn_mask)
    o = o.transpose(1, 2).reshape(bs, t, d)
    out[idx] = _linear(o, params, adapters, prefix + ".wo", scale)
    return out


def forward_batch(params, z, t_vec, token_ids, token_mask, config: ModelConfig,
                  adapters=None) -> torch.Tensor:
    """Velocity prediction for a batch. z: (B,F,H,W,C) torch tensor in the
    model dtype, t_vec: (B,F), token_ids/token_mask: (B,text_len)."""
    b = z.shape[0]
    fr, side, patch, d = config.frames, config.image_size, config.patch, config.embed_dim
    if z.shape != (b, fr, side, side, config.channels):
        raise ShapeError(f"latent shape {tuple(z.shape)} does not match config")
    if t_vec.shape != (b, fr):
        raise ShapeError(f"t_vec shape {tuple(t_vec.shape)} does not match ({b},{fr})")
    if token_ids.shape != (b, config.text_len) or token_mask.shape != (b, config.text_len):
        raise ShapeError("token sequence shape does not match config.text_len")

    pos, text_pos = _buffers(config)
    n = config.patches_per_side
    lora_scale = config.lora_alpha / config.lora_rank

    # patchify: (B,F,H,W,C) -> (B, F*n*n, patch*patch*C)
    x = z.reshape(b, fr, n, patch, n, patch, config.channels)
    x = x.permute(0, 1, 2, 4, 3, 5, 6).reshape(b, fr * n * n, config.patch_dim)
    x = x @ params["patch_embed.w"].T + params["patch_embed.b"]
    temb = _sinusoid(t_vec.to(z.dtype) * 1000.0, d)  # (B,F,D)
    x = x + pos + temb.repeat_interleave(n * n, dim=1)

    text = params["token_emb"][token_ids] + text_pos
    text = text * token_mask.to(z.dtype)[..., None]  # PAD rows are inert

    for i in range(config.blocks):
        p = f"blocks.{i}."
        x = x + _self_attention(_layer_norm(x, params, p + "ln1"),
                                params, adapters, p + "attn", config.heads, lora_scale)
        x = x + _cross_attention(_layer_norm(x, params, p + "ln2"), text, token_mask,
                                 params, adapters, p + "xattn", config.heads, lora_scale)
        h = _layer_norm(x, params, p + "ln3")
        h = _linear(h, params, adapters, p + "mlp.w1", lora_scale) + params[p + "mlp.b1"]
        h = F.gelu(h)
        h = _linear(h, params, adapters, p + "mlp.w2", lora_scale) + params[p + "mlp.b2"]
        x = x + h

    out = x @ params["out_proj.w"].T + params["out_proj.b"]
    out = out.reshape(b, fr, n, n, patch, patch, config.channels)
    out = out.permute(0, 1, 2, 4, 3, 5, 6).reshape(b, fr, side, side, config.channels)
    return out


def forward(params, z, t_vec, tokens, config: ModelConfig, adapters=None) -> np.ndarray:
    """Single-example convenience wrapper over numpy inputs."""
    zt = torch.as_tensor(np.asarray(z), dtype=config.torch_dtype)[None]
    tv = torch.as_tensor(np.asarray(t_vec), dtype=config.torch_dtype)[None]
    ids = torch.as_tensor(tokens.ids)[None]
    mask = torch.as_tensor(tokens.mask)[None]
    with torch.no_grad():
        out = forward_batch(params, zt, tv, ids, mask, config, adapters)
    return out[0].numpy()


# ------------------------------------------------------------- grad check

def flow_loss_torch(v_hat: torch.Tensor, target: torch.Tensor,
                    loss_mask: torch.Tensor) -> torch.Tensor:
    """MSE over unmasked frame entries (see training.flow_loss)."""
    if v_hat.shape != target.shape:
        raise ShapeError(f"{tuple(v_hat.shape)} vs {tuple(target.shape)}")
    mask = loss_mask.to(v_hat.dtype)
    while mask.dim() < v_hat.dim():
        mask = mask[..., None]
    per_frame_elems = v_hat[0, 0].numel() if v_hat.dim() == 5 else v_hat[0].numel()
    denom = mask.sum() * per_frame_elems
    return ((v_hat - target) ** 2 * mask).sum() / denom


def _probe_example(config: ModelConfig, rng: np.random.Generator):
    """One synthetic conditional training example in the model dtype."""
    from anchorflow.prompts import sample_prompt, serialize_prompt, tokenize

    video = rng.random((config.frames, config.image_size, config.image_size, config.channels))
    tokens = tokenize(serialize_prompt(sample_prompt(rng)))
    data = 2.0 * video - 1.0
    t = rng.random()
    eps = rng.standard_normal(data.shape)
    z_t = (1.0 - t) * data + t * eps
    target = data - eps
    t_vec = np.full(config.frames, t)
    return z_t, t_vec, target, tokens


GRAD_DENOM_FLOOR = 1e-6
# The floor must exceed the finite-difference noise floor eps*|loss|/(2h)
# (~2e-11 here) divided by the 1e-4 gate, otherwise coordinates whose true
# gradient is ~1e-9 fail the gate even though autograd and the numeric
# estimate agree to 2e-11 absolute.


def grad_check(params, probe_seed: int, config: ModelConfig, n_coords: int = 2048,
               corrupt: tuple[str, int] | None = None) -> float:
    """Max relative error between autograd and central finite differences of
    the flow loss on one random example, over <= n_coords random parameter
    coordinates. Requires double precision. `corrupt` doubles one analytic
    gradient entry to prove the check can fail."""
    if config.dtype != "float64":
        raise ValueError("grad_check requires a float64 config")
    rng = stream("gradcheck", probe_seed)
    z_t, t_vec, target, tokens = _probe_example(config, rng)

    leaves = {k: v.detach().clone().requires_grad_(True) for k, v in params.items()}
    zt = torch.tensor(z_t, dtype=torch.float64)[None]
    tv = torch.tensor(t_vec, dtype=torch.float64)[None]
    tgt = torch.tensor(target, dtype=torch.float64)[None]
    ids = torch.as_tensor(tokens.ids)[None]
    mask = torch.as_tensor(tokens.mask)[None]
    ones = torch.ones(1, config.frames, dtype=torch.float64)

    def loss_value():
        return flow_loss_torch(forward_batch(leaves, zt, tv, ids, mask, config), tgt, ones)

    loss = loss_value()
    loss.backward()
    grads = {k: v.grad.detach().clone() for k, v in leaves.items()}
    if corrupt is not None:
        grads[corrupt[0]].view(-1)[corrupt[1]] *= 2.0

    names = sorted(params)
    sizes = [params[n].numel() for n in names]
    offsets = np.cumsum([0] + sizes)
    total = offsets[-1]
    picks = rng.choice(total, size=min(n_coords, total), replace=False)
    if corrupt is not None:
        flat = offsets[names.index(corrupt[0])] + corrupt[1]
        picks = np.concatenate([[flat], picks])

    h = 1e-5
    max_rel = 0.0
    with torch.no_grad():
        for flat in picks:
            name_i = int(np.searchsorted(offsets, flat, side="right") - 1)
            name, idx = names[name_i], int(flat - offsets[name_i])
            slot = leaves[name].view(-1)
            orig = slot[idx].item()
            slot[idx] = orig + h
            lp = loss_value().item()
            slot[idx] = orig - h
            lm = loss_value().item()
            slot[idx] = orig
            gn = (lp - lm) / (2 * h)
            ga = grads[name].view(-1)[idx].item()
            rel = abs(ga - gn) / max(abs(ga), abs(gn), GRAD_DENOM_FLOOR)
            max_rel = max(max_rel, rel)
    return max_rel


# ------------------------------------------------------------ checkpoints

def save_checkpoint(path, config: ModelConfig, params=None, adapters=None,
                    extra: dict | None = None) -> None:
    """Base checkpoints carry params (and optionally adapters); adapter-only
    checkpoints carry just the LoRA tensors plus the base file hash."""
    tensors = {}
    if params is not None:
        for k, v in params.items():
            tensors["param/" + k] = v.detach().numpy() if torch.is_tensor(v) else np.asarray(v)
    if adapters is not None:
        for k, v in adapters.items():
            tensors["lora/" + k] = v.detach().numpy() if torch.is_tensor(v) else np.asarray(v)
    formats.write_checkpoint(path, asdict(config), tensors, extra=extra or {})


def load_checkpoint(path):
    """Returns (params|None, adapters|None, config, extra); validates every
    tensor shape against the embedded config."""
    cfg_dict, extra, tensors = formats.read_checkpoint(path)
    config = ModelConfig(**cfg_dict)
    shapes = param_shapes(config)
    params, adapters = {}, {}
    for name, arr in tensors.items():
        kind, _, base = name.partition("/")
        if kind == "param":
            if base not in shapes:
                raise FormatError(f"unexpected tensor {base!r}")
            if tuple(arr.shape) != shapes[base]:
                raise FormatError(
                    f"tensor {base!r} has shape {tuple(arr.shape)}, expected {shapes[base]}")
            params[base] = torch.tensor(arr, dtype=config.torch_dtype)
        elif kind == "lora":
            stem = base.removesuffix(".A").removesuffix(".B")
            if stem not in lora_target_names(config):
                raise FormatError(f"unexpected adapter {base!r}")
            adapters[base] = torch.tensor(arr, dtype=config.torch_dtype)
        else:
            raise FormatError(f"unexpected tensor group {kind!r}")
    if params and set(params) != set(shapes):
        missing = sorted(set(shapes) - set(params))
        raise FormatError(f"missing tensors {missing[:3]}")
    return params or None, adapters or None, config, extra


def file_hash(path) -> str:
    with open(path, "rb") as f:
        return hashlib.sha256(f.read()).hexdigest()


def check_adapter_base(lora_extra: dict, base_path) -> None:
    expected = lora_extra.get("base_hash")
    if expected is not None and expected != file_hash(base_path):
        raise HashMismatchError(
            f"adapters were trained against a different base checkpoint ({expected[:12]}...)")


def config_from_json(d: dict) -> ModelConfig:
    return ModelConfig(**d)


def config_key(config: ModelConfig) -> str:
    return hashlib.blake2b(
        json.dumps(asdict(config), sort_keys=True).encode(), digest_size=8).hexdigest()
