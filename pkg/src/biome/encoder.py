"""BioME transformer encoder.

Patch embedding followed by Llama-style pre-norm layers (grouped-query
attention with rotary positions, RMSNorm, SwiGLU MLP). Each layer carries
a FiLM conditioner that turns the MSAB side-channel vector into a
per-channel scale and shift, applied right after the attention residual.

The ops are plain functions over tensors; :class:`BioMEEncoder` owns the
parameters and routes its forward pass through :func:`encoder_forward`.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Mapping, Optional

import torch
from torch import Tensor, nn
from torch.nn import functional as F

from .dsp import PATCH

PATCH_DIM = PATCH * PATCH

# Fixed affine standardization of log-mel input before patch embedding.
MEL_MEAN = -5.0
MEL_STD = 3.5


@dataclass(frozen=True)
class EncoderConfig:
    n_layers: int = 12
    d_model: int = 192
    n_heads: int = 6
    n_kv_heads: int = 2
    mlp_hidden: int = 384
    msab_dim: int = 512
    rope_base: float = 10000.0
    size_tag: Optional[str] = None
    film: bool = True
    cls_token: bool = False
    norm_eps: float = 1e-6

    def __post_init__(self):
        if self.n_layers < 0:
            raise ValueError("n_layers must be >= 0")
        if self.d_model <= 0 or self.n_heads <= 0 or self.n_kv_heads <= 0:
            raise ValueError("d_model, n_heads and n_kv_heads must be positive")
        if self.n_heads % self.n_kv_heads:
            raise ValueError(f"n_heads={self.n_heads} not divisible by n_kv_heads={self.n_kv_heads}")
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.head_dim % 2:
            raise ValueError(f"head_dim={self.head_dim} must be even for rotary embeddings")
        if self.mlp_hidden <= 0 or self.msab_dim <= 0:
            raise ValueError("mlp_hidden and msab_dim must be positive")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    @property
    def kv_dim(self) -> int:
        return self.n_kv_heads * self.head_dim

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "EncoderConfig":
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


_SIZES = {
    # d_model, n_heads, n_kv_heads; MLP hidden = 2 * d_model
    "edge": (192, 6, 2),
    "small": (448, 8, 2),
    "base": (768, 12, 4),
}


def build_config(size_tag: str, **overrides) -> EncoderConfig:
    """Named BioME sizes: Edge (~6M params), Small (~26M), Base (~76M)."""
    key = size_tag.lower()
    if key not in _SIZES:
        raise ValueError(f"unknown size {size_tag!r}; expected one of Edge, Small, Base")
    d, h, kv = _SIZES[key]
    kw = dict(n_layers=12, d_model=d, n_heads=h, n_kv_heads=kv, mlp_hidden=2 * d, size_tag=key.capitalize())
    kw.update(overrides)
    return EncoderConfig(**kw)


# ---------------------------------------------------------------- functional ops


def embed_patches(patches: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    if patches.shape[-1] != weight.shape[1]:
        raise ValueError(f"patch length {patches.shape[-1]} != embedding input {weight.shape[1]}")
    return F.linear(patches, weight, bias)


def rope_rotate(x: Tensor, positions: Tensor, rope_base: float = 10000.0) -> Tensor:
    """Rotate channel pairs (2i, 2i+1) of ``x[..., n, head_dim]`` by pos * base^(-2i/head_dim)."""
    hd = x.shape[-1]
    if hd % 2:
        raise ValueError(f"rotary embedding needs an even head_dim, got {hd}")
    inv_freq = rope_base ** (-torch.arange(0, hd, 2, dtype=x.dtype, device=x.device) / hd)
    angle = positions.to(x.dtype)[:, None] * inv_freq[None, :]
    cos, sin = angle.cos(), angle.sin()
    even, odd = x[..., 0::2], x[..., 1::2]
    out = torch.stack((even * cos - odd * sin, even * sin + odd * cos), dim=-1)
    return out.flatten(-2)


def attention_scores(q: Tensor, k: Tensor) -> Tensor:
    """Softmax-normalized scores for q [..., H, n, hd] and k [..., H, m, hd]."""
    return torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(q.shape[-1]), dim=-1)


def gqa_attention(
    x: Tensor,
    cfg: EncoderConfig,
    wq: Tensor,
    wk: Tensor,
    wv: Tensor,
    wo: Tensor,
    positions: Optional[Tensor] = None,
    return_scores: bool = False,
):
    """Bidirectional grouped-query attention with RoPE on queries and keys.

    Query head ``j`` reads key/value head ``j // (n_heads // n_kv_heads)``.
    """
    if cfg.n_heads % cfg.n_kv_heads:
        raise ValueError("n_heads must be divisible by n_kv_heads")
    n, hd = x.shape[-2], cfg.head_dim
    if (wq.shape != (cfg.n_heads * hd, cfg.d_model) or wk.shape != (cfg.kv_dim, cfg.d_model)
            or wv.shape != wk.shape or wo.shape != (cfg.d_model, cfg.n_heads * hd)):
        raise ValueError("attention weight shapes do not match config")
    if positions is None:
        positions = torch.arange(n, device=x.device)
    lead = x.shape[:-2]
    q = F.linear(x, wq).view(*lead, n, cfg.n_heads, hd).transpose(-2, -3)
    k = F.linear(x, wk).view(*lead, n, cfg.n_kv_heads, hd).transpose(-2, -3)
    v = F.linear(x, wv).view(*lead, n, cfg.n_kv_heads, hd).transpose(-2, -3)
    q = rope_rotate(q, positions, cfg.rope_base)
    k = rope_rotate(k, positions, cfg.rope_base)
    group = cfg.n_heads // cfg.n_kv_heads
    if group > 1:
        k = k.repeat_interleave(group, dim=-3)
        v = v.repeat_interleave(group, dim=-3)
    scores = attention_scores(q, k)
    out = (scores @ v).transpose(-2, -3).reshape(*lead, n, cfg.n_heads * hd)
    out = F.linear(out, wo)
    return (out, scores) if return_scores else out


def film_params(h: Tensor, w_gamma: Tensor, b_gamma: Tensor, w_beta: Tensor, b_beta: Tensor):
    if h.shape[-1] != w_gamma.shape[1]:
        raise ValueError(f"conditioning vector has {h.shape[-1]} dims, conditioner expects {w_gamma.shape[1]}")
    return F.linear(h, w_gamma, b_gamma), F.linear(h, w_beta, b_beta)


def film_condition(x: Tensor, h: Tensor, w_gamma, b_gamma, w_beta, b_beta) -> Tensor:
    """x' = gamma * x + beta with (gamma, beta) affine in h, shared by every token."""
    gamma, beta = film_params(h, w_gamma, b_gamma, w_beta, b_beta)
    if gamma.shape[-1] != x.shape[-1]:
        raise ValueError(f"FiLM width {gamma.shape[-1]} != token width {x.shape[-1]}")
    return gamma.unsqueeze(-2) * x + beta.unsqueeze(-2)


def rms_norm(x: Tensor, scale: Tensor, eps: float = 1e-6) -> Tensor:
    return x * torch.rsqrt(x.pow(2).mean(dim=-1, keepdim=True) + eps) * scale


def mlp_block(x: Tensor, w_gate: Tensor, w_up: Tensor, w_down: Tensor) -> Tensor:
    """SwiGLU: W_down(SiLU(W_gate x) * W_up x), no biases."""
    if w_gate.shape[1] != x.shape[-1] or w_down.shape[0] != x.shape[-1]:
        raise ValueError("MLP weight shapes do not match token width")
    return F.linear(F.silu(F.linear(x, w_gate)) * F.linear(x, w_up), w_down)


def encoder_forward(
    patches: Tensor,
    h: Optional[Tensor],
    cfg: EncoderConfig,
    weights: Mapping[str, Tensor],
    condition: bool = True,
) -> list[Tensor]:
    """Run the encoder and return the activation after every layer.

    ``patches`` is [..., n, 256]; ``h`` is [..., msab_dim] or None. With
    ``condition=False`` (or no ``h``) the FiLM conditioners are skipped,
    which gives the ablated, MSAB-free model on the same weights. The final
    RMSNorm is folded into the last recorded activation. A 0-layer config
    returns just the embedded patches.
    """
    w = weights
    x = embed_patches(patches, w["patch_embed.weight"], w["patch_embed.bias"])
    if cfg.cls_token:
        cls = w["cls_token"].expand(*x.shape[:-2], 1, cfg.d_model)
        x = torch.cat([cls, x], dim=-2)
    if cfg.n_layers == 0:
        return [x]
    positions = torch.arange(x.shape[-2], device=x.device)
    use_film = condition and cfg.film and h is not None
    out = []
    for i in range(cfg.n_layers):
        p = f"layers.{i}."
        a = rms_norm(x, w[p + "attn_norm.weight"], cfg.norm_eps)
        x = x + gqa_attention(
            a, cfg, w[p + "attn.wq.weight"], w[p + "attn.wk.weight"], w[p + "attn.wv.weight"],
            w[p + "attn.wo.weight"], positions,
        )
        if use_film:
            x = film_condition(
                x, h, w[p + "film.gamma.weight"], w[p + "film.gamma.bias"],
                w[p + "film.beta.weight"], w[p + "film.beta.bias"],
            )
        m = rms_norm(x, w[p + "mlp_norm.weight"], cfg.norm_eps)
        x = x + mlp_block(m, w[p + "mlp.gate.weight"], w[p + "mlp.up.weight"], w[p + "mlp.down.weight"])
        out.append(x)
    out[-1] = rms_norm(x, w["final_norm.weight"], cfg.norm_eps)
    return out


# ---------------------------------------------------------------- modules


class RMSNorm(nn.Module):
    def __init__(self, dim: int, eps: float = 1e-6):
        super().__init__()
        self.eps = eps
        self.weight = nn.Parameter(torch.ones(dim))

    def forward(self, x):
        return rms_norm(x, self.weight, self.eps)


class GroupedQueryAttention(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        self.wq = nn.Linear(cfg.d_model, cfg.n_heads * cfg.head_dim, bias=False)
        self.wk = nn.Linear(cfg.d_model, cfg.kv_dim, bias=False)
        self.wv = nn.Linear(cfg.d_model, cfg.kv_dim, bias=False)
        self.wo = nn.Linear(cfg.n_heads * cfg.head_dim, cfg.d_model, bias=False)

    def forward(self, x, positions=None):
        return gqa_attention(x, self.cfg, self.wq.weight, self.wk.weight, self.wv.weight, self.wo.weight, positions)


class FiLM(nn.Module):
    """Conditioner: gamma/beta heads from the MSAB vector, identity at init."""

    def __init__(self, cond_dim: int, dim: int):
        super().__init__()
        self.gamma = nn.Linear(cond_dim, dim)
        self.beta = nn.Linear(cond_dim, dim)
        self.reset_identity()

    def reset_identity(self):
        nn.init.zeros_(self.gamma.weight)
        nn.init.ones_(self.gamma.bias)
        nn.init.zeros_(self.beta.weight)
        nn.init.zeros_(self.beta.bias)

    def forward(self, x, h):
        return film_condition(x, h, self.gamma.weight, self.gamma.bias, self.beta.weight, self.beta.bias)


class SwiGLU(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.gate = nn.Linear(dim, hidden, bias=False)
        self.up = nn.Linear(dim, hidden, bias=False)
        self.down = nn.Linear(hidden, dim, bias=False)

    def forward(self, x):
        return mlp_block(x, self.gate.weight, self.up.weight, self.down.weight)


class EncoderLayer(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.attn_norm = RMSNorm(cfg.d_model, cfg.norm_eps)
        self.attn = GroupedQueryAttention(cfg)
        if cfg.film:
            self.film = FiLM(cfg.msab_dim, cfg.d_model)
        self.mlp_norm = RMSNorm(cfg.d_model, cfg.norm_eps)
        self.mlp = SwiGLU(cfg.d_model, cfg.mlp_hidden)


class BioMEEncoder(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        self.patch_embed = nn.Linear(PATCH_DIM, cfg.d_model)
        if cfg.cls_token:
            self.cls_token = nn.Parameter(torch.zeros(cfg.d_model))
        self.layers = nn.ModuleList(EncoderLayer(cfg) for _ in range(cfg.n_layers))
        self.final_norm = RMSNorm(cfg.d_model, cfg.norm_eps)

    def weights(self) -> dict[str, Tensor]:
        return dict(self.named_parameters())

    def forward(self, patches: Tensor, h: Optional[Tensor] = None, condition: bool = True) -> list[Tensor]:
        return encoder_forward(patches, h, self.cfg, self.weights(), condition=condition)

    def forward_mel(self, mel: Tensor, h: Optional[Tensor] = None, condition: bool = True) -> list[Tensor]:
        """Standardize a log-mel tensor [..., n_mels, n_frames], patchify and encode."""
        return self(patchify_tensor(normalize_mel(mel)), h, condition)

    def embed(self, patches: Tensor, h: Optional[Tensor] = None, pooling: str = "mean", condition: bool = True):
        return pool(self(patches, h, condition)[-1], pooling, self.cfg.cls_token)


def normalize_mel(mel: Tensor) -> Tensor:
    return (mel - MEL_MEAN) / (2.0 * MEL_STD)


def patchify_tensor(mel: Tensor) -> Tensor:
    """Torch twin of :func:`biome.dsp.patchify` over [..., n_mels, n_frames]."""
    *lead, n_mels, n_frames = mel.shape
    fp, tp = n_mels // PATCH, n_frames // PATCH
    if fp == 0 or tp == 0:
        raise ValueError(f"mel of shape {tuple(mel.shape[-2:])} is smaller than one patch")
    x = mel[..., : fp * PATCH, : tp * PATCH].reshape(*lead, fp, PATCH, tp, PATCH)
    nd = len(lead)
    x = x.permute(*range(nd), nd + 2, nd, nd + 1, nd + 3)
    return x.reshape(*lead, tp * fp, PATCH_DIM)


def pool(tokens: Tensor, pooling: str = "mean", has_cls: bool = False) -> Tensor:
    if pooling == "mean":
        return (tokens[..., 1:, :] if has_cls else tokens).mean(dim=-2)
    if pooling == "cls":
        if not has_cls:
            raise ValueError("cls pooling needs a config with cls_token=True")
        return tokens[..., 0, :]
    raise ValueError(f"unknown pooling {pooling!r}")
