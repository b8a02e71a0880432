"""Masked-autoencoder backbone over per-channel section sequences.

Block and parameter names follow the usual ViT/MAE layout (``blocks.i.attn.qkv``,
``norm1``, ``mlp.fc1`` ...) so that visual MAE checkpoints map onto them
without renaming inside blocks.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .errors import ConfigError


def tpe(p: int, dim: int) -> np.ndarray:
    """Temporal period embedding of section ``p`` as a ``p x 1`` grid position.

    First half: interleaved sin/cos of ``p / 10000**(2k/d)`` with ``d = dim/2``;
    second half: the same code at the constant column position 1.
    """
    if dim % 4:
        raise ConfigError(f"TPE dimension must be divisible by 4, got {dim}")
    d = dim // 2
    k = np.arange(dim // 4, dtype=np.float64)
    freq = 1.0 / 10000 ** (2 * k / d)
    out = np.empty(dim)
    out[0:d:2] = np.sin(p * freq)
    out[1:d:2] = np.cos(p * freq)
    out[d::2] = np.sin(freq)
    out[d + 1::2] = np.cos(freq)
    return out


def tpe_table(max_sections: int, dim: int) -> np.ndarray:
    """Rows ``0..max_sections``; row ``p`` is ``tpe(p, dim)``."""
    return np.stack([tpe(p, dim) for p in range(max_sections + 1)])


@dataclass(frozen=True)
class BackboneConfig:
    d_enc: int = 64
    d_dec: int = 32
    enc_depth: int = 2
    dec_depth: int = 1
    enc_heads: int = 4
    dec_heads: int = 4
    mlp_ratio: float = 4.0
    max_sections: int = 64
    tpe_learnable: bool = False
    kind: str = "mae"  # "mae" or "transformer" (plain encoder substitute)

    def __post_init__(self):
        for name, width, heads in (("encoder", self.d_enc, self.enc_heads),
                                   ("decoder", self.d_dec, self.dec_heads)):
            if width % 4:
                raise ConfigError(f"{name} width {width} must be divisible by 4")
            if width % heads:
                raise ConfigError(f"{name} width {width} not divisible by {heads} heads")
        if self.enc_depth < 1 or self.dec_depth < 1:
            raise ConfigError("encoder and decoder depth must be >= 1")
        if self.kind not in ("mae", "transformer"):
            raise ConfigError(f"unknown backbone kind {self.kind!r}")

    @classmethod
    def mae_base(cls, **overrides) -> "BackboneConfig":
        base = dict(d_enc=768, d_dec=512, enc_depth=12, dec_depth=8, enc_heads=12, dec_heads=16)
        base.update(overrides)
        return cls(**base)


class Attention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.scale = (dim // heads) ** -0.5
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        B, L, C = x.shape
        qkv = self.qkv(x).reshape(B, L, 3, self.heads, C // self.heads).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        attn = torch.softmax((q @ k.transpose(-2, -1)) * self.scale, dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(B, L, C)
        return self.proj(out)


class Mlp(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.act = nn.GELU()
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x):
        return self.fc2(self.act(self.fc1(x)))


class Block(nn.Module):
    """Pre-norm transformer block."""

    def __init__(self, dim: int, heads: int, mlp_ratio: float = 4.0):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim, eps=1e-6)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim, eps=1e-6)
        self.mlp = Mlp(dim, int(dim * mlp_ratio))

    def forward(self, x):
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


class Stack(nn.Module):
    def __init__(self, dim: int, depth: int, heads: int, mlp_ratio: float):
        super().__init__()
        self.blocks = nn.ModuleList([Block(dim, heads, mlp_ratio) for _ in range(depth)])
        self.norm = nn.LayerNorm(dim, eps=1e-6)

    def forward(self, x):
        for blk in self.blocks:
            x = blk(x)
        return self.norm(x)


def _init_weights(module):
    if isinstance(module, nn.Linear):
        nn.init.xavier_uniform_(module.weight)
        if module.bias is not None:
            nn.init.zeros_(module.bias)
    elif isinstance(module, nn.LayerNorm):
        nn.init.ones_(module.weight)
        nn.init.zeros_(module.bias)


def _gather(x: torch.Tensor, idx: torch.Tensor) -> torch.Tensor:
    """``x (S, L, C)``, ``idx (S, M)`` -> ``(S, M, C)``."""
    return torch.gather(x, 1, idx.unsqueeze(-1).expand(-1, -1, x.shape[-1]))


class _Backbone(nn.Module):
    def __init__(self, in_dim: int, cfg: BackboneConfig):
        super().__init__()
        self.cfg = cfg
        self.input_proj = nn.Linear(in_dim, cfg.d_enc, bias=False)
        enc = torch.as_tensor(tpe_table(cfg.max_sections, cfg.d_enc), dtype=torch.float32)
        dec = torch.as_tensor(tpe_table(cfg.max_sections, cfg.d_dec), dtype=torch.float32)
        if cfg.tpe_learnable:
            self.enc_tpe = nn.Parameter(enc)
            self.dec_tpe = nn.Parameter(dec)
        else:
            self.register_buffer("enc_tpe", enc)
            self.register_buffer("dec_tpe", dec)

    def _check(self, idx: torch.Tensor):
        if idx.numel() and int(idx.max()) > self.cfg.max_sections:
            raise ConfigError(
                f"section index {int(idx.max())} exceeds max_sections={self.cfg.max_sections}"
            )

    def embed_inputs(self, H_in: torch.Tensor) -> torch.Tensor:
        """``H_in (S, P, 2D)`` -> tokens ``(S, P, d_enc)`` with TPE of sections 1..P added."""
        P = H_in.shape[1]
        self._check(torch.tensor([P]))
        return self.input_proj(H_in) + self.enc_tpe[1:P + 1]


class MAEBackbone(_Backbone):
    """Encoder sees only visible sections; the decoder fills targets from a shared mask token."""

    def __init__(self, in_dim: int, cfg: BackboneConfig):
        super().__init__(in_dim, cfg)
        self.encoder = Stack(cfg.d_enc, cfg.enc_depth, cfg.enc_heads, cfg.mlp_ratio)
        self.decoder_embed = nn.Linear(cfg.d_enc, cfg.d_dec)
        self.mask_token = nn.Parameter(torch.zeros(cfg.d_dec))
        self.decoder = Stack(cfg.d_dec, cfg.dec_depth, cfg.dec_heads, cfg.mlp_ratio)
        self.apply(_init_weights)
        nn.init.normal_(self.mask_token, std=0.02)

    def encode(self, tokens: torch.Tensor, visible: torch.Tensor) -> torch.Tensor:
        """``tokens (S, P, d_enc)``, ``visible (S, V)`` 1-based -> latents ``(S, V, d_enc)``."""
        if visible.shape[-1] == 0:
            raise ValueError("at least one visible section is required")
        return self.encoder(_gather(tokens, visible - 1))

    def decode(self, latents: torch.Tensor, visible: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
        """Reconstruct ``targets (S, T)`` (1-based) -> ``(S, T, d_dec)``."""
        if targets.shape[-1] == 0:
            raise ValueError("at least one target section is required")
        self._check(targets)
        self._check(visible)
        S, T = targets.shape
        z = self.decoder_embed(latents) + self.dec_tpe[visible]
        m = self.mask_token.expand(S, T, -1) + self.dec_tpe[targets]
        out = self.decoder(torch.cat([z, m], dim=1))
        return out[:, visible.shape[1]:]

    def forward(self, H_in, visible, targets):
        tokens = self.embed_inputs(H_in)
        return self.decode(self.encode(tokens, visible), visible, targets)


class PlainTransformerBackbone(_Backbone):
    """Single encoder over all section positions; hidden and target positions
    enter as zero tokens plus their position code."""

    def __init__(self, in_dim: int, cfg: BackboneConfig):
        super().__init__(in_dim, cfg)
        self.encoder = Stack(cfg.d_enc, cfg.enc_depth + cfg.dec_depth, cfg.enc_heads, cfg.mlp_ratio)
        self.out_proj = nn.Linear(cfg.d_enc, cfg.d_dec)
        self.apply(_init_weights)

    def forward(self, H_in, visible, targets):
        self._check(targets)
        S, P, _ = H_in.shape
        tokens = self.input_proj(H_in)
        keep = torch.zeros(S, P, 1, dtype=tokens.dtype)
        keep.scatter_(1, (visible - 1).unsqueeze(-1), 1.0)
        hist = tokens * keep
        hist = hist + self.enc_tpe[1:P + 1]
        if bool((targets <= P).all()):
            out = self.encoder(hist)
            return self.out_proj(_gather(out, targets - 1))
        if bool((targets <= P).any()):
            raise ValueError("targets must be all history or all future sections")
        future = self.enc_tpe[targets]
        out = self.encoder(torch.cat([hist, future], dim=1))
        return self.out_proj(out[:, P:])


def build_backbone(in_dim: int, cfg: BackboneConfig) -> _Backbone:
    if cfg.kind == "mae":
        return MAEBackbone(in_dim, cfg)
    return PlainTransformerBackbone(in_dim, cfg)
