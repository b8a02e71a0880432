"""Synthetic checkpoints laid out like a released visual MAE (ViT) model.

Names and shapes follow the standard MAE pretraining module (patch
embedding, class token, fixed position tables, ``blocks.i`` encoder,
``decoder_blocks.i`` decoder, pixel prediction head). Values are random.
"""

from __future__ import annotations

import numpy as np
import torch


def _block(prefix, dim, hidden, rng, out):
    f = lambda *s: (rng.standard_normal(s) * 0.02).astype(np.float32)
    out[f"{prefix}.norm1.weight"] = np.ones(dim, np.float32)
    out[f"{prefix}.norm1.bias"] = np.zeros(dim, np.float32)
    out[f"{prefix}.attn.qkv.weight"] = f(3 * dim, dim)
    out[f"{prefix}.attn.qkv.bias"] = f(3 * dim)
    out[f"{prefix}.attn.proj.weight"] = f(dim, dim)
    out[f"{prefix}.attn.proj.bias"] = f(dim)
    out[f"{prefix}.norm2.weight"] = np.ones(dim, np.float32)
    out[f"{prefix}.norm2.bias"] = np.zeros(dim, np.float32)
    out[f"{prefix}.mlp.fc1.weight"] = f(hidden, dim)
    out[f"{prefix}.mlp.fc1.bias"] = f(hidden)
    out[f"{prefix}.mlp.fc2.weight"] = f(dim, hidden)
    out[f"{prefix}.mlp.fc2.bias"] = f(dim)


def mae_state(d_enc=768, d_dec=512, enc_depth=12, dec_depth=8, patch=16, img=224, mlp_ratio=4, seed=0,
              with_decoder=True) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    f = lambda *s: (rng.standard_normal(s) * 0.02).astype(np.float32)
    n_tok = (img // patch) ** 2 + 1
    out = {
        "cls_token": f(1, 1, d_enc),
        "pos_embed": f(1, n_tok, d_enc),
        "patch_embed.proj.weight": f(d_enc, 3, patch, patch),
        "patch_embed.proj.bias": f(d_enc),
    }
    for i in range(enc_depth):
        _block(f"blocks.{i}", d_enc, d_enc * mlp_ratio, rng, out)
    out["norm.weight"] = np.ones(d_enc, np.float32)
    out["norm.bias"] = np.zeros(d_enc, np.float32)
    if with_decoder:
        out["mask_token"] = f(1, 1, d_dec)
        out["decoder_embed.weight"] = f(d_dec, d_enc)
        out["decoder_embed.bias"] = f(d_dec)
        out["decoder_pos_embed"] = f(1, n_tok, d_dec)
        for i in range(dec_depth):
            _block(f"decoder_blocks.{i}", d_dec, d_dec * mlp_ratio, rng, out)
        out["decoder_norm.weight"] = np.ones(d_dec, np.float32)
        out["decoder_norm.bias"] = np.zeros(d_dec, np.float32)
        out["decoder_pred.weight"] = f(patch * patch * 3, d_dec)
        out["decoder_pred.bias"] = f(patch * patch * 3)
    return out


def write_torch_checkpoint(path, state) -> None:
    """``{"model": state}`` pickle, the layout of released MAE weights."""
    torch.save({"model": {k: torch.from_numpy(v) for k, v in state.items()}}, path)


EXCLUDED = ("cls_token", "pos_embed", "patch_embed.", "decoder_pos_embed", "decoder_pred.")


def n_excluded(state) -> int:
    return sum(1 for k in state if k.startswith(EXCLUDED))
