"""Block-Transformer layer: attention confined to fixed-size token blocks.

Each block's queries see the block's own tokens plus its context rows as
keys/values. Blocks never read each other's data, so the batched path
computes every block at once.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .numerics import Module, Tensor


@dataclass(frozen=True)
class BlockConfig:
    w_blk: int = 4
    heads: int = 4
    c: int = 64

    def __post_init__(self):
        if self.w_blk < 1:
            raise ValueError("w_blk must be >= 1")
        if self.c % self.heads:
            raise ValueError(f"c={self.c} not divisible by heads={self.heads}")


@dataclass
class Block:
    tokens: Tensor  # (w_blk, C)
    contexts: Tensor  # (w_blk, C)
    valid_mask: np.ndarray  # (w_blk,) bool


class AttnParams(Module):
    def __init__(self, c, rng=None, hidden_mult=4, dtype=nx.DTYPE):
        rng = np.random.default_rng(0) if rng is None else rng

        def w(shape):
            return nx.init_uniform(rng, shape, shape[0], dtype)

        def const(v, n):
            return Tensor(np.full(n, v, dtype=dtype), requires_grad=True)

        self.ln1_g, self.ln1_b = const(1.0, c), const(0.0, c)
        self.lnc_g, self.lnc_b = const(1.0, c), const(0.0, c)
        self.wq, self.wk, self.wv = w((c, c)), w((c, c)), w((c, c))
        # separate key/value maps for the context rows
        self.wk_ctx, self.wv_ctx = w((c, c)), w((c, c))
        self.wo, self.bo = w((c, c)), const(0.0, c)
        self.ln2_g, self.ln2_b = const(1.0, c), const(0.0, c)
        h = hidden_mult * c
        self.w1, self.b1 = w((c, h)), const(0.0, h)
        self.w2, self.b2 = w((h, c)), const(0.0, c)


def _pad_rows(x, total):
    L = x.shape[-2]
    if total == L:
        return x
    zeros = np.zeros(x.shape[:-2] + (total - L, x.shape[-1]), dtype=x.data.dtype)
    return nx.concat([x, zeros], axis=-2)


def block_partition(seq, ctx, cfg):
    seq, ctx = nx.as_tensor(seq), nx.as_tensor(ctx)
    if seq.shape != ctx.shape:
        raise ValueError(f"sequence {seq.shape} and context {ctx.shape} lengths differ")
    L, w = seq.shape[0], cfg.w_blk
    n_blocks = -(-L // w)
    seq_p, ctx_p = _pad_rows(seq, n_blocks * w), _pad_rows(ctx, n_blocks * w)
    valid = np.arange(n_blocks * w) < L
    return [Block(seq_p[i * w:(i + 1) * w], ctx_p[i * w:(i + 1) * w], valid[i * w:(i + 1) * w])
            for i in range(n_blocks)]


def _split_heads(x, heads):
    # (..., w, C) -> (..., heads, w, C/heads)
    *lead, w, c = x.shape
    x = nx.reshape(x, tuple(lead) + (w, heads, c // heads))
    return nx.swapaxes(x, -2, -3)


def _merge_heads(x):
    x = nx.swapaxes(x, -2, -3)
    *lead, w, h, d = x.shape
    return nx.reshape(x, tuple(lead) + (w, h * d))


def _attend(tokens, contexts, valid, cfg, p, context_valid=None, return_weights=False):
    """tokens, contexts: (..., w, C); valid: (..., w) bool."""
    t = nx.layer_norm(tokens, p.ln1_g, p.ln1_b)
    cx = nx.layer_norm(contexts, p.lnc_g, p.lnc_b)
    q = _split_heads(nx.linear(t, p.wq), cfg.heads)
    k = nx.concat([nx.linear(t, p.wk), nx.linear(cx, p.wk_ctx)], axis=-2)
    v = nx.concat([nx.linear(t, p.wv), nx.linear(cx, p.wv_ctx)], axis=-2)
    k, v = _split_heads(k, cfg.heads), _split_heads(v, cfg.heads)
    scores = nx.matmul(q, nx.swapaxes(k, -1, -2)) * (1.0 / math.sqrt(cfg.c // cfg.heads))
    ctx_valid = valid if context_valid is None else context_valid
    key_mask = np.concatenate([valid, ctx_valid], axis=-1)[..., None, None, :]
    attn = nx.softmax(scores, axis=-1, mask=key_mask)
    mixed = _merge_heads(nx.matmul(attn, v))
    x = tokens + nx.linear(mixed, p.wo, p.bo)
    hid = nx.silu(nx.linear(nx.layer_norm(x, p.ln2_g, p.ln2_b), p.w1, p.b1))
    out = x + nx.linear(hid, p.w2, p.b2)
    if return_weights:
        return out, attn.data
    return out


def block_attention(block, cfg, params, context_valid=None):
    """Attention for one block; output rows at padded positions are meaningless."""
    return _attend(block.tokens, block.contexts, block.valid_mask, cfg, params, context_valid)


def attention_weights(block, cfg, params):
    return _attend(block.tokens, block.contexts, block.valid_mask, cfg, params,
                   return_weights=True)[1]


def block_layer(seq, ctx, cfg, params):
    """All blocks at once. seq, ctx: (..., L, C) -> (..., L, C)."""
    seq, ctx = nx.as_tensor(seq), nx.as_tensor(ctx)
    if seq.shape != ctx.shape:
        raise ValueError(f"sequence {seq.shape} and context {ctx.shape} lengths differ")
    *lead, L, C = seq.shape
    w = cfg.w_blk
    n_blocks = -(-L // w)
    total = n_blocks * w
    shape = tuple(lead) + (n_blocks, w, C)
    tok = nx.reshape(_pad_rows(seq, total), shape)
    cx = nx.reshape(_pad_rows(ctx, total), shape)
    valid = (np.arange(total) < L).reshape(n_blocks, w)
    out = _attend(tok, cx, valid, cfg, params)
    out = nx.reshape(out, tuple(lead) + (total, C))
    return out if total == L else out[..., :L, :]


def block_layer_sequential(seq, ctx, cfg, params):
    """Reference path: one block at a time, valid rows concatenated."""
    outs = []
    for blk in block_partition(seq, ctx, cfg):
        out = block_attention(blk, cfg, params)
        outs.append(out[np.flatnonzero(blk.valid_mask)])
    return nx.concat(outs, axis=0)


def full_attention(q, k, v, row_chunk=1024):
    """Unrestricted softmax(q k^T / sqrt(d)) v over the whole sequence (no grad).

    Rows are processed in chunks to bound memory; MACs are tallied as computed.
    """
    L, d = q.shape
    out = np.empty_like(v)
    scale = 1.0 / math.sqrt(d)
    for s in range(0, L, row_chunk):
        scores = (q[s:s + row_chunk] @ k.T) * scale
        nx._tally(scores.size * d)
        scores -= scores.max(axis=1, keepdims=True)
        np.exp(scores, out=scores)
        scores /= scores.sum(axis=1, keepdims=True)
        out[s:s + row_chunk] = scores @ v
        nx._tally(scores.shape[0] * L * v.shape[1])
    return out
