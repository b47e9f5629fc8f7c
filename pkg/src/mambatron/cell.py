"""The MambaTron cell and stacks of cells."""
from __future__ import annotations

import numpy as np

from . import numerics as nx
from .blockattn import AttnParams, BlockConfig, block_layer
from .numerics import Module, Tensor
from .ssm import MambaLayer


class CellParams(Module):
    def __init__(self, c, n_state=16, rng=None, max_len=256, dtype=nx.DTYPE):
        rng = np.random.default_rng(0) if rng is None else rng
        self.mamba = MambaLayer(c, n_state, rng, dtype=dtype)
        self.attn = AttnParams(c, rng, dtype=dtype)
        # stands in for GCP tokens on sequences without keypoints
        self.pos = Tensor(rng.normal(0.0, 0.02, size=(max_len, c)).astype(dtype), requires_grad=True)


def _context(tokens, params, gcp, chunk=None):
    tokens = nx.as_tensor(tokens)
    ctx = params.mamba(tokens, chunk=chunk)
    L = tokens.shape[-2]
    if gcp is None:
        if L > params.pos.shape[0]:
            raise ValueError(f"sequence length {L} exceeds position table {params.pos.shape[0]}")
        return ctx + params.pos[:L]
    gcp = nx.as_tensor(gcp)
    if gcp.shape[-2] != L:
        raise ValueError(f"gcp length {gcp.shape[-2]} != token length {L}")
    return ctx + gcp


def mambatron_forward(tokens, params, cfg: BlockConfig, gcp=None, chunk=None):
    """Bidirectional Mamba context (+GCP) fed as block contexts to the Block-Transformer."""
    ctx = _context(tokens, params, gcp, chunk)
    return block_layer(tokens, ctx, cfg, params.attn)


def cell_no_blocktr(tokens, params, gcp=None, chunk=None):
    """Ablation: the GCP-augmented context states are the cell output."""
    return _context(tokens, params, gcp, chunk)


class Encoder(Module):
    """D cells applied in series with a residual around each."""

    def __init__(self, depth, c, n_state=16, rng=None, max_len=256, dtype=nx.DTYPE):
        rng = np.random.default_rng(0) if rng is None else rng
        self.cells = [CellParams(c, n_state, rng, max_len, dtype) for _ in range(depth)]

    def __call__(self, x, cfg, gcp=None, use_blocktr=True):
        for cell in self.cells:
            if use_blocktr:
                x = x + mambatron_forward(x, cell, cfg, gcp)
            else:
                x = x + cell_no_blocktr(x, cell, gcp)
        return x
