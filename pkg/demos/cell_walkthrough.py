"""One MambaTron cell on a random sequence.

Shows that a token outside a block still reaches every output through the
Mamba context, while the attention itself never crosses block boundaries.
"""
import numpy as np

from mambatron import numerics as nx
from mambatron.blockattn import BlockConfig, block_layer
from mambatron.cell import CellParams, mambatron_forward

rng = np.random.default_rng(0)
L, C = 12, 16
cfg = BlockConfig(w_blk=4, heads=2, c=C)
cell = CellParams(C, 8, rng, max_len=L)

x = rng.normal(size=(L, C))
gcp = rng.normal(scale=0.1, size=(L, C))
out = mambatron_forward(nx.Tensor(x), cell, cfg, nx.Tensor(gcp)).data

# nudge the last token and see which outputs move
x2 = x.copy()
x2[-1] += 1e-3
out2 = mambatron_forward(nx.Tensor(x2), cell, cfg, nx.Tensor(gcp)).data
print("full cell, |d out| per token:")
print(np.round(np.abs(out2 - out).max(axis=1), 8))

# with the contexts frozen, only the last block responds
ctx = nx.Tensor(rng.normal(size=(L, C)))
a = block_layer(nx.Tensor(x), ctx, cfg, cell.attn).data
b = block_layer(nx.Tensor(x2), ctx, cfg, cell.attn).data
print("block layer with fixed contexts, changed tokens:", np.flatnonzero((a != b).any(axis=1)))
