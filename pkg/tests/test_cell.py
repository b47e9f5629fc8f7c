import numpy as np
import pytest

from mambatron import numerics as nx
from mambatron.blockattn import BlockConfig, block_layer
from mambatron.cell import CellParams, Encoder, cell_no_blocktr, mambatron_forward
from mambatron.numerics import Tensor
from mambatron.ssm import bidirectional_context


def _cell(rng, L=8, c=8, w=4, heads=2):
    return BlockConfig(w, heads, c), CellParams(c, 4, rng, max_len=64), rng.normal(size=(L, c))


def test_single_block_composition(rng):
    cfg, p, x = _cell(rng, L=4)
    gcp = rng.normal(size=(4, 8))
    ctx = bidirectional_context(Tensor(x), p.mamba.fwd, p.mamba.bwd, p.mamba.w_fuse, p.mamba.b_fuse).data + gcp
    expect = block_layer(x, ctx, cfg, p.attn).data
    assert np.array_equal(mambatron_forward(x, p, cfg, gcp).data, expect)


def test_zero_gcp_and_positions(rng):
    cfg, p, x = _cell(rng, L=10)
    p.pos.data[:] = 0.0
    ctx = p.mamba(Tensor(x))
    expect = block_layer(x, ctx, cfg, p.attn).data
    assert np.array_equal(mambatron_forward(x, p, cfg).data, expect)
    assert np.array_equal(mambatron_forward(x, p, cfg, np.zeros_like(x)).data, expect)


def test_no_blocktr_definition(rng):
    cfg, p, x = _cell(rng)
    gcp = rng.normal(size=x.shape)
    assert np.array_equal(cell_no_blocktr(x, p, gcp).data, p.mamba(Tensor(x)).data + gcp)
    assert not np.allclose(cell_no_blocktr(x, p, gcp).data, mambatron_forward(x, p, cfg, gcp).data)


def test_every_output_depends_on_every_input(rng):
    cfg, p, x = _cell(rng, L=12)
    eps = 1e-6
    base_shape = (12, 12)
    J = np.zeros(base_shape)
    for j in range(12):
        xp, xm = x.copy(), x.copy()
        xp[j] += eps
        xm[j] -= eps
        d = (mambatron_forward(xp, p, cfg).data - mambatron_forward(xm, p, cfg).data) / (2 * eps)
        J[:, j] = np.abs(d).sum(axis=1)
    assert np.all(J > 1e-10)


def test_encoder_shape(rng):
    enc = Encoder(3, 8, 4, rng, max_len=32)
    x = rng.normal(size=(2, 11, 8))
    assert enc(Tensor(x), BlockConfig(4, 2, 8)).shape == (2, 11, 8)
    assert enc(Tensor(x), BlockConfig(4, 2, 8), use_blocktr=False).shape == (2, 11, 8)


def test_gcp_length_mismatch(rng):
    cfg, p, x = _cell(rng)
    with pytest.raises(ValueError):
        mambatron_forward(x, p, cfg, np.zeros((3, 8)))
    with pytest.raises(ValueError):
        mambatron_forward(rng.normal(size=(65, 8)), p, cfg)


def test_full_cell_gradient(rng):
    c, L = 16, 16
    cfg = BlockConfig(4, 2, c)
    p = CellParams(c, 4, rng, max_len=L)
    x, gcp = Tensor(rng.normal(size=(L, c))), rng.normal(size=(L, c)) * 0.1
    wgt = rng.normal(size=(L, c))
    assert nx.finite_diff_check(lambda: (mambatron_forward(x, p, cfg, gcp) * wgt).sum(),
                                [x] + p.parameters()) <= 1e-4


def test_ablated_path_gradient(rng):
    cfg, p, x = _cell(rng)
    xt = Tensor(x)
    wgt = rng.normal(size=x.shape)
    params = [xt] + p.mamba.parameters() + [p.pos]
    assert nx.finite_diff_check(lambda: (cell_no_blocktr(xt, p) * wgt).sum(), params) <= 1e-5
