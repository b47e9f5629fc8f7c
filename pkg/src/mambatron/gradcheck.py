"""Finite-difference checks for every differentiable component, smallest sizes first."""
from __future__ import annotations

import numpy as np

from . import numerics as nx
from . import objective as obj
from .blockattn import AttnParams, BlockConfig, block_layer
from .cell import CellParams, cell_no_blocktr, mambatron_forward
from .config import RunConfig
from .data import gen_shape
from .model import MambaTronNet, forward, group_cloud, prepare_batch
from .ssm import MambaLayer, chunked_scan

TOLERANCE = 1e-4


def tiny_config(**kw):
    """n_p = n_i = 4, C = 8, one cell per encoder."""
    base = dict(c=8, n_state=4, depth=1, depth_cross=1, w_blk=4, heads=2, n_points=32, n_partial=16,
                n_p=4, k=4, out_k=4, grid=8, patch=4, sigma=1.0, mask_ratio=0.25, seed=3)
    base.update(kw)
    return RunConfig(**base)


def _t(rng, *shape, scale=1.0):
    return nx.Tensor(rng.normal(0.0, scale, size=shape))


def check_numerics(rng):
    x = _t(rng, 3, 5)
    w1, b1 = _t(rng, 5, 4), _t(rng, 4)
    w2 = _t(rng, 4, 4)
    g, b = _t(rng, 4), _t(rng, 4)
    pos = nx.Tensor(rng.uniform(0.5, 2.0, size=(3, 4)))

    def fn():
        h = nx.layer_norm(nx.silu(nx.linear(x, w1, b1)), g, b)
        s = nx.softmax(nx.matmul(h, w2), axis=-1)
        t = nx.tanh(h) * nx.sigmoid(s) + nx.softplus(h) / pos + nx.log(pos) * nx.sqrt(pos)
        u = nx.concat([t, nx.exp(s * 0.5)], axis=0)
        return (nx.amax(u, axis=1) ** 2).sum() + (u[1:4, ::2] * u[0:3, 1::2]).sum()
    return nx.finite_diff_check(fn, [x, w1, b1, w2, g, b, pos])


def check_ssm(rng):
    x = _t(rng, 2, 6, 4)
    layer = MambaLayer(4, 3, rng)
    wgt = _t(rng, 2, 6, 4)
    err = nx.finite_diff_check(lambda: (layer(x) * wgt).sum(), [x] + layer.parameters())
    err = max(err, nx.finite_diff_check(lambda: (layer(x, zoh_b=True) * wgt).sum(), [x] + layer.parameters()))
    err = max(err, nx.finite_diff_check(lambda: (chunked_scan(x, layer.fwd, 4) * wgt).sum(),
                                        [x] + layer.fwd.parameters()))
    return err


def check_blockattn(rng):
    cfg = BlockConfig(w_blk=3, heads=2, c=4)
    p = AttnParams(4, rng)
    seq, ctx = _t(rng, 7, 4), _t(rng, 7, 4)
    wgt = _t(rng, 7, 4)
    return nx.finite_diff_check(lambda: (block_layer(seq, ctx, cfg, p) * wgt).sum(),
                                [seq, ctx] + p.parameters())


def check_cell(rng, L=16, c=16):
    cfg = BlockConfig(w_blk=4, heads=2, c=c)
    cell = CellParams(c, 4, rng, max_len=L)
    x, gcp = _t(rng, L, c), _t(rng, L, c, scale=0.1)
    wgt = _t(rng, L, c)
    err = nx.finite_diff_check(lambda: (mambatron_forward(x, cell, cfg, gcp) * wgt).sum(),
                               [x] + cell.parameters())
    err = max(err, nx.finite_diff_check(lambda: (cell_no_blocktr(x, cell) * wgt).sum(),
                                        [x] + cell.mamba.parameters() + [cell.pos]))
    return err


def check_objective(rng):
    p1 = nx.Tensor(rng.uniform(-0.8, 0.8, size=(9, 3)))
    p2 = nx.Tensor(rng.uniform(-0.8, 0.8, size=(7, 3)))
    err = nx.finite_diff_check(lambda: obj.chamfer(p1, p2), [p1, p2])
    fs = [_t(rng, n, 3) for n in (5, 4, 5, 4)]
    err = max(err, nx.finite_diff_check(lambda: obj.style_loss(*fs), fs))
    ref = nx.Tensor(rng.uniform(0, 1, size=(8, 8)))
    err = max(err, nx.finite_diff_check(lambda: obj.proj_loss(p1, ref, grid=8, sigma=1.0), [p1]))
    img = nx.Tensor(rng.uniform(0, 1, size=(8, 8)))
    err = max(err, nx.finite_diff_check(lambda: obj.img2d_loss(img, ref), [img]))
    return err


def _model_loss(model, batch, gts, views, stage):
    from .train import stage_losses
    ratio = model.cfg.mask_ratio if stage == "uni" else 0.0
    out = forward(model, batch, ratio, [11])
    total, _ = stage_losses(model, out, gts, views, stage)
    return total


def check_model(rng, stages=("uni", "cross"), exhaustive=False):
    """Whole tiny model. Tensors up to 16 entries are checked entry by entry and
    larger ones along random directions, unless ``exhaustive``."""
    cfg = tiny_config()
    model = MambaTronNet(cfg)
    # zero-initialised decoder biases make masked rows decode to exact duplicate
    # points, where the chamfer assignment has a kink; step to a generic point
    for p in model.parameters():
        p.data = p.data + rng.normal(0.0, 0.05, size=p.shape)
    s = gen_shape("box", 5, cfg.n_points, cfg.n_partial, cfg.grid, cfg.sigma)
    err = 0.0
    for stage in stages:
        cloud = s.gt_cloud if stage == "uni" else s.partial_cloud
        batch = prepare_batch(model, [group_cloud(cloud, cfg)], s.view[None])
        fn = lambda: _model_loss(model, batch, s.gt_cloud[None], s.view[None], stage)  # noqa: E731
        params = model.parameters()
        small = params if exhaustive else [p for p in params if p.data.size <= 16]
        err = max(err, nx.finite_diff_check(fn, small))
        if not exhaustive:
            big = [p for p in params if p.data.size > 16]
            err = max(err, nx.directional_diff_check(fn, big, n_dirs=6, seed=int(rng.integers(1 << 30))))
    return err


CHECKS = {
    "numerics": check_numerics,
    "ssm": check_ssm,
    "blockattn": check_blockattn,
    "cell": check_cell,
    "objective": check_objective,
    "model": check_model,
}


def run_checks(names=None, seed=0):
    """{name: max relative error}."""
    names = list(CHECKS) if names is None else names
    results = {}
    for name in names:
        if name not in CHECKS:
            raise KeyError(f"unknown module {name!r}; choose from {sorted(CHECKS)}")
        results[name] = CHECKS[name](np.random.default_rng(seed))
    return results
