"""Two-stage training, evaluation and checkpoint round-trips."""
from __future__ import annotations

import logging
import math

import numpy as np

from . import geometry as geo
from . import numerics as nx
from . import objective as obj
from .config import RunConfig, format_value
from .formats import CheckpointError, decode_checkpoint, encode_checkpoint
from .model import MambaTronNet, forward, group_cloud, prepare_batch

log = logging.getLogger(__name__)

STAGES = ("uni", "cross")
METRIC_COLUMNS = ("epoch", "lr", "total", "cd", "img2d", "proj", "style")
EVAL_COLUMNS = ("class", "cd_e3", "fscore", "baseline_cd_e3", "n")


class PreconditionError(RuntimeError):
    pass


# checkpoints

def checkpoint_bytes(model, stage):
    pairs = [(k, format_value(v)) for k, v in model.cfg.items()] + [("stage", stage)]
    tensors = [(name, p.data) for name, p in model.named_parameters()]
    tensors += [("apr.matrix", model.affine.matrix), ("apr.translation", model.affine.translation)]
    return encode_checkpoint(pairs, tensors)


def save_checkpoint(path, model, stage):
    with open(path, "wb") as fh:
        fh.write(checkpoint_bytes(model, stage))


def model_from_bytes(raw):
    pairs, tensors = decode_checkpoint(raw)
    meta = dict(pairs)
    stage = meta.pop("stage", None)
    cfg = RunConfig.from_pairs(meta.items())
    model = MambaTronNet(cfg)
    params = dict(model.named_parameters())
    arrays = dict(tensors)
    for name, p in params.items():
        if name not in arrays:
            raise CheckpointError(f"checkpoint lacks tensor {name!r}")
        if arrays[name].shape != p.shape:
            raise CheckpointError(f"tensor {name!r}: shape {arrays[name].shape} != {p.shape}")
        p.data = arrays[name].copy()
    model.affine = geo.AffineParams(arrays["apr.matrix"].copy(), arrays["apr.translation"].copy())
    return model, stage


def load_checkpoint(path):
    with open(path, "rb") as fh:
        return model_from_bytes(fh.read())


# training

def _inputs(samples, stage):
    return [s.gt_cloud if stage == "uni" else s.partial_cloud for s in samples]


def stage_losses(model, out, gt, views, stage):
    """Per-batch mean of every loss component plus the weighted total."""
    cfg = model.cfg
    comps = {"cd": obj.chamfer(out.points, gt).mean(),
             "img2d": obj.img2d_loss(out.image, views).mean()}
    use_aux = not cfg.no_style_proj
    if stage == "uni":
        comps["proj"] = obj.proj_loss(out.points, views, cfg.grid, cfg.sigma).mean() if use_aux else None
        total = obj.loss_uni(comps["cd"], comps["img2d"], comps["proj"] if use_aux else 0.0,
                             (cfg.w_cd, cfg.w_2d, cfg.w_proj))
    else:
        f = out.features
        use_style = use_aux and not cfg.no_crossmodal
        comps["style"] = obj.style_loss(f.f_i, f.f_p, f.f_i_x, f.f_p_x).mean() if use_style else None
        total = obj.loss_cross(comps["cd"], comps["img2d"], comps["style"] if use_style else 0.0,
                               (cfg.w_cd, cfg.w_2d, cfg.w_style))
    return nx.as_tensor(total), comps


def _evolve(model, grouped, epoch):
    cfg = model.cfg
    if cfg.no_apr or cfg.no_affine or cfg.affine_steps == 0:
        return
    batch = [g.keypoints for g in grouped]
    model.affine = geo.evolve_affine(batch, model.affine, cfg.affine_steps, cfg.affine_candidates,
                                     seed=[cfg.seed, epoch], g=cfg.g)


def train_stage(cfg: RunConfig, stage, samples, init=None, epochs=None, on_epoch=None):
    """Train one stage; returns (model, per-epoch metric rows).

    The cross stage continues from ``init`` (a model trained by the uni stage).
    """
    if stage not in STAGES:
        raise ValueError(f"unknown stage {stage!r}")
    if stage == "cross" and init is None:
        raise PreconditionError("cross-modal training needs a uni-stage checkpoint")
    model = MambaTronNet(cfg) if init is None else init
    model.cfg = cfg if init is None else init.cfg
    cfg = model.cfg
    epochs = cfg.epochs if epochs is None else epochs
    grouped = [group_cloud(p, cfg) for p in _inputs(samples, stage)]
    gts = np.stack([s.gt_cloud for s in samples])
    views = np.stack([s.view for s in samples])
    params = model.parameters()
    opt = Optimizer(params, cfg)
    n = len(samples)
    bs = min(cfg.batch_size, n)
    steps_per_epoch = -(-n // bs)
    total_steps = max(1, epochs * steps_per_epoch)
    step = 0
    rows = []
    for epoch in range(epochs):
        _evolve(model, grouped, epoch)
        order = np.random.default_rng([cfg.seed, 7, epoch]).permutation(n)
        sums = dict.fromkeys(("total", "cd", "img2d", "proj", "style"), 0.0)
        lr = cfg.lr
        for s in range(0, n, bs):
            idx = order[s:s + bs]
            lr = cfg.lr * 0.5 * (1 + math.cos(math.pi * step / total_steps))
            batch = prepare_batch(model, [grouped[i] for i in idx], views[idx])
            ratio = cfg.mask_ratio if stage == "uni" else 0.0
            seeds = [cfg.seed * 1_000_003 + epoch * n + int(i) for i in idx]
            out = forward(model, batch, ratio, seeds)
            total, comps = stage_losses(model, out, gts[idx], views[idx], stage)
            model.zero_grad()
            nx.backward(total)
            opt.step(lr)
            w = len(idx) / n
            sums["total"] += w * float(total.data)
            for k, v in comps.items():
                if v is not None:
                    sums[k] += w * float(v.data)
            step += 1
        row = {"epoch": epoch, "lr": lr, **sums}
        rows.append(row)
        log.info("stage=%s epoch=%d total=%.6g cd=%.6g", stage, epoch, sums["total"], sums["cd"])
        if on_epoch is not None:
            on_epoch(row)
    return model, rows


class Optimizer:
    """Heavy-ball SGD or Adam, with optional global-norm gradient clipping."""

    def __init__(self, params, cfg):
        if cfg.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {cfg.optimizer!r}")
        self.params, self.cfg = params, cfg
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params] if cfg.optimizer == "adam" else None
        self.t = 0

    def step(self, lr):
        cfg = self.cfg
        grads = [np.zeros_like(p.data) if p.grad is None else p.grad for p in self.params]
        for g in grads:
            if not np.isfinite(g).all():
                raise FloatingPointError("non-finite gradient")
        if cfg.clip_norm > 0:
            norm = math.sqrt(sum(float((g * g).sum()) for g in grads))
            if norm > cfg.clip_norm:
                grads = [g * (cfg.clip_norm / norm) for g in grads]
        self.t += 1
        if self.v is None:
            for p, m, g in zip(self.params, self.m, grads):
                m *= cfg.momentum
                m += g
                p.data = p.data - lr * m
            return
        b1, b2 = cfg.momentum, 0.999
        c1, c2 = 1 - b1 ** self.t, 1 - b2 ** self.t
        for p, m, v, g in zip(self.params, self.m, self.v, grads):
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + 1e-8)


def metric_rows_to_table(rows):
    return [[r[c] for c in METRIC_COLUMNS] for r in rows]


# evaluation

def predict(model, samples, batch_size=64):
    """Completed clouds for the partial inputs, no masking."""
    cfg = model.cfg
    preds = []
    with nx.no_grad():
        for s in range(0, len(samples), batch_size):
            chunk = samples[s:s + batch_size]
            grouped = [group_cloud(x.partial_cloud, cfg) for x in chunk]
            batch = prepare_batch(model, grouped, np.stack([x.view for x in chunk]))
            preds.extend(forward(model, batch).points.data)
    return preds


def evaluate_predictions(preds, samples, d=0.001):
    """Per-class and average rows: class, cd_e3, fscore, baseline_cd_e3, n."""
    per = {}
    for pred, s in zip(preds, samples):
        rec = per.setdefault(s.class_id, [[], [], []])
        rec[0].append(obj.chamfer_metric(pred, s.gt_cloud))
        rec[1].append(obj.fscore(pred, s.gt_cloud, d))
        rec[2].append(obj.chamfer_metric(s.partial_cloud, s.gt_cloud))
    rows = []
    for cls, (cd, f, base) in per.items():
        rows.append([cls, float(np.mean(cd)), float(np.mean(f)), float(np.mean(base)), len(cd)])
    allv = [np.concatenate([per[c][i] for c in per]) for i in range(3)]
    rows.append(["average", float(np.mean(allv[0])), float(np.mean(allv[1])), float(np.mean(allv[2])),
                 len(allv[0])])
    return rows


def evaluate(model, samples):
    cfg = model.cfg
    for s in samples:
        if s.gt_cloud.shape[1] != 3 or len(s.partial_cloud) < max(cfg.n_p, cfg.k):
            raise CheckpointError("checkpoint configuration does not match dataset dimensions")
        if s.view.shape != (cfg.grid, cfg.grid):
            raise CheckpointError(f"view {s.view.shape} does not match grid {cfg.grid}")
    return evaluate_predictions(predict(model, samples), samples, cfg.fscore_d)
