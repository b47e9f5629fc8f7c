"""Losses and metrics for completion training and evaluation."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx


@dataclass
class LossReport:
    cd: float
    style: float
    proj: float
    img2d: float
    total: float
    stage: str


def _check_nonempty(*clouds):
    for c in clouds:
        if c.shape[-2] == 0:
            raise ValueError("point cloud is empty")


def nearest(src, dst):
    """Index into ``dst`` of the nearest point for each row of ``src`` and the squared distance.

    Distances are formed from coordinate differences; ties go to the lowest index.
    """
    src, dst = np.asarray(src), np.asarray(dst)
    idx = np.empty(len(src), dtype=np.int64)
    dist = np.empty(len(src))
    step = max(1, 2 ** 20 // max(1, 3 * len(dst)))
    for s in range(0, len(src), step):
        diff = src[s:s + step, None, :] - dst[None, :, :]
        d = np.einsum("ijk,ijk->ij", diff, diff)
        i = np.argmin(d, axis=1)
        idx[s:s + step] = i
        dist[s:s + step] = d[np.arange(len(i)), i]
    return idx, dist


def mutual_nearest(a, b):
    """Nearest-neighbour indices a->b and b->a from one expanded distance matrix.

    Uses |a|^2 + |b|^2 - 2 a.b, so near-ties may resolve differently from
    :func:`nearest` at rounding level; exact duplicates still pick the lowest index.
    """
    d = (a * a).sum(axis=1)[:, None] + (b * b).sum(axis=1)[None, :] - 2.0 * (a @ b.T)
    return np.argmin(d, axis=1), np.argmin(d, axis=0)


def chamfer(p1, p2):
    """Summed squared-L2 chamfer distance, both directions.

    Accepts (N, 3) or batched (B, N, 3); batched inputs give a (B,) result.
    Gradients flow through the selected nearest neighbours.
    """
    p1, p2 = nx.as_tensor(p1), nx.as_tensor(p2)
    _check_nonempty(p1, p2)
    if p1.ndim == 2:
        return chamfer(nx.reshape(p1, (1,) + p1.shape), nx.reshape(p2, (1,) + p2.shape))[0]
    B = p1.shape[0]
    pairs = [mutual_nearest(p1.data[b], p2.data[b]) for b in range(B)]
    i12 = np.stack([p[0] for p in pairs])
    i21 = np.stack([p[1] for p in pairs])
    rows = np.arange(B)[:, None]
    d12 = p1 - p2[rows, i12]
    d21 = p2 - p1[rows, i21]
    return (d12 * d12).sum(axis=(1, 2)) + (d21 * d21).sum(axis=(1, 2))


def chamfer_metric(p1, p2):
    """Mean-per-point chamfer distance, reported x10^3."""
    p1, p2 = np.asarray(p1, dtype=np.float64), np.asarray(p2, dtype=np.float64)
    _check_nonempty(p1, p2)
    return 1e3 * (nearest(p1, p2)[1].mean() + nearest(p2, p1)[1].mean())


def fscore(p_out, p_gt, d=0.001, squared=True):
    """F-score at threshold ``d``; by default ``d`` bounds the squared distance."""
    if d <= 0:
        raise ValueError("threshold must be positive")
    p_out, p_gt = np.asarray(p_out, dtype=np.float64), np.asarray(p_gt, dtype=np.float64)
    thr = d if squared else d * d
    precision = float((nearest(p_out, p_gt)[1] <= thr).mean())
    recall = float((nearest(p_gt, p_out)[1] <= thr).mean())
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def gram(f):
    f = nx.as_tensor(f)
    return nx.matmul(nx.swapaxes(f, -1, -2), f)


def style_loss(f_i, f_p, f_i_x, f_p_x, n_p=None, c=None):
    """Gram mismatch between each modality's intra features and the other's cross features.

    Batched inputs (B, n, C) give a (B,) result. The denominator is n_p * C.
    """
    f_i, f_p, f_i_x, f_p_x = (nx.as_tensor(t) for t in (f_i, f_p, f_i_x, f_p_x))
    widths = {t.shape[-1] for t in (f_i, f_p, f_i_x, f_p_x)}
    if len(widths) != 1:
        raise ValueError(f"feature widths differ across modalities: {sorted(widths)}")
    n_p = f_p.shape[-2] if n_p is None else n_p
    c = f_p.shape[-1] if c is None else c
    d1 = gram(f_i) - gram(f_p_x)
    d2 = gram(f_p) - gram(f_i_x)
    return ((d1 * d1).sum(axis=(-2, -1)) + (d2 * d2).sum(axis=(-2, -1))) * (1.0 / (n_p * c))


def project(cloud, grid=32, sigma=1.5):
    """Top-down orthographic splat of points in [-1, 1]^2 onto a grid x grid image.

    Each point deposits a unit-mass Gaussian (``sigma`` in pixels); intensity is
    1 - exp(-mass). Row index follows y, column index follows x.
    """
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    cloud = nx.as_tensor(cloud)
    centers = np.arange(grid, dtype=cloud.data.dtype)
    px = (cloud[..., 0] + 1.0) * (grid / 2.0) - 0.5  # (..., N)
    py = (cloud[..., 1] + 1.0) * (grid / 2.0) - 0.5
    lead = px.shape
    dx = nx.reshape(px, lead + (1,)) - centers  # (..., N, G)
    dy = nx.reshape(py, lead + (1,)) - centers
    inv = -1.0 / (2 * sigma * sigma)
    gx = nx.exp(dx * dx * inv)
    gy = nx.exp(dy * dy * inv)
    mass = nx.matmul(nx.swapaxes(gy, -1, -2), gx) * (1.0 / (2 * np.pi * sigma * sigma))
    return 1.0 - nx.exp(-mass)


def _mse(a, b):
    a, b = nx.as_tensor(a), nx.as_tensor(b)
    if a.shape[-2:] != b.shape[-2:]:
        raise ValueError(f"image dims differ: {a.shape} vs {b.shape}")
    d = a - b
    return (d * d).mean(axis=(-2, -1))


def proj_loss(p_out, img_ref, grid=32, sigma=1.5):
    img_ref = nx.as_tensor(img_ref)
    if img_ref.shape[-2:] != (grid, grid):
        raise ValueError(f"reference image {img_ref.shape[-2:]} does not match grid {grid}")
    return _mse(project(p_out, grid, sigma), img_ref)


def img2d_loss(img_out, img_ref):
    return _mse(img_out, img_ref)


def loss_uni(cd, img2d, proj, weights=(1.0, 1.0, 1.0)):
    return weights[0] * cd + weights[1] * img2d + weights[2] * proj


def loss_cross(cd, img2d, style, weights=(1.0, 1.0, 1.0)):
    return weights[0] * cd + weights[1] * img2d + weights[2] * style
