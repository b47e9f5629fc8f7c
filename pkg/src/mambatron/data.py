"""Synthetic primitive shapes with partial scans and top-down views."""
from __future__ import annotations

import csv
import os
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .formats import read_cloud, write_cloud, write_pgm
from .objective import project

CLASSES = ("sphere", "box", "cylinder", "cone")
TRAIN_PER_CLASS = 64
TEST_PER_CLASS = 16


@dataclass
class SyntheticSample:
    gt_cloud: np.ndarray  # (N, 3)
    partial_cloud: np.ndarray  # (N_partial, 3), rows of gt_cloud
    view: np.ndarray  # (grid, grid)
    class_id: str
    seed: int
    rotation: np.ndarray = None
    scale: float = 1.0


def _sphere(rng, n):
    v = rng.normal(size=(n, 3))
    return 0.8 * v / np.linalg.norm(v, axis=1, keepdims=True)


def _box(rng, n, half=(0.5, 0.4, 0.3)):
    half = np.asarray(half)
    # face areas: pairs of faces normal to each axis
    areas = np.array([half[1] * half[2], half[0] * half[2], half[0] * half[1]])
    axis = rng.choice(3, size=n, p=areas / areas.sum())
    pts = rng.uniform(-1, 1, size=(n, 3)) * half
    sign = rng.choice([-1.0, 1.0], size=n)
    pts[np.arange(n), axis] = sign * half[axis]
    return pts


def _cylinder(rng, n, r=0.4, h=0.5):
    side, cap = 2 * np.pi * r * 2 * h, np.pi * r * r
    on_side = rng.random(n) < side / (side + 2 * cap)
    theta = rng.uniform(0, 2 * np.pi, n)
    rad = np.where(on_side, r, r * np.sqrt(rng.random(n)))
    z = np.where(on_side, rng.uniform(-h, h, n), rng.choice([-h, h], size=n))
    return np.stack([rad * np.cos(theta), rad * np.sin(theta), z], axis=1)


def _cone(rng, n, r=0.5, h=1.0):
    slant = np.hypot(r, h)
    lateral, base = np.pi * r * slant, np.pi * r * r
    on_side = rng.random(n) < lateral / (lateral + base)
    theta = rng.uniform(0, 2 * np.pi, n)
    frac = np.sqrt(rng.random(n))  # area grows linearly with distance from apex / center
    rad = r * frac
    z = np.where(on_side, h / 2 - h * frac, -h / 2)
    return np.stack([rad * np.cos(theta), rad * np.sin(theta), z], axis=1)


_SURFACES = {"sphere": _sphere, "box": _box, "cylinder": _cylinder, "cone": _cone}


def random_rotation(rng):
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q *= np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def gen_shape(class_id, seed, n_points=512, n_partial=256, grid=32, sigma=1.5):
    if class_id not in _SURFACES:
        raise ValueError(f"unknown class {class_id!r}; expected one of {CLASSES}")
    rng = np.random.default_rng([seed, CLASSES.index(class_id)])
    rot = random_rotation(rng)
    scale = float(rng.uniform(0.8, 1.2))
    gt = scale * _SURFACES[class_id](rng, n_points) @ rot.T
    normal = rng.normal(size=3)
    normal /= np.linalg.norm(normal)
    side = np.flatnonzero((gt - gt.mean(axis=0)) @ normal > 0)
    if len(side) >= n_partial:
        keep = np.sort(rng.choice(side, size=n_partial, replace=False))
    else:
        extra = rng.choice(side, size=n_partial - len(side), replace=True)
        keep = np.concatenate([side, extra])
    with nx.no_grad():
        view = project(gt, grid, sigma).data
    return SyntheticSample(gt, gt[keep], view, class_id, seed, rot, scale)


def make_split(seed, split, per_class=None, **kw):
    per_class = {"train": TRAIN_PER_CLASS, "test": TEST_PER_CLASS}[split] if per_class is None else per_class
    offset = 0 if split == "train" else 1_000_000
    return [gen_shape(cls, seed * 10_000_000 + offset + i, **kw)
            for cls in CLASSES for i in range(per_class)]


def write_dataset(out_dir, seed, train_per_class=None, test_per_class=None, **kw):
    """Write ``train/`` and ``test/`` sample files plus ``index.csv``."""
    rows = []
    for split, per in (("train", train_per_class), ("test", test_per_class)):
        os.makedirs(os.path.join(out_dir, split), exist_ok=True)
        for i, s in enumerate(make_split(seed, split, per, **kw)):
            stem = f"{split}/{i:04d}_{s.class_id}"
            write_cloud(os.path.join(out_dir, stem + "_gt.xyz"), s.gt_cloud)
            write_cloud(os.path.join(out_dir, stem + "_partial.xyz"), s.partial_cloud)
            write_pgm(os.path.join(out_dir, stem + "_view.pgm"), s.view)
            rows.append((split, stem, s.class_id, s.seed))
    with open(os.path.join(out_dir, "index.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["split", "stem", "class", "seed"])
        w.writerows(rows)
    return rows


def load_dataset(data_dir, split, grid=32, sigma=1.5):
    """Read one split back. Views are re-rendered from gt at full precision."""
    path = os.path.join(data_dir, "index.csv")
    if not os.path.exists(path):
        raise FileNotFoundError(f"no index.csv in {data_dir}")
    samples = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            if row["split"] != split:
                continue
            gt = read_cloud(os.path.join(data_dir, row["stem"] + "_gt.xyz"))
            partial = read_cloud(os.path.join(data_dir, row["stem"] + "_partial.xyz"))
            with nx.no_grad():
                view = project(gt, grid, sigma).data
            samples.append(SyntheticSample(gt, partial, view, row["class"], int(row["seed"])))
    return samples


def load_shapenet_vipc(root):
    """Expected layout: ``root/ShapeNetViPC-{Partial,GT,View}/<synset>/<model>/...``."""
    raise NotImplementedError("ShapeNet-ViPC ingestion is not part of this package")
