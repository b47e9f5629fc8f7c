"""Point sampling, grouping and serialization of point clouds."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class DegenerateTransformError(ValueError):
    pass


def normalize(points):
    """Center the bounding box on the origin and scale its largest half-extent to 1."""
    points = np.asarray(points, dtype=np.float64)
    lo, hi = points.min(axis=0), points.max(axis=0)
    centered = points - (lo + hi) / 2
    half = (hi - lo).max() / 2
    if half == 0:
        return centered
    return centered / half


@dataclass
class GroupedCloud:
    keypoints: np.ndarray  # (n_p, 3)
    groups: np.ndarray  # (n_p, k, 3), re-centered on the keypoint
    perm: np.ndarray  # serialization order over the keypoints
    indices: np.ndarray = None  # (n_p, k) source indices

    def ordered(self, perm=None):
        perm = self.perm if perm is None else perm
        return GroupedCloud(self.keypoints[perm], self.groups[perm],
                            np.arange(len(perm)), self.indices[perm])


@dataclass
class AffineParams:
    matrix: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def apply(self, points):
        return np.asarray(points) @ self.matrix.T + self.translation

    def copy(self):
        return AffineParams(self.matrix.copy(), self.translation.copy())


def _sqdist(a, b):
    diff = a[:, None, :] - b[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def fps(points, n_p, start_idx=0):
    """Farthest point sampling. Ties go to the lowest index."""
    points = np.asarray(points, dtype=np.float64)
    n = len(points)
    if n_p > n:
        raise ValueError(f"cannot sample {n_p} keypoints from {n} points")
    chosen = np.empty(n_p, dtype=np.int64)
    chosen[0] = start_idx
    mind = np.full(n, np.inf)
    for i in range(1, n_p):
        d = points - points[chosen[i - 1]]
        mind = np.minimum(mind, np.einsum("ij,ij->i", d, d))
        mind[chosen[:i]] = -1.0
        chosen[i] = int(np.argmax(mind))
    return chosen


def knn_indices(points, queries, k):
    points = np.asarray(points, dtype=np.float64)
    if k > len(points):
        raise ValueError(f"k={k} exceeds cloud size {len(points)}")
    d = _sqdist(np.asarray(queries, dtype=np.float64), points)
    # stable sort keeps lower indices first among equal distances
    return np.argsort(d, axis=1, kind="stable")[:, :k]


def knn_group(points, keypoint_indices, k):
    points = np.asarray(points, dtype=np.float64)
    kp = points[np.asarray(keypoint_indices)]
    idx = knn_indices(points, kp, k)
    groups = points[idx] - kp[:, None, :]
    return GroupedCloud(kp, groups, np.arange(len(kp)), idx)


def xyz_order(keypoints, g=32):
    """Lexicographic order of quantized coordinates, x major, ties by index."""
    kp = np.asarray(keypoints, dtype=np.float64)
    if len(kp) == 0:
        return np.zeros(0, dtype=np.int64)
    lo, hi = kp.min(axis=0), kp.max(axis=0)
    span = np.where(hi > lo, hi - lo, 1.0)
    bins = np.clip(np.floor((kp - lo) / span * g), 0, g - 1).astype(np.int64)
    # lexsort: last key is primary
    return np.lexsort((np.arange(len(kp)), bins[:, 2], bins[:, 1], bins[:, 0]))


def apr(keypoints, affine, g=32):
    """Order keypoints by the XYZ code of their affine image; keypoints are untouched."""
    if abs(np.linalg.det(affine.matrix)) < 1e-8:
        raise DegenerateTransformError("affine matrix is singular")
    return xyz_order(affine.apply(keypoints), g)


def path_length(keypoints, perm):
    kp = np.asarray(keypoints, dtype=np.float64)[np.asarray(perm)]
    if len(kp) < 2:
        return 0.0
    return float(np.linalg.norm(np.diff(kp, axis=0), axis=1).mean())


def _rotation(axis, angle):
    c, s = np.cos(angle), np.sin(angle)
    i, j = [a for a in range(3) if a != axis]
    r = np.eye(3)
    r[i, i], r[i, j], r[j, i], r[j, j] = c, -s, s, c
    return r


def _candidate(rng, scale):
    """Small random rotation, occasionally composed with a mirror or axis swap."""
    m = _rotation(rng.integers(3), rng.normal(0.0, scale))
    u = rng.random()
    if u < 0.1:
        mirror = np.eye(3)
        mirror[rng.integers(3)] *= -1
        m = mirror @ m
    elif u < 0.2:
        i, j = rng.choice(3, size=2, replace=False)
        swap = np.eye(3)
        swap[[i, j]] = swap[[j, i]]
        m = swap @ m
    return m


def apr_objective(batch, affine, g=32):
    return float(np.mean([path_length(kp, apr(kp, affine, g)) for kp in batch]))


def evolve_affine(batch, affine, step_count, candidates_per_step, seed, g=32, scale=0.3,
                  history=None):
    """(1+lambda) search over rotations/reflections minimizing mean path length.

    The incumbent survives unless a candidate is strictly better, so the
    objective never increases. Per-step objectives are appended to ``history``.
    """
    rng = np.random.default_rng(seed)
    best = affine.copy()
    best_val = apr_objective(batch, best, g)
    for _ in range(step_count):
        for _ in range(candidates_per_step):
            cand = AffineParams(_candidate(rng, scale) @ best.matrix, best.translation.copy())
            val = apr_objective(batch, cand, g)
            if val < best_val:
                best, best_val = cand, val
        if history is not None:
            history.append(best_val)
    return best
