"""Keypoint serializations of a cube cloud and their mean step length."""
import numpy as np

from mambatron import geometry as geo

rng = np.random.default_rng(5)
pts = rng.uniform(-1, 1, size=(1024, 3))
kp = pts[geo.fps(pts, 64)]

rand = np.mean([geo.path_length(kp, rng.permutation(len(kp))) for _ in range(100)])
print(f"random          {rand:.4f}")
for g in (3, 8, 32):
    print(f"xyz  g={g:<3d}     {geo.path_length(kp, geo.xyz_order(kp, g)):.4f}")

batch = [kp] + [pts[geo.fps(pts, 64, start_idx=s)] for s in (1, 2, 3)]
hist = [geo.apr_objective(batch, geo.AffineParams())]
affine = geo.evolve_affine(batch, geo.AffineParams(), 50, 4, seed=0, history=hist)
print(f"apr after search {geo.path_length(kp, geo.apr(kp, affine)):.4f}  (batch objective {hist[0]:.4f} -> {hist[-1]:.4f})")
print(np.round(affine.matrix, 3))
