"""End-to-end completion network: tokenizers, encoders and decoders.

All differentiable paths are batched over a leading sample axis ``B``.
Keypoint selection, grouping and ordering are discrete and run in numpy
per sample before the batched forward.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import geometry as geo
from . import numerics as nx
from .blockattn import BlockConfig
from .cell import Encoder
from .config import RunConfig
from .numerics import Module, Tensor


@dataclass
class FeatureSet:
    f_i: Tensor  # intra-modal image features
    f_p: Tensor  # intra-modal point features
    f_i_x: Tensor  # cross-modal image features
    f_p_x: Tensor  # cross-modal point features


@dataclass
class ForwardOutput:
    points: Tensor  # (B, n_p * out_k, 3)
    image: Tensor  # (B, H, W)
    features: FeatureSet
    keypoints: np.ndarray  # (B, n_p, 3) in sequence order


def _w(rng, shape, dtype):
    return nx.init_uniform(rng, shape, shape[0], dtype)


def _b(n, dtype):
    return Tensor(np.zeros(n, dtype=dtype), requires_grad=True)


class MambaTronNet(Module):
    def __init__(self, cfg: RunConfig, dtype=nx.DTYPE):
        rng = np.random.default_rng(cfg.seed)
        c = cfg.c
        self.cfg = cfg
        n_i = (cfg.grid // cfg.patch) ** 2
        max_len = max(cfg.n_p, n_i) + n_i + cfg.n_p + 3
        # point tokenizer: two-stage shared MLP with max-pool
        self.pt_w1a, self.pt_b1a = _w(rng, (3, c), dtype), _b(c, dtype)
        self.pt_w1b, self.pt_b1b = _w(rng, (c, c), dtype), _b(c, dtype)
        self.pt_w2a, self.pt_b2a = _w(rng, (2 * c, c), dtype), _b(c, dtype)
        self.pt_w2b, self.pt_b2b = _w(rng, (c, c), dtype), _b(c, dtype)
        self.gcp_w, self.gcp_b = _w(rng, (3, c), dtype), _b(c, dtype)
        # image tokenizer
        self.patch_w, self.patch_b = _w(rng, (cfg.patch ** 2, c), dtype), _b(c, dtype)
        self.img_pos = Tensor(rng.normal(0.0, 0.02, size=(n_i, c)).astype(dtype), requires_grad=True)
        self.tok_i = Tensor(rng.normal(0.0, 1.0, size=c).astype(dtype), requires_grad=True)
        self.tok_p = Tensor(rng.normal(0.0, 1.0, size=c).astype(dtype), requires_grad=True)
        self.tok_stop = Tensor(rng.normal(0.0, 1.0, size=c).astype(dtype), requires_grad=True)
        self.intra = Encoder(cfg.depth, c, cfg.n_state, rng, max_len, dtype)
        self.intra_img = Encoder(cfg.depth, c, cfg.n_state, rng, max_len, dtype) if cfg.separate_intra else self.intra
        self.cross = Encoder(cfg.depth_cross, c, cfg.n_state, rng, max_len, dtype)
        self.dec_p1, self.dec_pb1 = _w(rng, (c, c), dtype), _b(c, dtype)
        self.dec_p2, self.dec_pb2 = _w(rng, (c, 3 * cfg.out_k), dtype), _b(3 * cfg.out_k, dtype)
        self.dec_i1, self.dec_ib1 = _w(rng, (c, c), dtype), _b(c, dtype)
        self.dec_i2, self.dec_ib2 = _w(rng, (c, cfg.patch ** 2), dtype), _b(cfg.patch ** 2, dtype)
        self.affine = geo.AffineParams()

    @property
    def block_cfg(self):
        return BlockConfig(self.cfg.w_blk, self.cfg.heads, self.cfg.c)

    def named_parameters(self, prefix=""):
        for name, p in super().named_parameters(prefix):
            if name.startswith(prefix + "intra_img") and not self.cfg.separate_intra:
                continue
            yield name, p


# tokenizers

def group_cloud(points, cfg: RunConfig):
    """FPS + KNN grouping in source order (perm = identity)."""
    points = np.asarray(points, dtype=np.float64)
    if len(points) < cfg.n_p or len(points) < cfg.k:
        raise ValueError(f"cloud of {len(points)} points is too small for n_p={cfg.n_p}, k={cfg.k}")
    return geo.knn_group(points, geo.fps(points, cfg.n_p, 0), cfg.k)


def order_groups(grouped, model):
    """Attach the serialization order selected by the model's flags."""
    cfg = model.cfg
    if cfg.no_apr:
        perm = np.arange(len(grouped.keypoints))
    elif cfg.no_affine:
        perm = geo.xyz_order(grouped.keypoints, cfg.g)
    else:
        perm = geo.apr(grouped.keypoints, model.affine, cfg.g)
    return geo.GroupedCloud(grouped.keypoints, grouped.groups, perm, grouped.indices)


def embed_groups(model, groups):
    """groups: (..., n_p, k, 3) re-centered neighborhoods -> (..., n_p, C)."""
    h1 = nx.linear(nx.silu(nx.linear(groups, model.pt_w1a, model.pt_b1a)), model.pt_w1b, model.pt_b1b)
    g1 = nx.amax(h1, axis=-2)
    k = h1.shape[-2]
    g1b = nx.reshape(g1, g1.shape[:-1] + (1, g1.shape[-1])) + np.zeros(h1.shape[:-1] + (1,))
    h2 = nx.concat([h1, g1b], axis=-1)
    h2 = nx.linear(nx.silu(nx.linear(h2, model.pt_w2a, model.pt_b2a)), model.pt_w2b, model.pt_b2b)
    assert h2.shape[-2] == k
    return nx.amax(h2, axis=-2)


def embed_gcp(model, keypoints):
    return nx.linear(keypoints, model.gcp_w, model.gcp_b)


def tokenize_points(model, points):
    """Single cloud -> (ordered GroupedCloud, pos_emb (n_p, C), group_emb (n_p, C))."""
    grouped = order_groups(group_cloud(points, model.cfg), model).ordered()
    return grouped, embed_gcp(model, grouped.keypoints), embed_groups(model, grouped.groups)


def image_patches(img, patch):
    img = np.asarray(img, dtype=np.float64)
    H, W = img.shape[-2:]
    if H % patch or W % patch:
        raise ValueError(f"image {H}x{W} not divisible by patch {patch}")
    lead = img.shape[:-2]
    x = img.reshape(lead + (H // patch, patch, W // patch, patch))
    x = np.moveaxis(x, -3, -2)  # (..., gh, gw, p, p)
    return x.reshape(lead + ((H // patch) * (W // patch), patch * patch))


def tokenize_image(model, img, with_pos=True):
    patches = image_patches(img, model.cfg.patch)
    emb = nx.linear(patches, model.patch_w, model.patch_b)
    return emb + model.img_pos if with_pos else emb


# encoders

def _expand(tok, lead):
    return nx.reshape(tok, (1,) * len(lead) + (1, tok.shape[-1])) + np.zeros(lead + (1, tok.shape[-1]))


def _zero_rows(lead, n, c):
    return np.zeros(lead + (n, c))


def intra_encode(model, tokens, modality, gcp=None):
    """Wrap with the modality token and <STOP>, run the intra encoder, strip specials.

    ``gcp`` (point path only) is the embedded keypoint sequence, already in APR order.
    """
    tokens = nx.as_tensor(tokens)
    lead, C = tokens.shape[:-2], tokens.shape[-1]
    use_blocktr = not model.cfg.no_blocktr
    if modality == "image":
        seq = nx.concat([_expand(model.tok_i, lead), tokens, _expand(model.tok_stop, lead)], axis=-2)
        out = model.intra_img(seq, model.block_cfg, None, use_blocktr)
    elif modality == "point":
        seq = nx.concat([_expand(model.tok_p, lead), tokens, _expand(model.tok_stop, lead)], axis=-2)
        full_gcp = nx.concat([_zero_rows(lead, 1, C), gcp, _zero_rows(lead, 1, C)], axis=-2)
        out = model.intra(seq, model.block_cfg, full_gcp, use_blocktr)
    else:
        raise ValueError(f"unknown modality {modality!r}")
    return out[..., 1:-1, :]


def cross_sequence_length(n_i, n_p):
    return n_i + n_p + 3


def cross_encode(model, f_i, f_p, gcp):
    """Joint [<I>, image, <P>, points, <STOP>] sequence; GCP only at point rows."""
    f_i, f_p = nx.as_tensor(f_i), nx.as_tensor(f_p)
    lead, C = f_i.shape[:-2], f_i.shape[-1]
    n_i, n_p = f_i.shape[-2], f_p.shape[-2]
    seq = nx.concat([_expand(model.tok_i, lead), f_i, _expand(model.tok_p, lead), f_p,
                     _expand(model.tok_stop, lead)], axis=-2)
    full_gcp = nx.concat([_zero_rows(lead, n_i + 2, C), gcp, _zero_rows(lead, 1, C)], axis=-2)
    out = model.cross(seq, model.block_cfg, full_gcp, not model.cfg.no_blocktr)
    return out[..., 1:n_i + 1, :], out[..., n_i + 2:n_i + 2 + n_p, :]


# decoders

def decode_points(model, f_p, keypoints, out_k=None):
    out_k = model.cfg.out_k if out_k is None else out_k
    f_p = nx.as_tensor(f_p)
    off = nx.linear(nx.silu(nx.linear(f_p, model.dec_p1, model.dec_pb1)), model.dec_p2, model.dec_pb2)
    lead, n_p = f_p.shape[:-2], f_p.shape[-2]
    off = nx.reshape(off, lead + (n_p, out_k, 3))
    kp = np.asarray(keypoints)[..., :, None, :]
    return nx.reshape(off + kp, lead + (n_p * out_k, 3))


def decode_image(model, f_i, patch=None):
    patch = model.cfg.patch if patch is None else patch
    f_i = nx.as_tensor(f_i)
    pix = nx.sigmoid(nx.linear(nx.silu(nx.linear(f_i, model.dec_i1, model.dec_ib1)), model.dec_i2, model.dec_ib2))
    lead, n_i = f_i.shape[:-2], f_i.shape[-2]
    side = int(round(np.sqrt(n_i)))
    if side * side != n_i:
        raise ValueError(f"{n_i} patches do not form a square grid")
    x = nx.reshape(pix, lead + (side, side, patch, patch))
    nd = len(lead)
    x = nx.transpose(x, tuple(range(nd)) + (nd, nd + 2, nd + 1, nd + 3))
    return nx.reshape(x, lead + (side * patch, side * patch))


def feature_mask(n, ratio, seed):
    """0/1 row mask with floor(ratio * n) zeros chosen uniformly at random."""
    if not 0 <= ratio < 1:
        raise ValueError("mask ratio must lie in [0, 1)")
    keep = np.ones(n)
    drop = int(np.floor(ratio * n))
    if drop:
        keep[np.random.default_rng(seed).choice(n, size=drop, replace=False)] = 0.0
    return keep


def mask_features(f, ratio, seed):
    f = nx.as_tensor(f)
    keep = feature_mask(f.shape[-2], ratio, seed)
    return f * keep[:, None]


# full pipeline

@dataclass
class PreparedBatch:
    groups: np.ndarray  # (B, n_p, k, 3), sequence order
    keypoints: np.ndarray  # (B, n_p, 3), sequence order
    images: np.ndarray  # (B, H, W)


def prepare_batch(model, grouped_list, images):
    ordered = [order_groups(g, model).ordered() for g in grouped_list]
    return PreparedBatch(np.stack([g.groups for g in ordered]),
                         np.stack([g.keypoints for g in ordered]),
                         np.asarray(images, dtype=np.float64))


def forward(model, batch: PreparedBatch, mask_ratio=0.0, mask_seeds=None):
    """Complete a batch. ``mask_ratio`` > 0 zeroes feature rows ahead of the decoders."""
    cfg = model.cfg
    gcp = embed_gcp(model, batch.keypoints)
    f_p = intra_encode(model, embed_groups(model, batch.groups), "point", gcp)
    f_i = intra_encode(model, tokenize_image(model, batch.images), "image")
    if cfg.no_crossmodal:
        f_i_x, f_p_x = f_i, f_p
    else:
        f_i_x, f_p_x = cross_encode(model, f_i, f_p, gcp)
    dec_p, dec_i = f_p_x, f_i_x
    if mask_ratio > 0:
        B = len(batch.keypoints)
        seeds = range(B) if mask_seeds is None else mask_seeds
        keep_p = np.stack([feature_mask(dec_p.shape[-2], mask_ratio, s) for s in seeds])
        keep_i = np.stack([feature_mask(dec_i.shape[-2], mask_ratio, s + 1_000_003) for s in seeds])
        dec_p = dec_p * keep_p[..., None]
        dec_i = dec_i * keep_i[..., None]
    points = decode_points(model, dec_p, batch.keypoints)
    image = decode_image(model, dec_i)
    return ForwardOutput(points, image, FeatureSet(f_i, f_p, f_i_x, f_p_x), batch.keypoints)
