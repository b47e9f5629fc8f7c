"""Run configuration and its flat ``key = value`` text form."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass

ABLATION_FLAGS = ("no_blocktr", "separate_intra", "no_crossmodal", "no_style_proj", "no_apr", "no_affine")


@dataclass
class RunConfig:
    # model
    c: int = 64
    n_state: int = 16
    depth: int = 2
    depth_cross: int = 2
    w_blk: int = 4
    heads: int = 4
    # geometry
    n_points: int = 512
    n_partial: int = 256
    n_p: int = 32
    k: int = 16
    out_k: int = 16
    g: int = 32
    # images
    patch: int = 8
    grid: int = 32
    sigma: float = 1.5
    # losses
    w_cd: float = 1.0
    w_2d: float = 1.0
    w_proj: float = 1.0
    w_style: float = 1.0
    fscore_d: float = 0.001
    # optimization
    optimizer: str = "sgd"
    lr: float = 0.01
    momentum: float = 0.9
    epochs: int = 200
    batch_size: int = 32
    mask_ratio: float = 0.3
    clip_norm: float = 0.0
    affine_steps: int = 2
    affine_candidates: int = 4
    seed: int = 42
    # ablations
    no_blocktr: bool = False
    separate_intra: bool = False
    no_crossmodal: bool = False
    no_style_proj: bool = False
    no_apr: bool = False
    no_affine: bool = False

    def replace(self, **kw):
        return dataclasses.replace(self, **kw)

    def items(self):
        return [(f.name, getattr(self, f.name)) for f in dataclasses.fields(self)]

    def to_text(self):
        return "".join(f"{k} = {format_value(v)}\n" for k, v in self.items())

    @classmethod
    def from_pairs(cls, pairs):
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        kw = {}
        for key, raw in pairs:
            if key not in types:
                raise KeyError(f"unknown config key {key!r}")
            kw[key] = _parse(raw, types[key])
        return cls(**kw)

    @classmethod
    def from_text(cls, text):
        pairs = []
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"line {lineno}: expected 'key = value'")
            key, val = (s.strip() for s in line.split("=", 1))
            pairs.append((key, val))
        return cls.from_pairs(pairs)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_text(fh.read())

    def save(self, path):
        with open(path, "w") as fh:
            fh.write(self.to_text())


def format_value(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, str):
        return v
    return repr(v)


def _parse(raw, typ):
    if typ in (bool, "bool"):
        low = raw.lower()
        if low in ("true", "1", "yes"):
            return True
        if low in ("false", "0", "no"):
            return False
        raise ValueError(f"bad boolean {raw!r}")
    if typ in (int, "int"):
        return int(raw)
    if typ in (float, "float"):
        return float(raw)
    return raw
