"""Two-stage training runs for the baseline and single-flag ablations."""
from __future__ import annotations

import logging

from .config import RunConfig
from .train import evaluate, train_stage

log = logging.getLogger(__name__)

ABLATION_COLUMNS = ("variant", "cd_e3", "fscore", "baseline_cd_e3")
DEFAULT_VARIANTS = ("no_blocktr", "no_crossmodal", "no_style_proj", "separate_intra", "no_apr", "no_affine")


def train_two_stage(cfg: RunConfig, train):
    """uni stage, then cross stage from its weights. Returns (model, uni_rows, cross_rows)."""
    model, uni_rows = train_stage(cfg, "uni", train)
    model, cross_rows = train_stage(cfg, "cross", train, init=model)
    return model, uni_rows, cross_rows


def run_variant(cfg, train, test):
    model, _, _ = train_two_stage(cfg, train)
    avg = evaluate(model, test)[-1]
    return avg[1], avg[2], avg[3]


def run_ablation_suite(base: RunConfig, train, test, variants=DEFAULT_VARIANTS, baseline=None):
    """Baseline plus one run per flag, all on the same seed and data.

    ``baseline`` may pass an already computed (cd_e3, fscore, baseline_cd_e3)
    for ``base`` to skip retraining it.
    """
    rows = [("baseline",) + tuple(baseline if baseline is not None else run_variant(base, train, test))]
    for flag in variants:
        log.info("ablation %s", flag)
        rows.append((flag,) + tuple(run_variant(base.replace(**{flag: True}), train, test)))
    return rows
