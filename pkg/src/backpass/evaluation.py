"""Desk-scale evaluation protocols: two-instance parsing, clamped sampling
variance and scale scanning."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import dataset as ds
from .encoder import EncoderWeights, forward
from .genmodel import GenerativeModel, sample_prior
from .inference import distinct_modes, matches_cell, parse_bottom_up, scan_scales
from .pipeline import quantize


def pair_scene(seed: int, index: int, clutter_count: int = 3, occlusion_rate: float = 0.2):
    """A quantized two-instance clutter scene and its instance parameters."""
    params, cseed = ds.scene_params(seed, "pair", index, n_instances=2, occlusion_rate=occlusion_rate)
    scene, _, _ = ds.compose_scene(params, clutter_count, cseed)
    return quantize(scene), params


def _both(assignments, cells, spec) -> bool:
    if len(assignments) < 2:
        return False
    a, b = assignments[:2]
    c0, c1 = cells
    return (matches_cell(a, c0, spec) and matches_cell(b, c1, spec)) or (
        matches_cell(a, c1, spec) and matches_cell(b, c0, spec))


@dataclass
class PairOutcome:
    index: int
    cells: tuple
    occluded: bool
    parse_ok: bool
    modes_ok: bool


def evaluate_pairs(model: GenerativeModel, enc: EncoderWeights, n: int = 50, seed: int = 0,
                   beam: int = 1, top_m: int = 15):
    """Two-step parse of ``n`` two-instance scenes.

    A scene passes the parse check when the two recovered instances match
    the two ground-truth cells in some order, and the mode check when the
    two best distinct modes of the first pass do.
    """
    out = []
    for j in range(n):
        scene, params = pair_scene(seed, j)
        cells = tuple(tuple(p.anchor) for p in params)
        F_bu = forward(scene, enc, model.spec).layers
        r = parse_bottom_up(F_bu, 2, beam, None, model, top_m=top_m)
        parse_ok = _both([i.assignment for i in r.instances], cells, model.spec)
        modes_ok = _both([m.assignment for m in distinct_modes(r.modes[0])], cells, model.spec)
        occluded = max(abs(cells[0][0] - cells[1][0]), abs(cells[0][1] - cells[1][1])) == 1
        out.append(PairOutcome(j, cells, occluded, parse_ok, modes_ok))
    return out


def clamped_sample_variance(model: GenerativeModel, category: int = 0, groups: int = 20,
                            per_group: int = 5, seed: int = 0):
    """Mean per-pixel variance among samples sharing the top assignment
    (within) and among samples with different top assignments (across).

    Both are variances of individual samples: ``across`` takes the k-th
    sample of every group, so the two numbers see the same noise.
    """
    rng = np.random.default_rng(seed)
    top = model.L - 1
    group_imgs = []
    for _ in range(groups):
        H0, _ = sample_prior(category, model, rng)
        clamp = {top: (H0.gammas[top], H0.offsets[top])}
        group_imgs.append(np.stack([sample_prior(category, model, rng, clamp)[1][0]
                                    for _ in range(per_group)]))
    g = np.stack(group_imgs)
    within = float(g.var(axis=1).mean())
    across = float(g.var(axis=0).mean())
    return within, across


def evaluate_scales(model: GenerativeModel, enc: EncoderWeights, n: int = 20, seed: int = 0,
                    scale: float = 0.5, scales=(0.5, 1.0, 2.0)):
    """Fraction of single-instance scenes rendered at ``scale`` for which the
    scan picks the compensating factor ``1 / scale``."""
    hits, chosen = 0, []
    for j in range(n):
        params, cseed = ds.scale_params(seed, j, scale)
        img, _, _ = ds.compose_scene(params, 0, cseed)
        best, _ = scan_scales(quantize(img), list(scales), 1, 1, None, model, enc)
        chosen.append(best.scale)
        hits += np.isclose(best.scale, 1.0 / scale)
    return hits / n, chosen
