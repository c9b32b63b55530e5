"""Backward pass: greedy layer-wise MAP inference of (F_td, H) given F_bu,
top-mode ranking, subtraction-based scene parsing and scale scanning.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .encoder import EncoderWeights, forward
from .genmodel import GenerativeModel, HiddenAssignment, one_hot, topdown_base
from .observation import LOG_2PI, ObservationLayerParams
from .tensor import apply_offset


def _log_normal(x, mu, sigma):
    return -0.5 * LOG_2PI - np.log(sigma) - (x - mu) ** 2 / (2.0 * sigma * sigma)


def solve_elements(f_bu, f_tilde, sigma0: float, params: ObservationLayerParams, sigma1=None):
    """Element-wise maximiser of P(f_bu | f_td) P(f_td | f_tilde) over f_td.

    Works on arrays of matching shape. ``sigma1`` defaults to the per-channel
    values of ``params`` broadcast over a (..., C, H, W) layout.

    Returns ``(f_td, log_value)`` arrays.
    """
    f_bu = np.asarray(f_bu, dtype=np.float64)
    f_tilde = np.asarray(f_tilde, dtype=np.float64)
    if sigma1 is None:
        s1 = params.sigma1
        sigma1 = s1[0] if s1.size == 1 else s1.reshape((-1, 1, 1))
    lam = params.lam
    v0, v1 = sigma0 * sigma0, np.asarray(sigma1) ** 2
    eta = (v0 * f_bu + v1 * f_tilde) / (v0 + v1)
    x_fg = np.maximum(eta, lam)
    val_fg = _log_normal(f_bu, x_fg, sigma1) + _log_normal(x_fg, f_tilde, sigma0)
    x_bg = np.minimum(f_tilde, lam)
    val_bg = _log_normal(f_bu, params.beta, params.sigma2) + _log_normal(x_bg, f_tilde, sigma0)
    take_fg = val_fg >= val_bg
    return np.where(take_fg, x_fg, x_bg), np.where(take_fg, val_fg, val_bg)


def solve_elem(f_bu: float, f_tilde: float, channel: int, sigma0: float,
               params: ObservationLayerParams):
    """Scalar version of :func:`solve_elements` for one element of ``channel``."""
    s1 = params.sigma1[channel if params.sigma1.size > 1 else 0]
    x, v = solve_elements(f_bu, f_tilde, sigma0, params, sigma1=s1)
    return float(x), float(v)


@dataclass
class LayerClamp:
    gamma: int | None = None
    dy: int | None = None
    dx: int | None = None

    def allows(self, g, dy, dx) -> bool:
        return ((self.gamma is None or g == self.gamma) and (self.dy is None or dy == self.dy)
                and (self.dx is None or dx == self.dx))


@dataclass
class Clamp:
    """Top-down intervention: a category and optional per-layer restrictions."""

    category: int | None = None
    layers: dict = field(default_factory=dict)

    def for_layer(self, l) -> LayerClamp | None:
        return self.layers.get(l)

    def with_category(self, c) -> "Clamp":
        return Clamp(c, dict(self.layers))

    @classmethod
    def from_assignment(cls, H: HiddenAssignment) -> "Clamp":
        return cls(H.category, {l: LayerClamp(g, o[0], o[1])
                                for l, (g, o) in enumerate(zip(H.gammas, H.offsets))})


@dataclass
class LayerSolution:
    H: tuple
    F_td: np.ndarray
    score: float
    ranked_alternatives: list
    candidates: list | None = None


def layer_scores(F_bu_l, upper, prefix, model: GenerativeModel, layer: int, clamp=None):
    """Score every allowed (gamma, dy, dx) of one layer.

    Returns ``(candidates, scores)`` in lexicographic candidate order, where a
    score is the summed per-element optimum plus log P(H^l | prefix).
    """
    spec, params = model.spec, model.layers[layer]
    obs = model.observation[layer]
    logp = model.prior.log_probs(layer, prefix) + model.offset_logprior(layer)
    offsets = spec[layer].offsets()
    cands, scores = [], []
    for g in range(params.K):
        allowed = [o for o in offsets if clamp is None or clamp.allows(g, *o)]
        if not allowed:
            continue
        base = topdown_base(upper, g, params)
        shifted = np.stack([apply_offset(base, dy, dx) for dy, dx in allowed])
        _, vals = solve_elements(F_bu_l[None], shifted, params.sigma0, obs)
        s = vals.reshape(len(allowed), -1).sum(axis=1) + logp[g]
        for o, v in zip(allowed, s):
            cands.append((g, o))
            scores.append(float(v))
    if not cands:
        raise ValueError(f"layer {layer}: clamp excludes every candidate")
    return cands, np.array(scores)


def solve_candidate(F_bu_l, upper, H_l, model: GenerativeModel, layer: int):
    """F_td* and summed element objective (without the prior) for a fixed (gamma, offset)."""
    g, (dy, dx) = H_l
    params = model.layers[layer]
    phi = apply_offset(topdown_base(upper, g, params), dy, dx)
    f, v = solve_elements(F_bu_l, phi, params.sigma0, model.observation[layer])
    return f, float(v.sum())


def rank_order(scores) -> np.ndarray:
    """Indices by descending score; ties keep lexicographic candidate order."""
    return np.argsort(-np.asarray(scores), kind="stable")


def solve_layer(F_bu_l, F_td_upper, prefix, model: GenerativeModel, layer: int, top_m: int = 15,
                clamp: LayerClamp | None = None, keep_all: bool = False) -> LayerSolution:
    """Exhaustive MAP over H^l for one layer, with the closed-form F_td^l."""
    cands, scores = layer_scores(F_bu_l, F_td_upper, prefix, model, layer, clamp)
    order = rank_order(scores)
    best = cands[order[0]]
    f, _ = solve_candidate(F_bu_l, F_td_upper, best, model, layer)
    ranked = [(cands[i], float(scores[i])) for i in order[:top_m]]
    allc = list(zip(cands, scores.tolist())) if keep_all else None
    return LayerSolution(best, f, float(scores[order[0]]), ranked, allc)


@dataclass
class BackwardResult:
    assignment: HiddenAssignment
    F_td: list
    solutions: list
    log_posterior: float


def _descend(F_bu, model: GenerativeModel, clamp: Clamp, start: int, F_upper, gammas, offsets,
             top_m: int = 15, keep_all: bool = False):
    """Greedy solve layers ``start`` .. 0 given F_td^{start+1}; fills ``gammas``/``offsets``."""
    stack = {start + 1: F_upper}
    sols = {}
    for l in range(start, -1, -1):
        prefix = model.prior.prefix(l, gammas)
        sol = solve_layer(F_bu[l], stack[l + 1], prefix, model, l, top_m, clamp.for_layer(l), keep_all)
        gammas[l], offsets[l] = sol.H[0], sol.H[1]
        stack[l] = sol.F_td
        sols[l] = sol
    return stack, sols


def _require_obs(model):
    if model.observation is None:
        raise ValueError("model has no observation parameters; fit them first")


def backward_pass(F_bu, clamp: Clamp, model: GenerativeModel, top_m: int = 15,
                  keep_all: bool = False) -> BackwardResult:
    """Greedy top-down MAP assignment with the category clamped.

    ``F_bu`` is indexable by layer. Returns the full assignment, the top-down
    stack (layer L is the one-hot category), per-layer solutions ordered
    from layer 0 upwards, and the total log posterior (up to a constant).
    """
    _require_obs(model)
    if clamp is None or clamp.category is None:
        raise ValueError("backward_pass needs the category clamped")
    L = model.L
    gammas, offsets = [0] * L, [(0, 0)] * L
    top = one_hot(clamp.category, model.spec)
    stack, sols = _descend(F_bu, model, clamp, L - 1, top, gammas, offsets, top_m, keep_all)
    total = float(model.category_logprior[clamp.category]) + sum(s.score for s in sols.values())
    H = HiddenAssignment(tuple(gammas), tuple(offsets), clamp.category)
    return BackwardResult(H, [stack[l] for l in range(L + 1)], [sols[l] for l in range(L)], total)


@dataclass
class Mode:
    assignment: HiddenAssignment
    F_td: list
    log_posterior: float
    top_score: float
    distinct: bool = False


def _categories(clamp: Clamp | None, model: GenerativeModel):
    if clamp is not None and clamp.category is not None:
        return [clamp.category]
    return list(range(model.spec.num_categories))


def complete_mode(F_bu, model: GenerativeModel, clamp: Clamp, H_top, top_score: float) -> Mode:
    """Fix the top generative layer to ``H_top`` and finish with a greedy descent."""
    L = model.L
    gammas, offsets = [0] * L, [(0, 0)] * L
    gammas[L - 1], offsets[L - 1] = H_top
    top = one_hot(clamp.category, model.spec)
    f_top, _ = solve_candidate(F_bu[L - 1], top, H_top, model, L - 1)
    total = float(model.category_logprior[clamp.category]) + top_score
    stack = {L: top, L - 1: f_top}
    if L - 2 >= 0:
        lower, sols = _descend(F_bu, model, clamp, L - 2, f_top, gammas, offsets)
        stack.update(lower)
        total += sum(s.score for s in sols.values())
    H = HiddenAssignment(tuple(gammas), tuple(offsets), clamp.category)
    return Mode(H, [stack[l] for l in range(L + 1)], total, top_score)


def top_placements(F_bu, model: GenerativeModel, clamp: Clamp, count: int):
    """Best-scoring top-layer candidates, at most one per offset (its best gamma)."""
    L = model.L
    top = one_hot(clamp.category, model.spec)
    cands, scores = layer_scores(F_bu[L - 1], top, (), model, L - 1, clamp.for_layer(L - 1))
    seen, out = set(), []
    for i in rank_order(scores):
        g, off = cands[i]
        if off in seen:
            continue
        seen.add(off)
        out.append(((g, off), float(scores[i])))
        if len(out) == count:
            break
    return out


def layer_pixel_stride(spec, l: int) -> int:
    """Image pixels per unit of layer ``l``."""
    return spec.layers[0].height // spec.layers[l].height


def displacement(H: HiddenAssignment, spec) -> np.ndarray:
    """Image-space shift (dy, dx) in pixels composed from every layer's offset."""
    return np.array([sum(layer_pixel_stride(spec, l) * H.offsets[l][k] for l in range(len(H.offsets)))
                     for k in (0, 1)])


def matches_cell(H: HiddenAssignment, cell, spec) -> bool:
    """Whether ``H`` places its instance within half a placement cell of ``cell``."""
    c = layer_pixel_stride(spec, len(H.offsets) - 1)
    return bool(np.abs(displacement(H, spec) - c * np.asarray(cell)).max() <= c / 2)


def rank_modes(F_bu, model: GenerativeModel, clamp: Clamp | None = None, top_m: int = 15):
    """Posterior modes at the top generative layer, one per placement.

    Every placement of every category allowed by ``clamp`` is completed by
    a greedy descent; each placement keeps its best mode and the ``top_m``
    best are returned sorted by full log posterior. Lower-layer offsets can
    undo part of a top-layer shift, so a mode is flagged ``distinct`` only if
    its composed displacement is at least one placement cell away from every
    better distinct mode.
    """
    _require_obs(model)
    n_place = model.spec.layers[model.L - 1].n_offsets
    best = {}
    for c in _categories(clamp, model):
        cc = (clamp or Clamp()).with_category(c)
        for H_top, s in top_placements(F_bu, model, cc, n_place):
            m = complete_mode(F_bu, model, cc, H_top, s)
            key = m.assignment.offsets[-1]
            if key not in best or m.log_posterior > best[key].log_posterior:
                best[key] = m
    ranked = sorted(best.values(), key=lambda m: -m.log_posterior)
    cell = layer_pixel_stride(model.spec, model.L - 1)
    kept = []
    for m in ranked:
        d = displacement(m.assignment, model.spec)
        m.distinct = all(np.abs(d - k).max() >= cell for k in kept)
        if m.distinct:
            kept.append(d)
    return ranked[:top_m]


def distinct_modes(modes):
    """The modes flagged ``distinct``, in rank order."""
    return [m for m in modes if m.distinct]


def write_mode_csv(path, modes):
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["rank", "gamma", "dy", "dx", "log_posterior", "category", "distinct"])
        for r, m in enumerate(modes, 1):
            g, (dy, dx) = m.assignment.gammas[-1], m.assignment.offsets[-1]
            wr.writerow([r, g, dy, dx, repr(float(m.log_posterior)), m.assignment.category, int(m.distinct)])


def subtract_instance(F_bu, F_td):
    """Remove an explained instance from every layer, clamping at zero."""
    if len(F_bu) != len(F_td):
        raise ValueError("stacks have different depths")
    out = []
    for a, b in zip(F_bu, F_td):
        a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
        if a.shape != b.shape:
            raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
        out.append(np.maximum(a - b, 0.0))
    return out


def background_score(F_bu, model: GenerativeModel) -> float:
    """Log-likelihood of a stack with every element on the background branch.

    This is the no-instance explanation that instance scores are measured
    against.
    """
    _require_obs(model)
    total = 0.0
    for l in range(model.L):
        p = model.observation[l]
        total += float(_log_normal(np.asarray(F_bu[l], dtype=np.float64), p.beta, p.sigma2).sum())
    return total


@dataclass
class InstanceRecord:
    """One recovered instance. ``log_posterior`` is its backward-pass value;
    ``score`` is the gain of that value over :func:`background_score` of the
    stack it was found in."""

    assignment: HiddenAssignment
    F_td: list
    log_posterior: float
    score: float


@dataclass
class ParseResult:
    instances: list
    residual: list
    total_score: float
    modes: list | None = None
    scale: float = 1.0

    @property
    def mean_instance_score(self) -> float:
        return self.total_score / max(len(self.instances), 1)

    def trace(self):
        return {
            "scale": self.scale,
            "total_score": self.total_score,
            "steps": [{"step": k, **inst.assignment.to_dict(), "score": inst.score,
                       "log_posterior": inst.log_posterior}
                      for k, inst in enumerate(self.instances)],
        }


def _expand(F_bu, model, clamp, width):
    """Hypotheses for the next instance: the ``width`` best placements per category,
    each completed greedily. With width 1 this is the greedy backward pass."""
    out = []
    null = background_score(F_bu, model)
    for c in _categories(clamp, model):
        cc = clamp.with_category(c)
        if width == 1:
            r = backward_pass(F_bu, cc, model)
            out.append(InstanceRecord(r.assignment, r.F_td, r.log_posterior, r.log_posterior - null))
            continue
        for H_top, s in top_placements(F_bu, model, cc, width):
            m = complete_mode(F_bu, model, cc, H_top, s)
            out.append(InstanceRecord(m.assignment, m.F_td, m.log_posterior, m.log_posterior - null))
    return out


def parse_bottom_up(F_bu, steps: int, beam: int, clamp: Clamp | None, model: GenerativeModel,
                    top_m: int | None = None) -> ParseResult:
    """Repeated backward pass and subtraction on a precomputed bottom-up stack.

    Keeps the ``beam`` best hypothesis sequences by cumulative log score.
    With ``top_m`` the mode ranking of every step along the winning sequence
    is recorded as well.
    """
    _require_obs(model)
    if steps < 1 or beam < 1:
        raise ValueError("steps and beam must be >= 1")
    clamp = clamp or Clamp()
    beams = [(0.0, [], [np.asarray(a, dtype=np.float64) for a in F_bu], [])]
    for _ in range(steps):
        grown = []
        for score, insts, resid, inputs in beams:
            for rec in _expand(resid, model, clamp, beam):
                grown.append((score + rec.score, insts + [rec], subtract_instance(resid, rec.F_td),
                              inputs + [resid]))
        order = sorted(range(len(grown)), key=lambda i: -grown[i][0])
        beams = [grown[i] for i in order[:beam]]
    score, insts, resid, inputs = beams[0]
    modes = None
    if top_m:
        modes = [rank_modes(stack, model, clamp, top_m) for stack in inputs]
    return ParseResult(insts, resid, score, modes)


def parse_scene(image, steps: int, beam: int, clamp: Clamp | None, model: GenerativeModel,
                encoder: EncoderWeights, top_m: int | None = None) -> ParseResult:
    """Parse an image into ``steps`` instances (see :func:`parse_bottom_up`)."""
    F_bu = forward(image, encoder, model.spec)
    return parse_bottom_up(F_bu.layers, steps, beam, clamp, model, top_m)


def rescale_image(image, scale: float):
    """Zoom about the canvas centre (bilinear), zero padding, same output size."""
    image = np.asarray(image, dtype=np.float64)
    if scale <= 0:
        raise ValueError("scale must be positive")
    if scale == 1.0:
        return image.copy()
    h, w = image.shape[-2:]
    centre = np.array([(h - 1) / 2.0, (w - 1) / 2.0])
    out = np.empty_like(image)
    for c in range(image.shape[0]):
        out[c] = ndimage.affine_transform(image[c], np.diag(np.full(2, 1.0 / scale)),
                                          offset=centre - centre / scale, order=1,
                                          mode="constant", cval=0.0)
    return out


def scan_scales(image, scales, steps: int, beam: int, clamp: Clamp | None, model: GenerativeModel,
                encoder: EncoderWeights, top_m: int | None = None):
    """Parse at each scale and keep the result with the best mean per-instance score.

    Returns ``(best_result, per_scale_scores)``; ``best_result.scale`` holds
    the winning factor.
    """
    best, scores = None, []
    for s in scales:
        r = parse_scene(rescale_image(image, s), steps, beam, clamp, model, encoder, top_m)
        r.scale = float(s)
        scores.append(r.mean_instance_score)
        if best is None or r.mean_instance_score > best.mean_instance_score:
            best = r
    return best, scores
