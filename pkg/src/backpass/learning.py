"""Hard EM for the top-down generative model P(H) P(F_td | H).

Top-down stacks are fully observed, so the E-step only has to impute the
discrete hidden variables. Batched stacks are lists of (N, C, H, W) arrays,
one per layer, with the one-hot category at the top.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .genmodel import (LOG_2PI, GenerativeModel, HiddenAssignment, NGramPrior,
                       TopDownLayerParams, init_model)
from .hierarchy import HierarchySpec
from .tensor import FilterBank, apply_offset, apply_offsets, relu, topdown_conv_grad, transposed_conv2d


@dataclass
class EmConfig:
    em_iters: int = 10
    sgd_epochs_per_m: int = 5
    lr: float = 0.5
    batch: int = 20
    seed: int = 0
    sigma0_floor: float = 1e-4
    improvement_guard: bool = True
    init_scale: float = 0.05
    starvation_patience: int = 3
    alpha: float = 1.0

    def __post_init__(self):
        if min(self.em_iters, self.sgd_epochs_per_m, self.batch) < 1:
            raise ValueError("em_iters, sgd_epochs_per_m and batch must be >= 1")
        if self.lr < 0:
            raise ValueError("lr must be non-negative")


@dataclass
class EmTrace:
    loglik: list = field(default_factory=list)
    recon: list = field(default_factory=list)
    histograms: list = field(default_factory=list)
    flagged: list = field(default_factory=list)

    def write_csv(self, path):
        n_layers = len(self.recon[0]) if self.recon else 0
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(["iter", "complete_data_loglik"] + [f"recon_loss_l{l}" for l in range(n_layers)])
            for i, (ll, rec) in enumerate(zip(self.loglik, self.recon), 1):
                wr.writerow([i, repr(float(ll))] + [repr(float(r)) for r in rec])


# ---------------------------------------------------------------- E-step

def layer_gen_scores(lower, upper, model: GenerativeModel, l: int):
    """log N(F^l; phi(F^{l+1}, gamma, delta), sigma0) + log P(delta) for every candidate.

    Returns an (N, K, n_offsets) array; offsets in lexicographic order.
    """
    params = model.layers[l]
    offsets = model.spec[l].offsets()
    n = lower.shape[0]
    elems = int(np.prod(lower.shape[1:]))
    s0 = params.sigma0
    const = -0.5 * elems * LOG_2PI - elems * math.log(s0) + model.offset_logprior(l)
    out = np.empty((n, params.K, len(offsets)))
    for g, bank in enumerate(params.banks):
        base = relu(transposed_conv2d(upper, bank))
        for j, (dy, dx) in enumerate(offsets):
            ss = ((lower - apply_offset(base, dy, dx)) ** 2).reshape(n, -1).sum(axis=1)
            out[:, g, j] = const - ss / (2.0 * s0 * s0)
    return out


def _chain_argmax(best, prior: NGramPrior, L: int):
    """Exact maximiser of sum_l best[l][:, gamma^l] + log P(gamma^l | prefix).

    ``best[l]`` is (N, K_l). Dynamic programming over states holding the last
    ``order`` component indices. Returns an (N, L) int array.
    """
    n = best[0].shape[0]
    states, V = [()], np.zeros((n, 1))
    history = {}
    for l in range(L - 1, -1, -1):
        keep = max(1, min(prior.order, L - l))
        plen = prior.prefix_len(l)
        K = best[l].shape[1]
        new_index, new_V, new_ptr = {}, [], []
        for j, s in enumerate(states):
            logp = prior.log_probs(l, s[:plen])
            for g in range(K):
                ns = ((g,) + s)[:keep]
                val = V[:, j] + best[l][:, g] + logp[g]
                if ns not in new_index:
                    new_index[ns] = len(new_V)
                    new_V.append(val.copy())
                    new_ptr.append(np.full(n, j))
                else:
                    k = new_index[ns]
                    better = val > new_V[k]
                    new_V[k] = np.where(better, val, new_V[k])
                    new_ptr[k] = np.where(better, j, new_ptr[k])
        ordered = sorted(new_index, key=new_index.get)
        history[l] = (states, ordered, np.stack(new_ptr, axis=1))
        states, V = ordered, np.stack(new_V, axis=1)
    # backtrack from layer 0
    gammas = np.zeros((n, L), dtype=np.int64)
    idx = V.argmax(axis=1)
    for l in range(0, L):
        prev_states, cur_states, ptr = history[l]
        gammas[:, l] = [cur_states[i][0] if cur_states[i] else 0 for i in idx]
        idx = ptr[np.arange(n), idx]
    return gammas


def e_step_batch(stack, categories, model: GenerativeModel):
    """Impute (gamma, delta) for every example of a batched top-down stack.

    Exact joint argmax of the complete-data log likelihood: each layer's best
    offset per component, then a dynamic program over the component chain.
    Ties go to the lexicographically smallest candidate.
    """
    L = model.L
    scores = [layer_gen_scores(stack[l], stack[l + 1], model, l) for l in range(L)]
    best = [s.max(axis=2) for s in scores]
    gammas = _chain_argmax(best, model.prior, L)
    out = []
    for i in range(len(categories)):
        offs = []
        for l in range(L):
            j = int(np.argmax(scores[l][i, gammas[i, l]]))
            offs.append(model.spec[l].offsets()[j])
        out.append(HiddenAssignment(tuple(gammas[i]), tuple(offs), int(categories[i])))
    return out


def e_step(F_td, model: GenerativeModel, category: int | None = None) -> HiddenAssignment:
    """Single-example E-step; the category defaults to the argmax of the top layer."""
    stack = [np.asarray(a, dtype=np.float64)[None] for a in F_td]
    if category is None:
        category = int(np.argmax(np.asarray(F_td[-1]).reshape(-1)))
    return e_step_batch(stack, [category], model)[0]


# ---------------------------------------------------------------- objective

def complete_data_loglik(stack, assignments, model: GenerativeModel) -> float:
    """sum over examples of log P(H) + log P(F_td | H)."""
    return prior_loglik(assignments, model.prior, model.category_logprior, model) + \
        sum(gen_loglik_layer(stack, assignments, model.layers[l], model, l) for l in range(model.L))


def prior_loglik(assignments, prior: NGramPrior, category_logprior, model: GenerativeModel) -> float:
    total = 0.0
    for H in assignments:
        total += float(category_logprior[H.category])
        for l in range(model.L):
            total += model.offset_logprior(l) + prior.log_probs(l, prior.prefix(l, H.gammas))[H.gammas[l]]
    return total


def _predict(upper, gammas, offsets, params: TopDownLayerParams):
    out = None
    for g in np.unique(gammas):
        idx = np.nonzero(gammas == g)[0]
        pred = relu(transposed_conv2d(upper[idx], params.banks[g]))
        pred = apply_offsets(pred, [offsets[i] for i in idx])
        if out is None:
            out = np.empty((len(gammas),) + pred.shape[1:])
        out[idx] = pred
    return out


def residual_ss(stack, assignments, params: TopDownLayerParams, l: int) -> float:
    gammas = np.array([H.gammas[l] for H in assignments])
    offsets = [H.offsets[l] for H in assignments]
    pred = _predict(stack[l + 1], gammas, offsets, params)
    return float(((stack[l] - pred) ** 2).sum())


def gen_loglik_layer(stack, assignments, params: TopDownLayerParams, model, l: int) -> float:
    ss = residual_ss(stack, assignments, params, l)
    n = stack[l].size
    s0 = params.sigma0
    return -0.5 * n * LOG_2PI - n * math.log(s0) - ss / (2.0 * s0 * s0)


# ---------------------------------------------------------------- M-steps

def m_step_prior(imputed, model: GenerativeModel):
    """Rebuild n-gram counts and the smoothed category prior from imputations.

    Returns ``(NGramPrior, category_logprior)``; alpha is unchanged.
    """
    imputed = list(imputed)
    if not imputed:
        raise ValueError("no imputations")
    prior = NGramPrior.empty(model.spec, model.prior.order, model.prior.alpha)
    for H in imputed:
        for l in range(model.L):
            prior.counts[l][prior.prefix(l, H.gammas) + (H.gammas[l],)] += 1.0
    C = model.spec.num_categories
    cat = np.zeros(C)
    for H in imputed:
        cat[H.category] += 1.0
    a = prior.alpha
    return prior, np.log((cat + a) / (cat.sum() + a * C))


def step_size(upper, bank: FilterBank, lr: float):
    """Curvature-normalised ``(weight_step, bias_step)``.

    Per example, a weight tap sees every upper position and each output
    overlaps ``(k/s)^2`` taps per input channel; the bias sees every output
    position.
    """
    up = np.asarray(upper)
    h, w = up.shape[-2:]
    taps = (bank.kernel_h / bank.stride) * (bank.kernel_w / bank.stride)
    energy = h * w * taps * bank.in_channels * float(np.mean(up ** 2))
    outputs = h * w * bank.stride * bank.stride
    return lr / (energy + 1e-8), lr / outputs


def topdown_loss_grad(upper, target, offsets, bank: FilterBank):
    """0.5 * sum ||target - shift(relu(tconv(upper)))||^2 and its filter gradients."""
    pred = apply_offsets(relu(transposed_conv2d(upper, bank)), offsets)
    r = pred - target
    g = apply_offsets(r, [(-dy, -dx) for dy, dx in offsets])
    gw, gb, _ = topdown_conv_grad(upper, bank, g)
    return 0.5 * float((r ** 2).sum()), gw, gb


def sgd_filters(upper, target, offsets, bank: FilterBank, epochs: int, lr: float, batch: int, rng):
    """Mini-batch SGD on the mean per-example loss; returns the updated bank copy."""
    bank = bank.copy()
    n = len(upper)
    eta_w, eta_b = step_size(upper, bank, lr)
    for _ in range(epochs):
        order = rng.permutation(n)
        for s in range(0, n, batch):
            idx = order[s:s + batch]
            _, gw, gb = topdown_loss_grad(upper[idx], target[idx], [offsets[i] for i in idx], bank)
            bank.weights -= eta_w * gw / len(idx)
            bank.bias -= eta_b * gb / len(idx)
    return bank


def m_step_topdown(upper, lower, gammas, offsets, params: TopDownLayerParams, cfg: EmConfig, rng):
    """Update each component's filters on its assigned (upper, lower, offset) triples.

    Components without examples are left untouched and reported in
    ``flagged``. With ``cfg.improvement_guard`` an update that raises the
    component's loss is discarded. sigma0 becomes the floored RMS residual.

    Returns ``(params, info)`` with ``info = {"flagged", "rolled_back", "ss"}``.
    """
    gammas = np.asarray(gammas)
    new = params.copy()
    flagged, rolled = [], []
    for g in range(params.K):
        idx = np.nonzero(gammas == g)[0]
        if len(idx) == 0:
            flagged.append(g)
            continue
        offs = [tuple(offsets[i]) for i in idx]
        before, _, _ = topdown_loss_grad(upper[idx], lower[idx], offs, params.banks[g])
        cand = sgd_filters(upper[idx], lower[idx], offs, params.banks[g], cfg.sgd_epochs_per_m,
                           cfg.lr, cfg.batch, rng)
        after, _, _ = topdown_loss_grad(upper[idx], lower[idx], offs, cand)
        if cfg.improvement_guard and after > before:
            rolled.append(g)
            continue
        new.banks[g] = cand
    pred = _predict(upper, gammas, [tuple(o) for o in offsets], new)
    ss = float(((lower - pred) ** 2).sum())
    new.sigma0 = max(math.sqrt(ss / lower.size), cfg.sigma0_floor)
    return new, {"flagged": flagged, "rolled_back": rolled, "ss": ss}


def _reseed(params: TopDownLayerParams, g: int, source: int, rng):
    src = params.banks[source]
    scale = float(np.std(src.weights)) + 1e-8
    w = src.weights + rng.uniform(-0.1, 0.1, size=src.weights.shape) * scale
    params.banks[g] = FilterBank(w, src.bias.copy(), src.stride)


def _m_step(stack, assignments, model: GenerativeModel, cfg: EmConfig, rng):
    new = model.copy()
    prior, catp = m_step_prior(assignments, model)
    if cfg.improvement_guard:
        old_ll = prior_loglik(assignments, model.prior, model.category_logprior, model)
        if prior_loglik(assignments, prior, catp, model) < old_ll:
            prior, catp = model.prior.copy(), model.category_logprior.copy()
    new.prior, new.category_logprior = prior, catp
    flagged = {}
    for l in range(model.L):
        gammas = np.array([H.gammas[l] for H in assignments])
        offsets = [H.offsets[l] for H in assignments]
        new.layers[l], info = m_step_topdown(stack[l + 1], stack[l], gammas, offsets,
                                             model.layers[l], cfg, rng)
        flagged[l] = info["flagged"]
    return new, flagged


def hard_em(stack, categories, spec: HierarchySpec, cfg: EmConfig = EmConfig(),
            model: GenerativeModel | None = None, checkpoint=None):
    """Alternate exact E-steps and M-steps for ``cfg.em_iters`` iterations.

    When no ``model`` is given, filters are initialised uniformly at random and
    warm-started by one M-step on random components with zero offsets.
    ``checkpoint(iteration, model)`` is called after every iteration.

    Returns ``(model, trace, assignments)``.
    """
    stack = [np.asarray(a, dtype=np.float64) for a in stack]
    categories = np.asarray(categories, dtype=np.int64)
    n = len(categories)
    if n == 0:
        raise ValueError("empty training set")
    rng = np.random.default_rng(cfg.seed)
    if model is None:
        model = init_model(spec, cfg.seed, alpha=cfg.alpha, init_scale=cfg.init_scale)
        warm = [HiddenAssignment(tuple(int(rng.integers(spec[l].mixtures)) for l in range(spec.L)),
                                 ((0, 0),) * spec.L, int(c)) for c in categories]
        model, _ = _m_step(stack, warm, model, EmConfig(**{**cfg.__dict__, "improvement_guard": False}), rng)
    trace = EmTrace()
    idle = [np.zeros(spec[l].mixtures, dtype=int) for l in range(spec.L)]
    assignments = None
    for it in range(1, cfg.em_iters + 1):
        assignments = e_step_batch(stack, categories, model)
        model, flagged = _m_step(stack, assignments, model, cfg, rng)
        hists = []
        for l in range(spec.L):
            h = np.bincount([H.gammas[l] for H in assignments], minlength=spec[l].mixtures)
            hists.append(h.tolist())
            idle[l] = np.where(h == 0, idle[l] + 1, 0)
            for g in np.nonzero(idle[l] >= cfg.starvation_patience)[0]:
                _reseed(model.layers[l], int(g), int(np.argmax(h)), rng)
                idle[l][g] = 0
        trace.loglik.append(complete_data_loglik(stack, assignments, model))
        trace.recon.append([residual_ss(stack, assignments, model.layers[l], l) / n
                            for l in range(spec.L)])
        trace.histograms.append(hists)
        trace.flagged.append(flagged)
        if checkpoint is not None:
            checkpoint(it, model)
    return model, trace, assignments
