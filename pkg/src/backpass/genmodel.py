"""Top-down generative side: mixtures of top-down convolutions with hidden
(component, offset) variables per layer and an n-gram prior over components.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import ntf
from .hierarchy import HierarchySpec
from .observation import ObservationLayerParams
from .tensor import FilterBank, apply_offset, relu, transposed_conv2d

LOG_2PI = math.log(2.0 * math.pi)
SCHEMA_VERSION = 1


@dataclass(frozen=True)
class HiddenAssignment:
    """``gammas[l]`` and ``offsets[l]`` for generative layers l = 0..L-1, plus the category."""

    gammas: tuple
    offsets: tuple
    category: int

    def __post_init__(self):
        object.__setattr__(self, "gammas", tuple(int(g) for g in self.gammas))
        object.__setattr__(self, "offsets", tuple((int(a), int(b)) for a, b in self.offsets))

    def layer(self, l):
        return self.gammas[l], self.offsets[l]

    def to_dict(self):
        return {"category": self.category, "gammas": list(self.gammas),
                "offsets": [list(o) for o in self.offsets]}

    def validate(self, spec: HierarchySpec):
        if len(self.gammas) != spec.L or len(self.offsets) != spec.L:
            raise ValueError("assignment length must equal the number of generative layers")
        if not 0 <= self.category < spec.num_categories:
            raise ValueError(f"category {self.category} out of range")
        for l in range(spec.L):
            g, (dy, dx) = self.layer(l)
            if not 0 <= g < spec[l].mixtures:
                raise ValueError(f"layer {l}: gamma {g} out of range")
            d = spec[l].offset_range
            if abs(dy) > d or abs(dx) > d:
                raise ValueError(f"layer {l}: offset ({dy}, {dx}) outside [-{d}, {d}]^2")


@dataclass
class TopDownLayerParams:
    banks: list
    sigma0: float
    offset_range: int = 0

    def __post_init__(self):
        if self.sigma0 <= 0:
            raise ValueError("sigma0 must be positive")

    @property
    def K(self) -> int:
        return len(self.banks)

    def copy(self) -> "TopDownLayerParams":
        return TopDownLayerParams([b.copy() for b in self.banks], self.sigma0, self.offset_range)


def topdown_base(upper, gamma: int, params: TopDownLayerParams):
    """``relu(transposed_conv2d(upper, W_gamma) + b_gamma)`` before the offset."""
    if not 0 <= gamma < params.K:
        raise ValueError(f"gamma {gamma} out of range [0, {params.K})")
    return relu(transposed_conv2d(upper, params.banks[gamma]))


def topdown_mean(upper, gamma: int, offset, params: TopDownLayerParams):
    """Mean of the lower layer given the upper layer and (gamma, (dy, dx))."""
    dy, dx = offset
    d = params.offset_range
    if abs(dy) > d or abs(dx) > d:
        raise ValueError(f"offset ({dy}, {dx}) outside [-{d}, {d}]^2")
    return apply_offset(topdown_base(upper, gamma, params), dy, dx)


def log_gen_density(lower, mean, sigma0: float) -> float:
    """Sum of element-wise log N(lower; mean, sigma0), sigma0 being a standard deviation."""
    if sigma0 <= 0:
        raise ValueError("sigma0 must be positive")
    lower = np.asarray(lower, dtype=np.float64)
    mean = np.asarray(mean, dtype=np.float64)
    if lower.shape != mean.shape:
        raise ValueError("shape mismatch")
    n = lower.size
    ss = float(np.sum((lower - mean) ** 2))
    return -0.5 * n * LOG_2PI - n * math.log(sigma0) - ss / (2.0 * sigma0 * sigma0)


@dataclass
class NGramPrior:
    """Dirichlet-smoothed conditional counts of each layer's component index.

    ``counts[l]`` has one axis per conditioning layer, nearest first
    (gamma^{l+1}, gamma^{l+2}, ...), followed by an axis over gamma^l.
    The prefix never reaches into the category layer.
    """

    order: int
    counts: list
    alpha: float = 1.0

    @classmethod
    def empty(cls, spec: HierarchySpec, order: int | None = None, alpha: float = 1.0) -> "NGramPrior":
        order = spec.ngram_order if order is None else order
        counts = []
        for l in range(spec.L):
            m = min(order, spec.L - 1 - l)
            dims = [spec[l + k].mixtures for k in range(1, m + 1)] + [spec[l].mixtures]
            counts.append(np.zeros(dims))
        return cls(order, counts, alpha)

    def prefix_len(self, l: int) -> int:
        return self.counts[l].ndim - 1

    def prefix(self, l: int, gammas) -> tuple:
        """Conditioning indices for layer l taken from a full gamma sequence."""
        return tuple(int(gammas[l + k]) for k in range(1, self.prefix_len(l) + 1))

    def log_probs(self, l: int, prefix=()) -> np.ndarray:
        c = self.counts[l][tuple(prefix)]
        K = c.shape[-1]
        return np.log((c + self.alpha) / (c.sum() + self.alpha * K))

    def copy(self) -> "NGramPrior":
        return NGramPrior(self.order, [c.copy() for c in self.counts], self.alpha)


def ngram_log_prob(prefix, gamma: int, prior: NGramPrior, layer: int) -> float:
    prefix = tuple(prefix)
    if len(prefix) != prior.prefix_len(layer):
        raise ValueError(f"layer {layer} expects a prefix of length {prior.prefix_len(layer)}")
    c = prior.counts[layer][prefix]
    K = c.shape[-1]
    return float(math.log((c[gamma] + prior.alpha) / (c.sum() + prior.alpha * K)))


@dataclass
class GenerativeModel:
    spec: HierarchySpec
    layers: list
    prior: NGramPrior
    category_logprior: np.ndarray
    observation: list | None = None

    @property
    def L(self) -> int:
        return self.spec.L

    def offset_logprior(self, l: int) -> float:
        return -math.log(self.spec[l].n_offsets)

    def copy(self) -> "GenerativeModel":
        obs = None if self.observation is None else [o.copy() for o in self.observation]
        return GenerativeModel(self.spec, [p.copy() for p in self.layers], self.prior.copy(),
                               self.category_logprior.copy(), obs)

    # persistence: NTF for filters, JSON sidecar for everything else
    def save(self, ntf_path, json_path=None):
        ntf_path = Path(ntf_path)
        json_path = Path(json_path) if json_path else ntf_path.with_suffix(".json")
        tensors = {}
        for l, p in enumerate(self.layers):
            for k, b in enumerate(p.banks):
                tensors[f"layer{l}.k{k}.weight"] = b.weights
                tensors[f"layer{l}.k{k}.bias"] = b.bias
        ntf.save(ntf_path, tensors, {"kind": "generative_model"})
        side = {
            "schema_version": SCHEMA_VERSION,
            "spec": self.spec.to_dict(),
            "sigma0": [p.sigma0 for p in self.layers],
            "ngram": {"order": self.prior.order, "alpha": self.prior.alpha,
                      "counts": [c.tolist() for c in self.prior.counts]},
            "category_logprior": self.category_logprior.tolist(),
            "observation": None if self.observation is None
            else [o.to_dict() for o in self.observation],
        }
        json_path.write_text(json.dumps(side, indent=1, sort_keys=True))

    @classmethod
    def load(cls, ntf_path, json_path=None) -> "GenerativeModel":
        ntf_path = Path(ntf_path)
        json_path = Path(json_path) if json_path else ntf_path.with_suffix(".json")
        side = json.loads(json_path.read_text())
        if side.get("schema_version") != SCHEMA_VERSION:
            raise ValueError("unsupported model schema version")
        spec = HierarchySpec.from_dict(side["spec"])
        tensors, _ = ntf.load(ntf_path)
        layers = []
        for l in range(spec.L):
            banks = [FilterBank(tensors[f"layer{l}.k{k}.weight"], tensors[f"layer{l}.k{k}.bias"],
                                spec[l].td_stride) for k in range(spec[l].mixtures)]
            layers.append(TopDownLayerParams(banks, side["sigma0"][l], spec[l].offset_range))
        ng = side["ngram"]
        prior = NGramPrior(ng["order"], [np.array(c, dtype=np.float64).reshape(np.shape(c))
                                         for c in ng["counts"]], ng["alpha"])
        obs = None if side["observation"] is None else [
            ObservationLayerParams.from_dict(o) for o in side["observation"]]
        return cls(spec, layers, prior, np.array(side["category_logprior"]), obs)


def init_model(spec: HierarchySpec, seed: int = 0, sigma0: float = 1.0, alpha: float = 1.0,
               init_scale: float = 0.05) -> GenerativeModel:
    """Filters uniform in [-init_scale, init_scale], zero biases, empty counts, uniform categories."""
    rng = np.random.default_rng(seed)
    layers = []
    for l in range(spec.L):
        lo, up = spec[l], spec[l + 1]
        banks = [FilterBank(rng.uniform(-init_scale, init_scale,
                                        size=(lo.channels, up.channels, lo.td_kernel, lo.td_kernel)),
                            np.zeros(lo.channels), lo.td_stride)
                 for _ in range(lo.mixtures)]
        layers.append(TopDownLayerParams(banks, sigma0, lo.offset_range))
    C = spec.num_categories
    return GenerativeModel(spec, layers, NGramPrior.empty(spec, alpha=alpha),
                           np.full(C, -math.log(C)))


def one_hot(category: int, spec: HierarchySpec):
    top = np.zeros(spec[spec.L].shape)
    top[category, 0, 0] = 1.0
    return top


def log_hidden_prior(H: HiddenAssignment, model: GenerativeModel) -> float:
    """log P(H): uniform offsets, n-gram components, category prior."""
    total = float(model.category_logprior[H.category])
    for l in range(model.L):
        total += model.offset_logprior(l)
        total += ngram_log_prob(model.prior.prefix(l, H.gammas), H.gammas[l], model.prior, l)
    return total


def topdown_pass(H: HiddenAssignment, model: GenerativeModel):
    """Deterministic top-down stack (noise-free means) for a full assignment."""
    L = model.L
    stack = [None] * (L + 1)
    stack[L] = one_hot(H.category, model.spec)
    for l in range(L - 1, -1, -1):
        g, off = H.layer(l)
        stack[l] = topdown_mean(stack[l + 1], g, off, model.layers[l])
    return stack


def log_joint_td(H: HiddenAssignment, stack, model: GenerativeModel) -> float:
    """log P(F_td, H) for an observed top-down stack."""
    total = log_hidden_prior(H, model)
    for l in range(model.L):
        g, off = H.layer(l)
        mean = topdown_mean(stack[l + 1], g, off, model.layers[l])
        total += log_gen_density(stack[l], mean, model.layers[l].sigma0)
    return total


def sample_prior(category: int, model: GenerativeModel, rng_seed, clamp: dict | None = None):
    """Ancestral sample of (H, F_td) given the category.

    ``clamp`` maps a layer index to a fixed ``(gamma, (dy, dx))``. Gaussian
    noise is added to every generated layer and negatives are clipped to 0.

    Returns ``(HiddenAssignment, list of per-layer arrays)``.
    """
    spec = model.spec
    if not 0 <= category < spec.num_categories:
        raise ValueError(f"category {category} out of range")
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    clamp = clamp or {}
    L = model.L
    gammas, offsets = [0] * L, [(0, 0)] * L
    stack = [None] * (L + 1)
    stack[L] = one_hot(category, spec)
    for l in range(L - 1, -1, -1):
        if l in clamp:
            g, off = clamp[l]
            g, off = int(g), (int(off[0]), int(off[1]))
        else:
            p = np.exp(model.prior.log_probs(l, model.prior.prefix(l, gammas)))
            g = int(rng.choice(len(p), p=p / p.sum()))
            d = spec[l].offset_range
            off = (int(rng.integers(-d, d + 1)), int(rng.integers(-d, d + 1)))
        gammas[l], offsets[l] = g, off
        mean = topdown_mean(stack[l + 1], g, off, model.layers[l])
        noise = rng.normal(0.0, 1.0, size=mean.shape) * model.layers[l].sigma0
        stack[l] = np.maximum(mean + noise, 0.0)
    return HiddenAssignment(tuple(gammas), tuple(offsets), category), stack
