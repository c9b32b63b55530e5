"""One backward pass on a tiny hierarchy, step by step.

The micro hierarchy has a 4x4 image, a 2x2x2 middle layer and a category
layer, which makes it small enough to enumerate every hidden assignment.
We build a model by hand, observe a sample from it through the
threshold-Gaussian observation model, and compare the greedy layer-by-layer
MAP with the best assignment found by brute force.

    python3 demos/inference_walkthrough.py
"""
import itertools

import numpy as np

from backpass.genmodel import HiddenAssignment, init_model, log_hidden_prior, sample_prior, topdown_mean
from backpass.hierarchy import micro
from backpass.inference import Clamp, backward_pass, solve_elements, solve_layer
from backpass.observation import ObservationLayerParams

spec = micro(num_categories=1, mixtures=(2, 2), offsets=(1, 1))
model = init_model(spec, seed=3, sigma0=0.3, init_scale=1.0)
rng = np.random.default_rng(3)
for c in model.prior.counts:
    c[...] = rng.integers(1, 5, size=c.shape)
model.observation = [ObservationLayerParams(0.15, 0.05, np.full(spec[l].channels, 0.2), 0.1)
                     for l in range(spec.L)]

# A scene: sample top-down activations, then observe them. Elements above the
# threshold are seen with foreground noise, the rest look like background.
H_true, stack = sample_prior(0, model, rng)
F_bu = []
for l in range(spec.L):
    p, a = model.observation[l], stack[l]
    fg = rng.normal(a, p.sigma1[:, None, None])
    bg = rng.normal(p.beta, p.sigma2, a.shape)
    F_bu.append(np.where(a >= p.lam, fg, bg))
print("generating assignment:", H_true)

# Layer 1 first: every (gamma, offset) candidate is scored with its element-wise
# MAP activations, and the best one is kept.
top = np.ones((1, 1, 1))
sol = solve_layer(F_bu[1], top, (), model, 1, top_m=5)
print("layer 1 candidates, best first:")
for H_l, score in sol.ranked_alternatives:
    print(f"   gamma {H_l[0]} offset {H_l[1]}  score {score:.3f}")

# The full greedy descent repeats this at layer 0 given layer 1's activations.
r = backward_pass(F_bu, Clamp(0), model)
print("greedy assignment:", r.assignment, f"log posterior {r.log_posterior:.3f}")

# Brute force: enumerate all assignments, solving the activations of each
# layer in closed form given the chosen layer above.
best, arg = -np.inf, None
per_layer = [[(g, o) for g in range(spec[l].mixtures) for o in spec[l].offsets()] for l in range(spec.L)]
for combo in itertools.product(*per_layer):
    H = HiddenAssignment(tuple(c[0] for c in combo), tuple(c[1] for c in combo), 0)
    total, upper = log_hidden_prior(H, model), top
    for l in reversed(range(spec.L)):
        p = model.layers[l]
        mean = topdown_mean(upper, H.gammas[l], H.offsets[l], p)
        x, v = solve_elements(F_bu[l], mean, p.sigma0, model.observation[l])
        total += float(v.sum())
        upper = x
    if total > best:
        best, arg = total, H
print("exhaustive best:  ", arg, f"log posterior {best:.3f}")
print("greedy reached the optimum" if r.log_posterior >= best - 1e-9 else
      f"greedy is {best - r.log_posterior:.3f} nats below the optimum")
