"""Draw samples from a generative model and look at how the top layer shapes them.

Samples that share the top-layer assignment (mixture component and offset)
only differ by the lower layers' choices and noise, so they should agree
with each other more than samples drawn freely. With a trained model pass
its directory; without one a freshly initialised model is used, which
makes the same point with less recognisable images.

    python3 demos/sampling.py [model_dir] [out_dir]
"""
import sys
import tempfile
from pathlib import Path

import numpy as np

from backpass import pngio
from backpass.evaluation import clamped_sample_variance
from backpass.genmodel import GenerativeModel, init_model, sample_prior
from backpass.hierarchy import t3

if len(sys.argv) > 1:
    model = GenerativeModel.load(Path(sys.argv[1]) / "model.ntf")
else:
    model = init_model(t3(), seed=0, sigma0=0.05)
out = Path(sys.argv[2]) if len(sys.argv) > 2 else Path(tempfile.mkdtemp(prefix="backpass_samples_"))
out.mkdir(parents=True, exist_ok=True)
top = model.L - 1

rng = np.random.default_rng(0)
free = []
for _ in range(8):
    H, stack = sample_prior(int(rng.integers(model.spec.num_categories)), model, rng)
    free.append(stack[0])
    print("free sample, top layer (gamma, offset):", H.layer(top))

# Fix the top layer to the assignment of one free draw and redraw the rest.
H0, _ = sample_prior(0, model, 123)
clamped = [sample_prior(0, model, rng, clamp={top: H0.layer(top)})[1][0] for _ in range(8)]

pngio.save_gray(out / "free.png", pngio.grid(free, 8, scale_each=True))
pngio.save_gray(out / "clamped.png", pngio.grid(clamped, 8, scale_each=True))
print(f"wrote {out / 'free.png'} and {out / 'clamped.png'}")

within, across = clamped_sample_variance(model, category=0, groups=20, per_group=5, seed=0)
print(f"per-pixel variance within clamped groups {within:.5f}, across groups {across:.5f}")
