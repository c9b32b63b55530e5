"""Threshold-Gaussian observation model relating scene activations to
single-instance activations, and its maximum-likelihood fit.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

LOG_2PI = math.log(2.0 * math.pi)
VAR_FLOOR = 1e-6


@dataclass
class ObservationLayerParams:
    """``lam`` threshold, ``beta`` background mean, per-channel foreground std
    ``sigma1`` and background std ``sigma2``."""

    lam: float
    beta: float
    sigma1: np.ndarray
    sigma2: float

    def __post_init__(self):
        self.sigma1 = np.atleast_1d(np.asarray(self.sigma1, dtype=np.float64))
        if np.any(self.sigma1 <= 0) or self.sigma2 <= 0:
            raise ValueError("observation standard deviations must be positive")

    def copy(self) -> "ObservationLayerParams":
        return ObservationLayerParams(self.lam, self.beta, self.sigma1.copy(), self.sigma2)

    def to_dict(self):
        return {"lambda": self.lam, "beta": self.beta, "sigma2": self.sigma2,
                "sigma1": self.sigma1.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(d["lambda"], d["beta"], np.array(d["sigma1"]), d["sigma2"])


def log_normal(x, mu, sigma):
    x = np.asarray(x, dtype=np.float64)
    return -0.5 * LOG_2PI - np.log(sigma) - (x - mu) ** 2 / (2.0 * sigma * sigma)


def _sigma1_map(params, shape):
    """Broadcast per-channel sigma1 over a (..., C, H, W) array."""
    s = params.sigma1
    if len(shape) < 3:
        return s[0] if s.size == 1 else s
    return s.reshape((-1, 1, 1))


def elem_loglik(f_bu, f_td, channel: int, params: ObservationLayerParams) -> float:
    """log P(f_bu | f_td) for a single element of channel ``channel``.

    At ``f_td == lam`` the better of the two branches is taken.
    """
    s1 = params.sigma1[channel if params.sigma1.size > 1 else 0]
    fg = float(log_normal(f_bu, f_td, s1))
    bg = float(log_normal(f_bu, params.beta, params.sigma2))
    if f_td > params.lam:
        return fg
    if f_td < params.lam:
        return bg
    return max(fg, bg)


def elem_loglik_array(F_bu, F_td, params: ObservationLayerParams):
    """Vectorised ``elem_loglik`` over (..., C, H, W) arrays."""
    F_bu = np.asarray(F_bu, dtype=np.float64)
    F_td = np.asarray(F_td, dtype=np.float64)
    s1 = _sigma1_map(params, F_bu.shape)
    fg = log_normal(F_bu, F_td, s1)
    bg = log_normal(F_bu, params.beta, params.sigma2)
    out = np.where(F_td > params.lam, fg, bg)
    return np.where(F_td == params.lam, np.maximum(fg, bg), out)


def layer_loglik(F_bu, F_td, params: ObservationLayerParams) -> float:
    F_bu = np.asarray(F_bu, dtype=np.float64)
    F_td = np.asarray(F_td, dtype=np.float64)
    if F_bu.shape != F_td.shape:
        raise ValueError(f"shape mismatch {F_bu.shape} vs {F_td.shape}")
    return float(elem_loglik_array(F_bu, F_td, params).sum())


@dataclass
class LayerFit:
    params: ObservationLayerParams
    loglik: float
    flagged_channels: list = field(default_factory=list)
    grid: np.ndarray | None = None
    grid_loglik: np.ndarray | None = None

    def report(self):
        return {**self.params.to_dict(), "flagged_channels": list(self.flagged_channels),
                "loglik": self.loglik}


def default_grid(f_td, n: int = 64) -> np.ndarray:
    """``n`` evenly spaced thresholds in (0, p99 of f_td].

    Zero itself is left out: at lambda = 0 every inactive unit lies on the
    boundary, and a hypothesis that generates nothing explains any scene.
    """
    hi = float(np.percentile(np.asarray(f_td), 99))
    return np.linspace(0.0, hi if hi > 0 else 1.0, n + 1)[1:]


def _moments(bu, td, fg, lam):
    """Closed-form Gaussians for a given foreground partition."""
    resid2 = np.where(fg, (bu - td) ** 2, 0.0)
    n_c = fg.sum(axis=1)
    ss_c = resid2.sum(axis=1)
    n_fg, ss_fg = n_c.sum(), ss_c.sum()
    pooled = max(ss_fg / n_fg, VAR_FLOOR) if n_fg else 1.0
    var1 = np.where(n_c > 0, np.maximum(ss_c / np.maximum(n_c, 1), VAR_FLOOR), pooled)
    flagged = [int(c) for c in np.nonzero(n_c == 0)[0]]

    bg_vals = bu[~fg]
    if bg_vals.size:
        beta = float(bg_vals.mean())
        var2 = max(float(((bg_vals - beta) ** 2).mean()), VAR_FLOOR)
        ss_bg = float(((bg_vals - beta) ** 2).sum())
    else:
        beta, var2, ss_bg = 0.0, 1.0, 0.0

    ll = float(np.sum(-0.5 * n_c * (LOG_2PI + np.log(var1)) - ss_c / (2.0 * var1)))
    ll += -0.5 * bg_vals.size * (LOG_2PI + math.log(var2)) - ss_bg / (2.0 * var2)
    params = ObservationLayerParams(float(lam), beta, np.sqrt(var1), math.sqrt(var2))
    return params, ll, flagged


def _fit_at(bu, td, lam, max_iter: int = 50):
    """Closed-form Gaussians for one threshold.

    ``bu``/``td`` are (C, M) per-channel element arrays. Elements with
    ``f_td == lam`` may sit on either branch (boundary coin); they are
    assigned to their better branch by alternating with the Gaussian fit,
    from both all-foreground and all-background starts. Without ties this
    is the plain ``f_td >= lam`` partition.

    Returns ``(params, loglik, flagged)``.
    """
    tie = td == lam
    if not tie.any():
        return _moments(bu, td, td >= lam, lam)
    best = None
    for start in (True, False):
        fg = (td > lam) | (tie & start)
        res = _moments(bu, td, fg, lam)
        for _ in range(max_iter):
            p = res[0]
            s1 = p.sigma1[:, None]
            to_fg = log_normal(bu, td, s1) >= log_normal(bu, p.beta, p.sigma2)
            new = (td > lam) | (tie & to_fg)
            if np.array_equal(new, fg):
                break
            fg = new
            cand = _moments(bu, td, fg, lam)
            if cand[1] <= res[1]:
                break
            res = cand
        if best is None or res[1] > best[1]:
            best = res
    return best


def _gather(pairs, layer):
    bu = np.concatenate([np.asarray(p[0][layer], dtype=np.float64).reshape(
        -1, *np.shape(p[0][layer])[-3:]) for p in pairs])
    td = np.concatenate([np.asarray(p[1][layer], dtype=np.float64).reshape(
        -1, *np.shape(p[1][layer])[-3:]) for p in pairs])
    C = bu.shape[1]
    return bu.transpose(1, 0, 2, 3).reshape(C, -1), td.transpose(1, 0, 2, 3).reshape(C, -1)


def fit_layer(bu, td, grid) -> LayerFit:
    """Pick the threshold on ``grid`` with the highest likelihood for (C, M) arrays."""
    grid = np.asarray(grid, dtype=np.float64)
    if grid.size == 0:
        raise ValueError("empty lambda grid")
    best, lls = None, []
    for lam in grid:
        params, ll, flagged = _fit_at(bu, td, lam)
        lls.append(ll)
        if best is None or ll > best.loglik:
            best = LayerFit(params, ll, flagged)
    best.grid, best.grid_loglik = grid, np.array(lls)
    return best


def fit_observation(pairs, layers, lambda_grids=None, n_grid: int = 64):
    """Fit threshold-Gaussian parameters per layer from (F_bu, F_td) stack pairs.

    ``pairs`` is a sequence of (bottom-up stack, top-down stack); each stack
    is indexable by layer and may carry a batch axis. ``layers`` lists the
    layer indices to fit. ``lambda_grids`` optionally maps layer index to a
    grid; otherwise 64 points from 0 to the 99th percentile of F_td are used.

    Returns a list of :class:`LayerFit`, one per entry in ``layers``.
    """
    pairs = list(pairs)
    if len(pairs) < 2:
        raise ValueError("need at least two (F_bu, F_td) pairs")
    fits = []
    for l in layers:
        bu, td = _gather(pairs, l)
        grid = lambda_grids[l] if lambda_grids is not None else default_grid(td, n_grid)
        fits.append(fit_layer(bu, td, grid))
    return fits


def fit_report(fits) -> list:
    return [f.report() for f in fits]
