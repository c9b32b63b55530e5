"""Bottom-up CNN that supplies the observed activation stacks.

A toy conv/relu/pool network stands in for a large pretrained classifier.
Its classifier head exists only for training; the logits are never part of
the generative model.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import ntf
from .hierarchy import HierarchySpec
from .tensor import (FilterBank, ShapeError, conv2d, conv2d_grad, maxpool2, maxpool2_grad,
                     relu)

BACKGROUND = 0.0


@dataclass
class EncoderWeights:
    convs: list
    cls_w: np.ndarray
    cls_b: np.ndarray

    def copy(self) -> "EncoderWeights":
        return EncoderWeights([c.copy() for c in self.convs], self.cls_w.copy(), self.cls_b.copy())

    def to_tensors(self) -> dict:
        t = {}
        for i, c in enumerate(self.convs):
            t[f"conv{i + 1}.weight"] = c.weights
            t[f"conv{i + 1}.bias"] = c.bias
        t["classifier.weight"] = self.cls_w
        t["classifier.bias"] = self.cls_b
        return t

    @classmethod
    def from_tensors(cls, t: dict) -> "EncoderWeights":
        n = sum(1 for k in t if k.startswith("conv") and k.endswith(".weight"))
        convs = [FilterBank(t[f"conv{i + 1}.weight"], t[f"conv{i + 1}.bias"]) for i in range(n)]
        return cls(convs, t["classifier.weight"], t["classifier.bias"])

    def save(self, path):
        ntf.save(path, self.to_tensors(), {"kind": "encoder"})

    @classmethod
    def load(cls, path) -> "EncoderWeights":
        tensors, _ = ntf.load(path)
        return cls.from_tensors(tensors)


@dataclass
class ActivationStack:
    """Per-layer activations F^0..F^L; ``role`` is ``"bu"`` or ``"td"``.

    Layers may carry a leading batch axis when produced by ``forward_batch``.
    """

    role: str
    layers: list = field(default_factory=list)

    def __len__(self):
        return len(self.layers)

    def __getitem__(self, l):
        return self.layers[l]

    def copy(self) -> "ActivationStack":
        return ActivationStack(self.role, [np.array(a, copy=True) for a in self.layers])


def init_encoder(spec: HierarchySpec, seed: int = 0) -> EncoderWeights:
    """He-normal conv filters, zero biases, small classifier weights."""
    rng = np.random.default_rng(seed)
    convs = []
    for l in range(1, spec.L):
        lo, hi = spec[l - 1], spec[l]
        k = hi.bu_kernel
        w = rng.normal(0.0, np.sqrt(2.0 / (lo.channels * k * k)), size=(hi.channels, lo.channels, k, k))
        convs.append(FilterBank(w, np.zeros(hi.channels)))
    feat = int(np.prod(spec[spec.L - 1].shape))
    cls_w = rng.normal(0.0, np.sqrt(1.0 / feat), size=(spec.num_categories, feat))
    return EncoderWeights(convs, cls_w, np.zeros(spec.num_categories))


def _check_image(images, spec):
    if images.shape[1:] != spec[0].shape:
        raise ShapeError(f"image shape {images.shape[1:]} does not match layer 0 {spec[0].shape}")


def forward_batch(images, w: EncoderWeights, spec: HierarchySpec, keep_cache: bool = False):
    """Forward a (N, C, H, W) batch; returns a list of per-layer (N, ...) arrays.

    With ``keep_cache`` also returns pre-activation tensors needed for
    backpropagation.
    """
    x = np.asarray(images, dtype=np.float64)
    _check_image(x, spec)
    layers, cache = [x], []
    for conv in w.convs:
        z = conv2d(x, conv, padding=conv.kernel_h // 2)
        a = relu(z)
        x = maxpool2(a)
        cache.append((layers[-1], z, a))
        layers.append(x)
    feat = x.reshape(len(x), -1)
    logits = feat @ w.cls_w.T + w.cls_b
    layers.append(logits.reshape(len(x), spec.num_categories, 1, 1))
    return (layers, cache) if keep_cache else layers


def forward(image, w: EncoderWeights, spec: HierarchySpec) -> ActivationStack:
    """Bottom-up stack for one (C, H, W) image; the top layer holds classifier logits."""
    layers = forward_batch(np.asarray(image)[None], w, spec)
    return ActivationStack("bu", [a[0] for a in layers])


def mask_image(image, mask):
    image = np.asarray(image, dtype=np.float64)
    mask = np.asarray(mask, dtype=np.float64)
    if mask.shape[-2:] != image.shape[-2:]:
        raise ShapeError("mask and image spatial sizes differ")
    return np.where(mask > 0.5, image, BACKGROUND)


def forward_masked(image, mask, w: EncoderWeights, spec: HierarchySpec) -> ActivationStack:
    """Forward of the masked instance; outside the mask the image is set to the background."""
    stack = forward(mask_image(image, mask), w, spec)
    stack.role = "td"
    return stack


def one_hot_top(stack_layers, categories, spec: HierarchySpec):
    """Replace the logits layer of a batched stack by one-hot category vectors."""
    top = np.zeros((len(categories), spec.num_categories, 1, 1))
    top[np.arange(len(categories)), np.asarray(categories), 0, 0] = 1.0
    return list(stack_layers[:-1]) + [top]


@dataclass
class EncoderConfig:
    epochs: int = 30
    lr: float = 0.05
    batch: int = 20
    seed: int = 0


def _softmax_xent(logits, labels):
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    loss = -logp[np.arange(len(labels)), labels].mean()
    grad = np.exp(logp)
    grad[np.arange(len(labels)), labels] -= 1.0
    return loss, grad / len(labels)


def encoder_grads(images, labels, w: EncoderWeights, spec: HierarchySpec):
    """Mean cross-entropy and its gradients (list of (dW, db) per conv, dcls_w, dcls_b)."""
    layers, cache = forward_batch(images, w, spec, keep_cache=True)
    feat = layers[-2].reshape(len(images), -1)
    logits = feat @ w.cls_w.T + w.cls_b
    loss, g = _softmax_xent(logits, labels)
    d_cls_w, d_cls_b = g.T @ feat, g.sum(axis=0)
    gx = (g @ w.cls_w).reshape(layers[-2].shape)
    conv_grads = [None] * len(w.convs)
    for i in reversed(range(len(w.convs))):
        x_in, z, a = cache[i]
        ga = maxpool2_grad(a, gx)
        gz = np.where(z > 0.0, ga, 0.0)
        conv = w.convs[i]
        dw, db, gx = conv2d_grad(x_in, conv, conv.kernel_h // 2, gz)
        conv_grads[i] = (dw, db)
    return loss, logits, conv_grads, d_cls_w, d_cls_b


def train_encoder(images, labels, spec: HierarchySpec, cfg: EncoderConfig = EncoderConfig(),
                  log_path=None, init: EncoderWeights | None = None):
    """Mini-batch SGD on softmax cross-entropy.

    Returns ``(weights, history)`` where history rows are
    ``(epoch, loss, accuracy)`` measured during the epoch. When ``log_path``
    is given the history is also written as CSV.
    """
    images = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if len(images) == 0:
        raise ValueError("empty training set")
    w = init.copy() if init is not None else init_encoder(spec, cfg.seed)
    rng = np.random.default_rng(cfg.seed + 1)
    history = []
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(images))
        tot_loss, correct = 0.0, 0
        for start in range(0, len(order), cfg.batch):
            idx = order[start:start + cfg.batch]
            loss, logits, cg, dcw, dcb = encoder_grads(images[idx], labels[idx], w, spec)
            tot_loss += loss * len(idx)
            correct += int((logits.argmax(axis=1) == labels[idx]).sum())
            for conv, (dw, db) in zip(w.convs, cg):
                conv.weights -= cfg.lr * dw
                conv.bias -= cfg.lr * db
            w.cls_w -= cfg.lr * dcw
            w.cls_b -= cfg.lr * dcb
        history.append((epoch, tot_loss / len(images), correct / len(images)))
    if log_path is not None:
        with open(log_path, "w", newline="") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(["epoch", "loss", "accuracy"])
            for e, l, a in history:
                wr.writerow([e, repr(float(l)), repr(float(a))])
    return w, history


def accuracy(images, labels, w: EncoderWeights, spec: HierarchySpec) -> float:
    logits = forward_batch(images, w, spec)[-1].reshape(len(images), -1)
    return float((logits.argmax(axis=1) == np.asarray(labels)).mean())


def project_mask(mask, spec: HierarchySpec, layer: int):
    """Max-pool a (1, H, W) mask down to the spatial size of ``layer``."""
    m = np.asarray(mask, dtype=np.float64)
    for _ in range(min(layer, spec.L - 1)):
        m = maxpool2(m)
    if layer == spec.L:
        return np.ones((1, 1, 1))
    return m


def compositionality_probe(clean_instance, distractor, steps: int, w: EncoderWeights,
                           spec: HierarchySpec, mask=None, row: int | None = None):
    """Slide an occluding distractor in from the left until it covers the instance.

    For every frame and layer, report the norm of the activation change
    relative to the clean image, restricted to the instance mask projected to
    that layer. Frame 0 places the distractor fully outside the canvas.

    Returns a list of ``(frame, layer, x_offset, change_norm)`` rows.
    """
    clean = np.asarray(clean_instance, dtype=np.float64)
    dis = np.asarray(distractor, dtype=np.float64)
    if dis.ndim == 2:
        dis = dis[None]
    if steps < 2:
        raise ValueError("steps must be >= 2")
    _, H, W = clean.shape
    dh, dw = dis.shape[-2:]
    if dh > H or dw > W:
        raise ValueError("distractor must be smaller than the image")
    if mask is None:
        mask = (clean > 0).astype(np.float64)
    ys, xs = np.nonzero(mask[0])
    if row is None:
        row = int(np.clip(round(ys.mean() - dh / 2), 0, H - dh)) if len(ys) else (H - dh) // 2
    # final frame centres the distractor on the instance
    x_end = int(round(xs.mean() - dw / 2)) if len(xs) else (W - dw) // 2
    x_positions = np.linspace(-dw, x_end, steps).round().astype(int)

    base = forward(clean, w, spec)
    masks = [project_mask(mask, spec, l) for l in range(spec.L + 1)]
    rows = []
    for f, x0 in enumerate(x_positions):
        frame = clean.copy()
        xa, xb = max(x0, 0), min(x0 + dw, W)
        if xb > xa:
            patch = dis[:, :, xa - x0:xb - x0]
            region = frame[:, row:row + dh, xa:xb]
            frame[:, row:row + dh, xa:xb] = np.where(patch > 0, patch, region)
        act = forward(frame, w, spec)
        for l in range(spec.L + 1):
            diff = (act[l] - base[l]) * masks[l]
            rows.append((f, l, int(x0), float(np.linalg.norm(diff))))
    return rows


def write_probe_csv(path, rows):
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["frame", "layer", "x_offset", "change_norm"])
        for r in rows:
            wr.writerow([r[0], r[1], r[2], repr(float(r[3]))])
