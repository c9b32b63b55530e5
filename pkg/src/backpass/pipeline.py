"""End-to-end training: encoder, observation fit, hard EM."""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import dataset as ds
from . import pngio
from .encoder import EncoderConfig, EncoderWeights, forward_batch, mask_image, one_hot_top, train_encoder
from .genmodel import GenerativeModel
from .hierarchy import HierarchySpec, t3
from .learning import EmConfig, hard_em
from .observation import fit_observation, fit_report

log = logging.getLogger(__name__)


@dataclass
class ModelConfig:
    top_mixtures: int = 16
    mixtures: int = 4
    top_offset: int = 2
    offset: int = 1
    ngram_order: int = 1

    def spec(self, num_categories: int = len(ds.CATEGORIES)) -> HierarchySpec:
        return t3(num_categories, self.top_mixtures, self.mixtures, self.top_offset, self.offset,
                  self.ngram_order)


@dataclass
class ObservationConfig:
    n_fit_scenes: int = 200
    n_grid: int = 64
    clutter_count: int = 3


def quantize(img):
    """Round-trip through 8-bit, as images stored on disk are."""
    return pngio.to_uint8(img)[None].astype(np.float64) / 255.0


def instance_stacks(images, masks, categories, enc: EncoderWeights, spec: HierarchySpec):
    """Batched top-down stacks of masked instances with one-hot top layers."""
    masked = np.stack([mask_image(i, m) for i, m in zip(images, masks)])
    return one_hot_top(forward_batch(masked, enc, spec), categories, spec)


def fit_pairs(seed: int, cfg: ObservationConfig, enc: EncoderWeights, spec: HierarchySpec):
    """(F_bu, F_td) pairs from cluttered scenes built from training-pool poses."""
    scenes, inst_imgs, inst_masks, owner = [], [], [], []
    for j in range(cfg.n_fit_scenes):
        params, cseed = ds.scene_params(seed, "fit", j, rotations=ds.TRAIN_ROTATIONS)
        scene, masks, _ = ds.compose_scene(params, cfg.clutter_count, cseed)
        scene = quantize(scene)
        scenes.append(scene)
        for m in masks:
            inst_imgs.append(scene)
            inst_masks.append(m)
            owner.append(j)
    bu = forward_batch(np.stack(scenes), enc, spec)
    masked = np.stack([mask_image(i, m) for i, m in zip(inst_imgs, inst_masks)])
    td = forward_batch(masked, enc, spec)
    owner = np.array(owner)
    return [([a[owner[k]] for a in bu], [a[k] for a in td]) for k in range(len(owner))]


def train_all(data_dir, out_dir, model_cfg=ModelConfig(), enc_cfg=EncoderConfig(),
              obs_cfg=ObservationConfig(), em_cfg=EmConfig(), seed: int = 0):
    """Train every component from a generated dataset and write checkpoints.

    Outputs in ``out_dir``: ``encoder.ntf``, ``encoder_log.csv``,
    ``observation_fit.json``, ``model.ntf`` + ``model.json``, ``em_trace.csv``
    and ``checkpoints/model_iterNN.{ntf,json}``.
    Returns ``(encoder, model, trace)``.
    """
    out = Path(out_dir)
    (out / "checkpoints").mkdir(parents=True, exist_ok=True)
    index = ds.load_index(data_dir)
    train = [r for r in index["records"] if r["split"] == "train"]
    if not train:
        raise ValueError("dataset has no training records")
    images, masks = ds.load_records(data_dir, train)
    labels = np.array([r["instances"][0]["category"] for r in train])
    spec = model_cfg.spec()

    log.info("training encoder on %d images", len(images))
    enc, hist = train_encoder(images, labels, spec, enc_cfg, log_path=out / "encoder_log.csv")
    enc.save(out / "encoder.ntf")

    log.info("fitting observation model")
    pairs = fit_pairs(seed, obs_cfg, enc, spec)
    fits = fit_observation(pairs, range(spec.L), n_grid=obs_cfg.n_grid)
    (out / "observation_fit.json").write_text(json.dumps(fit_report(fits), indent=1, sort_keys=True))

    log.info("hard EM")
    stack = instance_stacks(images, [m[0] for m in masks], labels, enc, spec)

    def checkpoint(it, model):
        model.save(out / "checkpoints" / f"model_iter{it:02d}.ntf")

    model, trace, _ = hard_em(stack, labels, spec, em_cfg, checkpoint=checkpoint)
    model.observation = [f.params for f in fits]
    model.save(out / "model.ntf")
    trace.write_csv(out / "em_trace.csv")
    return enc, model, trace
