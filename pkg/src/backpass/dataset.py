"""Deterministic synthetic shapes: clean single instances and cluttered scenes.

Polygons are rasterized with integer (Q8 fixed-point) edge tests on a 4x4
supersampling grid, so renders are bit-identical across platforms.
Random streams are numpy PCG64 generators keyed by ``(seed, split, index)``.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import pngio

SCHEMA_VERSION = 1
CATEGORIES = ("glider", "dart")

# Nose points towards -y. Units are pixels at scale 1.
_OUTLINES = {
    "glider": [
        (-7.0, 0.0), (-4.0, 1.0), (-1.0, 1.0), (0.0, 7.0), (1.5, 7.0), (1.5, 1.0),
        (4.0, 1.0), (5.5, 3.0), (6.5, 3.0), (6.0, 0.0), (6.5, -3.0), (5.5, -3.0),
        (4.0, -1.0), (1.5, -1.0), (1.5, -7.0), (0.0, -7.0), (-1.0, -1.0), (-4.0, -1.0),
    ],
    "dart": [
        (-7.0, 0.0), (-2.0, 2.0), (5.0, 6.0), (6.5, 6.0), (4.5, 1.5), (6.5, 0.0),
        (4.5, -1.5), (6.5, -6.0), (5.0, -6.0), (-2.0, -2.0),
    ],
}

_Q = 256  # fixed-point subdivisions per pixel
_SS = 4   # supersamples per axis

TRAIN_ROTATIONS = tuple(range(-40, 41, 2))
TEST_ROTATIONS = tuple(range(-39, 40, 2))


@dataclass(frozen=True)
class ShapeParams:
    """Pose of one instance. ``anchor`` is the (row, col) placement cell relative
    to the canvas centre, in units of ``cell`` pixels."""

    category: int
    rotation: float = 0.0
    anchor: tuple = (0, 0)
    intensity: float = 1.0
    jitter: tuple = (0, 0)
    scale: float = 1.0

    def __post_init__(self):
        if not 0 <= self.category < len(CATEGORIES):
            raise ValueError(f"unknown category {self.category}")
        if not 0.3 <= self.intensity <= 1.0:
            raise ValueError(f"intensity {self.intensity} outside [0.3, 1.0]")
        if self.scale <= 0:
            raise ValueError("scale must be positive")
        object.__setattr__(self, "anchor", tuple(int(a) for a in self.anchor))
        object.__setattr__(self, "jitter", tuple(int(a) for a in self.jitter))

    def to_dict(self):
        d = asdict(self)
        d["anchor"], d["jitter"] = list(self.anchor), list(self.jitter)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(d["category"], d["rotation"], tuple(d["anchor"]), d["intensity"],
                   tuple(d["jitter"]), d.get("scale", 1.0))


def _to_fixed(points):
    return np.array([[int(round(y * _Q)), int(round(x * _Q))] for y, x in points], dtype=np.int64)


def rasterize(vertices, canvas=(32, 32)):
    """Coverage in [0, 1] of a polygon given by (y, x) pixel-coordinate vertices.

    Even-odd rule, evaluated exactly in integer arithmetic.
    """
    h, w = canvas
    v = _to_fixed(vertices)
    step = _Q // _SS
    ys = (np.arange(h * _SS, dtype=np.int64) * step + step // 2)[:, None]
    xs = (np.arange(w * _SS, dtype=np.int64) * step + step // 2)[None, :]
    inside = np.zeros((h * _SS, w * _SS), dtype=bool)
    n = len(v)
    for k in range(n):
        y1, x1 = v[k]
        y2, x2 = v[(k + 1) % n]
        if y1 == y2:
            continue
        crosses = (y1 > ys) != (y2 > ys)
        # xs < x1 + (ys - y1) * (x2 - x1) / (y2 - y1), multiplied through by (y2 - y1)
        lhs = (xs - x1) * (y2 - y1)
        rhs = (ys - y1) * (x2 - x1)
        left = lhs < rhs if y2 > y1 else lhs > rhs
        inside ^= crosses & left
    counts = inside.reshape(h, _SS, w, _SS).sum(axis=(1, 3))
    return counts.astype(np.float64) / (_SS * _SS)


def instance_vertices(p: ShapeParams, canvas=(32, 32), cell: int = 8):
    theta = math.radians(p.rotation % 360.0)
    c, s = math.cos(theta), math.sin(theta)
    cy = canvas[0] / 2 + cell * p.anchor[0] + p.jitter[0]
    cx = canvas[1] / 2 + cell * p.anchor[1] + p.jitter[1]
    out = []
    for y, x in _OUTLINES[CATEGORIES[p.category]]:
        y, x = y * p.scale, x * p.scale
        out.append((cy + c * y - s * x, cx + s * y + c * x))
    return out


def render_instance(p: ShapeParams, canvas=(32, 32), cell: int = 8):
    """Anti-aliased filled silhouette on a zero background.

    Returns ``(image, mask)`` as (1, H, W) float64 arrays; the mask marks
    pixels with coverage above one half.
    """
    cov = rasterize(instance_vertices(p, canvas, cell), canvas)
    return (p.intensity * cov)[None], (cov > 0.5).astype(np.float64)[None]


def _clutter_polygon(rng, canvas):
    n = int(rng.integers(3, 6))
    angles = np.sort(rng.uniform(0.0, 2 * np.pi, size=n))
    radii = rng.uniform(1.5, 3.5, size=n)
    cy, cx = rng.uniform(0, canvas[0]), rng.uniform(0, canvas[1])
    verts = [(float(cy + r * np.sin(a)), float(cx + r * np.cos(a))) for a, r in zip(angles, radii)]
    return {"vertices": verts, "intensity": float(rng.uniform(0.3, 0.8))}


def compose_scene(instances, clutter_count: int = 0, seed: int = 0, canvas=(32, 32), cell: int = 8):
    """Max-blend instances and random distractor polygons.

    Returns ``(scene, masks, manifest)``; ``masks`` has one (1, H, W) mask per
    instance and ``manifest`` records the ground truth (paths filled in by
    :func:`generate_dataset`).
    """
    instances = list(instances)
    if len(instances) > 4:
        raise ValueError("at most 4 instances per scene")
    scene = np.zeros((1,) + tuple(canvas))
    masks, records = [], []
    for p in instances:
        img, mask = render_instance(p, canvas, cell)
        scene = np.maximum(scene, img)
        masks.append(mask)
        records.append({"category": p.category, "category_name": CATEGORIES[p.category],
                        "params": p.to_dict(), "cell": list(p.anchor)})
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 7]))
    clutter = [_clutter_polygon(rng, canvas) for _ in range(clutter_count)]
    for c in clutter:
        scene = np.maximum(scene, c["intensity"] * rasterize(c["vertices"], canvas)[None])
    manifest = {"instances": records, "clutter": clutter, "seed": int(seed)}
    return scene, masks, manifest


def stream(seed: int, split: str, index: int) -> np.random.Generator:
    """Independent generator for one record; order- and worker-count-free."""
    code = {"train": 1, "test": 2, "fit": 3, "scale": 4, "pair": 5}[split]
    return np.random.default_rng(np.random.SeedSequence([int(seed), code, int(index)]))


def random_pose(rng, category: int, rotations, anchor=(0, 0), max_jitter: int = 2,
                scale: float = 1.0) -> ShapeParams:
    return ShapeParams(
        category=category,
        rotation=float(rotations[int(rng.integers(len(rotations)))]),
        anchor=tuple(anchor),
        intensity=round(float(rng.uniform(0.6, 1.0)), 3),
        jitter=tuple(int(j) for j in rng.integers(-max_jitter, max_jitter + 1, size=2)),
        scale=scale,
    )


_CELLS = [(r, c) for r in (-1, 0, 1) for c in (-1, 0, 1)]


def two_cells(rng, occluded: bool):
    """Two distinct placement cells: adjacent when ``occluded``, else two apart."""
    want = (lambda d: d == 1) if occluded else (lambda d: d == 2)
    pairs = [(a, b) for i, a in enumerate(_CELLS) for b in _CELLS[i + 1:]
             if want(max(abs(a[0] - b[0]), abs(a[1] - b[1])))]
    a, b = pairs[int(rng.integers(len(pairs)))]
    return (a, b) if rng.random() < 0.5 else (b, a)


def train_params(seed: int, index: int) -> ShapeParams:
    rng = stream(seed, "train", index)
    return random_pose(rng, index % len(CATEGORIES), TRAIN_ROTATIONS)


def scene_params(seed: int, split: str, index: int, n_instances=None, occlusion_rate: float = 0.2,
                 rotations=TEST_ROTATIONS):
    """Instances for a cluttered scene with 1-2 objects (or ``n_instances``)."""
    rng = stream(seed, split, index)
    n = int(rng.integers(1, 3)) if n_instances is None else int(n_instances)
    if n == 1:
        cells = [_CELLS[int(rng.integers(len(_CELLS)))]]
    else:
        cells = list(two_cells(rng, bool(rng.random() < occlusion_rate)))
    cats = [int(rng.integers(len(CATEGORIES))) for _ in cells]
    return [random_pose(rng, c, rotations, anchor=a) for c, a in zip(cats, cells)], int(rng.integers(2**31))


def scale_params(seed: int, index: int, scale: float = 0.5):
    rng = stream(seed, "scale", index)
    cat = int(rng.integers(len(CATEGORIES)))
    return [random_pose(rng, cat, TEST_ROTATIONS, max_jitter=1, scale=scale)], int(rng.integers(2**31))


@dataclass
class DatasetConfig:
    out_dir: str = "data"
    n_train: int = 400
    n_test_scenes: int = 50
    seed: int = 0
    clutter_count: int = 3
    occlusion_rate: float = 0.2
    vary_scale: bool = False
    n_scale_scenes: int = 20
    canvas: int = 32
    cell: int = 8


def _write_record(out: Path, rel_dir: str, stem: str, scene, masks, manifest, split, scene_id):
    (out / rel_dir).mkdir(parents=True, exist_ok=True)
    img_rel = f"{rel_dir}/{stem}.png"
    pngio.save_gray(out / img_rel, scene)
    for k, (m, inst) in enumerate(zip(masks, manifest["instances"])):
        mask_rel = f"{rel_dir}/{stem}_mask{k}.png"
        pngio.save_gray(out / mask_rel, m)
        inst["mask"] = mask_rel
    return {"scene_id": scene_id, "split": split, "image": img_rel, **manifest}


def generate_dataset(cfg: DatasetConfig) -> dict:
    """Render the training instances and test scenes to ``cfg.out_dir``.

    Writes PNGs and ``index.json``; returns the index. Training instances sit
    on the centre cell with training-pool rotations; test scenes use the
    disjoint test rotation pool.
    """
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    canvas = (cfg.canvas, cfg.canvas)
    records = []
    for i in range(cfg.n_train):
        p = train_params(cfg.seed, i)
        scene, masks, man = compose_scene([p], 0, 0, canvas, cfg.cell)
        records.append(_write_record(out, "train", f"train_{i:04d}", scene, masks, man,
                                     "train", f"train_{i:04d}"))
    for j in range(cfg.n_test_scenes):
        params, cseed = scene_params(cfg.seed, "test", j, occlusion_rate=cfg.occlusion_rate)
        scene, masks, man = compose_scene(params, cfg.clutter_count, cseed, canvas, cfg.cell)
        man["occluded"] = bool(len(masks) > 1 and np.any(masks[0] * masks[1] > 0))
        records.append(_write_record(out, "test", f"scene_{j:04d}", scene, masks, man,
                                     "test", f"scene_{j:04d}"))
    index = {"schema_version": SCHEMA_VERSION, "config": asdict(cfg), "records": records}
    if cfg.vary_scale:
        scale_records = []
        for j in range(cfg.n_scale_scenes):
            params, cseed = scale_params(cfg.seed, j)
            scene, masks, man = compose_scene(params, 0, cseed, canvas, cfg.cell)
            scale_records.append(_write_record(out, "scale", f"scale_{j:04d}", scene, masks, man,
                                               "scale", f"scale_{j:04d}"))
        index["scale_records"] = scale_records
    (out / "index.json").write_text(json.dumps(index, indent=1, sort_keys=True))
    return index


def load_index(data_dir) -> dict:
    index = json.loads((Path(data_dir) / "index.json").read_text())
    if index.get("schema_version") != SCHEMA_VERSION:
        raise ValueError("unsupported dataset schema version")
    return index


def load_records(data_dir, records):
    """Load images and masks of manifest records as float arrays."""
    data_dir = Path(data_dir)
    images = np.stack([pngio.load_gray(data_dir / r["image"]) for r in records])
    masks = [[pngio.load_gray(data_dir / i["mask"]) for i in r["instances"]] for r in records]
    return images, masks


def pose_key(inst: dict):
    p = inst["params"]
    return (p["category"], p["rotation"])
