"""Command-line entry point: ``backpass {gen-data,train,sample,parse,probe}``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import config as cfgmod
from . import dataset as ds
from . import pngio
from .encoder import EncoderWeights, compositionality_probe, write_probe_csv
from .genmodel import GenerativeModel, sample_prior
from .inference import Clamp, LayerClamp, scan_scales, write_mode_csv
from .pipeline import train_all

log = logging.getLogger("backpass")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


class DataError(Exception):
    pass


class NumericError(Exception):
    pass


def _finite(*values):
    for v in values:
        if not np.all(np.isfinite(np.asarray(v, dtype=np.float64))):
            raise NumericError("non-finite value detected")


def _load_model(model_dir):
    d = Path(model_dir)
    try:
        return GenerativeModel.load(d / "model.ntf"), EncoderWeights.load(d / "encoder.ntf")
    except (OSError, KeyError, ValueError) as e:
        raise DataError(f"cannot load model from {d}: {e}") from None


def _out_dir(cfg):
    out = Path(cfg.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise DataError(f"cannot create output directory {out}: {e}") from None
    return out


def cmd_gen_data(cfg, args):
    out = _out_dir(cfg)
    cfg.snapshot(out / "resolved_config.json")
    ds.generate_dataset(replace(cfg.dataset, out_dir=str(out), vary_scale=cfg.dataset.vary_scale
                                or args.vary_scale))
    return EXIT_OK


def cmd_train(cfg, args):
    data = Path(args.data)
    if not (data / "index.json").is_file():
        raise DataError(f"no dataset index in {data}")
    out = _out_dir(cfg)
    cfg.snapshot(out / "resolved_config.json")
    enc, model, trace = train_all(data, out, cfg.model, cfg.encoder, cfg.observation, cfg.em, cfg.seed)
    _finite(trace.loglik, [p.sigma0 for p in model.layers])
    return EXIT_OK


def cmd_sample(cfg, args):
    model, _ = _load_model(args.model)
    sc = cfg.sample
    if not 0 <= sc.category < model.spec.num_categories:
        raise cfgmod.ConfigError("category out of range for this model")
    out = _out_dir(cfg)
    cfg.snapshot(out / "resolved_config.json")
    rng = np.random.default_rng(cfg.seed)
    top = model.L - 1
    records, images, clamp = [], [], None
    for k in range(sc.count):
        if sc.clamp_top and k % sc.group == 0:
            H0, _ = sample_prior(sc.category, model, rng)
            clamp = {top: (H0.gammas[top], H0.offsets[top])}
        H, stack = sample_prior(sc.category, model, rng, clamp if sc.clamp_top else None)
        _finite(stack[0])
        name = f"sample_{k:03d}.png"
        pngio.save_gray(out / name, np.clip(stack[0], 0, 1))
        images.append(stack[0])
        rec = {"index": k, "file": name, **H.to_dict()}
        if sc.clamp_top:
            rec["group"] = k // sc.group
        records.append(rec)
    ncols = sc.group if sc.clamp_top else min(sc.count, 10)
    pngio.save_gray(out / "samples_grid.png", pngio.grid([np.clip(i, 0, 1) for i in images], ncols))
    (out / "samples.json").write_text(json.dumps(
        {"category": sc.category, "clamp_top": sc.clamp_top, "group": sc.group, "samples": records},
        indent=1, sort_keys=True) + "\n")
    return EXIT_OK


def _clamp_from_args(args):
    layer = None
    if args.clamp_top_gamma is not None or args.clamp_top_dy is not None or args.clamp_top_dx is not None:
        layer = LayerClamp(args.clamp_top_gamma, args.clamp_top_dy, args.clamp_top_dx)
    return layer


def cmd_parse(cfg, args):
    model, enc = _load_model(args.model)
    try:
        image = pngio.load_gray(args.scene)
    except (OSError, ValueError) as e:
        raise DataError(f"cannot read scene {args.scene}: {e}") from None
    if image.shape != tuple(model.spec.layers[0].shape):
        raise DataError(f"scene shape {image.shape} does not match model input {model.spec.layers[0].shape}")
    ic = cfg.inference
    layer = _clamp_from_args(args)
    if args.category is not None and not 0 <= args.category < model.spec.num_categories:
        raise cfgmod.ConfigError("category out of range for this model")
    clamp = Clamp(args.category, {model.L - 1: layer} if layer else {})
    out = _out_dir(cfg)
    cfg.snapshot(out / "resolved_config.json")
    result, per_scale = scan_scales(image, ic.scales, ic.steps, ic.beam, clamp, model, enc, ic.top_m)
    _finite(result.total_score, per_scale)
    trace = result.trace()
    trace["scales"] = list(ic.scales)
    trace["per_scale_scores"] = per_scale
    for k, inst in enumerate(result.instances):
        recon = f"recon_step{k}.png"
        modes = f"modes_step{k}.csv"
        pngio.save_gray(out / recon, np.clip(inst.F_td[0], 0, 1))
        write_mode_csv(out / modes, result.modes[k])
        trace["steps"][k].update({"reconstruction": recon, "modes": modes})
        if args.plots:
            vals = [m.log_posterior for m in result.modes[k]]
            hl = [i for i, m in enumerate(result.modes[k]) if m.distinct]
            plot = f"modes_step{k}.png"
            pngio.save_gray(out / plot, pngio.bar_chart(vals, hl))
            trace["steps"][k]["plot"] = plot
    (out / "parse_trace.json").write_text(json.dumps(trace, indent=1, sort_keys=True) + "\n")
    return EXIT_OK


def cmd_probe(cfg, args):
    model, enc = _load_model(args.model)
    pc = cfg.probe
    if not 0 <= pc.category < model.spec.num_categories:
        raise cfgmod.ConfigError("category out of range for this model")
    out = _out_dir(cfg)
    cfg.snapshot(out / "resolved_config.json")
    clean, mask = ds.render_instance(ds.ShapeParams(pc.category, 0.0, (0, 0), 1.0, (0, 0), 1.0))
    s = pc.distractor_size
    distractor = np.full((1, s, s), 0.8)
    rows = compositionality_probe(clean, distractor, pc.steps, enc, model.spec, mask=mask)
    _finite([r[3] for r in rows])
    write_probe_csv(out / "probe.csv", rows)
    return EXIT_OK


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "sample": cmd_sample,
            "parse": cmd_parse, "probe": cmd_probe}


def build_parser():
    p = argparse.ArgumentParser(prog="backpass", description=__doc__)
    p.add_argument("--config", help="JSON run configuration")
    p.add_argument("--seed", type=int, help="global seed (overrides the config)")
    p.add_argument("--out", help="output directory (overrides the config)")
    p.add_argument("--threads", type=int, help="BLAS threads; 1 is deterministic")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="render the synthetic dataset")
    g.add_argument("--vary-scale", action="store_true", help="also write the scale-scan scenes")

    t = sub.add_parser("train", help="train encoder, observation model and generative model")
    t.add_argument("--data", required=True, help="dataset directory written by gen-data")

    s = sub.add_parser("sample", help="draw samples from the generative model")
    s.add_argument("--model", required=True, help="directory written by train")
    s.add_argument("--category", type=int)
    s.add_argument("--count", type=int)
    s.add_argument("--clamp-top", action="store_true", help="groups share the top assignment")

    r = sub.add_parser("parse", help="parse a scene by repeated backward pass and subtraction")
    r.add_argument("--model", required=True)
    r.add_argument("--scene", required=True, help="grayscale PNG")
    r.add_argument("--steps", type=int)
    r.add_argument("--beam", type=int)
    r.add_argument("--top-m", type=int)
    r.add_argument("--scales", type=float, nargs="+")
    r.add_argument("--category", type=int, help="clamp the category")
    r.add_argument("--clamp-top-gamma", type=int)
    r.add_argument("--clamp-top-dy", type=int)
    r.add_argument("--clamp-top-dx", type=int)
    r.add_argument("--plots", action="store_true", help="also render mode bar charts")

    b = sub.add_parser("probe", help="feature compositionality probe")
    b.add_argument("--model", required=True)
    b.add_argument("--steps", type=int)
    return p


def _apply_overrides(cfg, args):
    if args.command == "sample":
        cfg.sample = replace(cfg.sample, **{k: v for k, v in (
            ("category", args.category), ("count", args.count)) if v is not None})
        if args.clamp_top:
            cfg.sample = replace(cfg.sample, clamp_top=True)
    elif args.command == "parse":
        cfg.inference = replace(cfg.inference, **{k: v for k, v in (
            ("steps", args.steps), ("beam", args.beam), ("top_m", args.top_m),
            ("scales", args.scales)) if v is not None})
    elif args.command == "probe" and args.steps is not None:
        cfg.probe = replace(cfg.probe, steps=args.steps)
    cfgmod.validate(cfg)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = cfgmod.load(args.config, args.seed, args.out, args.threads)
        _apply_overrides(cfg, args)
        with threadpool_limits(limits=cfg.threads):
            return COMMANDS[args.command](cfg, args)
    except cfgmod.ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, OSError, ValueError, KeyError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
