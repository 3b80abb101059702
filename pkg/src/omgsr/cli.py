"""``omgsr`` command line entry point.

Exit codes: 0 success, 1 usage error (help printed), 2 runtime failure.
All randomness is derived from the master seed (``[run] seed`` or ``--seed``).
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import torch

from .checkpoint import CheckpointBundle
from .chunking import plan_chunks
from .config import OMGConfig
from .data import PairSet, load_png, make_corpus, make_pairs, save_png
from .degrade import bicubic_resize, degrade_with_params
from .errors import UsageError
from .infer import restore, tiled_restore
from .metrics import evaluate, pair_files
from .midstep import gap_probe
from .trainer import build_finetune_state, finetune, pretrain, select_t_star

log = logging.getLogger("omgsr")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: error: {message}\n\n{self.format_help()}")


def _defaults_epilog() -> str:
    lines = ["config keys and defaults (override in the --config file):"]
    lines += [f"  {k} = {v}" for k, v in OMGConfig().to_flat().items()]
    return "\n".join(lines)


def _load_config(args) -> OMGConfig:
    cfg = OMGConfig.load(args.config) if args.config else OMGConfig()
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg


def _load_bundle(args) -> CheckpointBundle:
    bundle = CheckpointBundle.load(args.checkpoint)
    if args.seed is not None:
        bundle.config = bundle.config.with_seed(args.seed)
    return bundle


def _write_json(path, obj) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True))


def _pairs_from_dir(data_dir) -> PairSet:
    items = pair_files(data_dir)
    if not items:
        raise FileNotFoundError(f"no lq/hq PNG pairs in {data_dir}")
    lq = torch.stack([load_png(l) for _, l, _ in items])
    hq = torch.stack([load_png(h) for _, _, h in items])
    return PairSet(hq, lq, bicubic_resize(lq, hq.shape[-2:]).clamp(-1, 1))


def _training_pairs(args, cfg: OMGConfig) -> PairSet:
    if args.data:
        return _pairs_from_dir(args.data)
    hq = make_corpus(cfg.data.n_train, cfg.data.hq_size, cfg.seed)
    return make_pairs(hq, cfg.degrade, cfg.seed)


# ---------------------------------------------------------------------------
# subcommands


def cmd_precompute_t(args) -> None:
    # without a checkpoint the freshly initialised (seeded) models from --config are used
    bundle = _load_bundle(args) if args.checkpoint else CheckpointBundle.fresh(_load_config(args))
    pairs = _training_pairs(args, bundle.config)
    report = select_t_star(bundle, pairs)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(report.to_csv() if out.suffix == ".csv" else report.to_json())
    print(f"t_star = {report.t_star}")


def cmd_probe_gap(args) -> None:
    bundle = _load_bundle(args)
    cfg = bundle.config
    levels = [float(v) for v in args.levels.split(",")] if args.levels else [0.0]
    reports = []
    for level in levels:
        rep = gap_probe(bundle.denoiser, bundle.vae, cfg.scheduler, args.steps,
                        args.injection_step if level > 0 or args.injection_step else None,
                        level, seed=cfg.seed, latent_hw=(args.latent_size, args.latent_size))
        reports.append(rep.to_dict() | {"final_mse": rep.final_mse})
    _write_json(args.out, {"seed": cfg.seed, "reports": reports})


def cmd_chunk_plan(args) -> None:
    size = tuple(int(v) for v in args.size.split(","))
    if len(size) == 1:
        size = size * 2
    layout = plan_chunks(size, args.patch, args.overlap, args.blend)
    text = layout.to_json()
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text)
    else:
        print(text)


def cmd_degrade(args) -> None:
    cfg = _load_config(args)
    hq = load_png(args.input)
    lq, params = degrade_with_params(hq, cfg.degrade, cfg.seed)
    save_png(lq, args.output)
    sidecar = args.sidecar or str(Path(args.output).with_suffix(".json"))
    _write_json(sidecar, {"seed": cfg.seed, "input": Path(args.input).name, "params": params.to_dict()})


def cmd_pretrain(args) -> None:
    if args.resume:
        bundle = CheckpointBundle.load(args.resume)
        cfg = bundle.config
    else:
        cfg = _load_config(args)
        bundle = CheckpointBundle.fresh(cfg)
    if args.data:
        hq = _pairs_from_dir(args.data).hq
    else:
        hq = make_corpus(cfg.data.n_train, cfg.data.hq_size, cfg.seed)
    pretrain(bundle, hq, cfg, args.vae_steps, args.denoiser_steps, budget=args.max_steps)
    bundle.save(args.out)


def cmd_finetune(args) -> None:
    bundle = _load_bundle(args)
    if args.config:
        # keep model shapes from the checkpoint, take training settings from the file
        file_cfg = _load_config(args)
        bundle.config = dataclasses.replace(bundle.config, seed=file_cfg.seed, finetune=file_cfg.finetune,
                                            losses=file_cfg.losses)
    cfg = bundle.config
    pairs = _training_pairs(args, cfg)
    t_star = args.t_star if args.t_star is not None else cfg.resolved_t_star()
    if t_star is None:
        t_star = bundle.t_star if bundle.stage == "finetune" else select_t_star(bundle, pairs).t_star
    state = build_finetune_state(bundle, t_star)
    finetune(state, pairs, args.steps, log_path=args.log, checkpoint_dir=args.out, sample_dir=args.samples)
    state.snapshot_into_bundle().save(args.out)
    print(f"t_star = {t_star}")


def cmd_restore(args) -> None:
    bundle = _load_bundle(args)
    save_png(restore(bundle, load_png(args.input)), args.output)


def cmd_tile_restore(args) -> None:
    bundle = _load_bundle(args)
    ic = bundle.config.infer
    tile = ic.tile if args.tile is None else args.tile
    overlap = ic.overlap if args.overlap is None else args.overlap
    out = tiled_restore(bundle, load_png(args.input), tile, overlap, blend_mode=args.blend)
    save_png(out, args.output)


def cmd_evaluate(args) -> None:
    bundle = _load_bundle(args)
    report = evaluate(bundle, args.data, out_csv=args.out_csv, out_json=args.out_json)
    print(json.dumps(report["mean"], sort_keys=True))


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    common = _Parser(add_help=False)
    common.add_argument("--config", help="structured config file (INI sections, dotted keys)")
    common.add_argument("--seed", type=int, help="override the master seed")

    root = _Parser(prog="omgsr", description="One-step mid-timestep guided super-resolution (toy scale).",
                   epilog=_defaults_epilog(), formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = root.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)

    def add(name, fn, help_):
        p = sub.add_parser(name, parents=[common], help=help_, description=help_, formatter_class=fmt)
        p.set_defaults(func=fn)
        return p

    p = add("precompute-t", cmd_precompute_t, "select the mid-timestep from training pairs")
    p.add_argument("--checkpoint", help="pre-trained bundle (default: untrained models from --config)")
    p.add_argument("--data", help="directory with lq/ and hq/ PNGs (default: procedural corpus)")
    p.add_argument("--out", required=True, help=".json or .csv report")

    p = add("probe-gap", cmd_probe_gap, "sampler-trajectory gap probe with optional noise injection")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--steps", type=int, default=20)
    p.add_argument("--injection-step", type=int, default=10)
    p.add_argument("--levels", default="0,0.3,0.8", help="comma-separated injection levels")
    p.add_argument("--latent-size", type=int, default=16)
    p.add_argument("--out", required=True)

    p = add("chunk-plan", cmd_chunk_plan, "print or write an overlap chunk layout")
    p.add_argument("--size", required=True, help="H or H,W")
    p.add_argument("--patch", type=int, required=True)
    p.add_argument("--overlap", type=int, default=0)
    p.add_argument("--blend", choices=("feather", "none"), default="feather")
    p.add_argument("--out")

    p = add("degrade", cmd_degrade, "synthesise an LQ image from an HQ PNG")
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--sidecar", help="parameter JSON (default: output path with .json)")

    p = add("pretrain", cmd_pretrain, "pre-train the toy VAE and denoiser")
    p.add_argument("--out", required=True, help="checkpoint directory")
    p.add_argument("--data", help="directory with hq/ (and lq/) PNGs (default: procedural corpus)")
    p.add_argument("--vae-steps", type=int)
    p.add_argument("--denoiser-steps", type=int)
    p.add_argument("--resume", help="checkpoint to resume from")
    p.add_argument("--max-steps", type=int, help="stop after this many optimiser steps (continue with --resume)")

    p = add("finetune", cmd_finetune, "adapter fine-tuning at the mid-timestep")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True, help="checkpoint directory")
    p.add_argument("--data")
    p.add_argument("--steps", type=int)
    p.add_argument("--t-star", type=int, help="skip selection and use this timestep")
    p.add_argument("--log", help="CSV loss log")
    p.add_argument("--samples", help="directory for sample grids")

    p = add("restore", cmd_restore, "one-step restoration of a PNG")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)

    p = add("tile-restore", cmd_tile_restore, "two-stage restoration with tiled second stage")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--tile", type=int, help="tile size (default: infer.tile)")
    p.add_argument("--overlap", type=int, help="minimum overlap (default: infer.overlap)")
    p.add_argument("--blend", choices=("feather", "none"), default="feather")

    p = add("evaluate", cmd_evaluate, "PSNR/SSIM/perceptual distance over lq/ and hq/ PNG pairs")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out-csv")
    p.add_argument("--out-json")
    return root


def run(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    if not argv:
        parser.print_help(sys.stderr)
        return 1
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(e, file=sys.stderr)
        return 1
    except SystemExit as e:  # --help
        return int(e.code or 0)
    if args.command is None:
        parser.print_help(sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    try:
        args.func(args)
    except Exception as e:  # noqa: BLE001
        print(f"omgsr {args.command}: {type(e).__name__}: {e}", file=sys.stderr)
        return 2
    return 0


def main() -> None:
    sys.exit(run())
