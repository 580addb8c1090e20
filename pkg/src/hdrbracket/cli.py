"""Command-line entry point: ``hdrbracket <subcommand> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import yaml

from . import io
from .brackets import generate_stack
from .hdr import METHODS, MergeConfig, TonemapParams, merge, tonemap_reinhard
from .imaging import (DEFAULT_EVS, ExposureMeta, LdrImage, builtin_crfs, gamma_crf, identity_crf, load_dorf,
                      synth_dataset)
from .masking import VARIANTS, MaskConfig, well_exposed_mask
from .model import load_checkpoint
from .quality import evaluate_hdr, evaluate_stacks, format_rows
from .trainer import TrainConfig, TrainState, fit

logger = logging.getLogger("hdrbracket")


class CliError(Exception):
    pass


def _floats(text: str) -> list[float]:
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _log_config(name: str, resolved: dict) -> None:
    logger.info("resolved config %s %s", name, json.dumps(resolved, sort_keys=True, default=str))


def _resolve_crfs(args):
    if args.dorf:
        sel = args.curve_names.split(",") if args.curve_names else args.curves
        return load_dorf(args.dorf, sel)
    crfs = builtin_crfs()
    return crfs[: args.curves] if args.curves else crfs


def _inverse_crf(args):
    if args.dorf:
        if not args.crf_name:
            raise CliError("--crf-name is required with --dorf")
        return load_dorf(args.dorf, [args.crf_name])[0]
    if args.crf_name:
        for c in builtin_crfs() + [identity_crf()]:
            if c.name == args.crf_name:
                return c
        raise CliError(f"unknown built-in curve {args.crf_name!r}")
    if args.gamma:
        return gamma_crf(args.gamma)
    return None


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_synth_dataset(args):
    crfs = _resolve_crfs(args)
    _log_config("synth-dataset", {"hdr_dir": args.hdr_dir, "out": args.out, "curves": [c.name for c in crfs],
                                  "evs": args.evs, "bit_depth": args.bit_depth})
    rows = synth_dataset(args.hdr_dir, crfs, args.evs, args.out, args.bit_depth)
    print(f"wrote {len(rows)} images to {args.out}")


def load_train_config(path, overrides: dict) -> TrainConfig:
    data = {}
    if path:
        data = yaml.safe_load(Path(path).read_text()) or {}
        if not isinstance(data, dict):
            raise CliError(f"{path}: config must be a mapping")
    data.update({k: v for k, v in overrides.items() if v is not None})
    return TrainConfig.from_dict(data)


def cmd_train(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    stacks = io.load_stacks(args.manifest)
    if args.resume:
        state = TrainState.load(args.resume)
        cfg = state.config
        if args.max_steps is not None:
            cfg = replace(cfg, max_steps=args.max_steps)
            state.config = cfg
    else:
        cfg = load_train_config(args.config, {"max_steps": args.max_steps, "seed": args.seed})
        state = None
    resolved = cfg.to_dict()
    _log_config("train", resolved)
    (out / "config.resolved.json").write_text(json.dumps(resolved, indent=2, sort_keys=True) + "\n")
    state = fit(cfg, stacks, state=state, log_path=out / "metrics.tsv", checkpoint_dir=out)
    state.save(out / "final.ckpt")
    print(f"trained {state.step} steps; checkpoint {out / 'final.ckpt'}")


def cmd_infer_stack(args):
    model, _, _, state = load_checkpoint(args.weights)
    pixels, bits = io.read_ldr(args.input)
    img = LdrImage(pixels, ExposureMeta.from_ev(args.input_ev), None, bits)
    # the mask the network was trained with, unless overridden
    trained = state.get("train_config", {}).get("mask", {})
    mask_cfg = MaskConfig(args.mask_gamma if args.mask_gamma is not None else trained.get("gamma", 0.05),
                          args.mask_variant or trained.get("variant", "min-combination"))
    _log_config("infer-stack", {"input": args.input, "evs": args.evs, "weights": args.weights,
                                "input_ev": args.input_ev, "mask_gamma": mask_cfg.gamma,
                                "mask_variant": mask_cfg.variant})
    stem = Path(args.input).stem
    out = Path(args.out or Path(args.input).parent)
    out.mkdir(parents=True, exist_ok=True)
    stack = generate_stack(model, img, args.evs, mask_cfg, scene_id=stem)
    rows = []
    for im in stack:
        name = f"{stem}_ev{im.meta.ev_offset:+.2f}.png"
        io.write_ldr(out / name, im.pixels, args.bit_depth)
        rows.append(io.ManifestRow(stem, "", im.meta.ev_offset, name, args.bit_depth))
    io.write_manifest(out / "manifest.tsv", rows)
    print(f"wrote {len(rows)} images to {out}")


def cmd_merge_hdr(args):
    stacks = io.load_stacks(args.manifest)
    if args.scene:
        stacks = [s for s in stacks if s.scene_id == args.scene]
    if len(stacks) != 1:
        raise CliError(f"manifest holds {len(stacks)} matching stacks; pick one with --scene")
    inv = _inverse_crf(args)
    cfg = MergeConfig(args.method)
    _log_config("merge-hdr", {"manifest": args.manifest, "method": args.method,
                              "crf": getattr(inv, "name", "identity"), "out": args.out})
    E = merge(stacks[0], inv, cfg)
    io.write_hdr(args.out, E.pixels)
    if E.fallback is not None and E.fallback.any():
        logger.warning("%d pixel values used the extreme-exposure fallback", int(E.fallback.sum()))
    print(f"wrote {args.out}")


def cmd_tonemap(args):
    E = io.read_hdr(args.input)
    p = TonemapParams(args.key, args.white)
    _log_config("tonemap", {"input": args.input, "key": args.key, "white": args.white, "out": args.out})
    out = tonemap_reinhard(np.maximum(E, 0.0), p)
    io.write_ldr(args.out, out.pixels, args.bit_depth)
    print(f"wrote {args.out}")


def _hdr_files(d: Path):
    return {p.name: p for p in sorted(d.iterdir()) if p.suffix.lower() in io.HDR_EXTENSIONS}


def cmd_evaluate(args):
    pred, ref = Path(args.pred), Path(args.ref)
    _log_config("evaluate", {"pred": str(pred), "ref": str(ref), "out": args.out})
    if (pred / "manifest.tsv").exists() and (ref / "manifest.tsv").exists():
        ps = {s.scene_id: s for s in io.load_stacks(pred / "manifest.tsv")}
        rs = {s.scene_id: s for s in io.load_stacks(ref / "manifest.tsv")}
        common = sorted(set(ps) & set(rs))
        if not common:
            raise CliError("no scene ids shared between prediction and reference manifests")
        rows = []
        for sid in common:
            rows += evaluate_stacks(ps[sid], rs[sid])
        text = format_rows(rows)
    else:
        pf, rf = _hdr_files(pred), _hdr_files(ref)
        common = sorted(set(pf) & set(rf))
        if not common:
            raise CliError("no HDR files shared between prediction and reference directories")
        tmo = TonemapParams(args.key)
        lines = ["scene_id\ttm_psnr\ttm_ssim\thdr_psnr"]
        for name in common:
            m = evaluate_hdr(io.read_hdr(pf[name]), io.read_hdr(rf[name]), tmo)
            lines.append(f"{Path(name).stem}\t{m.tm_psnr:.4f}\t{m.tm_ssim:.6f}\t{m.hdr_psnr:.4f}")
        text = "\n".join(lines) + "\n"
    Path(args.out).write_text(text)
    print(f"wrote {args.out}")


def cmd_mask_dump(args):
    pixels, _ = io.read_ldr(args.input)
    cfg = MaskConfig(args.gamma, args.variant)
    _log_config("mask-dump", {"input": args.input, "gamma": cfg.gamma, "variant": cfg.variant})
    m = well_exposed_mask(pixels, cfg)
    _write_gray(args.out, m)
    print(f"wrote {args.out}")


def _write_gray(path, m):
    import cv2

    if not cv2.imwrite(str(path), np.round(np.clip(m, 0, 1) * 255).astype(np.uint8)):
        raise io.CodecError(f"{path}: PNG write failed")


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hdrbracket", description="Single-image exposure bracketing and HDR tools")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")

    s = sub.add_parser("synth-dataset", help="render LDR stacks from HDR scenes")
    s.add_argument("--hdr-dir", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--dorf", help="DoRF curve file (default: built-in curves)")
    s.add_argument("--curves", type=int, default=5, help="number of evenly strided curves")
    s.add_argument("--curve-names", help="comma-separated curve names (overrides --curves)")
    s.add_argument("--evs", type=_floats, default=list(DEFAULT_EVS))
    s.add_argument("--bit-depth", type=int, choices=(8, 16), default=8)
    s.set_defaults(func=cmd_synth_dataset)

    s = sub.add_parser("train", help="train the bracket generator")
    s.add_argument("--manifest", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--config", help="YAML/JSON file mirroring TrainConfig")
    s.add_argument("--max-steps", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--resume", help="checkpoint to continue from")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("infer-stack", help="generate a bracket from one image")
    s.add_argument("--input", required=True)
    s.add_argument("--weights", required=True)
    s.add_argument("--evs", type=_floats, default=[-2.0, -1.0, 0.0, 1.0, 2.0])
    s.add_argument("--input-ev", type=float, default=0.0)
    s.add_argument("--out")
    s.add_argument("--bit-depth", type=int, choices=(8, 16), default=8)
    s.add_argument("--mask-gamma", type=float, help="default: as trained")
    s.add_argument("--mask-variant", choices=VARIANTS, help="default: as trained")
    s.set_defaults(func=cmd_infer_stack)

    s = sub.add_parser("merge-hdr", help="merge a bracket into a radiance map")
    s.add_argument("--manifest", required=True)
    s.add_argument("--out", required=True, help=".hdr or .pfm")
    s.add_argument("--scene")
    s.add_argument("--method", choices=METHODS, default="debevec-weighted")
    s.add_argument("--dorf")
    s.add_argument("--crf-name")
    s.add_argument("--gamma", type=float, help="use a pure gamma response")
    s.set_defaults(func=cmd_merge_hdr)

    s = sub.add_parser("tonemap", help="Reinhard global tone mapping")
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--key", type=float, default=0.18)
    s.add_argument("--white", type=float)
    s.add_argument("--bit-depth", type=int, choices=(8, 16), default=8)
    s.set_defaults(func=cmd_tonemap)

    s = sub.add_parser("evaluate", help="PSNR/SSIM tables")
    s.add_argument("--pred", required=True)
    s.add_argument("--ref", required=True)
    s.add_argument("--out", default="metrics.tsv")
    s.add_argument("--key", type=float, default=0.18)
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("mask-dump", help="write the well-exposedness mask as PNG")
    s.add_argument("--input", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--gamma", type=float, default=0.05)
    s.add_argument("--variant", choices=VARIANTS, default="min-combination")
    s.set_defaults(func=cmd_mask_dump)
    return p


_LIST_OPTIONS = ("--evs",)


def _join_list_values(argv):
    """Let ``--evs -2,-1,0`` through: argparse would read the value as a flag."""
    out, it = [], iter(argv)
    for a in it:
        if a in _LIST_OPTIONS:
            nxt = next(it, None)
            out.append(a if nxt is None else f"{a}={nxt}")
        else:
            out.append(a)
    return out


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(_join_list_values(sys.argv[1:] if argv is None else list(argv)))
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        args.func(args)
    except (CliError, io.CodecError, ValueError, KeyError, RuntimeError, OSError) as exc:
        msg = str(exc).replace("\n", " ")
        print(f"error\t{args.command}\t{type(exc).__name__}\t{msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
