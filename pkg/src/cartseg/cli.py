"""Command line entry point: ``cartseg {gen,train,predict,postprocess,eval,overlay}``.

Diagnostics go to stderr as single JSON lines; failures exit with status 1
(2 for usage errors) after one ``{"event": "error", ...}`` line.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import data as D
from .config import RunConfig, load_config, parse_config_text
from .metrics import aggregate_detail, evaluate, format_table
from .pipeline import (
    JsonlLog,
    generate_dataset,
    load_model,
    overlay_codes,
    overlay_slices,
    predict_volume,
    train,
)
from .postproc import binarize, keep_largest, label_components


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        _emit_error("UsageError", message)
        sys.exit(2)


def _emit_error(kind: str, message: str) -> None:
    sys.stderr.write(json.dumps({"event": "error", "type": kind, "message": str(message)}) + "\n")


def _stderr_log(line: str) -> None:
    sys.stderr.write(line + "\n")


def _config(args) -> RunConfig:
    overrides = list(args.set or [])
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    if args.workers is not None:
        overrides.append(f"workers={args.workers}")
    return load_config(args.config, overrides)


def _sets_patch_size(args) -> bool:
    """True when --config or --set names patch_size explicitly."""
    if any(item.split("=", 1)[0].strip() == "patch_size" for item in args.set or []):
        return True
    if args.config:
        return "patch_size" in parse_config_text(Path(args.config).read_text())
    return False


def cmd_gen(args) -> int:
    cfg = _config(args)
    manifest = generate_dataset(cfg, args.out)
    JsonlLog(echo=_stderr_log)("gen", out=str(args.out), volumes=len(manifest["volumes"]), splits=manifest["splits"])
    return 0


def cmd_train(args) -> int:
    cfg = _config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(cfg.dumps())
    logger = JsonlLog(out / "train_log.jsonl", echo=None if args.quiet else _stderr_log)
    train(cfg, args.data, out, logger)
    return 0


def cmd_predict(args) -> int:
    cfg = _config(args)
    net = load_model(args.checkpoint, cfg.patch_size if _sets_patch_size(args) else None)
    image = D.read_volume(args.input)
    if image.dtype != D.GRAY_F32:
        raise ValueError(f"{args.input}: predict needs a gray_f32 volume, got {image.dtype}")
    prob = predict_volume(net, image, cfg.workers)
    threshold = cfg.threshold if args.threshold is None else args.threshold
    D.write_volume(D.Volume.gray(prob, image.spacing_mm), args.out_prob)
    D.write_volume(D.Volume.mask(binarize(prob, threshold), image.spacing_mm), args.out_mask)
    JsonlLog(echo=_stderr_log)("predict", input=str(args.input), positives=int((prob >= threshold).sum()))
    return 0


def _parse_labels(text: str | None):
    if not text:
        return None
    return [int(t) for t in text.split(",") if t.strip()]


def cmd_postprocess(args) -> int:
    cfg = _config(args)
    vol = D.read_volume(args.input)
    threshold = cfg.threshold if args.threshold is None else args.threshold
    connectivity = cfg.connectivity if args.connectivity is None else args.connectivity
    keep = cfg.keep if args.keep is None else args.keep
    mask = vol.voxels if vol.dtype == D.MASK_U8 else binarize(vol, threshold)
    comps = label_components(mask, connectivity)
    if args.list:
        for label, size in comps.sizes:
            sys.stdout.write(f"{label}\t{size}\n")
    out = keep_largest(comps, keep, _parse_labels(args.select_labels))
    D.write_volume(D.Volume.mask(out, vol.spacing_mm), args.out)
    JsonlLog(echo=_stderr_log)(
        "postprocess", components=comps.count, kept=int(out.sum()), total=int(mask.sum())
    )
    return 0


def cmd_eval(args) -> int:
    if len(args.pred) != len(args.truth):
        raise ValueError(f"{len(args.pred)} prediction files but {len(args.truth)} truth files")
    reports = []
    for p, t in zip(args.pred, args.truth):
        reports.append(evaluate(D.read_volume(p), D.read_volume(t), Path(p).stem))
    macro = aggregate_detail(reports, "macro")
    micro = aggregate_detail(reports, "micro")
    sys.stdout.write(format_table(reports, [macro.report, micro.report]) + "\n")
    record = {
        "volumes": [r.as_dict() for r in reports],
        "macro": macro.report.as_dict(),
        "macro_undefined": macro.undefined,
        "micro": micro.report.as_dict(),
    }
    if args.json:
        Path(args.json).write_text(json.dumps(record, indent=2) + "\n")
    return 0


def cmd_overlay(args) -> int:
    from PIL import Image

    image = D.read_volume(args.image)
    truth = D.read_volume(args.truth)
    pred = D.read_volume(args.pred)
    if not image.dims == truth.dims == pred.dims:
        raise ValueError(f"dims differ: image {image.dims}, truth {truth.dims}, pred {pred.dims}")
    codes = overlay_codes(truth.voxels, pred.voxels)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    D.write_volume(D.Volume.gray(codes.astype(np.float32), image.spacing_mm), out / "overlay_codes.vvol")
    axis = "xyz".index(args.axis)
    written = 0
    for i, rgb in enumerate(overlay_slices(image.voxels, codes, axis)):
        if args.only_labeled and not codes.take(i, axis=axis).any():
            continue
        Image.fromarray(rgb).save(out / f"slice_{args.axis}{i:03d}.png")
        written += 1
    counts = {name: int((codes == c).sum()) for c, name in ((1, "truth_only"), (2, "pred_only"), (3, "overlap"))}
    JsonlLog(echo=_stderr_log)("overlay", slices=written, **counts)
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key = value config file")
    common.add_argument("--seed", type=int)
    common.add_argument("--workers", type=int)
    common.add_argument("--set", "-o", action="append", metavar="KEY=VALUE", help="override a config key")

    parser = _Parser(prog="cartseg", description="thin-sheet segmentation pipeline")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen", parents=[common], help="write a synthetic phantom dataset")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", parents=[common], help="train on a generated dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", parents=[common], help="tiled inference on one volume")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--out-prob", required=True)
    p.add_argument("--out-mask", required=True)
    p.add_argument("--threshold", type=float)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("postprocess", parents=[common], help="keep the largest connected components")
    p.add_argument("--input", required=True, help="mask_u8 or probability (gray_f32) volume")
    p.add_argument("--out", required=True)
    p.add_argument("--keep", type=int)
    p.add_argument("--connectivity", type=int, choices=(6, 18, 26))
    p.add_argument("--select-labels", help="comma separated labels to keep instead of the largest")
    p.add_argument("--threshold", type=float)
    p.add_argument("--list", action="store_true", help="print label<TAB>size for every component")
    p.set_defaults(func=cmd_postprocess)

    p = sub.add_parser("eval", parents=[common], help="confusion counts and overlap scores")
    p.add_argument("--pred", nargs="+", required=True)
    p.add_argument("--truth", nargs="+", required=True)
    p.add_argument("--json")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("overlay", parents=[common], help="colour-coded truth/prediction slices")
    p.add_argument("--image", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--pred", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--axis", choices=("x", "y", "z"), default="x")
    p.add_argument("--only-labeled", action="store_true", help="skip slices without truth or prediction")
    p.set_defaults(func=cmd_overlay)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:  # one parsable line, nonzero exit
        _emit_error(type(exc).__name__, exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
