"""Command-line entry point: ``mccseg {ingest,train,evaluate,predict,report,recommend}``.

Exit codes: 0 on success, 1 on usage or validation errors, 2 on runtime failures.
"""
from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from dataclasses import replace

from .augment import AugmentPolicy
from .data_pipeline import ManifestError, load_manifest, read_raster, write_raster
from .evaluation import EvalReport, emit_report
from .losses import REGIMES, MccConfig
from .model import ArchitectureSpec, NonFiniteLossError
from .orchestrate import (
    ConfigError,
    RunConfig,
    evaluate_checkpoint,
    load_canonical,
    predict_scene,
    recommend_regime,
    train_run,
)
from .taxonomy import RemapTable, validate_remap

logger = logging.getLogger("mccseg")

VALIDATION_ERRORS = (ManifestError, ConfigError, ValueError, KeyError, FileNotFoundError)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


class _HelpFormatter(argparse.HelpFormatter):
    def _get_help_string(self, action):
        text = (action.help or "").strip()
        if "%(default)" in text:
            return text
        if action.option_strings and action.default not in (None, False, argparse.SUPPRESS):
            text = f"{text} (default: %(default)s)".strip()
        return text


def _positive_or_none(value: str):
    v = int(value)
    return None if v <= 0 else v


def build_parser() -> argparse.ArgumentParser:
    fmt = _HelpFormatter
    parser = _Parser(prog="mccseg", description=__doc__.splitlines()[0], formatter_class=fmt)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="verb", required=True, parser_class=_Parser)

    def add(name, help):
        p = sub.add_parser(name, help=help, formatter_class=fmt)
        p.add_argument("--config", help="JSON file supplying defaults for any flag (flags win)")
        return p

    p = add("ingest", "load and validate a dataset manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--remap", help="remap table JSON onto the 5-class taxonomy")

    p = add("train", "train one transfer regime")
    p.add_argument("--regime", choices=REGIMES, default="supervised")
    p.add_argument("--target", required=True, help="target dataset manifest")
    p.add_argument("--source", help="source dataset manifest (required unless supervised)")
    p.add_argument("--arch", default="mini-unet")
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--steps", type=int, default=500)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--mcc-temperature", type=float, default=2.5)
    p.add_argument("--mcc-subsample", type=_positive_or_none, default=4096, help="pixels per batch; 0 disables")
    p.add_argument("--mcc-weight", type=float, default=1.0)
    p.add_argument("--mcc-per-image", action="store_true")
    p.add_argument("--mcc-ignore-unknown", action="store_true",
                   help="drop the unknown-class channel from the MCC loss")
    p.add_argument("--tile-size", type=int, default=1000)
    p.add_argument("--crop-size", type=int, default=512)
    p.add_argument("--window", type=int, default=512)
    p.add_argument("--stride", type=int)
    p.add_argument("--val-every", type=int, default=50)
    p.add_argument("--val-images", type=int, default=4)
    p.add_argument("--no-augment", action="store_true")
    p.add_argument("--target-remap")
    p.add_argument("--source-remap")
    p.add_argument("--source-downscale", type=int, default=1)
    p.add_argument("--out", default="runs/default")

    p = add("evaluate", "sliding-window evaluation of a checkpoint on a dataset split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--target-remap")
    p.add_argument("--split", default="test")
    p.add_argument("--window", type=int, default=512)
    p.add_argument("--stride", type=int)
    p.add_argument("--source-name", help="override the source dataset recorded in the report")
    p.add_argument("--regime", help="override the regime recorded in the report")
    p.add_argument("--out", default="eval_report.json")

    p = add("predict", "predict a label map for one scene")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--window", type=int, default=512)
    p.add_argument("--stride", type=int)
    p.add_argument("--out", default="prediction.png")

    p = add("report", "tabulate stored evaluation reports as CSV")
    p.add_argument("--reports", nargs="+", required=True)
    p.add_argument("--out", default="report.csv")

    p = add("recommend", "recommend a transfer regime from two dataset manifests")
    p.add_argument("--target", required=True)
    p.add_argument("--source")
    p.add_argument("--source-downscale", type=int, default=1,
                   help="linear factor the source will be downscaled by before training")

    # argparse skips the formatter for options without help text
    for verb_parser in sub.choices.values():
        for action in verb_parser._actions:
            if action.help is None and action.default not in (None, False):
                action.help = "(default: %(default)s)"
    return parser


def parse_args(argv):
    parser = build_parser()
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    pre_args, rest = pre.parse_known_args(argv)
    verbs = parser._subparsers._group_actions[0].choices
    verb = next((tok for tok in rest if tok in verbs), None)
    if pre_args.config and verb:
        try:
            with open(pre_args.config) as f:
                file_values = {k.replace("-", "_"): v for k, v in json.load(f).items()}
        except (OSError, json.JSONDecodeError) as e:
            raise UsageError(f"cannot read config {pre_args.config}: {e}") from None
        sub = verbs[verb]
        known = {a.dest for a in sub._actions}
        unknown = set(file_values) - known
        if unknown:
            raise UsageError(f"unknown keys in {pre_args.config}: {sorted(unknown)}")
        sub.set_defaults(**file_values)
        # required flags may come from the file
        for action in sub._actions:
            if action.dest in file_values:
                action.required = False
    return parser.parse_args(argv)


def _run_config(args) -> RunConfig:
    mcc = MccConfig(
        temperature=args.mcc_temperature,
        pixel_subsample=args.mcc_subsample,
        per_image=args.mcc_per_image,
        mcc_weight=args.mcc_weight,
        ignore_channel=0 if args.mcc_ignore_unknown else None,
    )
    return RunConfig(
        regime=args.regime, target=args.target, source=args.source,
        arch=ArchitectureSpec(args.arch), batch_size=args.batch_size, steps=args.steps,
        seed=args.seed, lr=args.lr, policy=None if args.no_augment else AugmentPolicy(),
        mcc=mcc, out=args.out, tile_size=args.tile_size, crop_size=args.crop_size,
        window=args.window, stride=args.stride, val_every=args.val_every, val_images=args.val_images,
        target_remap=args.target_remap, source_remap=args.source_remap,
        source_downscale=args.source_downscale,
    )


def cmd_ingest(args):
    desc = load_manifest(args.manifest)
    summary = {
        "name": desc.name,
        "zoom_level": desc.zoom_level,
        "annotation_rules_id": desc.annotation_rules_id,
        "classes": list(desc.taxonomy.names),
        "pairs": {s: len(desc.split(s)) for s in ("train", "test")},
    }
    if args.remap:
        table = RemapTable.load(args.remap)
        if table.source != desc.taxonomy:
            raise ConfigError(f"remap table {args.remap} does not describe the taxonomy of {desc.name!r}")
        summary["remap_warnings"] = validate_remap(table).warnings
    print(json.dumps(summary, indent=2))


def cmd_train(args):
    cfg = _run_config(args)
    cfg.validate()
    result = train_run(cfg)
    last = result.log[-1]
    print(json.dumps({"checkpoint": str(result.checkpoint), "steps": last["step"], "loss": last["loss"],
                      "val_miou": last.get("val_miou")}))


def cmd_evaluate(args):
    desc = load_canonical(args.target, args.target_remap)
    meta = {}
    if args.source_name:
        meta["source"] = args.source_name
    if args.regime:
        meta["regime"] = args.regime
    report = evaluate_checkpoint(args.checkpoint, desc, args.window, args.stride, args.split, meta)
    report.save(args.out)
    print(json.dumps({"report": args.out, "miou": report.miou, "images": len(report.images),
                      "excluded": report.excluded}))


def cmd_predict(args):
    image = read_raster(args.image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"{args.image}: expected a 3-channel image, got shape {image.shape}")
    labels = predict_scene(args.checkpoint, image, args.window, args.stride)
    write_raster(args.out, labels)
    print(json.dumps({"prediction": args.out, "shape": list(labels.shape)}))


def cmd_report(args):
    reports = [EvalReport.load(p) for p in args.reports]
    emit_report(reports, args.out)
    print(args.out)


def cmd_recommend(args):
    target = load_manifest(args.target, load_rasters=False)
    source = load_manifest(args.source, load_rasters=False) if args.source else None
    if source is not None and args.source_downscale > 1:
        levels = math.log2(args.source_downscale)
        if levels != int(levels):
            raise ValueError("--source-downscale must be a power of two")
        source = replace(source, zoom_level=source.zoom_level - int(levels))
    rec = recommend_regime(target, source)
    print(rec.regime)
    for reason in rec.reasons:
        print(f"  - {reason}")


COMMANDS = {
    "ingest": cmd_ingest,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "predict": cmd_predict,
    "report": cmd_report,
    "recommend": cmd_recommend,
}


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = parse_args(argv)
    except UsageError as e:
        print(e, file=sys.stderr)
        return 1
    except SystemExit as e:  # --help
        return 0 if e.code in (0, None) else 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        COMMANDS[args.verb](args)
    except NonFiniteLossError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except VALIDATION_ERRORS as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # noqa: BLE001
        logger.debug("runtime failure", exc_info=True)
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
