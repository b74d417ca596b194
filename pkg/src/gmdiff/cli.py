"""Command-line front end.

Five subcommands wire the library together:

    gen-data    render the synthetic scene dataset
    train       train the autoencoder, then the conditional denoiser
    train-eval  train the category classifier and the dual encoder
    generate    masked img2img generation from a reference image
    eval        per-category Frechet/alignment report for generated vs real

Every flag default comes from the corresponding config dataclass, so the
values printed by --help are the values the code uses. A ``--config``
file holds ``key = value`` lines (``#`` comments allowed) whose keys are
drawn from the PipelineConfig/TrainConfig field names; explicit flags
override file values. All randomness is seeded (PCG64 streams derived
from the root seed), so any command repeated with the same arguments
produces byte-identical outputs.
"""

from __future__ import annotations

import argparse
import sys
import traceback
from dataclasses import fields as dataclass_fields
from pathlib import Path

import numpy as np

from . import evalmetrics, nn, pipeline, training
from .datasynth import make_dataset
from .pngio import png_read, png_write, png_write_binary, png_write_gray
from .training import TrainConfig, load_checkpoint, save_checkpoint

PIPELINE_KEYS = {f.name for f in dataclass_fields(pipeline.PipelineConfig)}
TRAIN_KEYS = {f.name for f in dataclass_fields(TrainConfig)}
CONFIG_KEYS = PIPELINE_KEYS | TRAIN_KEYS


def _format_window(window) -> str:
    return f"{window[0]}:{window[1]}"


def _parse_window(text: str):
    try:
        lo, hi = text.split(":")
        return (float(lo), float(hi))
    except ValueError as exc:
        raise ValueError(f"window must look like 'lo:hi', got {text!r}") from exc


def parse_config_file(path) -> dict:
    """Read ``key = value`` lines; keys must belong to the documented set."""
    values = {}
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in CONFIG_KEYS:
            raise ValueError(f"{path}:{lineno}: unknown key {key!r}")
        values[key] = value
    return values


_BOOL_TRUE = {"1", "true", "yes", "on"}
_BOOL_FALSE = {"0", "false", "no", "off"}


def _coerce(key: str, value: str):
    if key in ("window",):
        return _parse_window(value)
    if key in ("subjects",):
        return value
    if key in ("deterministic", "dump_masks", "debug_checks", "channel_coherent"):
        low = value.lower()
        if low in _BOOL_TRUE:
            return True
        if low in _BOOL_FALSE:
            return False
        raise ValueError(f"cannot parse boolean {key} = {value!r}")
    if key in ("mode", "layers", "ref_level"):
        return value
    if key in ("blur_radius", "dilate_radius", "seed", "epochs", "batch_size"):
        return int(value)
    return float(value)


def _defaults(cfg) -> dict:
    return {f.name: getattr(cfg, f.name) for f in dataclass_fields(cfg)}


def build_parser() -> argparse.ArgumentParser:
    pcfg = pipeline.PipelineConfig()
    tcfg = TrainConfig()
    dcfg = training.DENOISER_DEFAULTS
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = argparse.ArgumentParser(prog="gmdiff", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", formatter_class=fmt,
                       help="render the synthetic scene dataset")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--count", type=int, default=2000, help="number of images")
    p.add_argument("--seed", type=int, default=0, help="root seed")

    p = sub.add_parser("train", formatter_class=fmt,
                       help="train autoencoder and denoiser")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="checkpoint directory")
    p.add_argument("--config", default=None, help="key = value config file")
    p.add_argument("--seed", type=int, default=tcfg.seed, help="root seed")
    p.add_argument("--epochs", type=int, default=tcfg.epochs, help="autoencoder epochs")
    p.add_argument("--lr", type=float, default=tcfg.lr, help="autoencoder learning rate")
    p.add_argument("--denoiser-epochs", type=int, default=dcfg.epochs,
                   help="denoiser epochs")
    p.add_argument("--denoiser-lr", type=float, default=dcfg.lr,
                   help="denoiser learning rate")
    p.add_argument("--batch-size", type=int, default=tcfg.batch_size, help="batch size")

    p = sub.add_parser("train-eval", formatter_class=fmt,
                       help="train the evaluation models")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="checkpoint directory")
    p.add_argument("--config", default=None, help="key = value config file")
    p.add_argument("--seed", type=int, default=tcfg.seed, help="root seed")
    p.add_argument("--epochs", type=int, default=tcfg.epochs, help="epochs")
    p.add_argument("--lr", type=float, default=tcfg.lr, help="learning rate")
    p.add_argument("--batch-size", type=int, default=tcfg.batch_size, help="batch size")

    p = sub.add_parser("generate", formatter_class=fmt,
                       help="masked img2img generation")
    p.add_argument("--ckpt", required=True,
                   help="directory holding autoencoder.gmdf and denoiser.gmdf")
    p.add_argument("--ref", required=True, help="reference image (8-bit RGB PNG)")
    p.add_argument("--prompt", required=True, help="caption, e.g. 'a red circle in forest'")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--init", default=None, help="optional distinct init image")
    p.add_argument("--config", default=None, help="key = value config file")
    p.add_argument("--subjects", default="",
                   help="comma-separated subject words (default: prompt color/shape)")
    p.add_argument("--strength", type=float, default=pcfg.strength,
                   help="fraction of the schedule traversed forward")
    p.add_argument("--window", default=_format_window(pcfg.window),
                   help="masking window lo:hi as fractions of T, selecting lo*T < t <= hi*T")
    p.add_argument("--quantile", type=float, default=pcfg.quantile,
                   help="dynamic threshold quantile")
    p.add_argument("--sigma", type=float, default=pcfg.sigma, help="blur sigma")
    p.add_argument("--blur-radius", type=int, default=pcfg.blur_radius, help="blur radius")
    p.add_argument("--dilate-radius", type=int, default=pcfg.dilate_radius,
                   help="dilation structuring-element radius")
    p.add_argument("--mode", choices=("full", "diagonal"), default=pcfg.mode,
                   help="attribution pairing mode")
    p.add_argument("--layers", choices=("all", "0", "1"), default=pcfg.layers,
                   help="cross-attention layers used for masking")
    p.add_argument("--channel-masks", choices=("coherent", "per-channel"),
                   default="coherent" if pcfg.channel_coherent else "per-channel",
                   help="average scores over latent channels before thresholding, "
                        "or threshold each channel independently")
    p.add_argument("--seed", type=int, default=pcfg.seed, help="root seed")
    p.add_argument("--deterministic", action="store_true",
                   default=pcfg.deterministic, help="zero all noise draws")
    p.add_argument("--ref-level", choices=("aligned", "paper"), default=pcfg.ref_level,
                   help="noise the blended reference to t-1 (aligned) or t (paper)")
    p.add_argument("--dump-masks", action="store_true", default=pcfg.dump_masks,
                   help="write per-step score fields and masks as PNGs")
    p.add_argument("--debug-checks", action="store_true", default=pcfg.debug_checks,
                   help="assert per-step blend identities")

    p = sub.add_parser("eval", formatter_class=fmt,
                       help="score generated images against a real set")
    p.add_argument("--generated", required=True, help="generated image directory")
    p.add_argument("--real", required=True, help="real image directory")
    p.add_argument("--ckpt", required=True,
                   help="directory holding classifier.gmdf and dual.gmdf")
    p.add_argument("--out", required=True, help="report file path")
    return parser


def _apply_config_file(parser, argv):
    """File values become parser defaults, so explicit flags still win."""
    if "--config" not in argv:
        return
    idx = argv.index("--config")
    if idx + 1 >= len(argv):
        return
    values = parse_config_file(argv[idx + 1])
    coerced = {k: _coerce(k, v) for k, v in values.items()}
    if "channel_coherent" in coerced:
        coerced["channel_masks"] = ("coherent" if coerced.pop("channel_coherent")
                                    else "per-channel")
    for subparser in parser._subparsers._group_actions[0].choices.values():
        known = {a.dest for a in subparser._actions}
        subparser.set_defaults(**{k: v for k, v in coerced.items() if k in known})


def _tile_channels(arr) -> np.ndarray:
    return np.concatenate(list(arr), axis=1)


def cmd_gen_data(args) -> int:
    make_dataset(args.count, args.seed, args.out)
    print(f"wrote {args.count} images to {args.out}")
    return 0


def cmd_train(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ae_cfg = TrainConfig(epochs=args.epochs, batch_size=args.batch_size,
                         lr=args.lr, seed=args.seed)
    ae = training.train_autoencoder(args.data, ae_cfg)
    save_checkpoint(out / "autoencoder.gmdf", "autoencoder", ae.params)
    (out / "train_autoencoder.log").write_text("\n".join(ae.log) + "\n")
    print(f"autoencoder holdout MAE: {ae.metrics['holdout_mae']:.5f}")
    den_cfg = TrainConfig(epochs=args.denoiser_epochs, batch_size=args.batch_size,
                          lr=args.denoiser_lr, seed=args.seed)
    den = training.train_denoiser(args.data, ae.params, den_cfg)
    save_checkpoint(out / "denoiser.gmdf", "denoiser", den.params)
    (out / "train_denoiser.log").write_text("\n".join(den.log) + "\n")
    print(f"checkpoints in {out}")
    return 0


def cmd_train_eval(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg = TrainConfig(epochs=args.epochs, batch_size=args.batch_size,
                      lr=args.lr, seed=args.seed)
    cls, dual = training.train_eval_models(args.data, cfg)
    save_checkpoint(out / "classifier.gmdf", "classifier", cls.params)
    save_checkpoint(out / "dual.gmdf", "dual", dual.params)
    (out / "train_classifier.log").write_text("\n".join(cls.log) + "\n")
    (out / "train_dual.log").write_text("\n".join(dual.log) + "\n")
    print(f"classifier holdout accuracy: {cls.metrics['holdout_accuracy']:.3f}")
    print(f"dual encoder holdout ranking: {dual.metrics['holdout_ranking']:.3f}")
    return 0


def cmd_generate(args) -> int:
    ck_dir = Path(args.ckpt)
    ae = load_checkpoint(ck_dir / "autoencoder.gmdf", expect_kind="autoencoder")
    den = load_checkpoint(ck_dir / "denoiser.gmdf", expect_kind="denoiser")
    if ae.schedule_args != den.schedule_args:
        raise ValueError("autoencoder and denoiser checkpoints disagree on the schedule")
    subjects = tuple(s for s in args.subjects.split(",") if s) or None
    config = pipeline.PipelineConfig(
        strength=args.strength,
        window=_parse_window(args.window) if isinstance(args.window, str) else args.window,
        quantile=args.quantile, sigma=args.sigma, blur_radius=args.blur_radius,
        dilate_radius=args.dilate_radius, mode=args.mode, layers=args.layers,
        channel_coherent=(args.channel_masks == "coherent"
                          if isinstance(args.channel_masks, str) else args.channel_masks),
        subjects=subjects, seed=args.seed, deterministic=args.deterministic,
        ref_level=args.ref_level, dump_masks=args.dump_masks,
        debug_checks=args.debug_checks)
    ref = png_read(args.ref)
    init = png_read(args.init) if args.init else None
    vocab = nn.Vocabulary(den.words)
    art = pipeline.generate(ae.params, den.params, den.schedule, ref, args.prompt,
                            config, init_image=init, vocab=vocab)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    png_write(out / "image.png", art.image)
    (out / "run_manifest.txt").write_text(art.manifest_text())
    if config.dump_masks:
        mask_dir = out / "masks"
        mask_dir.mkdir(exist_ok=True)
        for key, mask in art.masks.items():
            name = (f"mask_t{key[0]:03d}_final.png" if key[1] == "final"
                    else f"mask_t{key[0]:03d}_layer{key[1]}_{key[2]}.png")
            png_write_binary(mask_dir / name, _tile_channels(mask))
        for (t, layer, word), fld in art.fields.items():
            png_write_gray(mask_dir / f"score_t{t:03d}_layer{layer}_{word}.png",
                           _tile_channels(fld))
    print(f"wrote {out / 'image.png'}")
    return 0


def cmd_eval(args) -> int:
    ck_dir = Path(args.ckpt)
    cls = load_checkpoint(ck_dir / "classifier.gmdf", expect_kind="classifier")
    dual = load_checkpoint(ck_dir / "dual.gmdf", expect_kind="dual")
    rep = evalmetrics.report(args.generated, args.real, cls.params, dual.params)
    text = rep.to_text()
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    Path(args.out).write_text(text)
    sys.stdout.write(text)
    return 0


_COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "train-eval": cmd_train_eval,
    "generate": cmd_generate,
    "eval": cmd_eval,
}


def _module_prefix() -> str:
    _, _, tb = sys.exc_info()
    prefix = "cli"
    for frame, _ in traceback.walk_tb(tb):
        mod = frame.f_globals.get("__name__", "")
        if mod.startswith("gmdiff."):
            prefix = mod.split(".", 1)[1]
    return prefix


def run(argv) -> int:
    """Dispatch a command line; returns the process exit code."""
    parser = build_parser()
    try:
        _apply_config_file(parser, list(argv))
        args = parser.parse_args(argv)
        return _COMMANDS[args.command](args)
    except SystemExit as exc:
        return int(exc.code or 0)
    except (ValueError, KeyError, OSError) as exc:
        print(f"{_module_prefix()}: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()
