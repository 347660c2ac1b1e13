"""Command line entry point: encode, decode, train, sample, eval, clean-corpus.

Every flag can also come from ``--config FILE``, a text file of
``key = value`` lines whose keys are the long flag names without dashes
(``max-notes = 32``).  List-valued keys take whitespace-separated values.
Flags given on the command line win.  Summaries go to stdout as JSON, logs
to stderr.  Exit codes: 0 success, 1 partial failure, 2 usage error.
"""
from __future__ import annotations

import argparse
import json
import logging
import shutil
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .denoiser import (CheckpointError, DenoiserConfig, TrainConfig, TrainingError,
                       load_checkpoint, sample as sample_tensors, save_checkpoint, train)
from .diffusion import DEFAULT_STEPS, make_schedule, scaled_linear_schedule
from .metrics import evaluate
from .midi_io import MidiParseError, parse_midi
from .note_codec import (DEFAULT_FAMILY_TABLE, NoteArray, default_grid_ticks, is_abnormal_velocity,
                         load_family_map, score_to_note_array)
from .postprocess import DecodeConfig, decode_pipeline
from .roll_image import (DEFAULT_PALETTE, DEFAULT_WIDTH, Palette, RollFormatError, note_array_to_rolls,
                         rgb_image_to_roll, roll_to_rgb_image, roll_to_tensor, rolls_to_note_array,
                         tensor_to_roll)

logger = logging.getLogger("chromaroll")

EXIT_OK, EXIT_PARTIAL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def read_config(path) -> dict:
    values = {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise UsageError(f"{path}:{lineno}: expected 'key = value'")
        values[key.strip().replace("-", "_")] = value.strip()
    return values


def _config_defaults(path, sub: argparse.ArgumentParser, command: str) -> dict:
    """Config-file values converted with each flag's own type."""
    actions = {opt[2:].replace("-", "_"): a for a in sub._actions
               for opt in a.option_strings if opt.startswith("--") and opt not in ("--config", "--help")}
    out = {}
    for key, raw in read_config(path).items():
        action = actions.get(key)
        if action is None:
            raise UsageError(f"unknown config key {key!r} for '{command}'")
        conv = action.type or str
        try:
            if action.nargs in ("+", "*"):
                out[key] = [conv(v) for v in raw.split()]
            elif isinstance(action, argparse._StoreTrueAction):
                out[key] = raw.lower() in ("1", "true", "yes", "on")
            else:
                out[key] = conv(raw)
        except ValueError as exc:
            raise UsageError(f"config key {key!r}: {exc}") from exc
        if action.choices is not None and out[key] not in action.choices:
            raise UsageError(f"config key {key!r}: {out[key]!r} not in {sorted(action.choices)}")
        out[action.dest] = out.pop(key)
    return out


REQUIRED = {
    "encode": ("inputs", "out_dir"),
    "decode": ("inputs", "out"),
    "train": ("inputs", "checkpoint"),
    "sample": ("checkpoint", "out_dir"),
    "eval": ("generated",),
    "clean-corpus": ("in_dir", "out_dir"),
}


def _palette(args) -> Palette:
    return Palette.from_config(args.palette) if getattr(args, "palette", None) else DEFAULT_PALETTE


def _emit(summary: dict):
    print(json.dumps(summary, sort_keys=True))


# --------------------------------------------------------------------------
# encode

def _encode_one(job):
    path, out_dir, grid_div, width, family_path, palette_path = job
    family = load_family_map(family_path) if family_path else DEFAULT_FAMILY_TABLE
    palette = Palette.from_config(palette_path) if palette_path else DEFAULT_PALETTE
    path = Path(path)
    try:
        score = parse_midi(path.read_bytes())
    except (OSError, MidiParseError) as exc:
        return str(path), None, str(exc)
    array = score_to_note_array(score, default_grid_ticks(score.ticks_per_beat, grid_div), family)
    rolls = note_array_to_rolls(array, width, palette)
    out_dir = Path(out_dir)
    names = []
    for k, roll in enumerate(rolls):
        target = out_dir / f"{path.stem}_{k}.png"
        target.write_bytes(roll_to_rgb_image(roll))
        names.append(target.name)
    (out_dir / f"{path.stem}.notes.txt").write_text(array.to_text())
    return str(path), names, None


def cmd_encode(args) -> int:
    if args.width <= 0 or args.width % 16:
        raise UsageError("--width must be a positive multiple of 16")
    if args.grid_div < 1:
        raise UsageError("--grid-div must be >= 1")
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    jobs = [(p, out_dir, args.grid_div, args.width, args.family_map, args.palette) for p in args.inputs]
    if args.jobs > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(args.jobs) as pool:
            results = list(pool.map(_encode_one, jobs))
    else:
        results = [_encode_one(j) for j in jobs]
    encoded, failed = {}, {}
    for path, names, err in results:
        if err is None:
            encoded[path] = names
        else:
            logger.error("failed to encode %s: %s", path, err)
            failed[path] = err
    _emit({"encoded": encoded, "failed": failed,
           "rolls": sum(len(v) for v in encoded.values())})
    return EXIT_PARTIAL if failed else EXIT_OK


# --------------------------------------------------------------------------
# decode

def cmd_decode(args) -> int:
    images = []
    for p in args.inputs:
        try:
            images.append(Path(p).read_bytes())
        except OSError as exc:
            raise UsageError(f"cannot read {p}: {exc}") from exc
    config = DecodeConfig(ticks_per_beat=args.tpb, grid_ticks=default_grid_ticks(args.tpb, args.grid_div),
                          window_columns=args.window, max_per_window=args.max_notes,
                          palette=_palette(args))
    try:
        data = decode_pipeline(images, config)
    except RollFormatError as exc:
        logger.error("%s", exc)
        return EXIT_PARTIAL
    Path(args.out).write_bytes(data)
    notes = sum(len(t.notes) for t in parse_midi(data).tracks)
    _emit({"out": args.out, "notes": notes, "rolls": len(images)})
    return EXIT_OK


# --------------------------------------------------------------------------
# train / sample

def _schedule(steps, beta_start, beta_end):
    if beta_start is None and beta_end is None:
        return scaled_linear_schedule(steps)
    scaled = scaled_linear_schedule(steps)
    return make_schedule(steps, beta_start if beta_start is not None else float(scaled.betas[0]),
                         beta_end if beta_end is not None else float(scaled.betas[-1]))


def _collect_images(inputs):
    paths = []
    for p in map(Path, inputs):
        paths.extend(sorted(p.glob("*.png")) if p.is_dir() else [p])
    return paths


def cmd_train(args) -> int:
    paths = _collect_images(args.inputs)
    if not paths:
        raise UsageError("no training images given")
    rolls = [rgb_image_to_roll(p.read_bytes()) for p in paths]
    widths = {r.width for r in rolls}
    if len(widths) != 1:
        raise UsageError(f"training rolls have mixed widths {sorted(widths)}")
    data = np.stack([roll_to_tensor(r) for r in rolls])
    schedule = _schedule(args.steps, args.beta_start, args.beta_end)
    config = TrainConfig(learning_rate=args.lr, epochs=args.epochs, batch_size=args.batch,
                         max_steps=args.max_steps, seed=args.seed, optimizer=args.optimizer,
                         momentum=args.momentum, clip_norm=args.clip_norm or None,
                         denoiser=DenoiserConfig(width_mult=args.width_mult))
    try:
        result = train(data, schedule, config)
    except TrainingError as exc:
        logger.error("%s", exc)
        _emit({"error": str(exc)})
        return EXIT_PARTIAL
    meta = {"betas": [float(b) for b in schedule.betas], "roll_width": widths.pop(),
            "seed": args.seed}
    save_checkpoint(result.params, args.checkpoint, meta)
    if args.loss_log:
        Path(args.loss_log).write_text("\n".join(f"{v:.8g}" for v in result.losses) + "\n")
    smoothed = result.smoothed()
    _emit({"checkpoint": args.checkpoint, "steps": len(result.losses),
           "first_loss": result.losses[0] if result.losses else None,
           "final_smoothed_loss": float(smoothed[-1]) if len(smoothed) else None,
           "parameters": result.params.count()})
    return EXIT_OK


def cmd_sample(args) -> int:
    if args.count < 0:
        raise UsageError("--count must be >= 0")
    try:
        params, meta = load_checkpoint(args.checkpoint)
    except CheckpointError as exc:
        logger.error("%s", exc)
        return EXIT_PARTIAL
    from .diffusion import DiffusionSchedule

    if "betas" in meta and (args.steps is None or args.steps == len(meta["betas"])) \
            and args.beta_start is None and args.beta_end is None:
        schedule = DiffusionSchedule.from_betas(meta["betas"])
    else:
        schedule = _schedule(args.steps or DEFAULT_STEPS, args.beta_start, args.beta_end)
        if "betas" in meta:
            logger.warning("sampling with a schedule that differs from the one used in training")
    width = args.width or meta.get("roll_width", DEFAULT_WIDTH)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(args.seed)
    x = sample_tensors(params, schedule, args.count, (3, 128, width), rng, batch_size=args.batch)
    names = []
    for k, xk in enumerate(x):
        target = out_dir / f"sample_{k}.png"
        target.write_bytes(roll_to_rgb_image(tensor_to_roll(xk)))
        names.append(str(target))
    _emit({"samples": names, "steps": schedule.T, "seed": args.seed})
    return EXIT_OK


# --------------------------------------------------------------------------
# eval / clean-corpus

def _load_array(paths, tpb, grid, palette) -> NoteArray:
    paths = [Path(p) for p in paths]
    if all(p.suffix.lower() == ".png" for p in paths):
        rolls = [rgb_image_to_roll(p.read_bytes()) for p in paths]
        return rolls_to_note_array(rolls, tpb, grid, palette)
    if len(paths) != 1:
        raise UsageError("give either PNG rolls or a single .txt/.mid file per side")
    p = paths[0]
    if p.suffix.lower() in (".mid", ".midi"):
        score = parse_midi(p.read_bytes())
        return score_to_note_array(score, grid)
    return NoteArray.from_text(p.read_text())


def cmd_eval(args) -> int:
    palette = _palette(args)
    grid = default_grid_ticks(args.tpb, args.grid_div)
    try:
        gen = _load_array(args.generated, args.tpb, grid, palette)
        ref = _load_array(args.reference, args.tpb, grid, palette) if args.reference else None
    except (OSError, ValueError) as exc:
        raise UsageError(str(exc)) from exc
    if ref is not None and ref.grid_ticks != gen.grid_ticks:
        ref = NoteArray(ref.cells, ref.ticks_per_beat, gen.grid_ticks)
    _emit(evaluate(gen, ref, strict=args.strict).to_dict())
    return EXIT_OK


def _check_one(job):
    path, threshold = job
    try:
        score = parse_midi(Path(path).read_bytes())
    except (OSError, MidiParseError) as exc:
        return path, None, str(exc)
    return path, is_abnormal_velocity(score, threshold), None


def cmd_clean_corpus(args) -> int:
    in_dir, out_dir = Path(args.in_dir), Path(args.out_dir)
    if not in_dir.is_dir():
        raise UsageError(f"{in_dir} is not a directory")
    out_dir.mkdir(parents=True, exist_ok=True)
    jobs = [(p, args.threshold) for p in sorted(in_dir.iterdir()) if p.suffix.lower() in (".mid", ".midi")]
    if args.jobs > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(args.jobs) as pool:
            results = list(pool.map(_check_one, jobs))
    else:
        results = [_check_one(j) for j in jobs]
    kept, dropped, skipped = [], [], []
    for path, abnormal, err in results:
        if err is not None:
            logger.warning("skipping unreadable %s: %s", path, err)
            skipped.append(path.name)
        elif abnormal:
            dropped.append(path.name)
        else:
            shutil.copyfile(path, out_dir / path.name)
            kept.append(path.name)
    _emit({"kept": len(kept), "dropped": len(dropped), "skipped": len(skipped),
           "kept_files": kept, "dropped_files": dropped, "skipped_files": skipped})
    return EXIT_OK


# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="chromaroll", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    subs = parser.add_subparsers(dest="command")

    def sub(name, func, help_):
        p = subs.add_parser(name, help=help_)
        p.add_argument("--config", help="key = value file mirroring the flags")
        p.set_defaults(func=func)
        return p

    p = sub("encode", cmd_encode, "MIDI files -> color piano-roll PNGs")
    p.add_argument("--in", dest="inputs", nargs="+")
    p.add_argument("--out-dir")
    p.add_argument("--grid-div", type=int, default=4, help="pixel columns per beat")
    p.add_argument("--width", type=int, default=DEFAULT_WIDTH)
    p.add_argument("--family-map", help="program -> family override file")
    p.add_argument("--palette", help="palette/threshold config file")
    p.add_argument("--jobs", type=int, default=1)

    p = sub("decode", cmd_decode, "roll PNGs -> MIDI")
    p.add_argument("--in", dest="inputs", nargs="+")
    p.add_argument("--out")
    p.add_argument("--window", type=int, default=16)
    p.add_argument("--max-notes", type=int, default=24)
    p.add_argument("--tpb", type=int, default=480)
    p.add_argument("--grid-div", type=int, default=4)
    p.add_argument("--palette")

    p = sub("train", cmd_train, "train the noise predictor on roll PNGs")
    p.add_argument("--in", dest="inputs", nargs="+", help="PNG files or directories")
    p.add_argument("--checkpoint")
    p.add_argument("--steps", type=int, default=DEFAULT_STEPS, help="diffusion steps T")
    p.add_argument("--beta-start", type=float)
    p.add_argument("--beta-end", type=float)
    p.add_argument("--lr", type=float, default=0.1)
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--max-steps", type=int)
    p.add_argument("--batch", type=int, default=1)
    p.add_argument("--width-mult", type=float, default=1.0)
    p.add_argument("--optimizer", choices=("sgd", "adam"), default="sgd")
    p.add_argument("--momentum", type=float, default=0.0)
    p.add_argument("--clip-norm", type=float, default=1.0, help="global gradient norm cap (0 disables)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--loss-log", help="write per-step losses here")

    p = sub("sample", cmd_sample, "sample roll PNGs from a checkpoint")
    p.add_argument("--checkpoint")
    p.add_argument("--count", type=int, default=1)
    p.add_argument("--steps", type=int, help="diffusion steps T (default: from checkpoint)")
    p.add_argument("--beta-start", type=float)
    p.add_argument("--beta-end", type=float)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir")
    p.add_argument("--width", type=int)
    p.add_argument("--batch", type=int, default=4)

    p = sub("eval", cmd_eval, "objective metrics as one JSON line")
    p.add_argument("--generated", nargs="+")
    p.add_argument("--reference", nargs="+")
    p.add_argument("--strict", action="store_true", help="also require velocity within 2 luma levels")
    p.add_argument("--tpb", type=int, default=480)
    p.add_argument("--grid-div", type=int, default=4)
    p.add_argument("--palette")

    p = sub("clean-corpus", cmd_clean_corpus, "drop scores with abnormal velocities")
    p.add_argument("--in-dir")
    p.add_argument("--out-dir")
    p.add_argument("--threshold", type=float, default=0.8)
    p.add_argument("--jobs", type=int, default=1)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_usage(sys.stderr)
            return EXIT_USAGE
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
        if args.config:
            # config values become defaults, so explicit flags still win
            sub = parser._subparsers._group_actions[0].choices[args.command]
            sub.set_defaults(**_config_defaults(args.config, sub, args.command))
            args = parser.parse_args(argv)
        missing = [d for d in REQUIRED[args.command] if getattr(args, d) is None]
        if missing:
            raise UsageError(f"{args.command}: missing required option(s) "
                             + ", ".join("--" + m.replace("_", "-") for m in missing))
        return args.func(args)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    except UsageError as exc:
        logger.error("%s", exc)
        return EXIT_USAGE
    except (RollFormatError, ValueError) as exc:
        logger.error("%s", exc)
        return EXIT_PARTIAL


if __name__ == "__main__":
    sys.exit(main())
