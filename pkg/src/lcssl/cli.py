"""Command-line entry point: ``lcssl <command> ...``.

Every command is a thin wrapper over library calls. Failures print a single
``error<TAB>kind<TAB>message`` line on stderr and exit with status 1.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import config as cfgmod
from . import datagen, evalsuite
from .errors import ConfigError, LCSSLError, PPMError
from .geometry import FeatureGeometry, flip_ground_truth_flat
from .imaging import read_image, write_ppm
from .nn import ModelPair
from .trainer import load_checkpoint, pretrain


def _load_data(path, need_labels=False) -> datagen.Dataset:
    if not path:
        raise ConfigError("no data directory given (--data or the 'data' config key)")
    ds = datagen.load_folder(path)
    if len(ds) == 0:
        raise PPMError(f"{path}: no .ppm images found")
    if need_labels and ds.labels is None:
        raise PPMError(f"{path}: missing {datagen.LABELS_FILE}")
    return ds


def _emit(args, header, values, text):
    if args.csv:
        print(",".join(header))
        print(",".join(str(v) for v in values))
    else:
        print(text)


def cmd_pretrain(args) -> int:
    config = cfgmod.resolve(args.preset or (), args.config, cfgmod.parse_set(args.set or ()),
                            steps=args.steps, seed=args.seed, data=args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    resolved = cfgmod.dump(config)
    (out / "config.txt").write_text(resolved, encoding="utf-8")
    if not args.csv:
        sys.stdout.write(resolved)
    ds = _load_data(config.data)
    state = None
    ckpt = out / "checkpoint.lcssl"
    if args.resume and ckpt.exists():
        state = load_checkpoint(ckpt)
        if cfgmod.dump(state.config) != resolved:
            raise ConfigError(f"{ckpt}: checkpoint config differs from the resolved config")
    log = None if args.quiet else print
    if args.csv and log:
        print("step,loss,loss_g,loss_lc,valid_pairs,lr,ema_m")
    state = pretrain(config, ds.images, out, state=state, log=log)
    if not args.csv:
        print(f"done: {state.step} steps, degenerate steps {state.metrics['degenerate_steps']}, "
              f"checkpoint {ckpt}")
    return 0


def cmd_eval_corr(args) -> int:
    state = load_checkpoint(args.ckpt)
    ds = _load_data(args.data)
    n = len(ds) if args.images is None else min(args.images, len(ds))
    acc = evalsuite.flip_correspondence_accuracy(state.pair, ds.images[:n], seed=args.seed,
                                                 use_online=args.online)
    _emit(args, ("checkpoint", "images", "flip_accuracy"), (args.ckpt, n, repr(acc)),
          f"flip+color correspondence accuracy: {acc:.4f} over {n} images")
    return 0


def cmd_probe(args) -> int:
    if args.random_init:
        from .trainer import TrainConfig
        pair = ModelPair(TrainConfig().model, seed=args.seed)
    else:
        pair = load_checkpoint(args.ckpt).pair
    ds = _load_data(args.data, need_labels=True)
    res = evalsuite.few_shot_probe(pair, ds.images, ds.labels, args.ways, args.shots,
                                   args.episodes, args.seed, shuffle_labels=args.shuffle_labels)
    _emit(args, ("ways", "shots", "episodes", "accuracy", "stderr"),
          (args.ways, args.shots, args.episodes, repr(res.mean), repr(res.stderr)),
          f"{args.ways}-way {args.shots}-shot accuracy: {res.mean:.4f} +/- {res.stderr:.4f} "
          f"({res.episodes} episodes)")
    return 0


def cmd_viz(args) -> int:
    state = load_checkpoint(args.ckpt)
    model = state.pair.config
    img = read_image(args.image, allow_png=args.allow_png)
    if img.shape[:2] != (model.in_size, model.in_size):
        raise ConfigError(f"{args.image}: image must be {model.in_size}x{model.in_size}, "
                          f"got {img.shape[1]}x{img.shape[0]}")
    v1, v2 = evalsuite.flip_views([img], evalsuite.FLIP_EVAL_AUG, img.shape[:2], args.seed)
    f1 = evalsuite.embed(state.pair, v1)["local"][0]
    f2 = evalsuite.embed(state.pair, v2)["local"][0]
    matches = evalsuite.match_map(f1, f2)
    geom = FeatureGeometry(model.in_size, model.in_size, model.stride)
    truth = flip_ground_truth_flat(geom)
    canvas = evalsuite.match_overlay(v1[0].transpose(1, 2, 0), v2[0].transpose(1, 2, 0),
                                     matches, truth, model.stride)
    write_ppm(args.out, canvas)
    acc = float(np.mean(matches.index == truth))
    _emit(args, ("image", "out", "flip_accuracy"), (args.image, args.out, repr(acc)),
          f"wrote {args.out} ({acc:.4f} of matches correct)")
    return 0


def cmd_gen_data(args) -> int:
    out = datagen.generate_corpus(args.out, args.seed, args.count, args.size, args.classes,
                                  args.first_class)
    _emit(args, ("out", "count", "size", "classes"), (out, args.count, args.size, args.classes),
          f"wrote {args.count} images to {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lcssl", description="BYOL with a local contrastive loss.")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_)
        sp.set_defaults(fn=fn)
        sp.add_argument("--csv", action="store_true", help="machine-readable output")
        return sp

    sp = add("pretrain", cmd_pretrain, "pretrain a model")
    sp.add_argument("--config", help="key = value config file")
    sp.add_argument("--preset", action="append", choices=sorted(cfgmod.PRESETS),
                    help="named override bundle (repeatable, applied before --config)")
    sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override (repeatable)")
    sp.add_argument("--data", help="folder of PPM images")
    sp.add_argument("--out", required=True, help="output directory")
    sp.add_argument("--steps", type=int)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--resume", action="store_true", help="continue from OUT/checkpoint.lcssl")
    sp.add_argument("--quiet", action="store_true")

    sp = add("eval-corr", cmd_eval_corr, "flip+color correspondence accuracy")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--images", type=int, help="use the first N images")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--online", action="store_true", help="evaluate the online network")

    sp = add("probe", cmd_probe, "few-shot logistic-regression probe")
    src = sp.add_mutually_exclusive_group(required=True)
    src.add_argument("--ckpt")
    src.add_argument("--random-init", action="store_true", help="probe an untrained encoder")
    sp.add_argument("--data", required=True)
    sp.add_argument("--ways", type=int, default=5)
    sp.add_argument("--shots", type=int, default=5)
    sp.add_argument("--episodes", type=int, default=200)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--shuffle-labels", action="store_true", help="chance-level control")

    sp = add("viz", cmd_viz, "argmax correspondence overlay")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--image", required=True)
    sp.add_argument("--out", required=True, help="output PPM")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--allow-png", action="store_true")

    sp = add("gen-data", cmd_gen_data, "write a synthetic labeled corpus")
    sp.add_argument("--out", required=True)
    sp.add_argument("--count", type=int, default=1000)
    sp.add_argument("--size", type=int, default=64)
    sp.add_argument("--classes", type=int, default=10)
    sp.add_argument("--first-class", type=int, default=0)
    sp.add_argument("--seed", type=int, default=0)
    return p


def _error_line(kind: str, message: str) -> str:
    return "error\t{}\t{}".format(kind, " ".join(str(message).split()))


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except LCSSLError as exc:
        print(_error_line(exc.kind, exc), file=sys.stderr)
    except FileNotFoundError as exc:
        print(_error_line("missing-file", f"{exc.filename}: not found"), file=sys.stderr)
    except OSError as exc:
        print(_error_line("io", exc), file=sys.stderr)
    return 1


if __name__ == "__main__":
    sys.exit(main())
