"""Command line: train on a pair corpus, sample one scan, or serve the spool."""

from __future__ import annotations

import argparse
import sys

from .rvim import read_rvim, write_rvim
from .sampling import ddim_sample, finalize_scan
from .schedule import DiffusionConfig
from .spool import serve_spool
from .training import PairCorpus, load_model, save_model, train


def _log(msg: str) -> None:
    print(msg, file=sys.stderr)


def cmd_train(args) -> int:
    corpus = PairCorpus.load(args.pairs)
    cfg = DiffusionConfig(
        timesteps=args.timesteps,
        sampler_steps=args.sampler_steps,
        max_depth=args.max_depth,
        use_wavelet=not args.no_wavelet,
    )
    _log(f"training on {len(corpus)} pairs ({corpus.height}x{corpus.width}) "
         f"for {args.steps} steps")
    model, _, losses = train(
        corpus, cfg, args.steps, seed=args.seed, batch_size=args.batch, log=_log
    )
    save_model(args.out, model, cfg)
    first = sum(losses[:50]) / min(50, len(losses))
    last = sum(losses[-50:]) / min(50, len(losses))
    _log(f"loss {first:.4f} -> {last:.4f}; model: {args.out}")
    return 0


def cmd_sample(args) -> int:
    model, schedule, cfg = load_model(args.model)
    condition = read_rvim(args.condition)
    planes = ddim_sample(condition, model, schedule, cfg,
                         steps=args.steps, seed=args.seed)
    if args.binarize:
        planes = finalize_scan(planes)
    write_rvim(args.out, planes)
    _log(f"sampled {planes.shape[1]}x{planes.shape[2]} -> {args.out}")
    return 0


def cmd_serve(args) -> int:
    model, schedule, cfg = load_model(args.model)
    _log(f"serving spool {args.spool} ({args.steps} sampler steps)")
    handled = serve_spool(
        args.spool, model, schedule, cfg, steps=args.steps,
        idle_timeout=args.idle_timeout, max_jobs=args.max_jobs, log=_log,
    )
    _log(f"served {handled} jobs")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rangediff",
        description="conditional range-image diffusion for LiDAR scan generation",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train on a pairs directory")
    p.add_argument("--pairs", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--batch", type=int, default=2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--timesteps", type=int, default=1000)
    p.add_argument("--sampler-steps", type=int, default=50)
    p.add_argument("--max-depth", type=float, default=60.0)
    p.add_argument("--no-wavelet", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", help="sample one scan from a condition RVIM")
    p.add_argument("--model", required=True)
    p.add_argument("--condition", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--binarize", action="store_true")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("serve", help="answer spool tickets with sampled scans")
    p.add_argument("--model", required=True)
    p.add_argument("--spool", required=True)
    p.add_argument("--steps", type=int, default=50)
    p.add_argument("--idle-timeout", type=float, default=None)
    p.add_argument("--max-jobs", type=int, default=None)
    p.set_defaults(func=cmd_serve)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except FileNotFoundError as exc:
        _log(f"error: {exc}")
        return 2
    except Exception as exc:
        _log(f"error: {exc}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
