"""Command-line entry point: ``unpaired-sr <subcommand> ...``.

Exit status is 0 on success, 1 for configuration or usage errors and 2 for
runtime failures (bad data, divergence, I/O).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import shutil
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch

from . import __version__, datasets, imaging, metrics
from .config import LOG_LEVELS, RunConfig, parse_config
from .errors import ConfigError
from .smoke import make_smoke_corpus
from .stage1 import load_stage1, synthesize_lr_corpus, train_stage1
from .stage2 import load_stage2, super_resolve, train_stage2
from .training import save_checkpoint

log = logging.getLogger("unpaired_sr")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2
_LEVELS = {"quiet": logging.WARNING, "info": logging.INFO, "debug": logging.DEBUG}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(f"{self.prog}: {message}")


def _setup_logging(level: str) -> None:
    root = logging.getLogger("unpaired_sr")
    root.setLevel(_LEVELS[level])
    if not root.handlers:
        handler = logging.StreamHandler(sys.stderr)
        handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(message)s"))
        root.addHandler(handler)


def _load_config(args) -> RunConfig:
    overrides = list(args.set or [])
    if args.seed is not None:
        overrides.append(f"run.seed={args.seed}")
    if getattr(args, "out", None):
        overrides.append(f"run.out_dir={json.dumps(str(args.out))}")
    return parse_config(args.config, overrides)


def _corpus(cfg: RunConfig) -> datasets.UnpairedCorpus:
    d = cfg.data
    if d.hr_dir is None:
        raise ConfigError("data.hr_dir (or data.root) is required")
    if d.lr_dir is None:
        # HR-only corpus: enough for synthesis and for the l1-only ablation
        corpus = datasets.UnpairedCorpus((), tuple(datasets.list_images(d.hr_dir)), d.scale)
    else:
        corpus = datasets.scan_corpus(d.lr_dir, d.hr_dir, d.scale)
    split = datasets.SplitSpec(d.n_prime, d.split)
    return datasets.apply_split(corpus, split, np.random.default_rng([cfg.seed, 3]))


def _write_config(cfg: RunConfig, out: Path, name: str) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / name).write_text(json.dumps(cfg.raw, indent=2, default=str))


def cmd_train_degrade(args) -> int:
    cfg = _load_config(args)
    s1 = cfg.require_stage1()
    out = cfg.out_dir
    s1 = replace(s1, out_dir=str(out), log_path=str(out / "stage1_log.jsonl"))
    corpus = _corpus(cfg)
    _write_config(cfg, out, "stage1_config.json")
    torch.manual_seed(cfg.seed)
    state = load_stage1(args.resume) if args.resume else None
    if state is not None:
        state.config = replace(state.config, total_steps=s1.total_steps,
                               out_dir=s1.out_dir, log_path=s1.log_path)
    state = train_stage1(corpus, s1, state=state)
    ckpt = out / "stage1.ckpt"
    save_checkpoint(state, ckpt)
    print(ckpt)
    return EXIT_OK


def cmd_synthesize_lr(args) -> int:
    cfg = _load_config(args)
    g_state = load_stage1(args.checkpoint) if args.checkpoint else None
    if args.hr_dir:
        hr_paths = datasets.list_images(args.hr_dir)
    else:
        hr_paths = _corpus(cfg).hr_paths
    out = cfg.out_dir / "generated"
    pairset = synthesize_lr_corpus(g_state, hr_paths, cfg.data.scale, out)
    print(out / "pairs.tsv")
    log.info("wrote %d pairs (%s)", len(pairset.pairs), pairset.provenance)
    return EXIT_OK


def cmd_train_sr(args) -> int:
    cfg = _load_config(args)
    s2 = cfg.require_stage2()
    out = cfg.out_dir
    s2 = replace(s2, out_dir=str(out), log_path=str(out / "stage2_log.jsonl"))
    pairset = datasets.GeneratedPairSet.read_manifest(args.pairs)
    corpus = _corpus(cfg) if s2.needs_real_lr else None
    _write_config(cfg, out, "stage2_config.json")
    torch.manual_seed(cfg.seed)
    state = load_stage2(args.resume) if args.resume else None
    if state is not None:
        state.config = replace(state.config, total_steps=s2.total_steps,
                               out_dir=s2.out_dir, log_path=s2.log_path)
    state = train_stage2(pairset, corpus, s2, state=state)
    ckpt = out / "stage2.ckpt"
    save_checkpoint(state, ckpt)
    print(ckpt)
    return EXIT_OK


def cmd_super_resolve(args) -> int:
    state = load_stage2(args.checkpoint)
    src, dst = Path(args.input), Path(args.output)
    if src.is_dir():
        inputs = [p for p in sorted(src.iterdir())
                  if p.suffix.lower() in (".png", ".jpg", ".jpeg")]
        dst.mkdir(parents=True, exist_ok=True)
        targets = [dst / (p.stem + ".png") for p in inputs]
    else:
        inputs, targets = [src], [dst]
        dst.parent.mkdir(parents=True, exist_ok=True)
    for p, t in zip(inputs, targets):
        out = super_resolve(state, imaging.load_image(p), tile=args.tile, overlap=args.overlap)
        imaging.save_image(out, t)
        log.info("%s -> %s %s", p, t, out.shape[-2:])
    return EXIT_OK


def cmd_evaluate(args) -> int:
    report = metrics.evaluate_corpus(args.results, args.refs, args.border)
    text = report.to_json(args.json)
    if args.csv:
        report.to_csv(args.csv)
    print(text)
    return EXIT_OK


def cmd_make_smoke_corpus(args) -> int:
    seed = 0 if args.seed is None else args.seed
    smoke = make_smoke_corpus(args.out, n=args.n, hr_size=args.hr_size, scale=args.scale,
                              blur_sigma=args.blur, noise_sigma=args.noise, seed=seed,
                              n_prime=args.n_prime)
    print(json.dumps({"root": str(smoke.root), "hr": len(smoke.hr_indices),
                      "lr": len(smoke.lr_indices), "held_out": smoke.held_out_names()}))
    return EXIT_OK


def cmd_split(args) -> int:
    seed = 0 if args.seed is None else args.seed
    mode = "non_overlapping" if args.non_overlapping else "basic"
    if mode == "non_overlapping" and args.n_prime is None:
        raise ConfigError("split --non-overlapping needs --n-prime")
    corpus = datasets.scan_corpus(args.lr_dir, args.hr_dir, args.scale)
    try:
        split = datasets.apply_split(corpus, datasets.SplitSpec(args.n_prime or 0, mode),
                                     np.random.default_rng([seed, 3]))
    except ValueError as err:
        raise ConfigError(str(err)) from err
    out = Path(args.out)
    for sub, paths in (("lr", split.lr_paths), ("hr", split.hr_paths)):
        (out / sub).mkdir(parents=True, exist_ok=True)
        for p in paths:
            shutil.copyfile(p, out / sub / Path(p).name)
    print(json.dumps({"lr": len(split.lr_paths), "hr": len(split.hr_paths), "mode": mode}))
    return EXIT_OK


def cmd_benchmark(args) -> int:
    from . import benchmark

    first = 0 if args.seed is None else args.seed
    settings = benchmark.SmokeSettings()
    if args.quick:
        settings = benchmark.quick_settings(stage1_steps=50, stage2_steps=50)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    results = benchmark.run_benchmark(range(first, first + args.seeds), out / "trials",
                                      settings, out_json=out / "results.json")
    print(json.dumps(benchmark.verdict(results)))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="overrides run.seed")
    common.add_argument("--log", choices=LOG_LEVELS, default=None,
                        help="log level (default: $UNPAIRED_SR_LOG, then run.log)")
    conf = _Parser(add_help=False)
    conf.add_argument("--config", default=None, help="TOML run configuration")
    conf.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                      help="override one configuration value (repeatable)")
    conf.add_argument("--out", default=None, help="overrides run.out_dir")

    p = _Parser(prog="unpaired-sr", description="Unpaired real-world super-resolution.")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("train-degrade", parents=[common, conf],
                       help="stage one: learn the degradation generator")
    s.add_argument("--resume", default=None, help="stage-one checkpoint to continue from")
    s.set_defaults(func=cmd_train_degrade)

    s = sub.add_parser("synthesize-lr", parents=[common, conf],
                       help="write generated LR images for the HR corpus")
    s.add_argument("--checkpoint", default=None,
                   help="stage-one checkpoint (omit for plain bicubic LR)")
    s.add_argument("--hr-dir", default=None, help="HR images (default: data section)")
    s.set_defaults(func=cmd_synthesize_lr)

    s = sub.add_parser("train-sr", parents=[common, conf], help="stage two: train the SR network")
    s.add_argument("--pairs", required=True, help="pairs.tsv written by synthesize-lr")
    s.add_argument("--resume", default=None, help="stage-two checkpoint to continue from")
    s.set_defaults(func=cmd_train_sr)

    s = sub.add_parser("super-resolve", parents=[common], help="upscale an image or directory")
    s.add_argument("input")
    s.add_argument("output")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--tile", type=int, default=128)
    s.add_argument("--overlap", type=int, default=16)
    s.set_defaults(func=cmd_super_resolve)

    s = sub.add_parser("evaluate", parents=[common], help="PSNR/SSIM against references")
    s.add_argument("results")
    s.add_argument("refs")
    s.add_argument("--border", type=int, default=0, help="pixels cropped from every side")
    s.add_argument("--json", default=None, help="also write the report here")
    s.add_argument("--csv", default=None, help="per-image table")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("make-smoke-corpus", parents=[common],
                       help="procedural corpus with a known degradation")
    s.add_argument("out")
    s.add_argument("--n", type=int, default=24)
    s.add_argument("--hr-size", type=int, default=96)
    s.add_argument("--scale", type=int, default=4)
    s.add_argument("--blur", type=float, default=1.2)
    s.add_argument("--noise", type=float, default=0.01)
    s.add_argument("--n-prime", type=int, default=None)
    s.set_defaults(func=cmd_make_smoke_corpus)

    s = sub.add_parser("split", parents=[common], help="materialise a corpus split")
    s.add_argument("--lr-dir", required=True)
    s.add_argument("--hr-dir", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--non-overlapping", action="store_true")
    s.add_argument("--n-prime", type=int, default=None)
    s.add_argument("--scale", type=int, default=4)
    s.set_defaults(func=cmd_split)

    s = sub.add_parser("benchmark", parents=[common], help="desk-scale smoke benchmark")
    s.add_argument("--out", required=True, help="working directory; results.json goes here")
    s.add_argument("--seeds", type=int, default=10)
    s.add_argument("--quick", action="store_true", help="50-step stages, for plumbing checks")
    s.set_defaults(func=cmd_benchmark)
    return p


def main(argv=None) -> int:
    level = os.environ.get("UNPAIRED_SR_LOG", "info")
    try:
        args = build_parser().parse_args(argv)
        if args.log:
            level = args.log
        if level not in _LEVELS:
            raise ConfigError(f"UNPAIRED_SR_LOG must be one of {LOG_LEVELS}, got {level!r}")
        _setup_logging(level)
        return args.func(args)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as err:  # noqa: BLE001 - every other failure is a runtime error
        log.debug("traceback", exc_info=True)
        print(f"error: {type(err).__name__}: {err}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
