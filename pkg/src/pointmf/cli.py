"""Command line entry point: ``pointmf {train,sample,eval,inspect,replay,make-data}``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
``PMF_THREADS`` caps the BLAS/OpenMP thread pools.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import os
import re
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import CheckpointError, load_checkpoint
from .config import ConfigError, load_config, parse_config
from .data import (PARAM_RANGES, ShapeSpec, descriptor, generate_sample, make_splits,
                   read_manifest, write_manifest)
from .formats import list_point_files, read_points, write_points
from .metrics import evaluate_pair, write_csv
from .sampler import NFECounter, sample_k_step
from .train import NumericError, Trainer, load_model, read_log, replay_ratio

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
SUFFIX = re.compile(r"_seed\d+_k\d+$")


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _threads():
    raw = os.environ.get("PMF_THREADS")
    if not raw:
        return contextlib.nullcontext()
    try:
        n = int(raw)
        if n < 1:
            raise ValueError
    except ValueError:
        raise UsageError(f"PMF_THREADS must be a positive integer, got {raw!r}") from None
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


# -- train -------------------------------------------------------------------


def cmd_train(args) -> int:
    try:
        config = load_config(args.config)
    except OSError as exc:
        raise DataError(f"cannot read config: {exc}") from None
    if args.steps is not None:
        config.optimizer.total_steps = args.steps
    out = Path(config.run.out_dir if args.out is None else args.out)
    if args.resume:
        trainer = Trainer.resume(args.resume, config)
    else:
        trainer = Trainer(config)
    if args.dry_run:
        print(config.to_text().rstrip())
        print(json.dumps({"initial": trainer.initial_loss()}))
        return EXIT_OK
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.ini").write_text(config.to_text())
    log_path = out / "log.jsonl"

    def report(rec):
        if args.verbose:
            print(json.dumps(rec), flush=True)

    trainer.run(log_path=log_path, ckpt_dir=out, on_step=report)
    print(f"trained to step {trainer.step_count}; checkpoint {out / 'final.ckpt'}")
    return EXIT_OK


# -- sample ------------------------------------------------------------------


def parse_params(family: str, text: str) -> dict[str, float]:
    """``"R=0.7,r=0.2"`` or positional ``"0.7,0.2"`` in the family's parameter order."""
    if family not in PARAM_RANGES:
        raise UsageError(f"unknown family {family!r}; choose from {list(PARAM_RANGES)}")
    names = list(PARAM_RANGES[family])
    items = [s.strip() for s in text.split(",") if s.strip()]
    out = {}
    try:
        for i, item in enumerate(items):
            if "=" in item:
                k, v = item.split("=", 1)
                out[k.strip()] = float(v)
            elif i < len(names):
                out[names[i]] = float(item)
            else:
                raise UsageError(f"too many parameters for {family}: expected {names}")
    except ValueError:
        raise UsageError(f"cannot parse --params {text!r}") from None
    return out


def _conditions(args):
    if args.manifest:
        try:
            specs = read_manifest(args.manifest)
        except (OSError, ValueError) as exc:
            raise DataError(f"cannot read manifest: {exc}") from None
        return [(f"{i:04d}_{s.family}", s) for i, s in enumerate(specs)]
    if not args.family or args.params is None:
        raise UsageError("sample needs --family and --params, or --manifest")
    try:
        spec = ShapeSpec.make(args.family, yaw=args.yaw, scale=args.scale,
                              **parse_params(args.family, args.params))
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    return [(args.family, spec)]


def cmd_sample(args) -> int:
    if args.steps < 1 or args.count < 1 or args.seed < 0:
        raise UsageError("--steps and --count must be >= 1 and --seed >= 0")
    conditions = _conditions(args)
    net, config, _ = load_model(args.ckpt)
    n_points = args.points or config.model.points
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    counter = NFECounter(net)
    written = 0
    for stem, spec in conditions:
        cond = net.encode(descriptor(spec)[None])
        for seed in range(args.seed, args.seed + args.count):
            before = counter.calls
            pts = sample_k_step(counter, cond, args.steps, seed, n_points)[0]
            nfe = counter.calls - before
            write_points(out / f"{stem}_seed{seed}_k{args.steps}.{args.format}", pts)
            written += 1
    print(f"NFE={nfe}")
    print(f"wrote {written} files to {out}")
    return EXIT_OK


# -- eval --------------------------------------------------------------------


def cmd_eval(args) -> int:
    if args.pct <= 0:
        raise UsageError("--pct must be > 0")
    for d in (args.pred, args.gt):
        if not Path(d).is_dir():
            raise DataError(f"not a directory: {d}")
    preds = list_point_files(args.pred)
    gts = list_point_files(args.gt)
    if not preds:
        raise DataError(f"no point-set files in {args.pred}")
    rows, problems = {}, []
    matched = set()
    for stem, path in preds.items():
        key = stem if stem in gts else SUFFIX.sub("", stem)
        if key not in gts:
            problems.append(f"{stem}: no ground truth named {key}")
            continue
        matched.add(key)
        try:
            rows[stem] = evaluate_pair(read_points(path), read_points(gts[key]), args.pct)
        except ValueError as exc:
            problems.append(f"{stem}: {exc}")
    problems += [f"{k}: no prediction" for k in sorted(set(gts) - matched)]
    if rows:
        write_csv(args.out, rows)
        mean = np.mean([r.cd for r in rows.values()]), np.mean([r.emd for r in rows.values()]), \
            np.mean([r.fscore for r in rows.values()])
        print(f"pairs={len(rows)} cd={mean[0]:.6f} emd={mean[1]:.6f} f1={mean[2]:.4f} -> {args.out}")
    for p in problems:
        print(f"error: {p}", file=sys.stderr)
    return EXIT_DATA if problems or not rows else EXIT_OK


# -- inspect / replay / make-data ---------------------------------------------


def inspect_text(path) -> str:
    ck = load_checkpoint(path)
    config = parse_config(ck.config_text)
    n_params = int(sum(v.size for v in ck.params.values()))
    lines = [f"checkpoint: {path}", f"step: {ck.step}", f"parameters: {n_params}",
             "config:", *("  " + ln for ln in config.to_text().rstrip().splitlines()), "blobs:"]
    lines += [f"  {name} {digest}" for name, digest in ck.checksums.items()]
    return "\n".join(lines)


def cmd_inspect(args) -> int:
    print(inspect_text(args.ckpt))
    return EXIT_OK


def cmd_replay(args) -> int:
    try:
        records = read_log(args.log)
        print(json.dumps(replay_ratio(records, args.early, args.window, args.key)))
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot replay {args.log}: {exc}") from None
    return EXIT_OK


def cmd_make_data(args) -> int:
    split = make_splits(args.n_train, args.n_test, args.seed)
    out = Path(args.out)
    (out / "gt").mkdir(parents=True, exist_ok=True)
    write_manifest(out / "train.txt", split.train)
    write_manifest(out / "test.txt", split.test)
    rng = np.random.default_rng(args.seed + 1)
    for i, spec in enumerate(split.test):
        pts, _ = generate_sample(spec, args.points, rng)
        write_points(out / "gt" / f"{i:04d}_{spec.family}.{args.format}", pts)
    print(f"wrote {len(split.train)} train / {len(split.test)} test specs to {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="pointmf", description="One-step mean-flow point-set generation.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="train from a config file")
    t.add_argument("--config", required=True)
    t.add_argument("--resume", metavar="CKPT")
    t.add_argument("--dry-run", action="store_true", help="echo the config and initial loss only")
    t.add_argument("--steps", type=int, help="override optimizer.total_steps")
    t.add_argument("--out", help="override run.out_dir")
    t.add_argument("-v", "--verbose", action="store_true", help="print every log record")
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("sample", help="generate point sets from a checkpoint")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--family")
    s.add_argument("--params", help='e.g. "R=0.7,r=0.2" or "0.7,0.2"')
    s.add_argument("--yaw", type=float, default=0.0)
    s.add_argument("--scale", type=float, default=1.0)
    s.add_argument("--manifest", help="one condition per line instead of --family/--params")
    s.add_argument("--steps", type=int, default=1)
    s.add_argument("--count", type=int, default=1, help="seeds per condition")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--points", type=int, help="points per sample (default: model.points)")
    s.add_argument("--out", required=True)
    s.add_argument("--format", choices=("ply", "pmf"), default="ply")
    s.set_defaults(func=cmd_sample)

    e = sub.add_parser("eval", help="score predictions against ground truth")
    e.add_argument("--pred", required=True)
    e.add_argument("--gt", required=True)
    e.add_argument("--pct", type=float, default=1.0)
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_eval)

    i = sub.add_parser("inspect", help="summarise a checkpoint")
    i.add_argument("--ckpt", required=True)
    i.set_defaults(func=cmd_inspect)

    r = sub.add_parser("replay", help="recompute the loss ratio from a training log")
    r.add_argument("--log", required=True)
    r.add_argument("--early", type=int, default=100)
    r.add_argument("--window", type=int, default=20)
    r.add_argument("--key", default="fm_raw")
    r.set_defaults(func=cmd_replay)

    m = sub.add_parser("make-data", help="write train/test manifests and test ground truth")
    m.add_argument("--n-train", type=int, default=1000)
    m.add_argument("--n-test", type=int, default=200)
    m.add_argument("--seed", type=int, default=0)
    m.add_argument("--points", type=int, default=256)
    m.add_argument("--format", choices=("ply", "pmf"), default="ply")
    m.add_argument("--out", required=True)
    m.set_defaults(func=cmd_make_data)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        with _threads():
            return args.func(args)
    except UsageError as exc:
        print(f"pointmf: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as exc:
        print(f"pointmf: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, CheckpointError) as exc:
        print(f"pointmf: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericError, FloatingPointError) as exc:
        print(f"pointmf: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
