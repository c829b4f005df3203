"""Command-line interface.

Subcommands: ``search``, ``apply``, ``render``, ``gradcheck``, ``synth`` and
``ablate``.  Each run prints its fully resolved configuration as one JSON
line before anything else.  Exit codes: 0 success, 1 runtime failure,
2 usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import gradcheck, policy_io
from .data import (DatasetBundle, FormatError, SyntheticSpec, load_binary, make_synthetic, save_binary,
                   subset)
from .operations import OP_NAMES
from .policy import augment
from .search import (CheckpointError, SearchAborted, SearchConfig, ablation_grid, init_state, recovered,
                     restore, run_search, save_checkpoint, stage_summary)

log = logging.getLogger("augsearch")

EXIT_OK, EXIT_FAILURE, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    """Flag combinations argparse cannot express."""


# ---------------------------------------------------------------------------
# shared pieces

def _add_search_flags(p: argparse.ArgumentParser) -> None:
    d = SearchConfig()
    g = p.add_argument_group("search hyperparameters")
    g.add_argument("--epochs", type=int, default=d.epochs)
    g.add_argument("--L", type=int, default=d.L, help="number of sub-policies")
    g.add_argument("--K", type=int, default=d.K, help="operations per sub-policy")
    g.add_argument("--lam", type=float, default=d.lam, help="relaxed Bernoulli temperature")
    g.add_argument("--eta", type=float, default=d.eta, help="mixture softmax temperature")
    g.add_argument("--lr", type=float, default=d.lr)
    g.add_argument("--betas", type=float, nargs=2, default=list(d.betas), metavar=("B1", "B2"))
    g.add_argument("--eps-cls", type=float, default=d.eps_cls, help="classification loss weight")
    g.add_argument("--gp-coef", type=float, default=d.gp_coef)
    g.add_argument("--chunk-size", type=int, default=d.chunk_size)
    g.add_argument("--batch-size", type=int, default=d.batch_size)
    g.add_argument("--critic-steps", type=int, default=d.critic_steps)
    g.add_argument("--max-steps", type=int, default=None, help="stop after this many steps (overrides epochs)")
    g.add_argument("--ops", default=",".join(OP_NAMES), help="comma-separated candidate operations")
    g.add_argument("--seed", type=int, default=d.seed)


def _config_from(args) -> SearchConfig:
    ops = tuple(o.strip() for o in args.ops.split(",") if o.strip())
    unknown = sorted(set(ops) - set(OP_NAMES))
    if unknown:
        raise UsageError(f"unknown operation(s) {unknown}; valid: {', '.join(OP_NAMES)}")
    try:
        return SearchConfig(epochs=args.epochs, L=args.L, K=args.K, lam=args.lam, eta=args.eta, lr=args.lr,
                            betas=tuple(args.betas), eps_cls=args.eps_cls, gp_coef=args.gp_coef,
                            chunk_size=args.chunk_size, batch_size=args.batch_size, seed=args.seed,
                            critic_steps=args.critic_steps, max_steps=args.max_steps, op_names=ops)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def _add_data_flags(p: argparse.ArgumentParser) -> None:
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--data", type=Path, help="AUG1 dataset to search on")
    src.add_argument("--synthetic", help="synthetic task, e.g. rotated_pair:angle=20,n=256")
    p.add_argument("--target", type=Path, help="AUG1 dataset to match (default: --data itself)")
    p.add_argument("--subset", type=int, default=None, help="random subset size drawn from --data")


def _load_task(args):
    """(source, target or None, ground truth or None)."""
    if args.synthetic is not None:
        if args.target is not None or args.subset is not None:
            raise UsageError("--target and --subset apply to --data only")
        try:
            spec = SyntheticSpec.parse(args.synthetic)
        except ValueError as exc:
            raise UsageError(str(exc)) from exc
        source, target, truth = make_synthetic(spec)
        return source, target, truth
    source = load_binary(args.data)
    if args.subset is not None:
        source = subset(source, args.subset, args.seed)
    target = load_binary(args.target) if args.target is not None else None
    return source, target, None


def _emit_config(command: str, resolved: dict) -> None:
    print(json.dumps({"command": command, **resolved}, sort_keys=True), flush=True)


# ---------------------------------------------------------------------------
# subcommands

def cmd_search(args) -> int:
    config = _config_from(args)
    resolved = {"config": config.to_dict(), "data": args.data and str(args.data), "synthetic": args.synthetic,
                "target": args.target and str(args.target), "subset": args.subset, "out": str(args.out),
                "log": args.log and str(args.log), "checkpoint": args.checkpoint and str(args.checkpoint),
                "resume": args.resume and str(args.resume), "log_every": args.log_every}
    _emit_config("search", resolved)
    source, target, truth = _load_task(args)

    if args.resume is not None:
        state, saved = restore(args.resume)
        if saved.to_dict() != config.to_dict():
            raise UsageError("--resume checkpoint was written with a different configuration")
    else:
        state = None
    progress = open(args.log, "a" if args.resume else "w", encoding="utf-8") if args.log else None
    start = time.monotonic()

    def on_step(step, report):
        if progress is not None:
            progress.write(json.dumps({"step": step, **report.to_dict()}) + "\n")
        if step % args.log_every == 0:
            log.info("step %d  w=%.4f gp=%.4f cls=%.4f policy=%.4f critic=%.4f  (%.1fs)", step,
                     report.wasserstein_estimate, report.gradient_penalty, report.cls_loss,
                     report.policy_loss, report.critic_loss, time.monotonic() - start)
        if args.checkpoint is not None and args.checkpoint_every and step % args.checkpoint_every == 0:
            save_checkpoint(state, config, args.checkpoint)

    try:
        if state is None:
            state = init_state(config, source)
        policy, history = run_search(config, source, target, state=state, on_step=on_step)
    finally:
        if progress is not None:
            progress.close()
    if args.checkpoint is not None:
        save_checkpoint(state, config, args.checkpoint)
    policy_io.save(policy, args.out)
    log.info("wrote %s after %d steps", args.out, len(history))
    if truth is not None and truth.op is not None:
        log.info("ground truth %s mu=%.4f; sub-policy 0 stage 0: %s; recovered: %s", truth.op, truth.mu,
                 stage_summary(policy), recovered(policy, truth.op, truth.mu))
    return EXIT_OK


def cmd_apply(args) -> int:
    _emit_config("apply", {"policy": str(args.policy), "data": str(args.data), "out": str(args.out),
                           "chunk_size": args.chunk_size, "seed": args.seed})
    if args.chunk_size < 1:
        raise UsageError(f"--chunk-size must be >= 1, got {args.chunk_size}")
    policy = policy_io.load(args.policy)
    bundle = load_binary(args.data)
    images = augment(policy, bundle.images, args.chunk_size, args.seed)
    save_binary(DatasetBundle(images, bundle.labels, bundle.class_count, bundle.name), args.out)
    log.info("augmented %d images -> %s", len(bundle), args.out)
    return EXIT_OK


def _to_rgb8(img: np.ndarray) -> np.ndarray:
    """[C, H, W] in [0, 1] -> [H, W, 3] uint8."""
    if img.shape[0] == 3:
        rgb = img
    elif img.shape[0] == 1:
        rgb = np.repeat(img, 3, axis=0)
    else:
        rgb = np.repeat(img.mean(axis=0, keepdims=True), 3, axis=0)
    return np.round(np.clip(rgb, 0, 1) * 255).astype(np.uint8).transpose(1, 2, 0)


def write_ppm(path, rgb: np.ndarray) -> None:
    h, w, _ = rgb.shape
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(rgb).tobytes())


def cmd_render(args) -> int:
    _emit_config("render", {"data": str(args.data), "policy": args.policy and str(args.policy),
                            "out_dir": str(args.out_dir), "count": args.count, "seed": args.seed,
                            "chunk_size": args.chunk_size, "scale": args.scale})
    if args.count < 0 or args.scale < 1 or args.chunk_size < 1:
        raise UsageError("--count must be >= 0, --scale and --chunk-size >= 1")
    bundle = load_binary(args.data)
    n = min(args.count, len(bundle))
    originals = bundle.images[:n]
    traces: list = []
    augmented = None
    if args.policy is not None and n:
        augmented = augment(policy_io.load(args.policy), originals, args.chunk_size, args.seed, traces)
    args.out_dir.mkdir(parents=True, exist_ok=True)
    lines = []
    for i in range(n):
        panels = [_to_rgb8(originals[i])]
        if augmented is not None:
            panels.append(_to_rgb8(augmented[i]))
        rgb = np.concatenate(panels, axis=1)
        rgb = rgb.repeat(args.scale, axis=0).repeat(args.scale, axis=1)
        name = f"image_{i:04d}.ppm"
        write_ppm(args.out_dir / name, rgb)
        if augmented is None:
            lines.append(f"{name}\tlabel={bundle.labels[i]}\toriginal only")
        else:
            sub, steps = traces[i]
            ops = ", ".join(f"{kind}({'applied' if on else 'skipped'})" for kind, on in steps)
            lines.append(f"{name}\tlabel={bundle.labels[i]}\tsub_policy={sub}\t{ops}")
    (args.out_dir / "trace.txt").write_text("".join(line + "\n" for line in lines), encoding="utf-8")
    log.info("rendered %d images into %s", n, args.out_dir)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    _emit_config("gradcheck", {"op": args.op, "seed": args.seed})
    results = gradcheck.run_suite(args.op, args.seed)
    print(gradcheck.format_table(results), flush=True)
    failed = [r.name for r in results if not r.passed]
    if failed:
        log.error("gradient checks failed: %s", ", ".join(failed))
        return EXIT_FAILURE
    return EXIT_OK


def cmd_synth(args) -> int:
    try:
        spec = SyntheticSpec.parse(args.spec)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    _emit_config("synth", {"spec": spec.__dict__, "source": str(args.source), "target": str(args.target)})
    source, target, truth = make_synthetic(spec)
    save_binary(source, args.source)
    save_binary(target, args.target)
    log.info("ground truth: op=%s mu=%s", truth.op, truth.mu)
    return EXIT_OK


def cmd_ablate(args) -> int:
    config = _config_from(args)
    try:
        values = [int(v) for v in args.values.split(",") if v.strip()]
    except ValueError as exc:
        raise UsageError(f"--values must be comma-separated integers: {exc}") from exc
    if not values:
        raise UsageError("--values is empty")
    _emit_config("ablate", {"config": config.to_dict(), "axis": args.axis, "values": values,
                            "synthetic": args.synthetic, "data": args.data and str(args.data),
                            "target": args.target and str(args.target), "subset": args.subset,
                            "report": args.report and str(args.report)})
    source, target, truth = _load_task(args)
    rows = ablation_grid(config, args.axis, values, source, target,
                         None if truth is None or truth.op is None else (truth.op, truth.mu))
    text = "".join(json.dumps(r.to_dict()) + "\n" for r in rows)
    if args.report is not None:
        Path(args.report).write_text(text, encoding="utf-8")
    print(text, end="", flush=True)
    return EXIT_OK


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="augsearch", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("search", help="search an augmentation policy")
    _add_data_flags(p)
    _add_search_flags(p)
    p.add_argument("--out", type=Path, required=True, help="policy JSON to write")
    p.add_argument("--log", type=Path, help="line-delimited JSON progress log")
    p.add_argument("--log-every", type=int, default=50, help="progress message interval in steps")
    p.add_argument("--checkpoint", type=Path, help="checkpoint written at the end (and periodically)")
    p.add_argument("--checkpoint-every", type=int, default=0)
    p.add_argument("--resume", type=Path, help="continue from a checkpoint")
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("apply", help="augment an AUG1 dataset with a policy")
    p.add_argument("--policy", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--chunk-size", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_apply)

    p = sub.add_parser("render", help="write originals (and augmented copies) as PPM images")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--policy", type=Path)
    p.add_argument("--out-dir", type=Path, required=True)
    p.add_argument("--count", type=int, default=8)
    p.add_argument("--scale", type=int, default=1, help="integer upscaling factor")
    p.add_argument("--chunk-size", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--op", choices=gradcheck.CHECK_NAMES, metavar="NAME",
                   help=f"run one check only; one of: {', '.join(gradcheck.CHECK_NAMES)}")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("synth", help="write a synthetic source/target pair as AUG1 files")
    p.add_argument("--spec", default="rotated_pair:angle=20,n=256")
    p.add_argument("--source", type=Path, required=True)
    p.add_argument("--target", type=Path, required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("ablate", help="sweep L or K and report the final critic estimate")
    _add_data_flags(p)
    _add_search_flags(p)
    p.add_argument("--axis", choices=("L", "K"), required=True)
    p.add_argument("--values", required=True, help="comma-separated values, e.g. 1,2,4,8")
    p.add_argument("--report", type=Path, help="also write the report here")
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, stream=sys.stderr,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        parser.error(str(exc))
    except (FormatError, policy_io.PolicyFormatError, CheckpointError, SearchAborted, OSError, ValueError) as exc:
        print(f"augsearch: error: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
