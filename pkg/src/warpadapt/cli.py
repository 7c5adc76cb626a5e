"""Command-line surface: dataset generation, training, evaluation, translation
inspection, and the gradient self-check.

Exit codes: 0 success, 1 verification failure, 2 usage/config error,
3 data/I-O error.
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import fields

import numpy as np

from . import losses as L
from . import metrics as M
from .autograd import Tensor, no_grad
from .errors import ConfigError, FormatError, MetricError, UsageError
from .scenegen import (SceneSample, apply_domain_shift, generate_scene,
                       read_dataset, sample_from_bytes, sample_to_bytes,
                       shift_preset, split_domains, write_dataset)
from .trainer import TrainConfig, load_checkpoint, run_training

EXIT_OK = 0
EXIT_VERIFY = 1
EXIT_USAGE = 2
EXIT_DATA = 3

_INT_KEYS = {"k", "total_iters", "batch_size", "seed", "eval_every", "channels_base",
             "max_disp", "max_flow", "val_count"}
_FLOAT_KEYS = {"lr_translation", "lr_disp", "lr_flow", "adam_beta1", "adam_beta2",
               "flow_weight_decay", "gamma_stages"}
_STR_KEYS = {"objective", "d1_mode"}
_WEIGHT_KEYS = {f"weights.{f.name}" for f in fields(L.LossWeights)}
ALL_CONFIG_KEYS = _INT_KEYS | _FLOAT_KEYS | _STR_KEYS | _WEIGHT_KEYS


def worker_threads() -> int:
    """Worker-thread cap from WARPADAPT_THREADS (all work is currently
    single-threaded; the variable is validated and acts as an upper bound)."""
    raw = os.environ.get("WARPADAPT_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"WARPADAPT_THREADS must be an integer, got {raw!r}")
    if n < 1:
        raise ConfigError(f"WARPADAPT_THREADS must be >= 1, got {n}")
    return n


def parse_config_text(text: str, source: str) -> dict:
    """Flat key=value lines; '#' comments; later keys win."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {raw!r}")
        key, val = (part.strip() for part in line.split("=", 1))
        if key not in ALL_CONFIG_KEYS:
            raise ConfigError(f"{source}:{lineno}: unknown config key {key!r}")
        out[key] = val
    return out


def build_train_config(kv: dict) -> TrainConfig:
    args = {}
    weights = {}
    for key, val in kv.items():
        if key in _INT_KEYS:
            args[key] = int(val)
        elif key in _FLOAT_KEYS:
            args[key] = float(val)
        elif key in _STR_KEYS:
            args[key] = val
        elif key in _WEIGHT_KEYS:
            weights[key.split(".", 1)[1]] = float(val)
        else:
            raise ConfigError(f"unknown config key {key!r}")
    if weights:
        args["weights"] = L.LossWeights(**weights)
    return TrainConfig(**args)


def _apply_overrides(kv: dict, extra: list) -> dict:
    if len(extra) % 2:
        raise ConfigError(f"dangling override {extra[-1]!r} (expected --key value)")
    for flag, val in zip(extra[::2], extra[1::2]):
        if not flag.startswith("--"):
            raise ConfigError(f"expected --key, got {flag!r}")
        key = flag[2:]
        if key not in ALL_CONFIG_KEYS:
            raise ConfigError(f"unknown config key {key!r}")
        kv[key] = val
    return kv


def write_ppm(path: str, image: np.ndarray) -> None:
    """8-bit binary PPM of a (1, 3, h, w) unit-range image."""
    img = np.clip(np.asarray(image)[0], 0.0, 1.0)
    h, w = img.shape[1], img.shape[2]
    data = (img * 255.0 + 0.5).astype(np.uint8).transpose(1, 2, 0)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode())
        fh.write(data.tobytes())


def _write_image_pair(out_dir: str, name: str, image: np.ndarray, domain: str) -> None:
    sample = SceneSample(left=image, right=None, next_left=None, disparity=None,
                         flow=None, occlusion=None, domain=domain)
    with open(os.path.join(out_dir, name + ".wad"), "wb") as fh:
        fh.write(sample_to_bytes(sample))
    write_ppm(os.path.join(out_dir, name + ".ppm"), image)


# -- subcommands -------------------------------------------------------------------

def cmd_generate(args) -> int:
    shift = shift_preset(args.shift_preset)
    samples = []
    for i in range(args.count):
        samples.append(generate_scene(args.seed + i, width=args.width,
                                      height=args.height, max_disp=args.max_disp,
                                      max_flow=args.max_flow))
    for i in range(args.count):
        scene = generate_scene(args.seed + args.count + i, width=args.width,
                               height=args.height, max_disp=args.max_disp,
                               max_flow=args.max_flow)
        samples.append(apply_domain_shift(scene, shift, seed=args.seed + i))
    try:
        write_dataset(samples, args.out)
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    print(f"wrote {args.count} synthetic + {args.count} real samples "
          f"({args.width}x{args.height}, max_disp {args.max_disp}, "
          f"max_flow {args.max_flow}, preset {args.shift_preset}) to {args.out}")
    return EXIT_OK


def cmd_train(args, extra) -> int:
    kv = {}
    if args.config:
        try:
            with open(args.config) as fh:
                kv = parse_config_text(fh.read(), args.config)
        except OSError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_DATA
    kv = _apply_overrides(kv, extra)
    config = build_train_config(kv)
    try:
        state, log_lines, report = run_training(config, args.data, args.out,
                                                resume=args.resume)
    except (FormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    echo = " ".join(f"{k}={v}" for k, v in sorted(kv.items()))
    print(f"config: {echo}" if echo else "config: defaults")
    print(f"trained {state.iteration} iterations; final validation:")
    print(report.to_text())
    return EXIT_OK


def cmd_eval(args) -> int:
    try:
        state = load_checkpoint(args.checkpoint)
        samples = read_dataset(args.data)
    except (FormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    _, real = split_domains(samples)
    vc = state.config.val_count
    val = real[-vc:] if vc and len(real) > vc else real
    try:
        report = M.evaluate(state.nets, val, d1_mode=args.d1_mode,
                            oracle=args.oracle,
                            config={"checkpoint": os.path.basename(args.checkpoint),
                                    "iteration": state.iteration,
                                    "d1_mode": args.d1_mode})
    except MetricError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    print(report.to_text())
    print(report.csv_header())
    print(report.to_csv_row())
    return EXIT_OK


def cmd_translate(args) -> int:
    try:
        state = load_checkpoint(args.checkpoint)
        with open(args.sample, "rb") as fh:
            sample = sample_from_bytes(fh.read(), label=os.path.basename(args.sample))
    except (FormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    os.makedirs(args.out, exist_ok=True)

    expected = {"a2b": "synthetic", "b2a": "real", "cycle": "real"}[args.direction]
    if sample.domain != expected:
        print(f"warning: direction {args.direction} expects a {expected} sample, "
              f"got {sample.domain}; proceeding", file=sys.stderr)

    image = Tensor(sample.left)
    ga, gb = state.nets["gen_a2b"], state.nets["gen_b2a"]
    with no_grad():
        if args.direction == "a2b":
            out = ga.translate(image)
            _write_image_pair(args.out, "input", sample.left, sample.domain)
            _write_image_pair(args.out, "output", out.data, "real")
        elif args.direction == "b2a":
            out = gb.translate(image)
            _write_image_pair(args.out, "input", sample.left, sample.domain)
            _write_image_pair(args.out, "output", out.data, "synthetic")
        else:
            fake = gb.translate(image)
            rec = ga.translate(fake)
            _write_image_pair(args.out, "original", sample.left, sample.domain)
            _write_image_pair(args.out, "fake_synthetic", fake.data, "synthetic")
            _write_image_pair(args.out, "reconstructed", rec.data, "real")
            print(f"reconstruction psnr={M.psnr(rec.data, sample.left):.6g}")
    print(f"wrote {args.direction} translation of {args.sample} to {args.out}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .checks import run_suite
    results = run_suite(seed=args.seed)
    width = max(len(r.name) for r in results)
    failures = 0
    for r in results:
        mark = "ok " if r.passed else "FAIL"
        print(f"{mark} {r.name:<{width}} err={r.error:.3e} tol={r.threshold:g}")
        failures += not r.passed
    print(f"{len(results) - failures}/{len(results)} checks passed")
    if failures:
        print(f"error: {failures} gradient check(s) failed", file=sys.stderr)
        return EXIT_VERIFY
    return EXIT_OK


def make_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="warpadapt",
                                description="joint translation/stereo/flow co-training")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a paired-domain dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--count", type=int, default=200)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--width", type=int, default=128)
    g.add_argument("--height", type=int, default=64)
    g.add_argument("--max-disp", type=int, default=16)
    g.add_argument("--max-flow", type=int, default=8)
    g.add_argument("--shift-preset", default="default")

    t = sub.add_parser("train", help="run the alternating optimization")
    t.add_argument("--config", default=None)
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--resume", default=None)

    e = sub.add_parser("eval", help="score a checkpoint on the validation split")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--d1-mode", choices=("or", "and"), default="or")
    e.add_argument("--oracle", action="store_true")

    tr = sub.add_parser("translate", help="translate one sample and write images")
    tr.add_argument("--checkpoint", required=True)
    tr.add_argument("--in", dest="sample", required=True)
    tr.add_argument("--out", required=True)
    tr.add_argument("--direction", choices=("a2b", "b2a", "cycle"), default="cycle")

    gc = sub.add_parser("gradcheck", help="finite-difference verification sweep")
    gc.add_argument("--seed", type=int, default=0)
    return p


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = make_parser()
    extra: list = []
    try:
        worker_threads()
        if argv and argv[0] == "train":
            args, extra = parser.parse_known_args(argv)
        else:
            args = parser.parse_args(argv)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    try:
        if args.command == "generate":
            return cmd_generate(args)
        if args.command == "train":
            return cmd_train(args, extra)
        if args.command == "eval":
            return cmd_eval(args)
        if args.command == "translate":
            return cmd_translate(args)
        if args.command == "gradcheck":
            return cmd_gradcheck(args)
    except (ConfigError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FormatError, MetricError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    raise AssertionError("unreachable")


if __name__ == "__main__":
    sys.exit(main())
