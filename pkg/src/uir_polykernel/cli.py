"""Command-line surface: train, infer, eval, summary, gradcheck.

Exit codes: 0 success, 1 usage error (bad flags, unknown config keys,
missing required paths), 2 runtime failure (I/O, training, checkpoint
problems), always with a one-line ``error: ...`` reason on stderr.

Diagnostics (the effective config echo, progress lines) go to stderr;
stdout carries only command payloads: the summary numbers, the gradcheck
table, and the eval CSV when no --output is given.
"""

from __future__ import annotations

import argparse
import os
import sys

from .arch import PolyKernelNet
from .arch import count_params_macs as _count_params_macs
from .config import (
    ConfigError,
    effective_lines,
    network_config,
    network_keys_differ,
    resolve_config,
    train_config,
)
from .images import ImageError, crop_to, list_images, load_image, load_pairs, pad_to_multiple, save_image
from .metrics import MetricReport, psnr, ssim, uciqe
from .tensor import Tensor
from .training import AdamW, checkpoint_save, load_network, train_loop


class UsageError(Exception):
    """Command-line misuse; exits 1 instead of argparse's default 2."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _build_parser() -> _Parser:
    parser = _Parser(prog="uir", description="underwater image restoration")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, blurb in (
        ("train", "fit the network on an input/target directory pair"),
        ("infer", "restore every image in a directory"),
        ("eval", "write a metric CSV for a directory (pair)"),
        ("summary", "report parameter and MAC counts"),
        ("gradcheck", "run the finite-difference gradient suite"),
    ):
        p = sub.add_parser(name, help=blurb)
        p.add_argument("--config", metavar="PATH", help="key=value config file")
        p.add_argument(
            "--set",
            metavar="KEY=VALUE",
            action="append",
            default=[],
            help="override one config key (repeatable)",
        )
        p.add_argument("--input", metavar="DIR", help="input image directory")
        p.add_argument("--target", metavar="DIR", help="target image directory")
        p.add_argument("--output", metavar="DIR", help="output directory")
        p.add_argument("--checkpoint", metavar="PATH", help="checkpoint file")
        p.add_argument("--seed", type=int, metavar="N", help="override the seed key")
    return parser


def _require(args, *names: str) -> None:
    for name in names:
        if getattr(args, name) is None:
            raise UsageError(f"{args.command} requires --{name}")


def _echo_config(values: dict, fh) -> None:
    for line in effective_lines(values):
        print(line, file=fh)


def cmd_summary(args, values: dict, explicit: set) -> int:
    _echo_config(values, sys.stderr)
    params, macs = _count_params_macs(network_config(values), values["input_size"])
    print(f"input_size={values['input_size']}")
    print(f"params={params}")
    print(f"macs={macs}")
    print(f"gmacs={macs / 1e9:.3f}")
    return 0


def cmd_gradcheck(args, values: dict, explicit: set) -> int:
    from .gradcheck import run_suite, suite_passed

    _echo_config(values, sys.stderr)
    results = run_suite()
    for r in results:
        print(r.line())
    return 0 if suite_passed(results) else 2


def cmd_train(args, values: dict, explicit: set) -> int:
    _require(args, "input", "target", "output")
    pairs = [(a, b) for a, b, _ in load_pairs(args.input, args.target)]
    net = PolyKernelNet(network_config(values), seed=values["seed"])
    cfg = train_config(values)
    opt = AdamW(net.params, weight_decay=cfg.weight_decay)

    os.makedirs(args.output, exist_ok=True)
    log_path = os.path.join(args.output, "train.log")
    with open(log_path, "w", encoding="utf-8") as log:
        for line in effective_lines(values):
            log.write(line + "\n")
            print(line, file=sys.stderr)

        def log_fn(line: str) -> None:
            log.write(line + "\n")
            log.flush()
            print(line, file=sys.stderr)

        train_loop(net, pairs, cfg, log_fn=log_fn, optimizer=opt)

    ckpt_path = args.checkpoint or os.path.join(args.output, "model.ckpt")
    checkpoint_save(ckpt_path, net, opt)
    print(f"checkpoint written to {ckpt_path}", file=sys.stderr)
    return 0


def cmd_infer(args, values: dict, explicit: set) -> int:
    _require(args, "input", "output", "checkpoint")
    net = load_network(args.checkpoint)
    mismatched = network_keys_differ(values, explicit, net.config)
    if mismatched:
        raise ConfigError(
            "checkpoint network disagrees with explicit config on: " + ", ".join(mismatched)
        )
    _echo_config(values, sys.stderr)

    names = list_images(args.input)
    if not names:
        raise ImageError(f"no images found in {args.input}")
    os.makedirs(args.output, exist_ok=True)
    for name in names:
        arr = load_image(os.path.join(args.input, name))
        padded, (h, w) = pad_to_multiple(arr, 4)
        out = net.forward(Tensor(padded[None]), inference=True)
        save_image(os.path.join(args.output, name), crop_to(out.data[0], h, w))
        print(f"restored {name}", file=sys.stderr)
    return 0


def cmd_eval(args, values: dict, explicit: set) -> int:
    _require(args, "input")
    _echo_config(values, sys.stderr)
    report = MetricReport()
    if args.target is not None:
        rows = load_pairs(args.input, args.target)
        if not rows:
            raise ImageError(f"no images found in {args.input}")
        for a, b, name in rows:
            report.add(name, psnr(a, b), ssim(a, b), uciqe(a))
    else:
        names = list_images(args.input)
        if not names:
            raise ImageError(f"no images found in {args.input}")
        for name in names:
            arr = load_image(os.path.join(args.input, name))
            report.add(name, None, None, uciqe(arr))
    text = report.to_csv()
    if args.output is not None:
        os.makedirs(args.output, exist_ok=True)
        out_path = os.path.join(args.output, "metrics.csv")
        with open(out_path, "w", encoding="utf-8") as fh:
            fh.write(text)
        print(f"metrics written to {out_path}", file=sys.stderr)
    else:
        sys.stdout.write(text)
    return 0


_COMMANDS = {
    "train": cmd_train,
    "infer": cmd_infer,
    "eval": cmd_eval,
    "summary": cmd_summary,
    "gradcheck": cmd_gradcheck,
}


def main(argv=None) -> int:
    try:
        args = _build_parser().parse_args(argv)
        values, explicit = resolve_config(args.config, args.set, args.seed)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    try:
        return _COMMANDS[args.command](args, values, explicit)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
