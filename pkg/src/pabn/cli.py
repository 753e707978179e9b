"""Command-line entry point: ``pabn synth|train|eval|gradcheck``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
from pathlib import Path

from .audit import audit_model, audit_primitives, format_table
from .autodiff import PRIMITIVES, inject_backward_fault
from .data import (
    DatasetError,
    EpisodeSpec,
    ImageFormatError,
    SplitConfig,
    SyntheticSpec,
    generate_synthetic,
    load_dataset,
    manifest_digest,
    split_classes,
)
from .model import ALIGN_MODES, AlignMode, ArchConfig
from .train import CheckpointError, TrainConfig, evaluate, load_checkpoint, save_checkpoint, train, write_log

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("pabn")

# config-file keys that differ from argparse destinations
KEY_ALIASES = {"lambda": "lam"}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _int_list(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(v) for v in str(text).split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _add_common(p: argparse.ArgumentParser, out_required: bool = False) -> None:
    p.add_argument("--config", help="flat JSON file whose keys match flag names; flags win")
    p.add_argument("--out", help="run directory (default: $PABN_OUT)" + ("; required" if out_required else ""))
    p.add_argument("-v", "--verbose", action="store_true")


def _add_episode(p: argparse.ArgumentParser, queries: int = 15) -> None:
    p.add_argument("--ways", type=int, default=5)
    p.add_argument("--shots", type=int, default=1)
    p.add_argument("--queries", type=int, default=queries)


def _add_split(p: argparse.ArgumentParser) -> None:
    p.add_argument("--aux-classes", type=int, help="split the dataset: number of auxiliary classes")
    p.add_argument("--target-classes", type=int, help="split the dataset: number of target classes")
    p.add_argument("--split-seed", type=int, default=0)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="pabn", description="Pairwise alignment bilinear network for few-shot recognition.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate the synthetic fine-grained dataset")
    _add_common(p, out_required=True)
    p.add_argument("--classes", type=int, default=30)
    p.add_argument("--per-class", type=int, default=40)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--image-size", type=int, default=84)

    p = sub.add_parser("train", help="episodic meta-training on the auxiliary classes")
    _add_common(p)
    p.add_argument("--data", required=False, help="dataset root (<class>/<image>.ppm)")
    _add_episode(p)
    _add_split(p)
    p.add_argument("--align", choices=ALIGN_MODES, default="none")
    p.add_argument("--lambda", dest="lam", type=float, default=1.0, help="alignment weight")
    p.add_argument("--episodes", type=int, default=1000)
    p.add_argument("--lr", type=float, default=0.001)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--log-interval", type=int, default=10)
    p.add_argument("--image-size", type=int, default=84)
    p.add_argument("--channels", type=int, default=64)
    p.add_argument("--hidden", type=_int_list, default=(512, 64), help="comparator hidden widths, e.g. 512,64")

    p = sub.add_parser("eval", help="mean accuracy with a 95%% interval on target episodes")
    _add_common(p)
    p.add_argument("--ckpt", required=False, help="checkpoint file written by train")
    p.add_argument("--data", required=False)
    _add_episode(p)
    _add_split(p)
    p.add_argument("--episodes", type=int, default=600)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--label", help="row label in results.csv (default: checkpoint file name)")

    p = sub.add_parser("gradcheck", help="finite-difference audit of primitives or the whole model")
    _add_common(p)
    p.add_argument("--scope", choices=("primitives", "model"), default="primitives")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--inject-fault", choices=sorted(PRIMITIVES), help=argparse.SUPPRESS)
    return parser


def _subparser(parser: argparse.ArgumentParser, command: str) -> argparse.ArgumentParser:
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            return action.choices[command]
    raise KeyError(command)


def parse_args(argv: list[str] | None = None) -> argparse.Namespace:
    """Parse flags, layering a JSON config file beneath them."""
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        sub = _subparser(parser, args.command)
        try:
            values = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            sub.error(f"cannot read config {args.config}: {exc}")
        if not isinstance(values, dict):
            sub.error(f"config {args.config} must hold a flat JSON object")
        dests = {a.dest for a in sub._actions} - {"help", "config"}
        defaults = {}
        for key, value in values.items():
            dest = KEY_ALIASES.get(key, key.replace("-", "_"))
            if dest not in dests:
                sub.error(f"unknown config key {key!r}")
            if isinstance(value, (dict, list)) and dest != "hidden":
                sub.error(f"config key {key!r} must be a scalar")
            defaults[dest] = value
        sub.set_defaults(**defaults)
        args = parser.parse_args(argv)
        if "hidden" in defaults and isinstance(args.hidden, (list, str)):
            args.hidden = _int_list(",".join(map(str, args.hidden)) if isinstance(args.hidden, list) else args.hidden)
        if getattr(args, "align", "none") not in ALIGN_MODES:
            sub.error(f"argument --align: invalid choice {args.align!r} (choose from {', '.join(ALIGN_MODES)})")
    if args.out is None:
        args.out = os.environ.get("PABN_OUT") or None
    return args


def resolved_config(args: argparse.Namespace) -> dict:
    cfg = {k: v for k, v in vars(args).items() if k not in ("verbose", "inject_fault")}
    if "lam" in cfg:
        cfg["lambda"] = cfg.pop("lam")
    if "hidden" in cfg:
        cfg["hidden"] = list(cfg["hidden"])
    return dict(sorted(cfg.items()))


def _prepare_out(args: argparse.Namespace, required: bool) -> Path | None:
    if args.out is None:
        if required:
            raise UsageError(f"{args.command}: --out is required (or set PABN_OUT)")
        return None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "resolved_config.json").write_text(json.dumps(resolved_config(args), indent=2) + "\n")
    return out


def _require(args: argparse.Namespace, *names: str) -> None:
    for name in names:
        if getattr(args, name) is None:
            raise UsageError(f"{args.command}: --{name} is required")


def _episode_spec(args) -> EpisodeSpec:
    try:
        return EpisodeSpec(args.ways, args.shots, args.queries)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def _dataset(args, part: str):
    index = load_dataset(args.data)
    if args.aux_classes is None and args.target_classes is None:
        return index
    if args.aux_classes is None or args.target_classes is None:
        raise UsageError("--aux-classes and --target-classes must be given together")
    aux, target = split_classes(index, SplitConfig(args.aux_classes, args.target_classes, args.split_seed))
    return aux if part == "auxiliary" else target


def cmd_synth(args) -> int:
    try:
        spec = SyntheticSpec(args.classes, args.per_class, args.seed, args.image_size)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    out = _prepare_out(args, required=True)
    generate_synthetic(spec, out)
    print(f"wrote {spec.n_classes * spec.n_images_per_class} images to {out}")
    print(f"manifest sha256 {manifest_digest(out / 'manifest.json')}")
    return EXIT_OK


def cmd_train(args) -> int:
    _require(args, "data")
    spec = _episode_spec(args)
    try:
        arch = ArchConfig(channels=args.channels, image_size=args.image_size, hidden=tuple(args.hidden))
        cfg = TrainConfig(
            spec=spec,
            align=AlignMode(args.align, args.lam),
            n_episodes=args.episodes,
            lr=args.lr,
            seed=args.seed,
            log_interval=args.log_interval,
            arch=arch,
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    out = _prepare_out(args, required=True)
    auxiliary = _dataset(args, "auxiliary")
    start = time.perf_counter()
    result = train(cfg, auxiliary)
    save_checkpoint(result.checkpoint, out / "checkpoint.pabn")
    write_log(result.log, out / "train_log.csv")
    last = result.log[-1]
    print(f"trained {cfg.n_episodes} episodes in {time.perf_counter() - start:.1f}s; final loss {last[1]:.5f}")
    print(f"checkpoint {out / 'checkpoint.pabn'}")
    return EXIT_OK


def cmd_eval(args) -> int:
    _require(args, "ckpt", "data")
    spec = _episode_spec(args)
    if args.episodes < 2:
        raise UsageError("--episodes must be >= 2: a confidence interval needs at least two episodes")
    out = _prepare_out(args, required=True)
    ckpt = load_checkpoint(args.ckpt)
    target = _dataset(args, "target")
    report = evaluate(ckpt, target, spec, args.episodes, args.seed)
    summary = {k: v for k, v in report.to_dict().items() if k != "accuracies"}
    (out / "eval.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    results = out / "results.csv"
    new = not results.exists()
    with open(results, "a", newline="") as fh:
        w = csv.writer(fh)
        if new:
            w.writerow(["label", "ways", "shots", "queries", "n_episodes", "seed", "accuracy"])
        label = args.label or Path(args.ckpt).name
        w.writerow([label, spec.ways, spec.shots, spec.queries, report.n_episodes, args.seed, summary["formatted"]])
    print(f"{spec.ways}-way {spec.shots}-shot accuracy {summary['formatted']} over {report.n_episodes} episodes")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    _prepare_out(args, required=False)
    start = time.perf_counter()

    def run():
        if args.scope == "primitives":
            return audit_primitives(seeds=range(args.seed, args.seed + 5))
        return audit_model(args.seed)

    if args.inject_fault:
        with inject_backward_fault(args.inject_fault, 2.0):
            rows = run()
    else:
        rows = run()
    print(format_table(rows))
    ok = all(r.passed for r in rows)
    print(f"{'PASS' if ok else 'FAIL'} ({len(rows)} checks, {time.perf_counter() - start:.1f}s)")
    return EXIT_OK if ok else EXIT_NUMERIC


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "eval": cmd_eval, "gradcheck": cmd_gradcheck}


def main(argv: list[str] | None = None) -> int:
    try:
        args = parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"pabn {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DatasetError, CheckpointError, ImageFormatError, OSError) as exc:
        print(f"pabn {args.command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except FloatingPointError as exc:
        print(f"pabn {args.command}: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


def run() -> None:
    sys.exit(main())


if __name__ == "__main__":
    run()
