"""Command-line entry point: ``maskdistill <command> [flags]``.

Commands write everything they produce into ``--run-dir`` next to
``config.cfg`` (the fully resolved configuration) and ``command.txt``.
Exit status is 0 on success, 2 for usage errors and 1 for runtime failures,
which print one line ``error: <category>: <message>`` on stderr.
"""
from __future__ import annotations

import argparse
import csv
import logging
import os
import shlex
import sys
from pathlib import Path
from typing import Any, Sequence

from . import __version__
from .core import (
    ALL_KEYS, ConfigError, MaskDistillError, Paradigm, build_configs, default_config_values,
    derive_seed, dump_config, make_rng, parse_value, read_config_values,
)

ENV_SEED = "MASKDISTILL_SEED"
ENV_WORKERS = "MASKDISTILL_WORKERS"

log = logging.getLogger("maskdistill")


class UsageError(Exception):
    """Bad invocation; reported with exit status 2."""


def _flag(key: str) -> str:
    return "--" + key.replace("_", "-")


def _show(value: Any) -> str:
    if value is None:
        return "none"
    if isinstance(value, Paradigm):
        return value.value
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return str(value)


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group(
        "configuration", "Override single keys of --config; defaults are the reference values.")
    group.add_argument("--config", type=Path, help="key = value config file")
    defaults = default_config_values()
    for key in ALL_KEYS:
        group.add_argument(_flag(key), dest=f"cfg_{key}", metavar="VALUE", default=None,
                           help=f"(default: {_show(defaults[key])})")


def _add_run_dir(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--run-dir", type=Path, required=True,
                        help="output directory (created if missing)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="maskdistill", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    p = sub.add_parser("train-teacher", help="train the unmasked teacher network")
    p.add_argument("--data", type=Path, required=True, help="identity dataset root")
    _add_run_dir(p)
    _add_config_flags(p)

    p = sub.add_parser("train-student", help="train a student with masks and distillation")
    p.add_argument("--data", type=Path, required=True, help="identity dataset root")
    p.add_argument("--teacher", type=Path, help="exported teacher (needed unless NO_KD)")
    p.add_argument("--no-resume", action="store_true", help="ignore existing checkpoints")
    _add_run_dir(p)
    _add_config_flags(p)

    p = sub.add_parser("mask", help="write masked copies of a dataset plus a manifest")
    p.add_argument("--data", type=Path, required=True, help="identity dataset root")
    p.add_argument("--color", default="random", help="'random' or R,G,B in 0-255")
    p.add_argument("--jitter", type=float, default=0.0,
                   help="vertex jitter in pixels (default: 0, the evaluation mask)")
    p.add_argument("--seed", type=int, default=None, help="base seed (default: 0)")
    _add_run_dir(p)

    p = sub.add_parser("protocol", help="turn a pair file into a scenario protocol")
    p.add_argument("--pairs", type=Path, required=True, help="LFW-style or generic pair file")
    p.add_argument("--scenario", required=True,
                   choices=["none", "masked-vs-nonmasked", "both-masked"])
    p.add_argument("--folds", type=int, default=None, help="number of equal folds")
    p.add_argument("--image-root", type=Path, default=None,
                   help="root for image names (default: the pair file's directory)")
    p.add_argument("--ext", default=".png", help="image extension for LFW names")
    _add_run_dir(p)

    p = sub.add_parser("evaluate", help="score a protocol with a model and report metrics")
    p.add_argument("--protocol", type=Path, required=True,
                   help="protocol file from 'protocol', or a raw pair file with --scenario")
    p.add_argument("--scenario", choices=["none", "masked-vs-nonmasked", "both-masked"],
                   help="needed when --protocol is a raw pair file")
    p.add_argument("--folds", type=int, default=None, help="folds for a raw pair file")
    p.add_argument("--model", type=Path, required=True, help="teacher.pt, student.pt or ckpt")
    p.add_argument("--seed", type=int, default=None, help="mask color seed (default: 0)")
    p.add_argument("--far-strict", action="store_true", help="FAR2000 uses FAR < ceiling")
    p.add_argument("--fmr-inclusive", action="store_true", help="FMR points use FMR <= ceiling")
    _add_run_dir(p)

    p = sub.add_parser("report", help="metrics from a score dump")
    p.add_argument("--scores", type=Path, required=True, help="CSV pair_index,genuine,score")
    p.add_argument("--protocol", type=Path, default=None, help="protocol file (k-fold accuracy)")
    p.add_argument("--name", default="", help="row label")
    p.add_argument("--far-strict", action="store_true", help="FAR2000 uses FAR < ceiling")
    p.add_argument("--fmr-inclusive", action="store_true", help="FMR points use FMR <= ceiling")
    _add_run_dir(p)
    return parser


# ---------------------------------------------------------------------------
# configuration resolution


def _env_overrides() -> dict[str, Any]:
    out: dict[str, Any] = {}
    for env, key in ((ENV_SEED, "seed"), (ENV_WORKERS, "num_threads")):
        text = os.environ.get(env)
        if text is not None and text.strip():
            try:
                out[key] = int(text)
            except ValueError:
                raise ConfigError(f"{env} must be an integer, got {text!r}") from None
    return out


def resolve_config(args, base: dict[str, Any] | None = None, teacher: bool = False):
    """Defaults < ``base`` < config file < environment < explicit flags.

    With ``teacher`` a switch iteration inherited from a shared config file is
    dropped, since the teacher run never distills.
    """
    flags = {k: getattr(args, f"cfg_{k}") for k in ALL_KEYS
             if getattr(args, f"cfg_{k}", None) is not None}
    if args.config is None and not flags:
        raise UsageError(f"{args.command} needs --config or explicit config flags")
    values = dict(base or {})
    if args.config is not None:
        try:
            text = args.config.read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from None
        values.update(read_config_values(text, str(args.config)))
    values.update(_env_overrides())
    for key, raw in flags.items():
        try:
            values[key] = parse_value(key, raw)
        except ValueError as exc:
            raise ConfigError(f"{_flag(key)}: {exc}") from None
    if teacher and "lambda_switch_iteration" not in flags:
        values.pop("lambda_switch_iteration", None)
    return build_configs(values)


def _prepare_run_dir(args, config_text: str) -> Path:
    run = args.run_dir
    run.mkdir(parents=True, exist_ok=True)
    (run / "config.cfg").write_text(config_text)
    argv = getattr(args, "argv", None)
    if argv is not None:
        (run / "command.txt").write_text("maskdistill " + shlex.join(argv) + "\n")
    return run


def _settings_text(**values) -> str:
    """Resolved settings of commands without a training config."""
    return "".join(f"# {k} = {v}\n" for k, v in values.items())


# ---------------------------------------------------------------------------
# commands


def cmd_train_teacher(args) -> None:
    from .dataio import load_dataset
    from .trainer import train_teacher

    train_cfg, head_cfg = resolve_config(
        args, base={"paradigm": Paradigm.NO_KD, "p_mask": 0.0}, teacher=True)
    run = _prepare_run_dir(args, dump_config(train_cfg, head_cfg))
    dataset = load_dataset(args.data)
    log.info("teacher: %d identities, %d images", dataset.num_identities, len(dataset))
    train_teacher(train_cfg, head_cfg, dataset, run)
    print(run / "teacher.pt")


def cmd_train_student(args) -> None:
    import copy

    from .backbone import TeacherHandle, load_teacher
    from .dataio import load_dataset
    from .trainer import train

    train_cfg, head_cfg = resolve_config(args)
    teacher = None
    if train_cfg.paradigm is not Paradigm.NO_KD:
        if args.teacher is None:
            raise UsageError(f"paradigm {train_cfg.paradigm.value} needs --teacher")
        teacher = load_teacher(args.teacher)
    run = _prepare_run_dir(args, dump_config(train_cfg, head_cfg))
    dataset = load_dataset(args.data)
    state = train(train_cfg, head_cfg, dataset, teacher, run, resume=not args.no_resume)
    TeacherHandle(copy.deepcopy(state.student)).export(run / "student.pt")
    print(run / "student.pt")


def _parse_color(text: str):
    if text == "random":
        return "random"
    try:
        rgb = tuple(int(v) for v in text.split(","))
    except ValueError:
        raise UsageError(f"--color must be 'random' or R,G,B, got {text!r}") from None
    if len(rgb) != 3:
        raise UsageError(f"--color needs three values, got {text!r}")
    return rgb


def cmd_mask(args) -> None:
    from .dataio import load_dataset, load_face_image, save_face_image
    from .maskgen import MaskTemplate, render_mask_details

    seed = args.seed if args.seed is not None else _env_overrides().get("seed", 0)
    try:
        template = MaskTemplate(_parse_color(args.color), jitter_px=args.jitter)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    run = _prepare_run_dir(args, _settings_text(data=args.data, color=args.color,
                                                jitter=args.jitter, seed=seed))
    dataset = load_dataset(args.data)
    root = Path(args.data)
    out_root = run / "images"
    with open(run / "manifest.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("source", "output", "color", "seed"))
        for rec in dataset.records:
            rel = Path(rec.path).relative_to(root)
            image_seed = derive_seed(seed, "mask-cli:" + rel.as_posix())
            img = load_face_image(rec.path, rec.label)
            r = render_mask_details(img, template, make_rng(image_seed, "mask"))
            out = out_root / rel.with_suffix(".png")
            save_face_image(out, r.image)
            rgb = [int(round((c + 1) * 127.5)) for c in r.color]
            w.writerow((rel.as_posix(), out.relative_to(run).as_posix(),
                        " ".join(str(c) for c in rgb), image_seed))
    print(run / "manifest.csv")


def cmd_protocol(args) -> None:
    from .dataio import build_protocol, write_protocol

    _prepare_run_dir(args, _settings_text(pairs=args.pairs, scenario=args.scenario,
                                          folds=args.folds, image_root=args.image_root,
                                          ext=args.ext))
    if not args.pairs.is_file():
        raise UsageError(f"no such pair file: {args.pairs}")
    proto = build_protocol(args.pairs, args.scenario, args.folds, args.image_root, args.ext)
    out = args.run_dir / "protocol.tsv"
    write_protocol(out, proto)
    print(out)


def _load_protocol(path: Path, scenario, folds):
    from .dataio import build_protocol, read_protocol

    if not path.is_file():
        raise UsageError(f"no such protocol file: {path}")
    with open(path) as fh:
        first = fh.readline()
    if first.startswith("# scenario"):
        return read_protocol(path)
    if scenario is None:
        raise UsageError("--scenario is required for a raw pair file")
    return build_protocol(path, scenario, folds)


def _write_report(run: Path, r) -> None:
    r.to_csv(run / "report.csv")
    text = r.to_text()
    (run / "report.txt").write_text(text)
    with open(run / "thresholds.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("metric", "threshold"))
        w.writerows((k, repr(float(v))) for k, v in r.thresholds.items())
    sys.stdout.write(text)


def cmd_evaluate(args) -> None:
    from .backbone import load_model
    from .metrics import report, score_protocol, write_scores

    seed = args.seed if args.seed is not None else _env_overrides().get("seed", 0)
    run = _prepare_run_dir(args, _settings_text(protocol=args.protocol, scenario=args.scenario,
                                                folds=args.folds, model=args.model, seed=seed))
    proto = _load_protocol(args.protocol, args.scenario, args.folds)
    if not args.model.is_file():
        raise UsageError(f"no such model file: {args.model}")
    model = load_model(args.model)
    scores = score_protocol(proto, model, rng=make_rng(seed, "evaluate"))
    write_scores(run / "scores.csv", scores)
    r = report(scores, proto, name=args.model.stem, strict_fmr=not args.fmr_inclusive,
               strict_far=args.far_strict)
    _write_report(run, r)


def cmd_report(args) -> None:
    from .dataio import read_protocol
    from .metrics import read_scores, report

    run = _prepare_run_dir(args, _settings_text(scores=args.scores, protocol=args.protocol))
    scores = read_scores(args.scores)
    proto = read_protocol(args.protocol) if args.protocol is not None else None
    r = report(scores, proto, name=args.name, strict_fmr=not args.fmr_inclusive,
               strict_far=args.far_strict)
    _write_report(run, r)


COMMANDS = {
    "train-teacher": cmd_train_teacher,
    "train-student": cmd_train_student,
    "mask": cmd_mask,
    "protocol": cmd_protocol,
    "evaluate": cmd_evaluate,
    "report": cmd_report,
}


def run(argv: Sequence[str] | None = None) -> int:
    """Execute one command; returns the process exit status."""
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse already printed usage or help
        return int(exc.code or 0)
    args.argv = argv
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        COMMANDS[args.command](args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"maskdistill: error: {exc}", file=sys.stderr)
        return 2
    except MaskDistillError as exc:
        print(f"error: {exc.category}: {_one_line(exc)}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: io: {_one_line(exc)}", file=sys.stderr)
        return 1
    return 0


def _one_line(exc: BaseException) -> str:
    return " ".join(str(exc).split())


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
