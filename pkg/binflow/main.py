"""
Command-line entry point for the binflow experiments.

Configuration precedence: model defaults < --config FILE (key=value lines,
keys named like the long flags) < explicit flags.
"""

import argparse
import logging
import sys
import time
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence

from pydantic import ValidationError

from binflow import __version__
from binflow.core.analysis import analysis_report
from binflow.errors import (
    EXIT_INTERNAL, EXIT_MISSING_INPUT, EXIT_OK, EXIT_USAGE, BinflowError, ConfigError, MissingInputError,
)
from binflow.models import (
    AnalysisConstants, BmnistConfig, MimoConfig, ObjectiveConfig, RunManifest, TimeSampler, ToyRecipe,
    default_objectives,
)
from binflow.storage import write_json, write_manifest
from binflow.tasks.bmnist import DATASET_HINT, run_bmnist
from binflow.tasks.mimo import run_mimo
from binflow.tasks.toy import run_toy
from binflow.utils.helpers import calculate_duration
from binflow.utils.validation import (
    LOSSES, PREDICTIONS, parse_config_lines, validate_dataset_paths, validate_objective_flags,
    validate_sampler_flags, validate_snr_sweep,
)

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


class UsageError(ConfigError):
    """Flag combination rejected before any work starts"""


def _float_list(text: str) -> List[float]:
    return [float(part) for part in text.split(",") if part.strip()]


def _name_list(text: str) -> List[str]:
    return [part.strip() for part in text.split(",") if part.strip()]


def _bool(text: str) -> bool:
    lowered = str(text).strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got '{text}'")


def parse_objective(name: str) -> ObjectiveConfig:
    """'x_pred-v_mse' -> ObjectiveConfig"""
    prediction, sep, loss = name.partition("-")
    if not sep:
        raise UsageError(f"objective '{name}' must look like x_pred-x_mse")
    return ObjectiveConfig(prediction=prediction, loss=loss)


def _sampler(kind: str, m: float, s: float) -> TimeSampler:
    return TimeSampler(kind="logit_normal" if kind == "logitnormal" else kind, m=m, s=s)


def _common(parser: argparse.ArgumentParser, out_required: bool = True) -> None:
    parser.add_argument("--config", help="key=value file; flags override it")
    parser.add_argument("--out", required=out_required, help="output directory")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    parser.add_argument("--progress", action="store_true", help="show training progress bars")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="binflow", description="Aligned flow matching experiments")
    parser.add_argument("--version", action="version", version=f"binflow {__version__}")
    commands = parser.add_subparsers(dest="command", required=True)

    toy = commands.add_parser("toy", help="low-dimensional stability study")
    toy.add_argument("--data", choices=["gaussian", "bpsk"], default="bpsk")
    toy.add_argument("--pred", choices=sorted(PREDICTIONS), default="x")
    toy.add_argument("--loss", choices=sorted(LOSSES), default="xmse")
    toy.add_argument("--sampler", choices=["uniform", "logitnormal"], default="uniform")
    toy.add_argument("--m", type=float, default=-0.8)
    toy.add_argument("--s", type=float, default=0.8)
    toy.add_argument("--steps", type=int, default=5000)
    toy.add_argument("--batch", type=int, default=1000)
    toy.add_argument("--lr", type=float, default=1e-4)
    toy.add_argument("--dim", type=int, default=16)
    toy.add_argument("--hidden", type=int, default=256)
    toy.add_argument("--grad-clip", type=float, default=None)
    toy.add_argument("--euler-steps", type=int, default=3)
    toy.add_argument("--ber-bits", type=int, default=100_000)
    toy.add_argument("--bins", type=int, default=20)
    toy.add_argument("--grid", action="store_true", help="run every objective x sampler cell")
    _common(toy)
    toy.set_defaults(handler=cmd_toy)

    analyze = commands.add_parser("analyze", help="numerical checks of the variance singularity")
    analyze.add_argument("--case", choices=["continuous", "binary"], default="binary")
    analyze.add_argument("--s", type=float, default=0.8)
    analyze.add_argument("--m", type=float, default=0.0)
    analyze.add_argument("--dim", type=int, default=16)
    analyze.add_argument("--report", required=True, help="JSON report path")
    _common(analyze, out_required=False)
    analyze.set_defaults(handler=cmd_analyze)

    bmnist = commands.add_parser("bmnist", help="binarized-image generation")
    bmnist.add_argument("--images", required=True)
    bmnist.add_argument("--labels", required=True)
    bmnist.add_argument("--downscale", type=int, choices=[1, 2], default=2)
    bmnist.add_argument("--subset", type=int, default=5000)
    bmnist.add_argument("--objective", type=_name_list, default=None,
                        help="comma-separated cells such as x_pred-x_mse,x_pred-bce")
    bmnist.add_argument("--sampler", choices=["uniform", "logitnormal"], default="uniform")
    bmnist.add_argument("--m", type=float, default=0.0)
    bmnist.add_argument("--s", type=float, default=1.0)
    bmnist.add_argument("--steps", type=int, default=2000)
    bmnist.add_argument("--batch", type=int, default=128)
    bmnist.add_argument("--lr", type=float, default=1e-3)
    bmnist.add_argument("--euler-steps", type=int, default=50)
    bmnist.add_argument("--validate-every", type=int, default=100)
    bmnist.add_argument("--cache", default=None, help="binarized dataset cache (BNFM)")
    _common(bmnist)
    bmnist.set_defaults(handler=cmd_bmnist)

    mimo = commands.add_parser("mimo", help="MIMO detection")
    mimo.add_argument("--n", type=int, default=2)
    mimo.add_argument("--snr-sweep", type=_float_list, default=None, help="comma-separated dB values")
    mimo.add_argument("--cells", type=_name_list, default=None, help="comma-separated objectives")
    mimo.add_argument("--steps", type=int, default=3000)
    mimo.add_argument("--batch", type=int, default=500)
    mimo.add_argument("--lr", type=float, default=1e-3)
    mimo.add_argument("--t-max", type=float, default=0.99)
    mimo.add_argument("--grad-clip", type=float, default=None)
    mimo.add_argument("--euler-steps", type=int, default=2)
    mimo.add_argument("--bits", type=int, default=100_000)
    mimo.add_argument("--map", type=_bool, default=True, help="include the exhaustive MAP baseline")
    _common(mimo)
    mimo.set_defaults(handler=cmd_mimo)
    return parser


def _subparser(parser: argparse.ArgumentParser, command: str) -> argparse.ArgumentParser:
    for action in parser._subparsers._group_actions:
        if command in action.choices:
            return action.choices[command]
    raise UsageError(f"unknown command '{command}'")


def apply_config_file(parser: argparse.ArgumentParser, argv: Sequence[str]) -> None:
    """Install --config values as subcommand defaults so explicit flags still win"""
    prelim = argparse.ArgumentParser(add_help=False)
    prelim.add_argument("command", nargs="?")
    prelim.add_argument("--config")
    known, _ = prelim.parse_known_args(argv)
    if not known.config or not known.command:
        return
    path = Path(known.config)
    if not path.is_file():
        raise MissingInputError(str(path), "Pass an existing key=value file to --config.")
    values = parse_config_lines(path.read_text())

    sub = _subparser(parser, known.command)
    actions = {action.dest: action for action in sub._actions}
    defaults: Dict[str, Any] = {}
    for key, raw in values.items():
        action = actions.get(key)
        if action is None or key in ("config", "help"):
            raise UsageError(f"unknown config key '{key}' for {known.command}")
        if action.nargs == 0:
            defaults[key] = _bool(raw)
        elif action.type is not None:
            defaults[key] = action.type(raw)
        else:
            defaults[key] = raw
        if action.choices is not None and defaults[key] not in action.choices:
            raise UsageError(f"config key '{key}': '{raw}' not in {sorted(action.choices)}")
        action.required = False
    sub.set_defaults(**defaults)


def _check(errors: List[str]) -> None:
    if errors:
        raise UsageError("; ".join(errors))


def _relative(paths: Sequence[Path], root: Path) -> List[str]:
    out = []
    for path in paths:
        path = Path(path)
        try:
            out.append(str(path.relative_to(root)))
        except ValueError:
            out.append(str(path))
    return sorted(set(out))


def _run_recipe(command: str, args: argparse.Namespace, config: Any,
                runner: Callable[[Any, Path], Any]) -> int:
    """Manifest first, then the recipe, then the manifest again with its outputs"""
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest(command=command, config=config.model_dump(mode="json"), seed=args.seed,
                           version=__version__, output_dir=str(out_dir))
    manifest_path = write_manifest(out_dir / "manifest.json", manifest)

    start = time.perf_counter()
    run = runner(config, out_dir)
    manifest.duration_s = calculate_duration(start)
    manifest.outputs = _relative(run.outputs, out_dir) + ["manifest.json"]
    manifest.divergence_events = dict(run.divergence_events)
    write_manifest(manifest_path, manifest)

    for name, event in manifest.divergence_events.items():
        logger.info("%s: recorded divergence at step %d (%s)", name, event.step, event.reason)
    return EXIT_OK


def cmd_toy(args: argparse.Namespace) -> int:
    data_kind = "bpsk_iid" if args.data == "bpsk" else "gaussian_iid"
    fields: Dict[str, Any] = dict(
        data_kind=data_kind, D=args.dim, batch=args.batch, steps=args.steps, lr=args.lr,
        hidden=args.hidden, grad_clip=args.grad_clip, euler_steps=args.euler_steps,
        ber_bits=args.ber_bits, bins=args.bins, seed=args.seed, progress=args.progress,
    )
    if args.grid:
        fields["objectives"] = default_objectives(data_kind == "bpsk_iid")
        fields["samplers"] = [TimeSampler(kind="uniform"),
                              TimeSampler(kind="logit_normal", m=args.m, s=args.s)]
    else:
        _check(validate_objective_flags(args.pred, args.loss, data_kind)
               + validate_sampler_flags(args.sampler, args.s))
        fields["objectives"] = [ObjectiveConfig(prediction=PREDICTIONS[args.pred], loss=LOSSES[args.loss])]
        fields["samplers"] = [_sampler(args.sampler, args.m, args.s)]
    recipe = ToyRecipe(**fields)
    return _run_recipe("toy", args, recipe, run_toy)


def cmd_analyze(args: argparse.Namespace) -> int:
    if args.s <= 0:
        raise UsageError("--s must be positive")
    constants = AnalysisConstants(D=args.dim)
    start = time.perf_counter()
    report = analysis_report(args.case, args.s, args.m, constants)
    report_path = write_json(args.report, report.model_dump(mode="json"))

    out_dir = Path(args.out) if args.out else report_path.parent
    manifest = RunManifest(
        command="analyze",
        config={"case": args.case, "s": args.s, "m": args.m, **constants.model_dump(mode="json")},
        seed=args.seed, version=__version__, output_dir=str(out_dir),
        duration_s=calculate_duration(start),
        outputs=_relative([report_path], out_dir),
    )
    write_manifest(out_dir / "manifest.json", manifest)
    logger.info("u_peak=%.4f t_peak=%.4f mass_above=%.3g", report.u_peak, report.t_peak, report.mass_above)
    return EXIT_OK


def cmd_bmnist(args: argparse.Namespace) -> int:
    _check(validate_sampler_flags(args.sampler, args.s))
    missing = validate_dataset_paths({"--images": args.images, "--labels": args.labels})
    cached = args.cache and Path(args.cache).is_file()
    if missing and not cached:
        raise MissingInputError(", ".join(missing), DATASET_HINT)
    fields: Dict[str, Any] = dict(
        images_path=args.images, labels_path=args.labels, subset=args.subset, downscale=args.downscale,
        sampler=_sampler(args.sampler, args.m, args.s), steps=args.steps, batch=args.batch, lr=args.lr,
        euler_steps=args.euler_steps, validate_every=args.validate_every, cache_path=args.cache,
        seed=args.seed, progress=args.progress,
    )
    if args.objective:
        fields["objectives"] = [parse_objective(name) for name in args.objective]
    return _run_recipe("bmnist", args, BmnistConfig(**fields), run_bmnist)


def cmd_mimo(args: argparse.Namespace) -> int:
    fields: Dict[str, Any] = dict(
        n=args.n, steps=args.steps, batch=args.batch, lr=args.lr, t_max=args.t_max,
        grad_clip=args.grad_clip, euler_steps=args.euler_steps, bits_per_point=args.bits,
        map_enabled=args.map, seed=args.seed, progress=args.progress,
    )
    if args.snr_sweep is not None:
        _check(validate_snr_sweep(args.snr_sweep))
        fields["snr_sweep"] = args.snr_sweep
    if args.cells:
        fields["objectives"] = [parse_objective(name) for name in args.cells]
    if args.map and 2 * args.n > 16:
        raise UsageError("MAP baseline is limited to 2N <= 16; pass --map false")
    return _run_recipe("mimo", args, MimoConfig(**fields), run_mimo)


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        apply_config_file(parser, argv)
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if isinstance(exc.code, int) else EXIT_USAGE
    except MissingInputError as e:
        print(f"binflow: {e}", file=sys.stderr)
        return EXIT_MISSING_INPUT
    except (UsageError, ValueError, argparse.ArgumentTypeError) as e:
        print(f"binflow: error: {e}", file=sys.stderr)
        return EXIT_USAGE

    logging.basicConfig(level=getattr(logging, args.log_level), format=LOG_FORMAT, force=True)
    try:
        return args.handler(args)
    except MissingInputError as e:
        logger.error("%s", e)
        return EXIT_MISSING_INPUT
    except (UsageError, ValidationError) as e:
        logger.error("invalid configuration: %s", e)
        return EXIT_USAGE
    except BinflowError as e:
        logger.exception("run failed: %s", e)
        return EXIT_INTERNAL
    except Exception as e:
        logger.exception("unexpected failure: %s", e)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
