"""
pafa - patient-aware feature alignment toolkit.

Subcommands:
- synth: Generate a synthetic cohort with patient nuisances
- prepare: Build a manifest from an ICBHI-style directory
- features: Extract log-mel fbank features into the cache
- gradcheck: Verify loss gradients against finite differences
- train: Train one variant and evaluate it
- eval: ICBHI Sp / Se / Score of a run or a predictions file
- ablate: Variant x seed table, lambda grid, run aggregation, directional benchmark
- export-embeddings: Per-sample embeddings for external plots
- patient-analysis: Nearest test patients to reference centroids

Every subcommand prints one `RESULT key=value ...` line on success.
Exit codes: 0 ok, 1 usage, 2 data error, 3 numeric failure.
"""

import argparse
import asyncio
import json
import logging
import sys
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Tuple

from .config import load_flat_config, parse_bool, parse_float_list
from .errors import PafaError, UsageError
from .features import NORMALIZATIONS
from .tools import (
    pafa_ablate,
    pafa_eval,
    pafa_export_embeddings,
    pafa_features,
    pafa_gradcheck,
    pafa_patient_analysis,
    pafa_prepare,
    pafa_synth,
    pafa_train,
)
from .trainer import SAMPLER_MODES, VARIANTS

logger = logging.getLogger("pafa")

TOOL_MAP = {
    "synth": pafa_synth,
    "prepare": pafa_prepare,
    "features": pafa_features,
    "gradcheck": pafa_gradcheck,
    "train": pafa_train,
    "eval": pafa_eval,
    "ablate": pafa_ablate,
    "export-embeddings": pafa_export_embeddings,
    "patient-analysis": pafa_patient_analysis,
}

# Parsed flags that steer the CLI itself and never reach a handler
CLI_KEYS = ("command", "config", "verbose", "quiet", "json")


class ArgumentParser(argparse.ArgumentParser):
    """argparse that raises UsageError instead of exiting with status 2."""

    def error(self, message: str):
        raise UsageError(f"{self.prog}: {message}\n{self.format_usage().strip()}")


def _path(text: str) -> str:
    return str(Path(text).expanduser().resolve())


def _int_list(text: str) -> List[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _str_list(text: str) -> List[str]:
    return [v.strip() for v in text.split(",") if v.strip()]


def _float_list(text: str) -> List[float]:
    try:
        return list(parse_float_list(text))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


# =============================================================================
# PARSER
# =============================================================================

def _add_cache_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--cache-dir", dest="cache_dir", type=_path,
                   help="Feature cache root (default: $PAFA_CACHE_DIR or ./.pafa_cache)")
    p.add_argument("--normalization", choices=NORMALIZATIONS, default="utterance",
                   help="Feature normalization variant (default: utterance)")


def _add_train_flags(p: argparse.ArgumentParser, with_variant: bool = True, with_seed: bool = True) -> None:
    if with_variant:
        p.add_argument("--variant", choices=VARIANTS, help="Loss variant (default: full)")
    if with_seed:
        p.add_argument("--seed", type=int, help="Seed for initialization and batching")
    p.add_argument("--lr", type=float, help="Adam learning rate (5e-5; 1e-3 for synthetic data)")
    p.add_argument("--weight-decay", dest="weight_decay", type=float, help="Decoupled weight decay (1e-6)")
    p.add_argument("--epochs", type=int, help="Training epochs (100; 30 for synthetic data)")
    p.add_argument("--batch-size", dest="batch_size", type=int, help="Batch size (32 = P x K)")
    p.add_argument("--lambda-pcsl", dest="lambda_pcsl", type=float, help="PCSL weight (50)")
    p.add_argument("--lambda-gpal", dest="lambda_gpal", type=float, help="GPAL weight (0.0005)")
    p.add_argument("--epsilon", type=float, help="PCSL denominator epsilon (1e-8)")
    p.add_argument("--sampler", choices=SAMPLER_MODES, help="Batch sampler (default: pk)")
    p.add_argument("--sampler-p", dest="sampler_p", type=int, help="Patients per pk batch (8)")
    p.add_argument("--sampler-k", dest="sampler_k", type=int, help="Samples per patient in pk batches (4)")
    p.add_argument("--task", choices=("4class", "2class"), help="Classification task (default: 4class)")
    p.add_argument("--hidden", help="Encoder hidden widths, comma-separated (256,128)")
    p.add_argument("--embed-dim", dest="embed_dim", type=int, help="Encoder output width (128; 64 for synthetic)")
    p.add_argument("--proj-dim", dest="proj_dim", type=int, help="Projection head width (128; 64 for synthetic)")
    p.add_argument("--full-scale", dest="full_scale", action="store_true",
                   help="Use full-scale defaults even for synthetic manifests")


def build_parser() -> ArgumentParser:
    common = ArgumentParser(add_help=False)
    common.add_argument("--config", type=_path, help="Flat key=value file; flags override its values")
    common.add_argument("--verbose", action="store_true", help="Debug logging")
    common.add_argument("--quiet", action="store_true", help="Warnings and errors only")
    common.add_argument("--json", action="store_true", help="Print the full result as JSON")

    parser = ArgumentParser(prog="pafa", description="Patient-aware feature alignment toolkit")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=ArgumentParser)
    sub.required = True

    p = sub.add_parser("synth", parents=[common], help="Generate a synthetic cohort")
    p.add_argument("--out", dest="out_dir", type=_path, required=True, help="Output directory")
    p.add_argument("--patients", dest="n_patients", type=int, default=20, help="Number of patients (20)")
    p.add_argument("--samples-per-patient", dest="samples_per_patient", type=int, default=20,
                   help="Cycles per patient (20)")
    p.add_argument("--nuisance-strength", dest="nuisance_strength", type=float, default=1.0,
                   help="Scale of patient channel effects (1.0)")
    p.add_argument("--class-mix", dest="class_mix", type=lambda t: [float(v) for v in t.split(",")],
                   help="Normal,Crackle,Wheeze,Both proportions (0.4,0.3,0.15,0.15)")
    p.add_argument("--seed", type=int, default=0, help="Cohort seed (0)")

    p = sub.add_parser("prepare", parents=[common], help="Build a manifest from ICBHI-style recordings")
    p.add_argument("--root", dest="root_dir", type=_path, required=True, help="Recording directory")
    p.add_argument("--out", type=_path, required=True, help="Manifest CSV to write")
    p.add_argument("--split-file", dest="split_file", type=_path, help="Official train/test list")
    p.add_argument("--train-fraction", dest="train_fraction", type=float, default=0.6,
                   help="Patient fraction for the random split (0.6)")
    p.add_argument("--seed", type=int, default=0, help="Random split seed (0)")

    p = sub.add_parser("features", parents=[common], help="Extract fbank features into the cache")
    p.add_argument("--manifest", type=_path, required=True, help="Manifest CSV")
    p.add_argument("--base-dir", dest="base_dir", type=_path, help="Audio root (default: manifest directory)")
    p.add_argument("--jobs", type=int, default=1, help="Extraction threads (1)")
    p.add_argument("--force", action="store_true", help="Re-extract cached samples")
    _add_cache_flags(p)

    p = sub.add_parser("gradcheck", parents=[common], help="Finite-difference gradient check")
    p.add_argument("--trials", type=int, default=100, help="Random batches (100)")
    p.add_argument("--batch", type=int, default=16, help="Rows per batch (16)")
    p.add_argument("--dim", type=int, default=8, help="Embedding dimension (8)")
    p.add_argument("--min-patients", dest="min_patients", type=int, default=2, help="Fewest patients per batch (2)")
    p.add_argument("--max-patients", dest="max_patients", type=int, default=6, help="Most patients per batch (6)")
    p.add_argument("--h", type=float, default=1e-5, help="Finite-difference step (1e-5)")
    p.add_argument("--tol", type=float, default=1e-4, help="Relative error tolerance (1e-4)")
    p.add_argument("--lambda-pcsl", dest="lambda_pcsl", type=float, help="PCSL weight (50)")
    p.add_argument("--lambda-gpal", dest="lambda_gpal", type=float, help="GPAL weight (0.0005)")
    p.add_argument("--seed", type=int, default=0, help="Batch generator seed (0)")

    p = sub.add_parser("train", parents=[common], help="Train one model")
    p.add_argument("--manifest", type=_path, required=True, help="Manifest CSV")
    p.add_argument("--run-dir", dest="run_dir", type=_path, required=True, help="Output run directory")
    _add_train_flags(p)
    _add_cache_flags(p)

    p = sub.add_parser("eval", parents=[common], help="Score a run or a predictions file")
    p.add_argument("--run", dest="run_dir", type=_path, help="Run directory to evaluate")
    p.add_argument("--manifest", type=_path, help="Manifest CSV (with --run)")
    p.add_argument("--predictions", type=_path, help="CSV with label,pred[,patient]")
    p.add_argument("--task", choices=("4class", "2class"), help="Metric task")
    p.add_argument("--split", choices=("train", "test", "all"), default="test", help="Split to evaluate (test)")
    _add_cache_flags(p)

    p = sub.add_parser("ablate", parents=[common], help="Ablation over variants and seeds")
    p.add_argument("--out", dest="out_dir", type=_path, required=True, help="Output directory")
    p.add_argument("--manifest", type=_path, help="Manifest CSV to train on")
    p.add_argument("--runs", nargs="+", type=_path, help="Existing run directories to aggregate")
    p.add_argument("--seeds", type=_int_list, help="Comma-separated seeds (0,1,2,3,4)")
    p.add_argument("--variants", type=_str_list, default=list(VARIANTS),
                   help="Comma-separated variants (full,ce_only,no_pcsl,no_gpal)")
    p.add_argument("--benchmark", action="store_true",
                   help="Directional full vs ce_only check; synthesizes a 20 x 20 cohort without --manifest")
    p.add_argument("--grid-pcsl", dest="grid_pcsl", type=_float_list,
                   help="Comma-separated lambda_pcsl values to grid-search with the full objective")
    p.add_argument("--grid-gpal", dest="grid_gpal", type=_float_list,
                   help="Comma-separated lambda_gpal values to grid-search with the full objective")
    p.add_argument("--jobs", type=int, default=1, help="Feature threads for the benchmark cohort (1)")
    _add_train_flags(p, with_variant=False, with_seed=False)
    _add_cache_flags(p)

    p = sub.add_parser("export-embeddings", parents=[common], help="Export per-sample embeddings")
    p.add_argument("--run", dest="run_dir", type=_path, required=True, help="Run directory")
    p.add_argument("--manifest", type=_path, required=True, help="Manifest CSV")
    p.add_argument("--out", type=_path, required=True, help="Embedding CSV")
    p.add_argument("--split", choices=("train", "test", "all"), default="all", help="Split to export (all)")
    _add_cache_flags(p)

    p = sub.add_parser("patient-analysis", parents=[common], help="Nearest test patients to reference centroids")
    p.add_argument("--embeddings", type=_path, required=True, help="Embedding CSV")
    p.add_argument("--references", type=_path, help="Reference centroid CSV")
    p.add_argument("--make-references", dest="make_references", type=_path,
                   help="Build reference centroids and write them here")
    p.add_argument("--reference-patients", dest="reference_patients", type=_int_list,
                   help="Comma-separated patient ids for --make-references")
    p.add_argument("--top-n", dest="top_n", type=int, help="Or use the N patients with the most samples")
    p.add_argument("--reference-split", dest="reference_split", choices=("train", "test", "all"),
                   default="train", help="Split references are built from (train)")
    p.add_argument("--split", choices=("train", "test", "all"), default="test", help="Split to rank (test)")
    p.add_argument("--k", type=int, default=6, help="Patients to return (6)")
    p.add_argument("--compare", nargs=2, type=_path, metavar=("RUN_A", "RUN_B"),
                   help="Two run directories to compare per-patient accuracy")
    p.add_argument("--out", type=_path, help="Ranking CSV")

    return parser


# =============================================================================
# CONFIG FILES
# =============================================================================

def _config_defaults(subparser: argparse.ArgumentParser, values: Dict[str, str]) -> Dict[str, Any]:
    """Convert flat config values to the subcommand's argument types."""
    actions = {a.dest: a for a in subparser._actions if a.dest not in CLI_KEYS and a.dest != "help"}
    unknown = sorted(set(values) - set(actions))
    if unknown:
        raise UsageError(f"Unknown config keys for {subparser.prog}: {unknown}")
    defaults: Dict[str, Any] = {}
    for key, text in values.items():
        action = actions[key]
        convert: Callable[[str], Any] = action.type or str
        try:
            if isinstance(action, (argparse._StoreTrueAction, argparse._StoreFalseAction)):
                defaults[key] = parse_bool(text)
            elif action.nargs in ("+", "*") or isinstance(action.nargs, int):
                defaults[key] = [convert(v) for v in text.split(",") if v.strip()]
            else:
                defaults[key] = convert(text)
        except (ValueError, argparse.ArgumentTypeError) as e:
            raise UsageError(f"Config key {key}: {e}") from e
        if action.choices is not None and defaults[key] not in action.choices:
            raise UsageError(f"Config key {key}: {text!r} is not one of {list(action.choices)}")
    return defaults


def _peek(argv: List[str]) -> Tuple[Optional[str], Optional[str]]:
    """(command, --config value) without running the full parser."""
    command = next((a for a in argv if not a.startswith("-")), None)
    config = None
    for i, arg in enumerate(argv):
        if arg == "--config" and i + 1 < len(argv):
            config = argv[i + 1]
        elif arg.startswith("--config="):
            config = arg.split("=", 1)[1]
    return command, config


def _subparser(parser: argparse.ArgumentParser, command: str) -> Optional[argparse.ArgumentParser]:
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            return action.choices.get(command)
    return None


def parse_args(argv: List[str]) -> argparse.Namespace:
    parser = build_parser()
    command, config = _peek(argv)
    subparser = _subparser(parser, command) if command else None
    if config and subparser is not None:
        defaults = _config_defaults(subparser, load_flat_config(_path(config)))
        subparser.set_defaults(**defaults)
        # required flags may come from the file
        for action in subparser._actions:
            if action.dest in defaults:
                action.required = False
    return parser.parse_args(argv)


# =============================================================================
# DISPATCH
# =============================================================================

def configure_logging(verbose: bool, quiet: bool) -> None:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    logger.setLevel(logging.DEBUG if verbose else logging.WARNING if quiet else logging.INFO)


def _format_value(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value).replace(" ", "_")


def format_result_line(summary: Dict[str, Any]) -> str:
    return "RESULT " + " ".join(f"{k}={_format_value(v)}" for k, v in summary.items())


async def call_tool(name: str, arguments: Dict[str, Any]) -> Dict[str, Any]:
    """Run one handler; unexpected exceptions become exit-2 failures."""
    try:
        if name not in TOOL_MAP:
            raise UsageError(f"Unknown command: {name} (available: {', '.join(TOOL_MAP)})")
        handler = TOOL_MAP[name]
        return await handler(**arguments)
    except PafaError as e:
        return {"success": False, "error": str(e), "exit_code": e.exit_code}
    except Exception as e:
        logger.exception(f"Error in {name}: {e}")
        return {"success": False, "error": str(e), "exit_code": 2}


def run(argv: Optional[List[str]] = None) -> int:
    """Console entry point; returns the process exit code."""
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = parse_args(argv)
    except UsageError as e:
        print(str(e), file=sys.stderr)
        return UsageError.exit_code
    except PafaError as e:
        print(str(e), file=sys.stderr)
        return e.exit_code
    except SystemExit as e:
        # --help
        return int(e.code or 0)

    configure_logging(args.verbose, args.quiet)
    arguments = {k: v for k, v in vars(args).items() if k not in CLI_KEYS}
    result = asyncio.run(call_tool(args.command, arguments))

    if args.json:
        print(json.dumps(result, indent=2, default=str))
    if not result.get("success"):
        logger.error(result.get("error", "failed"))
        return int(result.get("exit_code", 2))
    if not args.json:
        print(format_result_line(result.get("summary", {})))
    return 0


if __name__ == "__main__":
    sys.exit(run())
