"""Command-line entry point for AMFormer desk experiments.

Usage:
    amformer train --config configs/desk.env --seed 7 --out-dir runs/train
    amformer eval --checkpoint runs/train/checkpoint.pt --fold 0 --k-shot 5 --episodes 1000
    amformer study-erosion --checkpoint runs/train/checkpoint.pt --ratios 0.2,0.5,1.0
    amformer study-ablation --config configs/desk.env --variants baseline,om_multi_scale

Flags override keys of the config file, which override built-in defaults.
Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

import argparse
import json
import sys
from collections.abc import Callable, Sequence

from pydantic import BaseModel, ValidationError

from app.commands.data import GenDataArgs, run_gen_data
from app.commands.evaluation import (
    DiagnosticsArgs,
    ErosionStudyArgs,
    EvalArgs,
    SimilarityStudyArgs,
    WeakLabelStudyArgs,
    run_dump_diagnostics,
    run_erosion_study_command,
    run_eval,
    run_similarity_study_command,
    run_weak_label_study_command,
)
from app.commands.training import (
    AblationStudyArgs,
    ProxyStudyArgs,
    TrainArgs,
    run_ablation_study_command,
    run_proxy_study_command,
    run_train,
)
from app.config import get_settings
from app.errors import UsageError
from app.logging_config import get_logger, setup_logging

logger = get_logger("main")

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_FAILURE = 2

# command -> (argument record, handler)
COMMANDS: dict[str, tuple[type[BaseModel], Callable[..., dict]]] = {
    "gen-data": (GenDataArgs, run_gen_data),
    "train": (TrainArgs, run_train),
    "eval": (EvalArgs, run_eval),
    "study-erosion": (ErosionStudyArgs, run_erosion_study_command),
    "study-weak-labels": (WeakLabelStudyArgs, run_weak_label_study_command),
    "study-similarity": (SimilarityStudyArgs, run_similarity_study_command),
    "dump-diagnostics": (DiagnosticsArgs, run_dump_diagnostics),
    "study-proxies": (ProxyStudyArgs, run_proxy_study_command),
    "study-ablation": (AblationStudyArgs, run_ablation_study_command),
}


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        raise UsageError(message)


def _comma_list(cast: Callable[[str], object]) -> Callable[[str], list]:
    def parse(text: str) -> list:
        try:
            return [cast(item) for item in text.split(",") if item.strip()]
        except ValueError as e:
            raise argparse.ArgumentTypeError(str(e)) from e

    return parse


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="Key-value config file (AMF_<SECTION>__<KEY>=value)")
    common.add_argument("--seed", type=int)
    common.add_argument("--fold", type=int)
    common.add_argument("--k-shot", dest="k_shot", type=int)
    common.add_argument("--out-dir", dest="out_dir")
    common.add_argument("--workers", type=int)
    common.add_argument("--log-level", dest="log_level")

    parser = _Parser(prog="amformer", description="Few-shot segmentation desk experiments")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name: str, help_text: str) -> argparse.ArgumentParser:
        return sub.add_parser(name, parents=[common], help=help_text)

    def with_checkpoint(p: argparse.ArgumentParser) -> argparse.ArgumentParser:
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--episodes", type=int)
        return p

    gen = add("gen-data", "Export an episode manifest")
    gen.add_argument("--episodes", type=int)
    gen.add_argument("--phase", choices=["train", "test"])
    gen.add_argument("--render", action="store_true", default=None)

    add("train", "Train a model")

    ev = with_checkpoint(add("eval", "Evaluate a checkpoint"))
    ev.add_argument("--label-kind", dest="label_kind", choices=["mask", "bbox", "scribble"])
    ev.add_argument("--dump-diagnostics", dest="dump_diagnostics", type=int)

    erosion = with_checkpoint(add("study-erosion", "Support erosion study"))
    erosion.add_argument("--ratios", type=_comma_list(float))

    weak = with_checkpoint(add("study-weak-labels", "Weak support label study"))
    weak.add_argument("--label-kind", dest="label_kinds", type=_comma_list(str))

    sim = with_checkpoint(add("study-similarity", "Intra/inter-object feature similarity"))
    sim.add_argument("--pairs-per-object", dest="pairs_per_object", type=int)

    diag = with_checkpoint(add("dump-diagnostics", "Write per-episode diagnostic maps"))
    diag.add_argument("--no-panels", dest="panels", action="store_false", default=None)

    proxies = add("study-proxies", "Train one model per local proxy count")
    proxies.add_argument("--episodes", type=int)
    proxies.add_argument("--proxies", type=_comma_list(int))

    ablation = add("study-ablation", "Train one model per component variant")
    ablation.add_argument("--episodes", type=int)
    ablation.add_argument("--variants", type=_comma_list(str))
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    settings = get_settings()
    try:
        namespace = build_parser().parse_args(argv)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE

    values = {k: v for k, v in vars(namespace).items() if v is not None}
    command = values.pop("command")
    try:
        setup_logging(
            log_level=values.pop("log_level", settings.log_level).upper(),
            json_output=settings.log_json,
            log_to_file=settings.log_to_file,
        )
    except ValueError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    args_model, handler = COMMANDS[command]

    try:
        args = args_model(**values)
        summary = handler(args)
    except (UsageError, ValidationError) as e:
        logger.error("Usage error", extra={"command": command, "error": str(e)})
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as e:
        logger.exception(
            "Command failed", extra={"command": command, "error_type": type(e).__name__}
        )
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_FAILURE

    print(json.dumps(summary, indent=2, default=str))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
