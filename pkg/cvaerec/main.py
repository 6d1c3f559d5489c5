"""
Command line entry point.

    python -m cvaerec [--config run.json] [--seed N] [--threads N] [--verbose] <command> ...

Commands: fixture, preprocess, train, evaluate, analyze, recommend. Outputs go
under the run config's artifact directory (split/, train/, baseline/, eval/,
analysis/), each with a run_manifest.json.
"""

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path
from typing import Any, Dict, List, Optional

from cvaerec.config import settings
from cvaerec.core.exceptions import CheckpointError, ConfigError, CVAEError, DimensionError
from cvaerec.core.run_manifest import RunManifest, directory_lock
from cvaerec.models.checkpoint import load_checkpoint
from cvaerec.schemas.run_config import RunConfig, apply_overrides, load_run_config
from cvaerec.services.analysis_service import AnalysisService
from cvaerec.services.data_service import DataService, SplitBundle, read_split
from cvaerec.services.evaluation_service import (
    OracleScorer, evaluate, read_history, recommend, write_reports,
)
from cvaerec.services.fixture_service import FixtureSpec, write_fixture
from cvaerec.services.training_service import TrainingService

logger = logging.getLogger(__name__)


def setup_logging(verbose: bool = False) -> None:
    level = logging.DEBUG if verbose else getattr(logging, settings.CVAE_LOG_LEVEL.upper(), logging.INFO)
    logging.basicConfig(level=level, format=settings.LOG_FORMAT, force=True)


# ---------------------------------------------------------------------------
# Config helpers
# ---------------------------------------------------------------------------

def resolve_config(args: argparse.Namespace) -> RunConfig:
    config = load_run_config(args.config, getattr(args, "preset", None))
    overrides: Dict[str, Any] = {
        "seed": args.seed,
        "train.seed": args.seed,
        "train.threads": args.threads,
        "train.max_epochs": getattr(args, "max_epochs", None),
        "evaluation.kind": getattr(args, "protocol", None),
    }
    return apply_overrides(config, overrides)


def artifact_path(config: RunConfig, *parts: str) -> Path:
    return config.resolved_artifact_dir().joinpath(*parts)


def load_bundle(config: RunConfig, split_dir: Optional[str]) -> SplitBundle:
    path = Path(split_dir) if split_dir else artifact_path(config, "split")
    bundle = read_split(str(path))
    manifest = bundle.manifest
    if manifest.get("m") != bundle.m or manifest.get("s") != bundle.s:
        raise DimensionError(
            f"split files in {path} hold m={bundle.m}, s={bundle.s} but the manifest says "
            f"m={manifest.get('m')}, s={manifest.get('s')}"
        )
    return bundle


def default_checkpoint(config: RunConfig, stage: str = "train") -> str:
    summary = artifact_path(config, stage, "training_summary.json")
    if not summary.exists():
        raise CheckpointError(f"no checkpoint given and no {summary}; run train first")
    return json.loads(summary.read_text(encoding="utf-8"))["final_checkpoint"]


def category_index(bundle: SplitBundle, label: Optional[str]) -> int:
    if label is None:
        return -1
    try:
        return bundle.conditions.index_of(label)
    except KeyError as e:
        raise ConfigError(e.args[0]) from e


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_fixture(args: argparse.Namespace) -> int:
    spec = FixtureSpec(n_users=args.users, seed=args.seed if args.seed is not None else FixtureSpec.seed)
    paths = write_fixture(args.out, spec, args.preset)
    for name, path in paths.items():
        print(f"{name}: {path}")
    return 0


def cmd_preprocess(args: argparse.Namespace) -> int:
    config = resolve_config(args)
    out = Path(args.out) if args.out else artifact_path(config, "split")
    manifest = RunManifest(command="preprocess", seed=config.split.seed, config=config.model_dump())
    with directory_lock(config.resolved_artifact_dir()):
        service = DataService(config.dataset, config.split)
        service.check_inputs()
        manifest.add_input(config.dataset.ratings_path)
        manifest.add_input(config.dataset.categories_path)
        with manifest.timed("preprocess"):
            split_manifest = service.preprocess(str(out), {"inputs": dict(manifest.inputs)})
        manifest.add_artifact(out)
        manifest.results = {k: split_manifest[k] for k in (
            "n", "m", "s", "interactions", "n_training_examples", "n_validation_examples", "n_test_examples")}
        manifest.write(out)

    r = manifest.results
    print(f"users n={r['n']:,}  items m={r['m']:,}  categories s={r['s']}  interactions={r['interactions']:,}")
    print(f"training examples={r['n_training_examples']:,}  validation examples={r['n_validation_examples']:,}  "
          f"test examples={r['n_test_examples']:,}")
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    config = resolve_config(args)
    stage = "baseline" if args.unconditioned else "train"
    out = Path(args.out) if args.out else artifact_path(config, stage)
    manifest = RunManifest(command="train", seed=config.train.seed, config=config.model_dump())
    with directory_lock(config.resolved_artifact_dir()):
        bundle = load_bundle(config, args.split)
        service = TrainingService(bundle, config, str(out), unconditioned=args.unconditioned)
        with manifest.timed("train"):
            result = service.two_phase_train(args.phase, args.beta_cap, args.resume)
        manifest.add_artifact(result.checkpoint_path)
        manifest.results = {
            "selected_beta": result.selected_beta,
            "phases": [p.summary.model_dump() for p in result.phases],
            "unconditioned": args.unconditioned,
        }
        manifest.write(out)

    print(f"selected beta: {result.selected_beta:.4f}")
    print(f"checkpoint: {result.checkpoint_path}")
    return 0


def cmd_evaluate(args: argparse.Namespace) -> int:
    config = resolve_config(args)
    out = Path(args.out) if args.out else artifact_path(config, "eval")
    manifest = RunManifest(command="evaluate", seed=config.seed, config=config.model_dump())
    with directory_lock(config.resolved_artifact_dir()):
        bundle = load_bundle(config, args.split)
        heldout = bundle.validation if args.on == "validation" else bundle.test
        protocol = config.evaluation
        if protocol.kind != "normal" and bundle.s == 0:
            raise ConfigError(f"protocol '{protocol.kind}' needs categories; the split has none")

        summaries, cases = [], {}
        with manifest.timed("evaluate"):
            if args.oracle:
                scorer, method = OracleScorer(heldout, bundle.conditions), "oracle"
            else:
                path = args.checkpoint or default_checkpoint(config)
                checkpoint = load_checkpoint(path, bundle.m, bundle.s)
                manifest.add_input(path)
                scorer, method = checkpoint.to_model(), "C-VAE"
            result = evaluate(scorer, heldout, bundle.conditions, protocol, method=method)
            summaries += result.summaries
            cases[method] = result.cases

            if args.baseline_checkpoint:
                baseline = load_checkpoint(args.baseline_checkpoint, bundle.m, 0)
                manifest.add_input(args.baseline_checkpoint)
                result = evaluate(baseline.to_model(), heldout, bundle.conditions, protocol,
                                  filtered=True, method="Mult-VAE")
                summaries += result.summaries
                cases["Mult-VAE"] = result.cases

        paths = write_reports(str(out), summaries, cases if args.dump_cases else None,
                              bundle.conditions.category_names, bundle.user_ids)
        for path in paths.values():
            manifest.add_artifact(path)
        manifest.results = {"metrics": [s.model_dump() for s in summaries], "heldout": args.on}
        manifest.write(out)

    print(paths["metrics_txt"].read_text(encoding="utf-8"), end="")
    return 0


def cmd_analyze(args: argparse.Namespace) -> int:
    config = resolve_config(args)
    out = Path(args.out) if args.out else artifact_path(config, "analysis")
    manifest = RunManifest(command=f"analyze {args.which}", seed=config.seed, config=config.model_dump())
    with directory_lock(config.resolved_artifact_dir()):
        bundle = load_bundle(config, args.split)
        path = args.checkpoint or default_checkpoint(config)
        expected_s = 0 if args.filtered else bundle.s
        model = load_checkpoint(path, bundle.m, expected_s).to_model()
        manifest.add_input(path)
        service = AnalysisService(model, bundle.train, bundle.train_users, bundle.conditions,
                                  config.analysis, str(out), config.seed, args.filtered)
        with manifest.timed(args.which):
            if args.which == "ranking":
                histogram = service.ranking()
                manifest.results = {"n_cases": histogram.n_cases, "purity": histogram.purity()}
                print(f"cases: {histogram.n_cases:,}  purity@{histogram.max_rank}: {histogram.purity():.4f}")
            elif args.which == "purity":
                value = service.purity()
                manifest.results = {"k": config.analysis.purity_k, "purity": value}
                print(f"{value:.4f}")
            elif args.which == "latent":
                table, score = service.latents()
                manifest.results = {"rows": len(table.users), "separation": asdict(score)}
                print(f"rows: {len(table.users):,}  separation ratio: {score.ratio:.3f}")
            else:
                reports = service.pca()
                manifest.results = {"pairs": sorted(reports)}
                for pair, frame in reports.items():
                    print(f"components {pair}:")
                    print(frame[["condition", "x", "y"]].to_string(index=False))
        manifest.add_artifact(out)
        manifest.write(out)
    return 0


def cmd_recommend(args: argparse.Namespace) -> int:
    config = resolve_config(args)
    bundle = load_bundle(config, args.split)
    path = args.checkpoint or default_checkpoint(config)
    checkpoint = load_checkpoint(path, bundle.m)
    if checkpoint.params.s not in (0, bundle.s):
        raise CheckpointError(f"checkpoint has s={checkpoint.params.s} categories, the split has {bundle.s}")
    condition = category_index(bundle, args.condition)
    if condition >= 0 and checkpoint.params.s == 0:
        logger.warning("Checkpoint is unconditioned; --condition is ignored")
    history = read_history(args.history)
    for item_id, score in recommend(checkpoint.to_model(), history, bundle.item_ids, condition, args.top_n):
        print(f"{item_id}\t{score:.6f}")
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def _global_flags(parser: argparse.ArgumentParser, suppress: bool) -> None:
    default = argparse.SUPPRESS if suppress else None
    parser.add_argument("--config", default=default, help="run config JSON file")
    parser.add_argument("--seed", type=int, default=default, help="override the run and training seeds")
    parser.add_argument("--threads", type=int, default=default,
                        help="worker threads per batch (0 = deterministic single-threaded reference)")
    parser.add_argument("--verbose", action="store_true", default=argparse.SUPPRESS if suppress else False,
                        help="debug logging")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cvaerec", description=settings.PROJECT_NAME)
    _global_flags(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fixture", help="write the synthetic block-structured dataset")
    _global_flags(p, suppress=True)
    p.add_argument("--out", default="fixture", help="output directory")
    p.add_argument("--preset", default="fixture", help="preset recorded in the generated config")
    p.add_argument("--users", type=int, default=FixtureSpec.n_users)
    p.set_defaults(func=cmd_fixture)

    p = sub.add_parser("preprocess", help="filter ratings, load categories, split users")
    _global_flags(p, suppress=True)
    p.add_argument("--preset", help="dataset preset (ml-20m, netflix, yelp, fixture)")
    p.add_argument("--out", help="split directory (default <artifacts>/split)")
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("train", help="two-phase beta-annealed training")
    _global_flags(p, suppress=True)
    p.add_argument("--split", help="split directory")
    p.add_argument("--out", help="training directory")
    p.add_argument("--phase", choices=["1", "2", "both"], default="both")
    p.add_argument("--beta-cap", type=float, help="cap for phase 2 (or for phase 1 when run alone)")
    p.add_argument("--max-epochs", type=int)
    p.add_argument("--resume", action="store_true", help="continue from last.ckpt")
    p.add_argument("--unconditioned", action="store_true", help="train the s=0 Mult-VAE baseline")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="ranking metrics on held-out users")
    _global_flags(p, suppress=True)
    p.add_argument("--split", help="split directory")
    p.add_argument("--out", help="report directory")
    p.add_argument("--checkpoint")
    p.add_argument("--baseline-checkpoint", help="s=0 model evaluated with condition filtering")
    p.add_argument("--protocol", choices=["total", "normal", "conditioned"])
    p.add_argument("--on", choices=["test", "validation"], default="test")
    p.add_argument("--dump-cases", action="store_true", help="write per-case metrics to cases.csv")
    p.add_argument("--oracle", action="store_true", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("analyze", help="ranking distribution, purity, latents, PCA")
    _global_flags(p, suppress=True)
    p.add_argument("--which", choices=["ranking", "purity", "latent", "pca"], required=True)
    p.add_argument("--split", help="split directory")
    p.add_argument("--out", help="analysis directory")
    p.add_argument("--checkpoint")
    p.add_argument("--filtered", action="store_true", help="the checkpoint is an s=0 model; filter its output")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("recommend", help="top-N items for a history file")
    _global_flags(p, suppress=True)
    p.add_argument("--history", required=True, help="file with one item id per line")
    p.add_argument("--condition", help="category label")
    p.add_argument("-N", "--top-n", type=int, default=10)
    p.add_argument("--split", help="split directory")
    p.add_argument("--checkpoint")
    p.set_defaults(func=cmd_recommend)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    setup_logging(args.verbose)
    try:
        return args.func(args)
    except (CVAEError, FileNotFoundError) as e:
        logger.error(str(e))
        return 1


if __name__ == "__main__":
    sys.exit(main())
