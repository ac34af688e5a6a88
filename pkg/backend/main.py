"""
TMA Scoring - command-line entry point

Texture-based scoring of tissue microarray images with confidence-gated
instance transfer from auxiliary sources.

Subcommands:
1. synth           - render a synthetic corpus from a JSON spec
2. extract         - manifest -> features CSV (spatial histogram features)
3. train           - fit a forest and save it as JSON
4. transfer-score  - gate auxiliary sets, refit, and score against the baseline
5. evaluate        - separation ratio (and optionally accuracy of a saved model)
6. pca-export      - first two principal components as CSV + JSON sidecar

Exit codes: 0 success, 1 validation or usage error, 2 I/O error.
"""

import argparse
import json
import logging
import sys
from collections import OrderedDict
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence

from pydantic import ValidationError as PydanticValidationError
from rich.table import Table

from runtime import (DEFAULT_SYNTH_SPEC_PATH, LOG_LEVELS, ScoringSettings, configure_logging, console,
                     default_threads, load_settings)
from scoring.errors import ScoringError, ValidationError
from scoring.evaluation import evaluate_model, pca_project, separation_ratio
from scoring.features import FeatureTable, load_dataset
from scoring.forest import ForestParams, LabeledInstance, load_model, resolve_mtry, save_model, train_forest
from scoring.synthgen import generate, load_spec, summarize_sources
from scoring.texture import DIRECTION_STEPS, TextureExtractor
from scoring.transfer import (ExperimentReport, TransferConfig, run_experiment, run_fixed_split, run_split,
                              transferred_training_set)

logger = logging.getLogger("tma_scoring")


class UsageError(Exception):
    pass


class CliParser(argparse.ArgumentParser):
    """argparse parser whose usage errors exit with code 1 instead of 2"""

    def error(self, message: str):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


# ============================================================================
# Argument parsing
# ============================================================================

def _common_options() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, help="root seed for every random stream")
    common.add_argument("--threads", type=int, help="worker cap (default: $TMA_THREADS or all cores)")
    common.add_argument("--log-level", choices=LOG_LEVELS, help="log verbosity")
    common.add_argument("--config", help="YAML settings file (default: configs/scoring_config.yaml)")
    return common


def _texture_options() -> argparse.ArgumentParser:
    texture = argparse.ArgumentParser(add_help=False)
    texture.add_argument("--levels", type=int, help="gray levels after quantization (default 51)")
    texture.add_argument("--direction", type=int, choices=sorted(DIRECTION_STEPS), help="pair direction in degrees")
    texture.add_argument("--distance", type=int, help="pair distance in pixels")
    texture.add_argument("--raw", action="store_true", help="raw pair counts instead of normalized histograms")
    texture.add_argument("--pool-directions", action="store_true", help="sum the four direction histograms")
    return texture


def _forest_options() -> argparse.ArgumentParser:
    forest = argparse.ArgumentParser(add_help=False)
    forest.add_argument("--trees", type=int, help="trees per forest (default 100)")
    forest.add_argument("--min-node-size", type=int, help="nodes this small become leaves (default 1)")
    return forest


def build_parser() -> argparse.ArgumentParser:
    common, texture, forest = _common_options(), _texture_options(), _forest_options()
    parser = CliParser(prog="tma-score", description="Texture scoring of TMA images with instance transfer")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=CliParser, metavar="COMMAND")

    synth = sub.add_parser("synth", parents=[common], help="render a synthetic corpus")
    synth.add_argument("--spec", default=str(DEFAULT_SYNTH_SPEC_PATH), help="synth spec JSON")
    synth.add_argument("--out", required=True, help="output directory")
    synth.add_argument("--images-per-class", type=int, help="override the primary images per class")

    extract = sub.add_parser("extract", parents=[common, texture], help="manifest -> features CSV")
    extract.add_argument("--manifest", required=True, help="path,label,source CSV")
    extract.add_argument("--out", required=True, help="features CSV (path,label,source,f0..)")

    train = sub.add_parser("train", parents=[common, texture, forest], help="fit and save a forest")
    train.add_argument("--train", required=True, help="features CSV or manifest")
    train.add_argument("--mtry", help="sqrt, 2sqrt or an integer (default sqrt)")
    train.add_argument("--out", required=True, help="model JSON")
    train.add_argument("--test-features", help="features CSV or manifest to score the new model on")

    score = sub.add_parser("transfer-score", parents=[common, texture, forest],
                           help="gate auxiliary sets, refit and compare against the baseline")
    score.add_argument("--train-manifest", required=True, help="primary set (manifest or features CSV)")
    score.add_argument("--aux-manifest", action="append", default=[], metavar="NAME=PATH",
                       help="auxiliary source, repeatable; gated in the order given")
    score.add_argument("--test-manifest", help="fixed test set; omit to split the primary set")
    score.add_argument("--split", type=float, help="train fraction of the primary set (default 0.5)")
    score.add_argument("--runs", type=int, help="seeded splits to average over (default 1)")
    score.add_argument("--stratified", action="store_true", help="split each label separately")
    score.add_argument("--beta", type=float, help="confidence threshold (default 0.10)")
    score.add_argument("--mtry", help="sqrt, 2sqrt, an integer, or a comma list to compare")
    score.add_argument("--pooled-baseline", action="store_true", help="also score train + all aux without gating")
    score.add_argument("--no-per-source", action="store_true", help="skip the one-source-at-a-time arms")
    score.add_argument("--export-transferred", metavar="FEATURES_CSV",
                       help="write train + transferred instances of run 0 (first --mtry) as a features CSV")
    score.add_argument("--out", required=True, help="report JSON")

    evaluate = sub.add_parser("evaluate", parents=[common, texture], help="separation ratio and model accuracy")
    evaluate.add_argument("--features", required=True, help="features CSV or manifest")
    evaluate.add_argument("--model", help="saved forest to score on the same data")
    evaluate.add_argument("--out", required=True, help="report JSON")

    pca = sub.add_parser("pca-export", parents=[common, texture], help="2-D PCA scores for plotting")
    pca.add_argument("--features", required=True, help="features CSV or manifest")
    pca.add_argument("--out", required=True, help="CSV path,label,source,pc1,pc2 (+ <out>.json)")

    return parser


# ============================================================================
# Helpers
# ============================================================================

def _pick(value: Any, fallback: Any) -> Any:
    return fallback if value is None else value


def _threads(args: argparse.Namespace, settings: ScoringSettings) -> int:
    threads = _pick(args.threads, settings.threads)
    if threads is None:
        return default_threads()
    if threads < 1:
        raise ValidationError(f"--threads must be >= 1, got {threads}")
    return threads


def _extractor(args: argparse.Namespace, settings: ScoringSettings) -> TextureExtractor:
    t = settings.texture
    return TextureExtractor(
        levels=_pick(args.levels, t.levels),
        direction=_pick(args.direction, t.direction),
        distance=_pick(args.distance, t.distance),
        normalize=t.normalize and not args.raw,
        pool_directions=t.pool_directions or args.pool_directions,
    )


def _representation(extractor: TextureExtractor) -> str:
    return "normalized" if extractor.normalize else "raw"


def _parse_aux(values: Sequence[str]) -> "OrderedDict[str, str]":
    aux: "OrderedDict[str, str]" = OrderedDict()
    for value in values:
        name, sep, path = value.partition("=")
        name, path = name.strip(), path.strip()
        if not sep or not name or not path:
            raise UsageError(f"--aux-manifest expects NAME=PATH, got {value!r}")
        if name in aux:
            raise UsageError(f"--aux-manifest name {name!r} given twice")
        aux[name] = path
    return aux


def _write_json(payload: Any, path: str) -> Path:
    out = Path(path)
    out.write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")
    logger.info(f"[CLI] wrote {out}")
    return out


def _fmt(mean: Optional[float], std: Optional[float] = None) -> str:
    if mean is None:
        return "-"
    return f"{mean:.4f}" if std is None else f"{mean:.4f} ± {std:.4f}"


def _print_experiment(reports: List[ExperimentReport]) -> None:
    table = Table(title="Transfer scoring")
    table.add_column("mtry")
    table.add_column("runs", justify="right")
    table.add_column("no transfer", justify="right")
    table.add_column("with transfer", justify="right")
    table.add_column("pooled", justify="right")
    table.add_column("rho before", justify="right")
    table.add_column("rho after", justify="right")
    table.add_column("wins", justify="right")
    table.add_column("pooled wins", justify="right")
    for report in reports:
        s = report.summary
        table.add_row(
            str(report.mtry),
            str(s.runs),
            _fmt(s.accuracy_without_transfer.mean, s.accuracy_without_transfer.std),
            _fmt(s.accuracy_with_transfer.mean, s.accuracy_with_transfer.std),
            _fmt(s.accuracy_pooled.mean, s.accuracy_pooled.std) if s.accuracy_pooled else "-",
            _fmt(s.rho_before.mean),
            _fmt(s.rho_after.mean),
            f"{s.transfer_wins}/{s.runs}",
            f"{s.pooled_wins}/{s.runs}" if s.pooled_wins is not None else "-",
        )
    console.print(table)


def _export_transferred(path: str, primary: FeatureTable, aux_sets: Dict[str, List[LabeledInstance]],
                        report: ExperimentReport, config: TransferConfig, fixed: bool) -> None:
    """Features CSV of run 0's enlarged training set, readable by pca-export and evaluate"""
    first = report.runs[0]
    train = primary.to_instances() if fixed else run_split(primary.to_instances(), config, first.run)[0]
    enlarged = transferred_training_set(train, aux_sets, first)
    FeatureTable.from_instances(enlarged).to_csv(path)
    logger.info(f"[CLI] {len(enlarged)} training instances ({len(enlarged) - len(train)} transferred) -> {path}")


# ============================================================================
# Subcommands
# ============================================================================

def cmd_synth(args: argparse.Namespace, settings: ScoringSettings) -> int:
    spec = load_spec(args.spec)
    updates: Dict[str, Any] = {}
    if args.seed is not None:
        updates["seed"] = args.seed
    if args.images_per_class is not None:
        updates["images_per_class"] = args.images_per_class
    if updates:
        spec = spec.model_validate({**spec.model_dump(), **updates})

    results = generate(spec, args.out, _threads(args, settings))
    table = Table(title=f"Synthetic corpus (seed {spec.seed})")
    table.add_column("source")
    table.add_column("images", justify="right")
    table.add_column("manifest")
    for name, count, manifest in summarize_sources(results):
        table.add_row(name, str(count), manifest)
    console.print(table)
    return 0


def cmd_extract(args: argparse.Namespace, settings: ScoringSettings) -> int:
    extractor = _extractor(args, settings)
    table = load_dataset(args.manifest, extractor, _threads(args, settings))
    table.to_csv(args.out)
    logger.info(f"[CLI] {len(table)} rows x {table.n_features} features -> {args.out}")
    return 0


def cmd_train(args: argparse.Namespace, settings: ScoringSettings) -> int:
    extractor = _extractor(args, settings)
    threads = _threads(args, settings)
    data = load_dataset(args.train, extractor, threads)
    test = load_dataset(args.test_features, extractor, threads) if args.test_features else None

    params = ForestParams(
        trees=_pick(args.trees, settings.forest.trees),
        mtry=resolve_mtry(_pick(args.mtry, settings.forest.mtry), data.n_features),
        seed=_pick(args.seed, settings.seed),
        min_node_size=_pick(args.min_node_size, settings.forest.min_node_size),
    )
    forest = train_forest(data.to_instances(), params, threads)
    Path(args.out).write_bytes(save_model(forest))
    logger.info(f"[CLI] model with {forest.n_trees} trees -> {args.out}")

    if test is not None:
        score = evaluate_model(forest, test.to_instances())
        console.print(f"[bold]test accuracy[/bold] {score:.4f} on {len(test)} instances")
    return 0


def cmd_transfer_score(args: argparse.Namespace, settings: ScoringSettings) -> int:
    if args.test_manifest and (args.runs is not None or args.split is not None or args.stratified):
        raise UsageError("--test-manifest cannot be combined with --split, --runs or --stratified")
    aux_paths = _parse_aux(args.aux_manifest)
    mtry_values = [m.strip() for m in _pick(args.mtry, settings.forest.mtry).split(",") if m.strip()]
    if not mtry_values:
        raise UsageError("--mtry is empty")

    ts = settings.transfer
    seed = _pick(args.seed, settings.seed)
    runs = _pick(args.runs, ts.runs)
    extractor = _extractor(args, settings)
    threads = _threads(args, settings)

    train = load_dataset(args.train_manifest, extractor, threads)
    aux: Dict[str, FeatureTable] = OrderedDict(
        (name, load_dataset(path, extractor, threads)) for name, path in aux_paths.items())
    test = load_dataset(args.test_manifest, extractor, threads) if args.test_manifest else None
    for mtry in mtry_values:
        resolve_mtry(mtry, train.n_features)

    aux_sets = {name: table.to_instances() for name, table in aux.items()}
    reports: List[ExperimentReport] = []
    for mtry in mtry_values:
        config = TransferConfig(
            beta=_pick(args.beta, ts.beta),
            trees=_pick(args.trees, settings.forest.trees),
            mtry=mtry,
            seed=seed,
            min_node_size=_pick(args.min_node_size, settings.forest.min_node_size),
            aux_sources=list(aux),
            split=_pick(args.split, ts.split),
            stratified=args.stratified or ts.stratified,
            pooled_baseline=args.pooled_baseline,
            per_source=ts.per_source and not args.no_per_source,
            threads=threads,
            representation=_representation(extractor),
        )
        if test is not None:
            reports.append(run_fixed_split(train.to_instances(), aux_sets, test.to_instances(), config))
        else:
            reports.append(run_experiment(train.to_instances(), aux_sets, config, runs))

    payload = {
        "config": {
            "train": args.train_manifest,
            "aux": dict(aux_paths),
            "test": args.test_manifest,
            "texture": extractor.describe(),
            "beta": config.beta,
            "trees": config.trees,
            "mtry": mtry_values,
            "min_node_size": config.min_node_size,
            "seed": seed,
            "runs": 1 if test is not None else runs,
            "split": None if test is not None else config.split,
            "stratified": config.stratified,
            "pooled_baseline": config.pooled_baseline,
            "per_source": config.per_source,
        },
        "mtry_reports": [report.model_dump() for report in reports],
    }
    if args.export_transferred:
        _export_transferred(args.export_transferred, train, aux_sets, reports[0], config, fixed=test is not None)
    _write_json(payload, args.out)
    _print_experiment(reports)
    return 0


def cmd_evaluate(args: argparse.Namespace, settings: ScoringSettings) -> int:
    extractor = _extractor(args, settings)
    data = load_dataset(args.features, extractor, _threads(args, settings)).to_instances()
    payload: Dict[str, Any] = separation_ratio(data, _representation(extractor)).model_dump()
    if args.model:
        forest = load_model(Path(args.model).read_bytes())
        payload["accuracy"] = evaluate_model(forest, data)
    _write_json(payload, args.out)
    console.print(f"[bold]rho[/bold] {payload['rho']:.6g}"
                  + (f"  [bold]accuracy[/bold] {payload['accuracy']:.4f}" if "accuracy" in payload else ""))
    return 0


def cmd_pca_export(args: argparse.Namespace, settings: ScoringSettings) -> int:
    extractor = _extractor(args, settings)
    data = load_dataset(args.features, extractor, _threads(args, settings)).to_instances()
    projection = pca_project(data)
    out = Path(args.out)
    projection.to_frame().to_csv(out, index=False, float_format="%.17g", lineterminator="\n")
    _write_json(projection.summary(), str(out) + ".json")
    return 0


COMMANDS: Dict[str, Callable[[argparse.Namespace, ScoringSettings], int]] = {
    "synth": cmd_synth,
    "extract": cmd_extract,
    "train": cmd_train,
    "transfer-score": cmd_transfer_score,
    "evaluate": cmd_evaluate,
    "pca-export": cmd_pca_export,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    """
    Parse argv, run one subcommand, map failures to exit codes

    Returns:
        0 on success, 1 on validation/usage errors, 2 on I/O errors
    """
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(e, file=sys.stderr)
        return 1
    except SystemExit as e:
        return int(e.code or 0)

    try:
        settings = load_settings(args.config)
        configure_logging(args.log_level or settings.log_level)
        return COMMANDS[args.command](args, settings)
    except UsageError as e:
        logger.error(f"[CLI] {e}")
        return 1
    except OSError as e:
        logger.error(f"[CLI] I/O error: {e}", exc_info=logger.isEnabledFor(logging.DEBUG))
        return 2
    except (ScoringError, PydanticValidationError, ValueError) as e:
        logger.error(f"[CLI] {e}", exc_info=logger.isEnabledFor(logging.DEBUG))
        return 1


if __name__ == "__main__":
    sys.exit(main())
