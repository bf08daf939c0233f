"""Command-line entry point.

    python main.py run --preset isotropic [--search] [--prescribe]
    python main.py simulate --preset isotropic --m 10 --n 1000
    python main.py train --method rss --preset isotropic --n 1000 --set scenario.train.robust.lambda=100
    python main.py search --preset isotropic --n 100 [--prescribe]
    python main.py bounds --set m=[10,100] --set n=[100,1000,10000] --set d=[200]
    python main.py ingest --labeled emb_labeled.csv --unlabeled emb_unlabeled.csv --label-map histopathology

Every verb accepts ``--config file.json`` and repeated ``--set dotted.key=value``
overrides (values parsed as YAML). Exit status is 0 only when everything succeeded.
"""
import argparse
import json
import logging
import os
import sys
from typing import Any, Dict, List, Optional

import yaml
from pydantic import ValidationError

from config import settings
from errors import RSSError
from schemas import BoundGrid, EmbeddingSchema, Method, Scenario, ScenarioMode, SearchSpace
from services.experiments import (
    derive_seed,
    emit_bound_sweep,
    load_embedding_pools,
    prescribe_cell,
    run_scenario,
    simulate_cell,
    validation_objective,
)
from services.hyperparams import apply_hyperparameters, random_search
from services.ingestion import export_labeled, export_unlabeled, ingest_embeddings, read_labeled_csv, \
    read_unlabeled_csv, summarize
from services.reporting import write_trial_log, write_train_report
from services.rss_trainer import robust_erm, train_erm, train_rss
from utils.preset_loader import preset_loader

logging.basicConfig(
    level=settings.LOG_LEVEL,
    format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
)
logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# Configuration assembly
# ---------------------------------------------------------------------------

def _deep_merge(base: Dict[str, Any], update: Dict[str, Any]) -> Dict[str, Any]:
    for key, value in update.items():
        if isinstance(value, dict) and isinstance(base.get(key), dict):
            _deep_merge(base[key], value)
        else:
            base[key] = value
    return base


def _apply_override(config: Dict[str, Any], assignment: str) -> None:
    if "=" not in assignment:
        raise ValueError(f"override must look like key=value, got {assignment!r}")
    path, raw = assignment.split("=", 1)
    keys = path.strip().split(".")
    current = config
    for key in keys[:-1]:
        current = current.setdefault(key, {})
        if not isinstance(current, dict):
            raise ValueError(f"cannot override inside non-mapping key {key!r}")
    current[keys[-1]] = yaml.safe_load(raw)


def load_config(base: Dict[str, Any], config_path: Optional[str], overrides: List[str]) -> Dict[str, Any]:
    """``base`` (usually a preset), then the JSON file, then ``--set`` overrides, merged into one dict."""
    config = dict(base)
    if config_path:
        with open(config_path, "r", encoding="utf-8") as handle:
            _deep_merge(config, json.load(handle))
    for assignment in overrides or []:
        _apply_override(config, assignment)
    return config


def _scenario(args) -> Scenario:
    base = {"scenario": preset_loader.scenario(args.preset)} if args.preset else {}
    config = load_config(base, args.config, args.set)
    data = config.get("scenario", {})
    data.setdefault("seeds", [args.seed])
    return Scenario.model_validate(data)


def _output_dir(args, *parts: str) -> str:
    return os.path.join(args.output_dir or settings.RSS_OUTPUT_DIR, *parts)


def _print(payload: Any) -> None:
    print(json.dumps(payload, indent=2, sort_keys=True, default=str))


# ---------------------------------------------------------------------------
# Verbs
# ---------------------------------------------------------------------------

def _cell_data(args, scenario: Scenario):
    """(labeled, unlabeled, test) from CSV files or a simulated cell."""
    if args.labeled:
        labeled = read_labeled_csv(args.labeled, scenario.embedding_schema.label_map)
        unlabeled = read_unlabeled_csv(args.unlabeled) if args.unlabeled else None
        test = read_labeled_csv(args.test, scenario.embedding_schema.label_map) if args.test else None
        return labeled, unlabeled, test
    if scenario.mode == ScenarioMode.EMBEDDINGS:
        pools = load_embedding_pools(scenario)
        return pools.labeled, pools.unlabeled, pools.test
    return simulate_cell(scenario, args.seed, args.m, args.n)


def cmd_simulate(args) -> int:
    scenario = _scenario(args)
    labeled, unlabeled, test = simulate_cell(scenario, args.seed, args.m, args.n)
    directory = _output_dir(args, scenario.scenario_id, f"seed{args.seed}_m{args.m}_n{args.n}")
    paths = {
        "labeled": export_labeled(labeled, os.path.join(directory, "labeled.csv")),
        "unlabeled": export_unlabeled(unlabeled, os.path.join(directory, "unlabeled.csv")),
        "test": export_labeled(test, os.path.join(directory, "test.csv")),
    }
    _print(paths)
    return 0


def cmd_train(args) -> int:
    scenario = _scenario(args)
    labeled, unlabeled, test = _cell_data(args, scenario)
    hyper = (scenario.hyperparameters or {}).get(unlabeled.n if unlabeled is not None else 0, {})
    name = f"{scenario.scenario_id}_seed{args.seed}_{args.method.lower()}"
    method = Method(args.method)
    if method == Method.ERM:
        report = train_erm(labeled, (scenario.erm_train or scenario.train).model_copy(update={"seed": args.seed}),
                           test=test)
    else:
        cfg = apply_hyperparameters(scenario.train.model_copy(update={"seed": args.seed}), hyper)
        if method == Method.ROBUST_ERM:
            report = robust_erm(labeled, cfg, test=test)
        elif unlabeled is None:
            raise ValueError("RSS training needs unlabeled data")
        else:
            report = train_rss(labeled, unlabeled, cfg, test=test)
    paths = write_train_report(report, _output_dir(args, "reports"), name)
    _print({"method": report.method.value, "train_accuracy": report.train_accuracy,
            "test_accuracy": report.test_accuracy, "files": paths})
    return 0


def cmd_search(args) -> int:
    scenario = _scenario(args)
    labeled, unlabeled, _ = _cell_data(args, scenario)
    if unlabeled is None:
        raise ValueError("the search needs unlabeled data")
    m, n = labeled.m, unlabeled.n
    payload: Dict[str, Any] = {}
    prescribed = None
    if args.prescribe:
        prescribed = prescribe_cell(scenario, m, unlabeled, derive_seed(args.seed, "prescribe", m, n))
        payload["prescription"] = prescribed.details
        if prescribed.feasible:
            unlabeled = prescribed.unlabeled
    train_cfg = scenario.train.model_copy(update={"seed": args.seed})
    erm_cfg = (scenario.erm_train or scenario.train).model_copy(update={"seed": args.seed})
    objective = validation_objective(labeled, unlabeled, train_cfg, erm_cfg, derive_seed(args.seed, "folds", m, n))
    result = random_search(SearchSpace(), args.trials or scenario.search_trials, objective,
                           seed=derive_seed(args.seed, "search", m, n), max_workers=args.workers or 1)
    path = write_trial_log(result, _output_dir(args, f"{scenario.scenario_id}_trials.csv"))
    payload.update({"best_index": result.best_index, "best_score": result.best_score,
                    "best_hyperparameters": result.best_hyperparameters, "trial_log": path})
    if prescribed is not None and prescribed.feasible:
        hyper = {**result.best_hyperparameters, **prescribed.hyperparameters}
        payload["prescribed_hyperparameters"] = hyper
        payload["prescribed_score"] = objective(hyper)
    _print(payload)
    return 0


def cmd_bounds(args) -> int:
    base = preset_loader.get(f"{args.preset}.grid", {}) if args.preset else {}
    grid = BoundGrid.model_validate(load_config(base, args.config, args.set))
    path = emit_bound_sweep(grid, args.output or _output_dir(args, "bound_sweep.csv"))
    _print({"sweep": path})
    return 0


def cmd_ingest(args) -> int:
    schema = EmbeddingSchema()
    if args.label_map:
        label_map = preset_loader.get(f"{args.label_map}.label_map")
        if label_map is None:
            raise ValueError(f"no label map preset named {args.label_map!r}")
        schema = EmbeddingSchema(label_map={str(key): value for key, value in label_map.items()})
    labeled, unlabeled = ingest_embeddings(args.labeled, args.unlabeled, schema)
    _print(summarize(labeled, unlabeled))
    return 0


def cmd_run(args) -> int:
    scenario = _scenario(args)
    rows = run_scenario(scenario, output_dir=args.output_dir, max_workers=args.workers,
                        force_search=args.search, prescribe=args.prescribe)
    for row in rows:
        logger.info(f"{row.method.value} m={row.labeled_size} n={row.unlabeled_size}: "
                    f"median={row.median_accuracy} mean={row.mean_accuracy} status={row.status}")
    return 0 if all(row.status == "ok" for row in rows) else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="Robust self-supervised training bench")
    subparsers = parser.add_subparsers(dest="command", required=True)

    def common(sub):
        sub.add_argument("--preset", help="preset name in experiments.yml")
        sub.add_argument("--config", help="JSON config file")
        sub.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                         help="dotted override, e.g. scenario.train.epochs=20")
        sub.add_argument("--output-dir", help=f"defaults to RSS_OUTPUT_DIR ({settings.RSS_OUTPUT_DIR})")
        sub.add_argument("--seed", type=int, default=0)
        return sub

    def cell(sub):
        sub.add_argument("--m", type=int, default=10, help="labeled size")
        sub.add_argument("--n", type=int, default=1000, help="unlabeled size")
        sub.add_argument("--labeled", help="labeled CSV instead of simulation")
        sub.add_argument("--unlabeled", help="unlabeled CSV")
        sub.add_argument("--test", help="labeled test CSV")
        return sub

    simulate = cell(common(subparsers.add_parser("simulate", help="export simulated CSV sets")))
    simulate.set_defaults(handler=cmd_simulate)

    train = cell(common(subparsers.add_parser("train", help="train ERM or RSS on one cell")))
    train.add_argument("--method", choices=[method.value for method in Method], default=Method.RSS.value,
                       type=str.upper)
    train.set_defaults(handler=cmd_train)

    search = cell(common(subparsers.add_parser("search", help="random search for one cell")))
    search.add_argument("--trials", type=int)
    search.add_argument("--workers", type=int)
    search.add_argument("--prescribe", action="store_true",
                        help="also report the prescribed gamma and gamma' from a held-out unlabeled half")
    search.set_defaults(handler=cmd_search)

    bounds = common(subparsers.add_parser("bounds", help="write an isotropic bound sweep"))
    bounds.add_argument("--output", help="CSV path")
    bounds.set_defaults(handler=cmd_bounds)

    ingest = subparsers.add_parser("ingest", help="validate and summarize embedding CSVs")
    ingest.add_argument("--labeled", required=True)
    ingest.add_argument("--unlabeled", required=True)
    ingest.add_argument("--label-map", help="preset holding a label_map, e.g. histopathology")
    ingest.set_defaults(handler=cmd_ingest)

    run = common(subparsers.add_parser("run", help="run a full scenario"))
    run.add_argument("--workers", type=int)
    run.add_argument("--search", action="store_true", help="ignore logged hyperparameters and search every cell")
    run.add_argument("--prescribe", action="store_true",
                     help="override gamma and gamma' with feasible prescriptions per cell")
    run.set_defaults(handler=cmd_run)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.handler(args)
    except (RSSError, ValidationError, ValueError, KeyError, OSError) as e:
        logger.error(f"{args.command} failed: {e}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
