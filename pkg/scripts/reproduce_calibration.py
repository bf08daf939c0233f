#!/usr/bin/env python3
"""
Reproduce the isotropic calibration table (ERM vs RSS accuracy by unlabeled size).

Runs the `isotropic` preset (and optionally `shifted`) and prints the median test
accuracy per unlabeled size next to the ERM baseline. Hyperparameters come from
the random search unless `--pinned` selects the hand-set `*_pinned` presets.

Usage:
    python scripts/reproduce_calibration.py [--shifted] [--seeds 10] [--workers 4] [--pinned]
"""

import sys
import os
import argparse
import logging

# Allow imports from the project root
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from config import settings
from schemas import Method, Scenario
from services.experiments import run_scenario
from utils.preset_loader import preset_loader

logging.basicConfig(level=logging.INFO, format="%(asctime)s %(levelname)s %(message)s")
logger = logging.getLogger(__name__)


def build_scenario(preset: str, seeds: int) -> Scenario:
    data = preset_loader.scenario(preset)
    data["seeds"] = list(range(seeds))
    return Scenario.model_validate(data)


def print_table(rows) -> None:
    erm = next((row for row in rows if row.method == Method.ERM), None)
    print(f"{'scenario':<16} {'n':>7} {'ERM':>7} {'RSS':>7} {'status'}")
    for row in rows:
        if row.method != Method.RSS:
            continue
        erm_value = f"{erm.median_accuracy:.3f}" if erm and erm.median_accuracy is not None else "-"
        rss_value = f"{row.median_accuracy:.3f}" if row.median_accuracy is not None else "-"
        print(f"{row.scenario_id:<16} {row.unlabeled_size:>7} {erm_value:>7} {rss_value:>7} {row.status}")


def main():
    parser = argparse.ArgumentParser(description="Reproduce the ERM vs RSS calibration table")
    parser.add_argument("--shifted", action="store_true", help="also run the shifted unlabeled block")
    parser.add_argument("--seeds", type=int, default=10, help="number of seeds (median is reported)")
    parser.add_argument("--workers", type=int, default=settings.RSS_MAX_WORKERS)
    parser.add_argument("--pinned", action="store_true",
                        help="use the hand-set lambda per n instead of the random search")
    parser.add_argument("--output-dir", default=settings.RSS_OUTPUT_DIR)
    args = parser.parse_args()

    presets = ["isotropic", "shifted"] if args.shifted else ["isotropic"]
    if args.pinned:
        presets = [f"{preset}_pinned" for preset in presets]
    failed = False
    for preset in presets:
        scenario = build_scenario(preset, args.seeds)
        logger.info(f"Running {preset} with {args.seeds} seeds")
        rows = run_scenario(scenario, output_dir=os.path.join(args.output_dir, preset), max_workers=args.workers)
        print_table(rows)
        failed = failed or any(row.status != "ok" for row in rows)
    sys.exit(1 if failed else 0)


if __name__ == "__main__":
    main()
