"""End-to-end scenario runs and bound sweeps.

A scenario is split into independent work units, one per (seed, labeled
size). Each unit trains the ERM baseline once, then one RSS model per
unlabeled size, and reports test accuracies. Units are seeded from
(seed, purpose, sizes) alone, so results do not depend on the pool size or
on scheduling. Aggregation over seeds is the only serialization point.
"""
import itertools
import json
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from typing import Any, Callable, Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from cache_utils import baseline_key, get_cached_baseline, set_cached_baseline
from config import settings
from models import Model, accuracy
from schemas import (
    BoundGrid,
    BoundInputs,
    GmmSpec,
    LabeledSet,
    Method,
    ResultRow,
    Scenario,
    ScenarioMode,
    SearchSpace,
    TrainConfig,
    UnlabeledSet,
)
from services.bounds import corollary1_check, thm1_residual, thm2_residual
from services.gmm_data import (
    general_spec,
    isotropic_spec,
    make_shifted_spec,
    random_unit_vector,
    sample_labeled,
    sample_test_set,
    sample_unlabeled,
)
from services.hyperparams import (
    apply_hyperparameters,
    estimate_general_constants,
    estimate_spectrum,
    general_gamma_prime,
    isotropic_scale_hat,
    prescribe_general,
    prescribe_isotropic,
    random_search,
    split_unlabeled,
    unlabeled_infimum,
)
from services.ingestion import ingest_embeddings, read_labeled_csv
from services.reporting import write_csv, write_results, write_timings, write_train_report
from services.rss_trainer import train_erm, train_rss

logger = logging.getLogger(__name__)

_SEED_TAGS = {"spec": 1, "shift": 2, "labeled": 3, "test": 4, "unlabeled": 5, "search": 6,
              "train": 7, "holdout": 8, "folds": 9, "prescribe": 10}

HOLDOUT_FRACTION = 0.2
HOLDOUT_MIN_LABELED = 20

SWEEP_COLUMNS = ["m", "n", "d", "alpha", "delta", "gamma",
                 "thm1_residual", "thm1_alpha_term", "thm1_n_term", "thm1_m_term",
                 "thm2_residual", "thm2_prefactor", "thm2_inner", "thm2_m_term",
                 "advantage", "dim_free"]


def derive_seed(seed: int, purpose: str, *sizes: int) -> int:
    """Independent 32-bit seed for one purpose of one (seed, sizes) cell."""
    if seed < 0:
        raise ValueError("seeds must be nonnegative")
    return int(np.random.SeedSequence([seed, _SEED_TAGS[purpose], *sizes]).generate_state(1)[0])


class CellOutcome(NamedTuple):
    seed: int
    labeled_size: int
    unlabeled_size: int
    method: Method
    accuracy: Optional[float]
    hyperparameters: Dict[str, float]
    wall_clock_seconds: float
    status: str


class EmbeddingPools(NamedTuple):
    labeled: LabeledSet
    unlabeled: UnlabeledSet
    test: Optional[LabeledSet]


# ---------------------------------------------------------------------------
# Data for one cell
# ---------------------------------------------------------------------------

def scenario_spec(scenario: Scenario, seed: int) -> GmmSpec:
    """Mixture for one seed: random mean direction, then the scenario's shift."""
    spec_seed = derive_seed(seed, "spec")
    if scenario.mode == ScenarioMode.SIMULATED_ISO:
        base = isotropic_spec(scenario.d, scenario.mean_norm, scenario.sigma, seed=spec_seed)
    elif scenario.mode == ScenarioMode.SIMULATED_GENERAL:
        mu0 = scenario.mean_norm * random_unit_vector(scenario.d, np.random.default_rng(spec_seed))
        base = general_spec(mu0, scenario.eigenvalues, seed=spec_seed)
    else:
        raise ValueError("embedding scenarios have no mixture spec")
    if scenario.alpha > 0:
        return make_shifted_spec(base, scenario.alpha, derive_seed(seed, "shift"))
    return base


def simulate_cell(scenario: Scenario, seed: int, m: int, n: int) -> Tuple[LabeledSet, UnlabeledSet, LabeledSet]:
    """(labeled, unlabeled, test) for one simulated cell."""
    spec = scenario_spec(scenario, seed)
    labeled = sample_labeled(spec, m, derive_seed(seed, "labeled", m))
    unlabeled = sample_unlabeled(spec, n, derive_seed(seed, "unlabeled", m, n))
    test = sample_test_set(spec, scenario.test_size, derive_seed(seed, "test"))
    return labeled, unlabeled, test


def load_embedding_pools(scenario: Scenario) -> EmbeddingPools:
    labeled, unlabeled = ingest_embeddings(scenario.labeled_path, scenario.unlabeled_path,
                                           scenario.embedding_schema)
    test = None
    if scenario.test_path is not None:
        test = read_labeled_csv(scenario.test_path, scenario.embedding_schema.label_map)
    return EmbeddingPools(labeled=labeled, unlabeled=unlabeled, test=test)


def _embedding_cell(pools: EmbeddingPools, seed: int, m: int) -> Tuple[LabeledSet, LabeledSet]:
    """Labeled training rows and the test set; without a test file, a seeded 20% holdout."""
    labeled_pool, test = pools.labeled, pools.test
    if test is None:
        order = np.random.default_rng(derive_seed(seed, "holdout")).permutation(labeled_pool.m)
        cut = max(1, int(round(HOLDOUT_FRACTION * labeled_pool.m)))
        test = labeled_pool.subset(order[:cut])
        labeled_pool = labeled_pool.subset(order[cut:])
    if m > labeled_pool.m:
        raise ValueError(f"only {labeled_pool.m} labeled rows available for m={m}")
    rows = np.random.default_rng(derive_seed(seed, "labeled", m)).permutation(labeled_pool.m)[:m]
    return labeled_pool.subset(rows), test


def _embedding_unlabeled(pools: EmbeddingPools, seed: int, m: int, n: int) -> UnlabeledSet:
    if n > pools.unlabeled.n:
        raise ValueError(f"only {pools.unlabeled.n} unlabeled rows available for n={n}")
    rows = np.random.default_rng(derive_seed(seed, "unlabeled", m, n)).permutation(pools.unlabeled.n)[:n]
    return UnlabeledSet(features=pools.unlabeled.features[rows])


# ---------------------------------------------------------------------------
# Validation and search
# ---------------------------------------------------------------------------

def validation_folds(m: int, seed: int) -> List[Tuple[np.ndarray, np.ndarray]]:
    """20% holdout when m >= 20, otherwise leave-one-out."""
    if m < 2:
        raise ValueError("validation needs at least 2 labeled rows")
    order = np.random.default_rng(seed).permutation(m)
    if m >= HOLDOUT_MIN_LABELED:
        cut = int(round(HOLDOUT_FRACTION * m))
        return [(np.sort(order[cut:]), np.sort(order[:cut]))]
    return [(np.delete(np.arange(m), index), np.array([index])) for index in range(m)]


def validation_objective(labeled: LabeledSet, unlabeled: UnlabeledSet, train_cfg: TrainConfig,
                         erm_cfg: TrainConfig, seed: int) -> Callable[[Dict[str, float]], float]:
    """Validation accuracy of RSS under candidate hyperparameters.

    ERM warm starts are trained once per fold and shared by every trial.
    """
    folds = validation_folds(labeled.m, seed)
    inits: List[Optional[Model]] = [
        train_erm(labeled.subset(train_rows), erm_cfg).model if train_cfg.warm_start else None
        for train_rows, _ in folds
    ]

    def objective(hyper: Dict[str, float]) -> float:
        cfg = apply_hyperparameters(train_cfg, hyper)
        correct, total = 0.0, 0
        for (train_rows, valid_rows), init in zip(folds, inits):
            report = train_rss(labeled.subset(train_rows), unlabeled, cfg, init_model=init)
            correct += accuracy(report.model, labeled.features[valid_rows], labeled.labels[valid_rows]) * len(valid_rows)
            total += len(valid_rows)
        return correct / total

    return objective


class CellPrescription(NamedTuple):
    hyperparameters: Dict[str, float]
    feasible: bool
    unlabeled: UnlabeledSet
    details: Dict[str, Any]


def prescribe_cell(scenario: Scenario, m: int, unlabeled: UnlabeledSet, seed: int, delta: float = 0.05,
                   alpha: float = 0.0, beta: float = 1.0) -> CellPrescription:
    """Prescribed gamma and gamma' for one cell from a held-out half of ``unlabeled``.

    Isotropic scenarios read sigma0 off the spectrum tail; the other modes go
    through the general-covariance plug-ins. ``unlabeled`` on the result is
    the training half, and ``hyperparameters`` is empty when infeasible.
    """
    split = split_unlabeled(unlabeled, seed)
    estimate = estimate_spectrum(split.heldout, seed=seed, split_id=split.split_id)
    d = unlabeled.d
    if scenario.mode == ScenarioMode.SIMULATED_ISO:
        prescription = prescribe_isotropic(estimate, m=m, n=split.train.n, d=d, delta=delta,
                                           sigma0_hat=isotropic_scale_hat(estimate, d), alpha=alpha)
    else:
        infimum = unlabeled_infimum(split.heldout, general_gamma_prime(estimate.lambda_max_hat, beta), estimate,
                                    seed=seed)
        mu1_hat, cov1_hat = estimate_general_constants(split.heldout, estimate)
        prescription = prescribe_general(estimate, infimum, alpha, beta, split.train.n, d, delta, m,
                                         mu1_hat, cov1_hat)
    details = {"split_id": split.split_id, "lambda_max_hat": estimate.lambda_max_hat, **prescription.model_dump()}
    hyper = {"gamma": prescription.gamma, "gamma_prime": prescription.gamma_prime} if prescription.feasible else {}
    return CellPrescription(hyper, prescription.feasible, split.train, details)


# ---------------------------------------------------------------------------
# Work units
# ---------------------------------------------------------------------------

def _spec_params(scenario: Scenario) -> Dict[str, Any]:
    return scenario.model_dump(
        mode="json",
        include={"scenario_id", "mode", "d", "mean_norm", "sigma", "shift_fraction", "eigenvalues",
                 "labeled_path", "unlabeled_path", "test_path"},
    )


def _erm_baseline(scenario: Scenario, labeled: LabeledSet, test: LabeledSet, erm_cfg: TrainConfig,
                  seed: int, m: int):
    key = baseline_key(_spec_params(scenario), seed, m, erm_cfg.model_dump_json())
    cached = get_cached_baseline(key)
    if cached is not None:
        return cached
    report = train_erm(labeled, erm_cfg, test=test)
    set_cached_baseline(key, report)
    return report


def _cell_hyperparameters(scenario: Scenario, labeled: LabeledSet, unlabeled: UnlabeledSet,
                          train_base: TrainConfig, erm_base: TrainConfig, seed: int, m: int,
                          force_search: bool, prescribe: bool) -> Tuple[Dict[str, float], UnlabeledSet]:
    """Hyperparameters for one cell and the unlabeled rows RSS trains on.

    Logged values are used unless ``force_search``; otherwise the random
    search runs. A feasible prescription overrides gamma and gamma' on top and
    leaves only the training half of the unlabeled rows.
    """
    n = unlabeled.n
    prescribed = None
    if prescribe:
        prescribed = prescribe_cell(scenario, m, unlabeled, derive_seed(seed, "prescribe", m, n))
        if prescribed.feasible:
            unlabeled = prescribed.unlabeled
        else:
            logger.info(f"Prescription infeasible for seed {seed}, m={m}, n={n}; keeping searched values")
    logged = None if force_search else (scenario.hyperparameters or {}).get(n)
    if logged is not None:
        hyper = dict(logged)
    else:
        objective = validation_objective(labeled, unlabeled, train_base, erm_base, derive_seed(seed, "folds", m, n))
        search = random_search(SearchSpace(), scenario.search_trials, objective,
                               seed=derive_seed(seed, "search", m, n))
        hyper = dict(search.best_hyperparameters)
    if prescribed is not None:
        hyper.update(prescribed.hyperparameters)
    return hyper, unlabeled


def _run_unit(scenario: Scenario, seed: int, m: int, pools: Optional[EmbeddingPools],
              reports_dir: Optional[str], force_search: bool = False,
              prescribe: bool = False) -> List[CellOutcome]:
    outcomes: List[CellOutcome] = []
    train_base = scenario.train.model_copy(update={"seed": derive_seed(seed, "train", m)})
    erm_base = (scenario.erm_train or scenario.train).model_copy(update={"seed": derive_seed(seed, "train", m)})
    try:
        if pools is None:
            spec = scenario_spec(scenario, seed)
            labeled = sample_labeled(spec, m, derive_seed(seed, "labeled", m))
            test = sample_test_set(spec, scenario.test_size, derive_seed(seed, "test"))
        else:
            spec = None
            labeled, test = _embedding_cell(pools, seed, m)
        erm = _erm_baseline(scenario, labeled, test, erm_base, seed, m)
    except Exception as e:
        logger.error(f"ERM baseline failed for seed {seed}, m={m}: {e}")
        status = f"failed: {e}"
        outcomes.append(CellOutcome(seed, m, 0, Method.ERM, None, {}, 0.0, status))
        outcomes.extend(CellOutcome(seed, m, n, Method.RSS, None, {}, 0.0, status)
                        for n in scenario.unlabeled_sizes)
        return outcomes

    outcomes.append(CellOutcome(seed, m, 0, Method.ERM, erm.test_accuracy, {}, erm.wall_clock_seconds, "ok"))
    if reports_dir:
        write_train_report(erm, reports_dir, f"{scenario.scenario_id}_seed{seed}_m{m}_erm")

    for n in scenario.unlabeled_sizes:
        started = time.perf_counter()
        hyper: Dict[str, float] = {}
        try:
            if pools is None:
                unlabeled = sample_unlabeled(spec, n, derive_seed(seed, "unlabeled", m, n))
            else:
                unlabeled = _embedding_unlabeled(pools, seed, m, n)
            hyper, unlabeled = _cell_hyperparameters(scenario, labeled, unlabeled, train_base, erm_base, seed, m,
                                                     force_search, prescribe)
            cfg = apply_hyperparameters(train_base, hyper)
            report = train_rss(labeled, unlabeled, cfg, test=test,
                               init_model=erm.model if cfg.warm_start else None)
            if reports_dir:
                write_train_report(report, reports_dir, f"{scenario.scenario_id}_seed{seed}_m{m}_n{n}_rss")
            outcomes.append(CellOutcome(seed, m, n, Method.RSS, report.test_accuracy, hyper,
                                        time.perf_counter() - started, "ok"))
            logger.info(f"{scenario.scenario_id} seed={seed} m={m} n={n}: "
                        f"ERM {erm.test_accuracy:.4f}, RSS {report.test_accuracy:.4f}")
        except Exception as e:
            logger.error(f"RSS cell failed for seed {seed}, m={m}, n={n}: {e}")
            outcomes.append(CellOutcome(seed, m, n, Method.RSS, None, hyper,
                                        time.perf_counter() - started, f"failed: {e}"))
    return outcomes


# ---------------------------------------------------------------------------
# Aggregation
# ---------------------------------------------------------------------------

def aggregate(scenario: Scenario, outcomes: Sequence[CellOutcome]) -> List[ResultRow]:
    """One row per (m, n, method): mean, population std and median over the successful seeds."""
    groups: Dict[Tuple[int, int, Method], List[CellOutcome]] = {}
    for outcome in outcomes:
        groups.setdefault((outcome.labeled_size, outcome.unlabeled_size, outcome.method), []).append(outcome)

    rows = []
    for (m, n, method), members in sorted(groups.items(), key=lambda item: (item[0][0], item[0][1], item[0][2].value)):
        members = sorted(members, key=lambda outcome: outcome.seed)
        scores = np.array([member.accuracy for member in members if member.status == "ok"], dtype=float)
        failures = [member for member in members if member.status != "ok"]
        status = "ok"
        if failures:
            status = f"failed {len(failures)}/{len(members)} seeds: {failures[0].status}"
        hyper = {str(member.seed): member.hyperparameters for member in members if member.hyperparameters}
        rows.append(ResultRow(
            scenario_id=scenario.scenario_id,
            labeled_size=m,
            unlabeled_size=n,
            method=method,
            mean_accuracy=float(scores.mean()) if scores.size else None,
            std_accuracy=float(scores.std()) if scores.size else None,
            median_accuracy=float(np.median(scores)) if scores.size else None,
            seeds=len(members),
            status=status,
            hyperparameters=json.dumps(hyper, sort_keys=True),
        ))
    return rows


def run_scenario(cfg: Scenario, output_dir: Optional[str] = None, max_workers: Optional[int] = None,
                 force_search: bool = False, prescribe: bool = False) -> List[ResultRow]:
    """Run every (seed, m, n) cell, write results.csv, timings.csv and reports/, return the rows.

    ``force_search`` ignores logged hyperparameters; ``prescribe`` applies feasible
    prescribed gamma and gamma' per cell.
    """
    directory = output_dir or cfg.output_dir or os.path.join(settings.RSS_OUTPUT_DIR, cfg.scenario_id)
    reports_dir = os.path.join(directory, "reports")
    workers = max_workers or settings.RSS_MAX_WORKERS
    pools = load_embedding_pools(cfg) if cfg.mode == ScenarioMode.EMBEDDINGS else None
    units = list(itertools.product(cfg.seeds, cfg.labeled_sizes))
    logger.info(f"Running scenario {cfg.scenario_id}: {len(units)} units on {workers} worker(s)")

    outcomes: List[CellOutcome] = []
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(_run_unit, cfg, seed, m, pools, reports_dir, force_search, prescribe)
                       for seed, m in units]
            for future in futures:
                outcomes.extend(future.result())
    else:
        for seed, m in units:
            outcomes.extend(_run_unit(cfg, seed, m, pools, reports_dir, force_search, prescribe))

    rows = aggregate(cfg, outcomes)
    write_results(rows, os.path.join(directory, "results.csv"))
    write_timings(
        [
            {"scenario_id": cfg.scenario_id, "seed": outcome.seed, "labeled_size": outcome.labeled_size,
             "unlabeled_size": outcome.unlabeled_size, "method": outcome.method.value,
             "wall_clock_seconds": outcome.wall_clock_seconds}
            for outcome in sorted(outcomes, key=lambda o: (o.seed, o.labeled_size, o.unlabeled_size, o.method.value))
        ],
        os.path.join(directory, "timings.csv"),
    )
    failed = sum(1 for row in rows if row.status != "ok")
    if failed:
        logger.warning(f"Scenario {cfg.scenario_id} finished with {failed} failed cell(s)")
    else:
        logger.info(f"Scenario {cfg.scenario_id} finished; results in {directory}")
    return rows


# ---------------------------------------------------------------------------
# Bound sweep
# ---------------------------------------------------------------------------

def _axis_vector(d: int, length: float) -> List[float]:
    return [length] + [0.0] * (d - 1)


def emit_bound_sweep(grid: BoundGrid, path: str) -> str:
    """Evaluate the isotropic residuals on the cartesian grid and write one CSV row per point."""
    rows = []
    for m, n, d, alpha, delta, gamma in itertools.product(grid.m, grid.n, grid.d, grid.alpha,
                                                          grid.delta, grid.gamma):
        inputs = BoundInputs(
            m=m, n=n, d=d, alpha=alpha, delta=delta, gamma=gamma,
            mu0=_axis_vector(d, grid.mean0_norm), mu1=_axis_vector(d, grid.mean1_norm),
            sigma0=grid.sigma0, sigma1=grid.sigma1,
        )
        first = thm1_residual(inputs)
        second = thm2_residual(inputs)
        regime = corollary1_check(m, n, d, alpha)
        rows.append([
            m, n, d, alpha, delta, gamma,
            first.residual, first.components["alpha_term"], first.components["n_term"], first.components["m_term"],
            second.residual, second.components["prefactor"], second.components["inner"],
            second.components["m_term"],
            regime["advantage"], regime["dim_free"],
        ])
    logger.info(f"Bound sweep with {len(rows)} points written to {path}")
    return write_csv(path, SWEEP_COLUMNS, rows)
