import numpy as np
import pytest

from errors import TrainingDivergenceError
from models import LinearModel, MlpModel
from schemas import LabeledSet, Method, RobustConfig, TrainConfig, UnlabeledSet
from services.gmm_data import isotropic_spec, sample_labeled, sample_test_set, sample_unlabeled
from services.rss_trainer import (
    constrained_view_check,
    evaluate_accuracy,
    robust_erm,
    rss_objective,
    train_erm,
    train_rss,
)
from utils.preset_loader import preset_loader


def test_boundary_unlabeled_point_costs_lambda():
    model = LinearModel(w=np.array([1.0, 0.0]))
    labeled = LabeledSet(features=np.array([[2.0, 0.0]]), labels=np.array([1]))
    unlabeled = UnlabeledSet(features=np.array([[0.0, 5.0]]))
    total, labeled_term, unlabeled_term = rss_objective(model, labeled, unlabeled,
                                                        RobustConfig(gamma=1.0, gamma_prime=1.0, lam=0.5))
    assert labeled_term == 0.0
    assert unlabeled_term == 1.0
    assert total == pytest.approx(0.5)


def test_objective_rejects_inconsistent_inputs():
    model = LinearModel(w=np.array([1.0, 0.0]))
    labeled = LabeledSet(features=np.ones((2, 2)), labels=np.array([1, -1]))
    with pytest.raises(ValueError):
        rss_objective(model, labeled, UnlabeledSet.empty(2), RobustConfig(lam=1.0))
    with pytest.raises(ValueError):
        rss_objective(model, labeled, UnlabeledSet(features=np.ones((3, 4))), RobustConfig())
    empty = LabeledSet(features=np.zeros((0, 2)), labels=np.zeros(0))
    with pytest.raises(ValueError):
        rss_objective(model, empty, UnlabeledSet(features=np.ones((3, 2))), RobustConfig())


def test_empty_unlabeled_set_allowed_with_zero_lambda():
    model = LinearModel(w=np.array([1.0, 0.0]))
    labeled = LabeledSet(features=np.array([[0.5, 0.0]]), labels=np.array([1]))
    total, labeled_term, unlabeled_term = rss_objective(model, labeled, UnlabeledSet.empty(2),
                                                        RobustConfig(gamma=1.0, lam=0.0))
    assert total == labeled_term == pytest.approx(0.5)
    assert unlabeled_term == 0.0


def test_report_traces_cover_every_epoch(small_labeled, small_unlabeled, small_test, fast_config):
    report = train_rss(small_labeled, small_unlabeled, fast_config, test=small_test)
    assert report.method == Method.RSS
    assert report.epochs == fast_config.epochs
    assert len(report.unlabeled_objective) == len(report.total_objective) == fast_config.epochs
    assert np.all(np.isfinite(report.total_objective))
    assert 0.0 <= report.test_accuracy <= 1.0
    assert np.linalg.norm(report.model.w) == pytest.approx(1.0, abs=1e-12)


def test_training_is_deterministic_per_seed(small_labeled, small_unlabeled, fast_config):
    first = train_rss(small_labeled, small_unlabeled, fast_config)
    second = train_rss(small_labeled, small_unlabeled, fast_config)
    assert np.array_equal(first.model.flat(), second.model.flat())
    assert first.total_objective == second.total_objective


def test_zero_lambda_reduces_to_robust_erm(small_labeled, small_unlabeled, fast_config):
    cfg = fast_config.model_copy(update={"robust": fast_config.robust.model_copy(update={"lam": 0.0})})
    rss = train_rss(small_labeled, small_unlabeled, cfg)
    baseline = robust_erm(small_labeled, cfg)
    assert baseline.method == Method.ROBUST_ERM
    assert np.array_equal(rss.model.flat(), baseline.model.flat())
    assert all(value == 0.0 for value in rss.unlabeled_objective)


def test_tiny_lambda_numeric_path_tracks_erm(small_labeled, small_unlabeled):
    cfg = TrainConfig(
        epochs=20,
        learning_rate=0.1,
        optimizer="sgd",
        warm_start=False,
        robust={
            "gamma": 1e6,
            "gamma_prime": 1e6,
            "lambda": 1e-8,
            "surrogate": "numeric",
            "labeled_cost": "l2_squared",
            "inner": {"steps": 1, "alpha": 1e-9},
        },
    )
    erm = train_erm(small_labeled, cfg)
    rss = train_rss(small_labeled, UnlabeledSet(features=small_unlabeled.features[:small_labeled.m]), cfg)
    assert np.allclose(rss.model.flat(), erm.model.flat(), atol=1e-5)


def test_large_lambda_recovers_mixture_direction():
    spec = isotropic_spec(d=5, mean_norm=2.0, sigma=1.0, seed=3)
    labeled = sample_labeled(spec, 10, rng_seed=4)
    unlabeled = sample_unlabeled(spec, 2000, rng_seed=5)
    test = sample_test_set(spec, 4000, rng_seed=6)
    cfg = TrainConfig(epochs=30, learning_rate=0.1, optimizer="sgd",
                      robust={"gamma": 0.5, "gamma_prime": 0.1, "lambda": 10.0})
    report = train_rss(labeled, unlabeled, cfg, test=test)
    direction = spec.mean0 / np.linalg.norm(spec.mean0)
    assert abs(float(report.model.w @ direction)) > 0.9
    assert report.test_accuracy >= 0.9


def test_mlp_numeric_path_trains(small_labeled, small_unlabeled, small_test):
    cfg = TrainConfig(
        epochs=2,
        learning_rate=1e-3,
        model="mlp",
        hidden_widths=[8],
        robust={"gamma": 1.0, "gamma_prime": 1.0, "lambda": 0.1, "inner": {"steps": 3, "alpha": 0.01}},
    )
    assert cfg.robust.surrogate.value == "numeric"
    report = train_rss(small_labeled, small_unlabeled, cfg, test=small_test)
    assert isinstance(report.model, MlpModel)
    assert np.all(np.isfinite(report.total_objective))
    assert evaluate_accuracy(report.model, small_test) == report.test_accuracy


def test_exploding_learning_rate_raises_divergence(small_labeled):
    # every step multiplies the weights by 1 - lr * weight_decay = -999
    cfg = TrainConfig(epochs=200, learning_rate=1.0, weight_decay=1e3, optimizer="sgd", normalize=False)
    with pytest.raises(TrainingDivergenceError) as info:
        train_erm(small_labeled, cfg)
    assert info.value.context["epoch"] >= 1


def test_constrained_view_check_matches_unlabeled_term(small_unlabeled, iso_spec):
    theta = iso_spec.mean0 / np.linalg.norm(iso_spec.mean0)
    model = LinearModel(w=theta)
    cfg = RobustConfig(gamma_prime=0.1)
    value = rss_objective(model, LabeledSet(features=np.zeros((1, 5)), labels=np.array([1])),
                          small_unlabeled, cfg)[2]
    assert constrained_view_check(model, small_unlabeled, 0.1, value + 1e-12, cfg)
    assert not constrained_view_check(model, small_unlabeled, 0.1, value - 1e-3, cfg)
    with pytest.raises(ValueError):
        constrained_view_check(model, small_unlabeled, 0.1, -1.0)


def test_training_lowers_the_objective(small_labeled, small_unlabeled, fast_config, iso_spec, rng):
    direction = iso_spec.mean0 / np.linalg.norm(iso_spec.mean0)
    start = rng.standard_normal(iso_spec.d)
    start -= (start @ direction) * direction
    init = LinearModel(w=start / np.linalg.norm(start))
    before = rss_objective(init, small_labeled, small_unlabeled, fast_config.robust)[0]
    report = train_rss(small_labeled, small_unlabeled, fast_config, init_model=init)
    after = rss_objective(report.model, small_labeled, small_unlabeled, fast_config.robust)[0]
    assert after < before
    assert report.total_objective[-1] < report.total_objective[0]


@pytest.mark.slow
def test_direction_recovery_improves_with_unlabeled_size():
    cfg = TrainConfig(epochs=30, learning_rate=0.1, optimizer="sgd",
                      robust={"gamma": 0.5, "gamma_prime": 0.1, "lambda": 10.0})
    medians = []
    for n in (10, 100, 1000, 10_000):
        cosines = []
        for seed in range(20):
            spec = isotropic_spec(d=20, mean_norm=1.5, sigma=1.0, seed=seed)
            labeled = sample_labeled(spec, 10, rng_seed=100 + seed)
            unlabeled = sample_unlabeled(spec, n, rng_seed=200 + seed)
            report = train_rss(labeled, unlabeled, cfg.model_copy(update={"seed": seed}))
            cosines.append(abs(float(report.model.w @ spec.mean0)) / np.linalg.norm(spec.mean0))
        medians.append(float(np.median(cosines)))
    assert all(later >= earlier - 0.02 for earlier, later in zip(medians, medians[1:]))
    assert medians[-1] > medians[0] + 0.1


@pytest.mark.slow
def test_erm_on_the_isotropic_calibration_lands_near_its_logged_accuracy():
    cfg = TrainConfig.model_validate(preset_loader.scenario("isotropic")["erm_train"])
    accuracies = []
    for seed in range(10):
        spec = isotropic_spec(d=200, mean_norm=1.0, sigma=1.0, seed=seed)
        labeled = sample_labeled(spec, 10, rng_seed=1000 + seed)
        test = sample_test_set(spec, 10_000, rng_seed=2000 + seed)
        accuracies.append(train_erm(labeled, cfg.model_copy(update={"seed": seed}), test=test).test_accuracy)
    assert 0.54 <= float(np.median(accuracies)) <= 0.64
