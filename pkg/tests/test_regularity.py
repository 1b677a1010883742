import json

import numpy as np
import pytest

from core.configclass import AnalyzerConfig, OptimizerConfig, TrainingConfig
from core.exception import AnalysisError, ConfigValidationError
from core.models import StepRecord, TrajectoryLog, TrajectoryMeta
from lib.network import QuadraticModel
from lib.regularity import (
    NO_VALID_STEPS, NOT_APPLICABLE, PASS, PRINCIPLE_UNSATISFIED, _bound_limit, analyze, epoch_rollup,
    gamma_step, principle_slack, telescoping_excess, theorem_bound_rhs, verify_theorem_bound, write_report
)
from lib.sampling import make_synthetic
from lib.trajectory import record_run

CFG = AnalyzerConfig()


def quadratic_log(eta: float, epochs: int = 100):
    """ℓ(θ)=½θ², θ0=1, epoch 당 2 batch → T = 2·epochs"""
    dataset = make_synthetic("gaussian_blobs", n=8, dims=2, seed=0)
    model = QuadraticModel(1, 1.0)
    config = TrainingConfig(optimizer=OptimizerConfig(kind="sgd", eta=eta), epochs=epochs, batch_size=4)
    return record_run(model, config, dataset), dataset, model


def stored_log(theta0, updates, losses, eta, n_batches):
    """update 를 직접 지정한 f64 full 저장 궤적"""
    theta = np.array(theta0, dtype=np.float64)
    thetaT = theta.copy()
    steps = []
    for k, (update, loss) in enumerate(zip(updates, losses)):
        update = np.array(update, dtype=np.float64)
        steps.append(StepRecord(k, k % n_batches, float(loss), update, float(np.dot(update, update))))
        thetaT = thetaT - eta * update
    meta = TrajectoryMeta(d=theta.size, T=len(steps), n_batches=n_batches, epochs=len(steps) // n_batches,
                          batch_size=1, eta=eta, optimizer={"kind": "sgd", "eta": eta}, init_seed=0,
                          sampler_seed=0, model={"family": "quadratic", "dim": theta.size, "theta0": 0.0},
                          spec_digest="", storage_mode="full", storage_dtype="f64",
                          t_matches_nb=len(steps) % n_batches == 0)
    return TrajectoryLog(meta, theta, thetaT, steps)


def test_gamma_step_examples():
    assert gamma_step([1.0], [0.0], [1.0], 0.5, 0.1, CFG) == pytest.approx(1.9, abs=1e-15)
    assert gamma_step([2.0, 1.0], [2.0, 1.0], [0.0, 0.0], 1.0, 0.1, CFG) == 0.0
    assert gamma_step([1.0], [0.0], [1.0], 0.0, 0.1, CFG) is None
    with pytest.raises(AnalysisError):
        gamma_step([np.inf], [0.0], [1.0], 0.5, 0.1, CFG, step=3)


def test_gamma_step_is_maximal(rng):
    for _ in range(1000):
        d = int(rng.integers(1, 6))
        theta_k, theta_T, update = rng.normal(size=(3, d))
        loss = float(rng.uniform(0.1, 2.0))
        eta = float(rng.uniform(0.001, 0.5))
        gamma = gamma_step(theta_k, theta_T, update, loss, eta, CFG)
        coherence = float(np.dot(theta_k - theta_T, update))
        update_sq = float(np.dot(update, update))
        scale = 1e-12 * (1.0 + abs(coherence) + update_sq)
        assert abs(principle_slack(coherence, update_sq, loss, eta, gamma)) <= scale
        assert principle_slack(coherence, update_sq, loss, eta, gamma + 1e-6 * abs(gamma) + 1e-9) < 0


@pytest.mark.parametrize("eta", [0.01, 0.1, 0.5])
def test_quadratic_closed_form(eta):
    log, dataset, model = quadratic_log(eta)
    report = analyze(log, CFG, dataset, model)
    T = 200
    k = np.arange(T)
    theta = (1.0 - eta) ** k
    expected_valid = 0.5 * theta ** 2 > CFG.gap_tolerance
    assert np.array_equal(report.valid, expected_valid)
    expected = 2.0 - eta - 2.0 * (1.0 - eta) ** (T - k)
    np.testing.assert_allclose(report.gamma_series[expected_valid], expected[expected_valid], rtol=0, atol=1e-9)
    assert report.gamma_min == pytest.approx(expected[expected_valid].min(), abs=1e-9)
    assert report.principle_satisfied

    verdict = verify_theorem_bound(report, log)
    assert verdict.status == PASS
    assert verdict.slack >= 1.0 - 1e-9
    assert verdict.telescoping_ok
    assert np.all(telescoping_excess(report) <= 1e-9 * (1 + report.traj_sq_dist))


def test_quadratic_gamma_min_near_two_minus_eta():
    log, dataset, model = quadratic_log(0.1)
    report = analyze(log, CFG, dataset, model)
    assert report.gamma_min == pytest.approx(1.9, abs=1e-4)
    assert report.rate_factor == pytest.approx(report.gamma_min / report.traj_sq_dist)


def test_scaled_quadratic_reproduces_closed_form():
    # update 와 (θ_k − θ_T) 를 같은 c 배 하면 γ_k 는 c² 배의 gap 과 함께 그대로 유지된다.
    eta, c = 0.1, 3.0
    theta = (1.0 - eta) ** np.arange(21)
    updates = [[c * value] for value in theta[:-1]]
    losses = [0.5 * (c * value) ** 2 for value in theta[:-1]]
    log = stored_log([c], updates, losses, eta, n_batches=4)
    report = analyze(log, CFG)
    k = np.arange(20)
    np.testing.assert_allclose(report.gamma_series, 2.0 - eta - 2.0 * (1.0 - eta) ** (20 - k), atol=1e-12)


def test_violating_step_makes_principle_unsatisfied():
    log = stored_log([1.0], [[1.0], [-1.0]], [0.5, 0.405], eta=0.1, n_batches=1)
    report = analyze(log, CFG)
    assert report.gamma_min < 0
    assert report.violation_fraction > 0
    assert not report.principle_satisfied
    verdict = verify_theorem_bound(report, log)
    assert verdict.status == PRINCIPLE_UNSATISFIED
    assert verdict.bound_rhs is None


def test_constant_loss_has_no_valid_steps():
    log = stored_log([0.0, 0.0], [[0.0, 0.0]] * 4, [0.0] * 4, eta=0.1, n_batches=2)
    report = analyze(log, CFG)
    assert report.gamma_min is None and not report.has_valid_steps
    assert report.skipped == 4
    assert verify_theorem_bound(report, log).status == NO_VALID_STEPS


def test_bound_not_applicable_when_t_is_not_multiple():
    log = stored_log([1.0], [[1.0], [0.9], [0.81]], [0.5, 0.405, 0.328], eta=0.1, n_batches=2)
    assert not log.meta.t_matches_nb
    assert verify_theorem_bound(analyze(log, CFG), log).status == NOT_APPLICABLE


def test_theorem_bound_rhs():
    rhs = theorem_bound_rhs(4.0, 0.1, 1.5, 200)
    assert rhs == pytest.approx(4.0 / (2 * 0.1 * 1.5 * 200))
    assert theorem_bound_rhs(4.0, 0.1, 3.0, 200) == pytest.approx(rhs / 2)
    with pytest.raises(ValueError):
        theorem_bound_rhs(4.0, 0.1, 0.0, 200)


def test_analyze_is_pure():
    log, dataset, model = quadratic_log(0.5, epochs=10)
    first = analyze(log, CFG, dataset, model)
    second = analyze(log, CFG, dataset, model)
    assert np.array_equal(first.gamma_series, second.gamma_series, equal_nan=True)
    assert first.gamma_min == second.gamma_min


def test_window_epochs():
    log, dataset, model = quadratic_log(0.1, epochs=10)
    report = analyze(log, AnalyzerConfig(window_epochs=4), dataset, model)
    assert report.T == 8 and report.epochs == 4
    assert len(report.epoch_sq_dist) == 5 and report.epoch_sq_dist[-1] == 0.0
    # θ_T 가 θ_8 = 0.9^8 인 닫힌형
    k = np.arange(8)
    np.testing.assert_allclose(report.gamma_series, 1.9 - 2.0 * 0.9 ** (8 - k), atol=1e-12)
    with pytest.raises(ConfigValidationError):
        analyze(log, AnalyzerConfig(window_epochs=11), dataset, model)


def test_epoch_rollup_rows(tiny_model, training, blobs):
    log = record_run(tiny_model, training, blobs)
    report = analyze(log, CFG, blobs, tiny_model)
    rollup = epoch_rollup(report)
    assert list(rollup["epoch"]) == [0, 1, 2]
    assert list(rollup.columns) == ["epoch", "mean_loss", "median_gamma", "median_rate_factor", "violations"]
    np.testing.assert_allclose(rollup["mean_loss"], report.losses.reshape(3, 5).mean(axis=1))


def test_single_epoch_rollup_equals_whole_run():
    log, dataset, model = quadratic_log(0.1, epochs=1)
    report = analyze(log, CFG, dataset, model)
    row = epoch_rollup(report).iloc[0]
    assert row["mean_loss"] == pytest.approx(report.losses.mean())
    assert row["median_gamma"] == pytest.approx(np.nanmedian(report.gamma_series))
    assert row["violations"] == 0


def test_write_report_uses_null_for_skipped_steps(tmp_path):
    log = stored_log([1.0], [[1.0], [0.0]], [0.5, 0.0], eta=0.1, n_batches=1)
    report = analyze(log, CFG)
    path = tmp_path / "report.json"
    write_report(report, str(path), verify_theorem_bound(report, log))
    data = json.loads(path.read_text(encoding="UTF-8"))
    assert data["gamma_series"][1] is None
    assert data["valid"] == [True, False]
    assert data["verdict"]["status"] == PASS


def test_bound_limit_counts_skipped_steps():
    log, dataset, model = quadratic_log(0.1)
    report = analyze(log, CFG, dataset, model)
    assert report.skipped == report.T - int(report.valid.sum()) > 0
    expected = report.bound_rhs * (1.0 + 1e-6) + CFG.gap_tolerance * report.skipped / report.T
    assert _bound_limit(report) == pytest.approx(expected, rel=1e-15)
    assert verify_theorem_bound(report, log).status == PASS
