"""최적화 궤적 기록과 결정적 재실행(replay)

record_run 과 replay 는 같은 학습 루프(_drive)를 공유하므로 같은 seed 와
같은 빌드에서 θ_k, U_k, ℓ_k 가 비트 단위로 재현된다.
"""
import logging
from typing import Callable, Dict, NamedTuple, Optional, Tuple

import numpy as np

from core.configclass import OptimizerConfig, TrainingConfig
from core.exception import (
    ConfigValidationError, DivergenceError, NonFiniteError, ReplayDivergenceError
)
from core.models import Dataset, ParamVector, StepRecord, TrajectoryLog, TrajectoryMeta
from lib.exec_time import timeit
from lib.network import Model, model_from_description
from lib.optimizers import compute_update, init_optimizer_state, step
from lib.sampling import dataset_from_source, make_sampler, next_batch
from lib.tensor_math import sq_norm

logger = logging.getLogger(__name__)

# visitor(k, xi, θ_k, U_k, ℓ_k)
StepVisitor = Callable[[int, int, ParamVector, ParamVector, float], None]

UPDATE_IDENTITY_RTOL = 1e-12
RECONSTRUCTION_RTOL = 1e-10


def _drive(model: Model, training: TrainingConfig, dataset: Dataset, steps: int,
           visitor: StepVisitor) -> ParamVector:
    """학습 루프: θ_{k+1} = θ_k − ηU_k 를 steps 번 반복하고 θ_T 를 반환한다."""
    params = model.init_params(training.init_seed)
    state = model.init_state()
    opt_config = training.optimizer
    opt_state = init_optimizer_state(opt_config, params.d)
    sampler = make_sampler(dataset, training.batch_size, training.sampler_seed)

    for k in range(steps):
        epoch = sampler.epoch
        if sampler.cursor == 0:
            logger.debug(f"epoch {epoch} start (k={k})")
        batch = next_batch(sampler, dataset)
        try:
            loss, gradient, state = model.loss_and_gradient(params, batch, state)
            update, opt_state = compute_update(opt_config, opt_state, gradient)
        except (DivergenceError, NonFiniteError) as e:
            loss = getattr(e, "loss", None)
            logger.error(f"Training diverged at iteration {k} (epoch {epoch}, xi {batch.index}): {e}")
            raise DivergenceError("학습이 발산했습니다.", iteration=k, epoch=epoch,
                                  xi=batch.index, loss=loss) from e
        visitor(k, batch.index, params, update, loss)
        params = step(params, update, opt_config.eta)
    return params


def _meta_training(meta: TrajectoryMeta) -> TrainingConfig:
    return TrainingConfig(
        optimizer=OptimizerConfig.model_validate(meta.optimizer),
        epochs=meta.epochs,
        batch_size=meta.batch_size,
        init_seed=meta.init_seed,
        sampler_seed=meta.sampler_seed,
    )


def check_steps_match(meta: TrajectoryMeta, steps: int) -> bool:
    """T == n·B 여부 (아니면 경고를 남기고 meta 에 기록한다)"""
    matches = steps == meta.n_batches * meta.epochs
    if not matches:
        logger.warning(f"T={steps} != n*B={meta.n_batches}*{meta.epochs}; average-loss bound is not applicable")
    meta.t_matches_nb = matches
    return matches


@timeit
def record_run(model: Model, config: TrainingConfig, dataset: Dataset) -> TrajectoryLog:
    """학습을 실행하며 궤적을 기록한다.

    storage.mode 가 full 이면 U_k 를 storage.dtype 으로 저장하고,
    replay 이면 스칼라(ξ_k, ℓ_k, ‖U_k‖²)만 저장한다.
    storage.checkpoint_stride > 0 이면 s 스텝마다 θ_k 를 저장한다.

    Raises:
        DivergenceError: 손실 또는 gradient 가 발산한 경우
    """
    storage = config.storage
    n_batches = dataset.n_batches(config.batch_size)
    total = n_batches * config.epochs
    logger.info(f"Recording {total} steps ({n_batches} batches x {config.epochs} epochs, "
                f"optimizer={config.optimizer.kind}, eta={config.optimizer.eta})")

    records = []
    checkpoints: Dict[int, np.ndarray] = {}

    def record(k, xi, params, update, loss):
        if storage.checkpoint_stride and k % storage.checkpoint_stride == 0:
            checkpoints[k] = params.values.copy()
        stored = None
        if storage.mode == "full":
            stored = update.values.astype(np.float32 if storage.dtype == "f32" else np.float64)
        records.append(StepRecord(k, xi, loss, stored, sq_norm(update)))

    final = _drive(model, config, dataset, total, record)
    meta = TrajectoryMeta(
        d=final.d,
        T=total,
        n_batches=n_batches,
        epochs=config.epochs,
        batch_size=config.batch_size,
        eta=config.optimizer.eta,
        optimizer=config.optimizer.model_dump(mode="json"),
        init_seed=config.init_seed,
        sampler_seed=config.sampler_seed,
        model=model.describe(),
        spec_digest=model.digest(),
        storage_mode=storage.mode,
        storage_dtype=storage.dtype,
        checkpoint_stride=storage.checkpoint_stride,
        data=dataset.source,
    )
    check_steps_match(meta, len(records))
    initial = model.init_params(config.init_seed).values.copy()
    logger.info(f"Recorded {total} steps, final loss {records[-1].loss if records else float('nan'):.6g}")
    return TrajectoryLog(meta, initial, final.values.copy(), records, checkpoints)


def _resolve(log: TrajectoryLog, dataset: Optional[Dataset], model: Optional[Model]) -> Tuple[Model, Dataset]:
    model = model or model_from_description(log.meta.model)
    if model.digest() != log.meta.spec_digest:
        raise ReplayDivergenceError("모델 구조가 기록과 다릅니다.", stored=log.meta.spec_digest,
                                    regenerated=model.digest())
    if dataset is None:
        if not log.meta.data:
            raise ConfigValidationError("재실행에 필요한 데이터셋 정보가 기록에 없습니다.")
        dataset = dataset_from_source(log.meta.data)
    return model, dataset


def replay(
    log: TrajectoryLog,
    visitor: Callable[[int, ParamVector, ParamVector, float], None],
    dataset: Optional[Dataset] = None,
    model: Optional[Model] = None,
) -> None:
    """기록된 seed 로 학습을 다시 실행하며 visitor(k, θ_k, U_k, ℓ_k) 를 순서대로 호출한다.

    재생성된 ξ_k, ℓ_k, θ_0, θ_T (그리고 f64 로 저장된 U_k)는 기록과 비트 단위로 같아야 한다.

    Raises:
        ReplayDivergenceError: 재생성 값이 기록과 다른 경우 (비결정성)
    """
    model, dataset = _resolve(log, dataset, model)
    training = _meta_training(log.meta)
    compare_updates = log.meta.storage_mode == "full" and log.meta.storage_dtype == "f64"

    def check(k, xi, params, update, loss):
        if k >= len(log.steps):
            raise ReplayDivergenceError("기록보다 많은 스텝이 재생성되었습니다.", step=k)
        stored = log.steps[k]
        if k == 0 and not np.array_equal(params.values, log.theta0):
            raise ReplayDivergenceError("θ_0 가 기록과 다릅니다.", step=0)
        if xi != stored.xi:
            raise ReplayDivergenceError("batch 순서가 기록과 다릅니다.", step=k, stored=stored.xi, regenerated=xi)
        if loss != stored.loss:
            raise ReplayDivergenceError("손실값이 기록과 다릅니다.", step=k, stored=stored.loss, regenerated=loss)
        if compare_updates and not np.array_equal(update.values, stored.update):
            raise ReplayDivergenceError("update 가 기록과 다릅니다.", step=k)
        visitor(k, params, update, loss)

    final = _drive(model, training, dataset, len(log.steps), check)
    if not np.array_equal(final.values, log.thetaT):
        diff = float(np.max(np.abs(final.values - log.thetaT)))
        raise ReplayDivergenceError("θ_T 가 기록과 다릅니다.", step=len(log.steps), stored="thetaT",
                                    regenerated=f"max|Δ|={diff:.3e}")


def iterate_trajectory(log: TrajectoryLog, visitor, dataset: Optional[Dataset] = None,
                       model: Optional[Model] = None) -> None:
    """visitor(k, θ_k, U_k, ℓ_k) 를 호출한다.
    - f64 로 저장된 update 가 있으면 θ_{k+1} = θ_k − ηU_k 로 궤적을 다시 만든다.
    - 없으면 replay 한다.
    """
    if log.has_updates and log.meta.storage_dtype == "f64":
        eta = log.meta.eta
        theta = log.theta0
        for record in log.steps:
            visitor(record.k, theta, record.update, record.loss)
            theta = theta - eta * record.update
        return

    def unwrap(k, params, update, loss):
        visitor(k, params.values, update.values, loss)

    replay(log, unwrap, dataset, model)


class IdentityCheck(NamedTuple):
    max_violation: float
    ok: bool


def check_update_identity(log: TrajectoryLog, dataset: Optional[Dataset] = None,
                          model: Optional[Model] = None) -> IdentityCheck:
    """재실행한 θ_k 로 (θ_k − θ_{k+1}) 와 ηU_k 의 차이를 검사한다.

    max_violation 은 max_i |(θ_k − θ_{k+1})_i − ηU_{k,i}| / (1 + |θ_{k,i}|) 이며
    UPDATE_IDENTITY_RTOL 이하이면 ok 이다.
    """
    eta = log.meta.eta
    previous = {}
    worst = [0.0]

    def measure(theta_k, theta_next, update):
        gap = np.abs((theta_k - theta_next) - eta * update) / (1.0 + np.abs(theta_k))
        if gap.size:
            worst[0] = max(worst[0], float(gap.max()))

    def visit(k, params, update, loss):
        if previous:
            measure(previous["theta"], params.values, previous["update"])
        stored = log.steps[k].update
        previous["theta"] = params.values.copy()
        previous["update"] = stored if stored is not None and stored.dtype == np.float64 else update.values.copy()

    replay(log, visit, dataset, model)
    if previous:
        measure(previous["theta"], log.thetaT, previous["update"])
    return IdentityCheck(worst[0], worst[0] <= UPDATE_IDENTITY_RTOL)


class Reconstruction(NamedTuple):
    theta_T: np.ndarray
    relative_error: float
    ok: bool


def reconstruct_theta_T(log: TrajectoryLog, dataset: Optional[Dataset] = None,
                        model: Optional[Model] = None) -> Reconstruction:
    """θ_0 − ηΣU_k 로 θ_T 를 재구성하고 ‖·−θ_T‖ / (1+‖θ_T‖) 를 계산한다."""
    total = np.zeros_like(log.theta0)
    if log.has_updates and log.meta.storage_dtype == "f64":
        for record in log.steps:
            total += record.update
    else:
        def accumulate(k, params, update, loss):
            np.add(total, update.values, out=total)

        replay(log, accumulate, dataset, model)
    reconstructed = log.theta0 - log.meta.eta * total
    error = float(np.linalg.norm(reconstructed - log.thetaT) / (1.0 + np.linalg.norm(log.thetaT)))
    return Reconstruction(reconstructed, error, error <= RECONSTRUCTION_RTOL)


def attach_coherence(log: TrajectoryLog, coherence) -> TrajectoryLog:
    """분석 2단계에서 계산한 ⟨θ_k − θ_T, U_k⟩ 를 StepRecord 에 채운다."""
    if len(coherence) > len(log.steps):
        raise ValueError("coherence 길이가 스텝 수보다 깁니다.")
    for record, value in zip(log.steps, coherence):
        record.coherence = float(value)
    return log
