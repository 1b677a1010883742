import numpy as np
import pytest

from core.configclass import (
    ActivationSpec, BatchNormSpec, Conv2dSpec, DenseSpec, FlattenSpec, NetworkSpec, SkipEdge
)
from core.exception import CacheMismatchError, DimensionError, DivergenceError
from core.models import Batch, ParamVector
from lib.layers import batch_norm_forward, cross_entropy_softmax, mse
from lib.network import (
    NetworkModel, backward, build_plain_mlp, build_residual_cnn, build_residual_mlp, forward,
    init_params, init_state, keep_skip, model_from_description, parameter_table, predict
)


def finite_difference(spec, params, batch, state=None):
    grad = np.zeros(params.d)
    for i in range(params.d):
        h = 1e-6 * (1.0 + abs(params.values[i]))
        plus, minus = params.values.copy(), params.values.copy()
        plus[i] += h
        minus[i] -= h
        loss_plus, _ = forward(spec, params.with_values(plus), batch, "train", state)
        loss_minus, _ = forward(spec, params.with_values(minus), batch, "train", state)
        grad[i] = (loss_plus - loss_minus) / (2.0 * h)
    return grad


def max_relative_error(analytic, numeric, floor=1e-3):
    """성분별 |a − n| / max(|a|, |n|, floor) 의 최댓값 (BN 앞 bias 처럼 gradient 가 0 인 성분은 floor 로 나눈다)"""
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / scale))


def assert_gradient_matches(spec, seed=0, batch=None):
    rng = np.random.default_rng(seed)
    params = init_params(spec, seed)
    # 0 으로 초기화된 bias/shift 도 검사되도록 흔든다.
    params = params.with_values(params.values + 0.1 * rng.normal(size=params.d))
    if batch is None:
        inputs = rng.normal(size=(5, *spec.input_shape))
        if spec.loss_kind == "mse":
            targets = rng.normal(size=(5, spec.layer_shapes()[-1][0]))
        else:
            targets = rng.integers(0, spec.layer_shapes()[-1][0], size=5)
        batch = Batch(inputs, targets, 0)
    _, cache = forward(spec, params, batch, "train")
    analytic = backward(spec, params, cache).values
    numeric = finite_difference(spec, params, batch)
    error = max_relative_error(analytic, numeric)
    assert error <= 1e-5, error


def gradient_spec(kind, activation):
    act = ActivationSpec(activation=activation)
    if kind == "dense":
        return build_plain_mlp(3, 3, width=4, depth=2, activation=activation)
    if kind == "batch_norm":
        return build_plain_mlp(3, 3, width=4, depth=2, activation=activation, batch_norm=True)
    if kind == "identity_skip":
        return build_residual_mlp(3, 3, width=4, blocks=2, blocks_per_stage=1, activation=activation)
    if kind == "projection_skip":
        return NetworkSpec(
            input_shape=(3,),
            layers=[DenseSpec(in_features=3, out_features=4), act, DenseSpec(in_features=4, out_features=2)],
            skip_edges=[SkipEdge(source=-1, target=1, projection=True)],
        )
    if kind == "conv":
        return build_residual_cnn((2, 4, 4), 2, channels=2, blocks=1, activation=activation, bn_mode="none")
    # 3x3, stride 2, padding 1: (2, 5, 5) → (3, 3, 3)
    return NetworkSpec(
        input_shape=(2, 5, 5),
        layers=[Conv2dSpec(in_channels=2, out_channels=3, kernel=3, stride=2, padding=1),
                BatchNormSpec(features=3), act, FlattenSpec(), DenseSpec(in_features=27, out_features=2)],
    )


GRADIENT_KINDS = ["dense", "batch_norm", "identity_skip", "projection_skip", "conv", "strided_conv"]
ACTIVATIONS = ["sigmoid", "tanh", "relu", "leaky_relu"]


@pytest.mark.parametrize("seed", [11, 12, 13])
@pytest.mark.parametrize("activation", ACTIVATIONS)
@pytest.mark.parametrize("kind", GRADIENT_KINDS)
def test_gradient_layer_kinds_and_activations(kind, activation, seed):
    assert_gradient_matches(gradient_spec(kind, activation), seed=seed)


def test_relative_error_floor():
    assert max_relative_error(np.array([0.0, 2.0]), np.array([1e-10, 2.0])) == pytest.approx(1e-7)
    assert max_relative_error(np.array([1.0]), np.array([1.01])) == pytest.approx(0.01 / 1.01)


def test_gradient_mse_regression():
    spec = build_plain_mlp(3, 2, width=4, depth=1, activation="tanh", loss_kind="mse")
    assert_gradient_matches(spec, seed=2)


def test_gradient_residual_mlp_with_batch_norm():
    spec = build_residual_mlp(3, 3, width=4, blocks=2, blocks_per_stage=1, activation="tanh")
    assert any(isinstance(layer, BatchNormSpec) for layer in spec.layers)
    assert len(spec.skip_edges) == 2
    assert_gradient_matches(spec, seed=3)


def test_gradient_residual_cnn():
    spec = build_residual_cnn((2, 4, 4), 2, channels=2, blocks=1, activation="leaky_relu")
    assert_gradient_matches(spec, seed=4)


def test_gradient_projection_skip():
    spec = NetworkSpec(
        input_shape=(3,),
        layers=[DenseSpec(in_features=3, out_features=4), ActivationSpec(activation="tanh"),
                DenseSpec(in_features=4, out_features=2)],
        skip_edges=[SkipEdge(source=-1, target=1, projection=True)],
    )
    assert [info.name for info in parameter_table(spec)][-1] == "skip0.weight"
    assert_gradient_matches(spec, seed=5)


def test_zero_branch_skip_gradient_equals_identity_path(small_batch):
    with_skip = NetworkSpec(
        input_shape=(3,),
        layers=[DenseSpec(in_features=3, out_features=4), ActivationSpec(activation="tanh"),
                DenseSpec(in_features=4, out_features=4), DenseSpec(in_features=4, out_features=3)],
        skip_edges=[SkipEdge(source=1, target=2)],
    )
    identity_only = NetworkSpec(
        input_shape=(3,),
        layers=[DenseSpec(in_features=3, out_features=4), ActivationSpec(activation="tanh"),
                DenseSpec(in_features=4, out_features=3)],
    )
    base = init_params(with_skip, 9).unflatten()
    params = ParamVector.flatten([
        ("layer0.weight", base["layer0.weight"]), ("layer0.bias", base["layer0.bias"]),
        ("layer2.weight", np.zeros((4, 4))), ("layer2.bias", np.zeros(4)),
        ("layer3.weight", base["layer3.weight"]), ("layer3.bias", base["layer3.bias"]),
    ])
    reference = ParamVector.flatten([
        ("layer0.weight", base["layer0.weight"]), ("layer0.bias", base["layer0.bias"]),
        ("layer2.weight", base["layer3.weight"]), ("layer2.bias", base["layer3.bias"]),
    ])
    loss, cache = forward(with_skip, params, small_batch)
    ref_loss, ref_cache = forward(identity_only, reference, small_batch)
    assert loss == pytest.approx(ref_loss, abs=1e-14)
    grad = backward(with_skip, params, cache)
    ref_grad = backward(identity_only, reference, ref_cache)
    np.testing.assert_allclose(grad.get("layer0.weight"), ref_grad.get("layer0.weight"), atol=1e-14)
    np.testing.assert_allclose(grad.get("layer3.weight"), ref_grad.get("layer2.weight"), atol=1e-14)


def test_init_params_determinism_and_ranges():
    spec = build_residual_mlp(2, 2, width=3, blocks=1)
    first, second = init_params(spec, 11), init_params(spec, 11)
    assert np.array_equal(first.values, second.values)
    for name in first.names:
        if name.endswith(".scale"):
            assert np.all(first.get(name) == 1.0)
        if name.endswith(".bias") or name.endswith(".shift"):
            assert np.all(first.get(name) == 0.0)
    dense = NetworkSpec(input_shape=(2,), layers=[DenseSpec(in_features=2, out_features=2)])
    weights = init_params(dense, 7).get("layer0.weight")
    assert np.all(np.abs(weights) <= np.sqrt(0.5))


def test_flatten_unflatten_views():
    vector = ParamVector.flatten([("a", np.ones((2, 3))), ("b", np.arange(4.0))])
    assert vector.d == 10
    arrays = vector.unflatten()
    assert arrays["a"].shape == (2, 3)
    assert np.array_equal(arrays["b"], np.arange(4.0))
    with pytest.raises(DimensionError):
        vector.with_values(np.zeros(9))


def test_identity_dense_passes_input_through(rng):
    spec = NetworkSpec(input_shape=(3,), layers=[DenseSpec(in_features=3, out_features=3)])
    params = ParamVector.flatten([("layer0.weight", np.eye(3)), ("layer0.bias", np.zeros(3))])
    inputs = rng.normal(size=(4, 3))
    assert np.array_equal(predict(spec, params, inputs), inputs)


def test_loss_functions():
    for classes in (2, 5, 10):
        loss, _ = cross_entropy_softmax(np.zeros((4, classes)), np.zeros(4))
        assert loss == pytest.approx(np.log(classes), abs=1e-12)
    pred = np.array([[0.5, -1.0], [2.0, 3.0]])
    loss, grad = mse(pred, pred.copy())
    assert loss == 0.0
    assert not np.any(grad)


def test_zero_mse_point_has_zero_gradient(rng):
    spec = NetworkSpec(input_shape=(3,), layers=[DenseSpec(in_features=3, out_features=2)], loss_kind="mse")
    params = init_params(spec, 0)
    inputs = rng.normal(size=(4, 3))
    batch = Batch(inputs, predict(spec, params, inputs), 0)
    loss, cache = forward(spec, params, batch)
    assert loss == 0.0
    assert not np.any(backward(spec, params, cache).values)


def test_batch_norm_examples(rng):
    result = batch_norm_forward(np.array([[1.0], [3.0]]), np.ones(1), np.zeros(1), eps=1e-12)
    np.testing.assert_allclose(result.out[:, 0], [-1.0, 1.0], atol=1e-9)

    constant = batch_norm_forward(np.full((4, 1), 2.5), np.ones(1), np.full(1, 0.7))
    np.testing.assert_allclose(constant.out, 0.7)

    x = 3.0 + 2.0 * rng.normal(size=(64, 3))
    normalized = batch_norm_forward(x, np.ones(3), np.zeros(3)).out
    np.testing.assert_allclose(normalized.mean(axis=0), 0.0, atol=1e-6)
    np.testing.assert_allclose(normalized.var(axis=0), 1.0, atol=1e-5)


def test_batch_norm_running_statistics(rng):
    x = rng.normal(size=(8, 2, 3, 3))
    result = batch_norm_forward(x, np.ones(2), np.zeros(2), momentum=0.1)
    np.testing.assert_allclose(result.running_mean, 0.1 * x.mean(axis=(0, 2, 3)))
    np.testing.assert_allclose(result.running_var, 0.9 + 0.1 * x.var(axis=(0, 2, 3)))
    evaluated = batch_norm_forward(x, np.ones(2), np.zeros(2), mode="eval")
    np.testing.assert_allclose(evaluated.out, x / np.sqrt(1.0 + 1e-5))


def test_batch_norm_needs_two_samples_in_train_mode():
    with pytest.raises(DimensionError):
        batch_norm_forward(np.ones((1, 3)), np.ones(3), np.zeros(3))


def test_forward_is_deterministic_and_pure(small_batch):
    spec = build_residual_mlp(3, 3, width=4, blocks=1)
    params = init_params(spec, 2)
    state = init_state(spec)
    before = {name: value.copy() for name, value in state.items()}
    first, cache = forward(spec, params, small_batch, "train", state)
    second, _ = forward(spec, params, small_batch, "train", state)
    assert first == second
    for name, value in state.items():
        assert np.array_equal(value, before[name])
    assert not np.array_equal(cache.state["layer3.running_mean"], state["layer3.running_mean"])


def test_backward_rejects_mismatched_cache(small_batch):
    spec = build_plain_mlp(3, 3, width=4, depth=1)
    params = init_params(spec, 0)
    _, cache = forward(spec, params, small_batch)
    with pytest.raises(CacheMismatchError):
        backward(spec, params.with_values(params.values + 1.0), cache)


def test_forward_divergence():
    spec = NetworkSpec(input_shape=(1,), layers=[DenseSpec(in_features=1, out_features=1)], loss_kind="mse")
    params = ParamVector.flatten([("layer0.weight", np.full((1, 1), 1e200)), ("layer0.bias", np.zeros(1))])
    batch = Batch(np.full((2, 1), 1e100), np.zeros((2, 1)), 0)
    with np.errstate(all="ignore"), pytest.raises(DivergenceError):
        forward(spec, params, batch)


def test_keep_skip_modes():
    def kept(mode, count=1):
        return [keep_skip(block, 4, 2, mode, count) for block in range(4)]

    assert kept("all") == [True] * 4
    assert kept("none") == [False] * 4
    assert kept("first_per_block") == [True, False, True, False]
    assert kept("first_k", 2) == [True, True, True, True]
    assert kept("last_m", 1) == [False, False, False, True]


def test_residual_mlp_ablation_axes():
    assert not build_residual_mlp(2, 2, width=3, blocks=3, skip_mode="none").skip_edges
    no_bn = build_residual_mlp(2, 2, width=3, blocks=3, bn_mode="none")
    assert not any(isinstance(layer, BatchNormSpec) for layer in no_bn.layers)
    first_bn = build_residual_mlp(2, 2, width=3, blocks=3, bn_mode="first_per_block")
    assert sum(isinstance(layer, BatchNormSpec) for layer in first_bn.layers) == 3
    all_bn = build_residual_mlp(2, 2, width=3, blocks=3, bn_mode="all")
    assert sum(isinstance(layer, BatchNormSpec) for layer in all_bn.layers) == 6


def test_model_description_roundtrip():
    model = NetworkModel(build_residual_cnn((1, 4, 4), 3, channels=2, blocks=1))
    rebuilt = model_from_description(model.describe())
    assert rebuilt.digest() == model.digest()
    assert np.array_equal(rebuilt.init_params(4).values, model.init_params(4).values)
