import numpy as np
import pytest

from privfed.nn import (
    ArchSpec,
    Dense,
    ModelParams,
    apply_update,
    build_model,
    flatten_update,
    model_delta,
    parameter_count,
    update_like,
    update_norm,
)
from privfed.streams import RandomStream
from privfed.tradeoff import (
    margin,
    margin_gradient,
    margin_lipschitz,
    noise_bound,
    perturb_model,
    prediction_flip_rate,
    prune_update,
)


def identity_model(k=3):
    # scores(x) = x, so margins are readable off the input
    return ModelParams((Dense(np.eye(k), np.zeros(k)),), (k,), k)


def test_margin_hand_case():
    model = identity_model()
    x = np.array([2.0, 0.5, -1.0])
    assert margin(model, x, 0) == pytest.approx(1.5)
    assert margin(model, x, 1) == pytest.approx(-1.5)  # misclassified
    assert margin(model, x, 2) == pytest.approx(-3.0)


def test_margin_validation():
    model = identity_model()
    with pytest.raises(ValueError):
        margin(model, np.zeros((2, 3)), 0)
    with pytest.raises(ValueError):
        margin(model, np.zeros(3), 3)
    single = ModelParams((Dense(np.ones((2, 1)), np.zeros(1)),), (2,), 1)
    with pytest.raises(ValueError):
        margin(single, np.zeros(2), 0)


def test_margin_gradient_direction():
    model = identity_model()
    x = np.array([2.0, 0.5, -1.0])
    grad = margin_gradient(model, x, 0)  # rival is class 1
    # d margin / d W = x (outer) (e_0 - e_1), d / d b = e_0 - e_1
    expected_w = np.outer(x, [1.0, -1.0, 0.0])
    assert np.allclose(grad.layers[0].w, expected_w)
    assert np.allclose(grad.layers[0].b, [1.0, -1.0, 0.0])
    assert margin_lipschitz(model, x, 0) == pytest.approx(
        np.sqrt((expected_w ** 2).sum() + 2.0))


def test_margin_gradient_first_order_prediction():
    model = build_model(ArchSpec("mlp-tiny", (6,), 3), seed=1)
    x = RandomStream(2).child("x").uniform(6)
    m0 = margin(model, x, 1)
    direction = flatten_update(margin_gradient(model, x, 1))
    direction /= np.linalg.norm(direction)
    h = 1e-6
    # stepping along the normalized margin gradient raises the margin at
    # exactly the gradient-norm rate, to first order
    nudged = apply_update(model, update_like(model, h * direction))
    assert (margin(nudged, x, 1) - m0) / h == pytest.approx(
        margin_lipschitz(model, x, 1), rel=1e-4)


def test_noise_bound_hand_case():
    model = identity_model()
    xs = np.array([[2.0, 0.5, -1.0], [0.0, 3.0, 1.0]])
    report = noise_bound(model, xs, [0, 1])
    assert report.margins == (pytest.approx(1.5), pytest.approx(2.0))
    lips = [margin_lipschitz(model, xs[i], y) for i, y in enumerate([0, 1])]
    assert report.lipschitz == pytest.approx(max(lips))
    assert report.bound == pytest.approx(1.5 / max(lips))


def test_noise_bound_zero_when_misclassified():
    model = identity_model()
    xs = np.array([[2.0, 0.5, -1.0]])
    assert noise_bound(model, xs, [1]).bound == 0.0


def test_noise_bound_validation():
    model = identity_model()
    with pytest.raises(ValueError):
        noise_bound(model, np.zeros((0, 3)), [])
    with pytest.raises(ValueError):
        noise_bound(model, np.zeros((2, 3)), [0])


def test_perturb_model_exact_norm():
    model = build_model(ArchSpec("mlp-tiny", (5,), 2), seed=3)
    stream = RandomStream(4).child("p")
    shaken = perturb_model(model, 0.25, stream)
    assert update_norm(model_delta(shaken, model)) == pytest.approx(0.25)
    assert perturb_model(model, 0.0, stream) is model
    with pytest.raises(ValueError):
        perturb_model(model, -1.0, stream)


def test_flip_rate_zero_norm_never_flips():
    model = build_model(ArchSpec("mlp-tiny", (5,), 3), seed=5)
    xs = RandomStream(6).child("x").uniform((4, 5))
    rate = prediction_flip_rate(model, xs, [0, 1, 2, 0], 0.0, 10, RandomStream(7))
    assert rate == 0.0


def test_flip_rate_monotone_in_norm():
    model = build_model(ArchSpec("mlp-tiny", (5,), 3), seed=8)
    xs = RandomStream(9).child("x").uniform((6, 5))
    stream = RandomStream(10)
    tiny = prediction_flip_rate(model, xs, [0] * 6, 1e-6, 30, stream)
    huge = prediction_flip_rate(model, xs, [0] * 6, 50.0, 30, stream)
    assert tiny <= huge
    assert huge > 0.5  # a norm-50 shake on he-scaled weights rewrites the model
    with pytest.raises(ValueError):
        prediction_flip_rate(model, xs, [0] * 6, 1.0, 0, stream)


def test_prune_update_ratios():
    model = build_model(ArchSpec("mlp-tiny", (4,), 2), seed=11)
    flat = RandomStream(12).child("g").normal(parameter_count(model))
    update = update_like(model, flat)
    assert prune_update(update, 0.0) is update
    gone = flatten_update(prune_update(update, 1.0))
    assert np.all(gone == 0.0)
    half = flatten_update(prune_update(update, 0.5))
    drop = int(0.5 * flat.size)
    assert np.count_nonzero(half == 0.0) == drop
    # the survivors are the largest-magnitude half, values untouched
    keep_idx = np.argsort(np.abs(flat), kind="stable")[drop:]
    assert np.array_equal(half[keep_idx], flat[keep_idx])
    assert np.all(np.abs(flat[half == 0.0]) <= np.abs(flat[keep_idx]).min() + 1e-18)


def test_prune_update_tie_stability():
    model = ModelParams((Dense(np.zeros((2, 2)), np.zeros(2)),), (2,), 2)
    update = update_like(model, np.array([1.0, -1.0, 1.0, -1.0, 2.0, 3.0]))
    pruned = flatten_update(prune_update(update, 0.5))
    # stable sort drops the earliest of the tied |1.0| entries
    assert np.array_equal(pruned, [0.0, 0.0, 0.0, -1.0, 2.0, 3.0])


def test_prune_update_validation():
    model = build_model(ArchSpec("mlp-tiny", (4,), 2), seed=13)
    update = update_like(model, np.ones(parameter_count(model)))
    with pytest.raises(ValueError):
        prune_update(update, -0.1)
    with pytest.raises(ValueError):
        prune_update(update, 1.1)
