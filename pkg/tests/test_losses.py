import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from nucleopipe import losses
from oracles import central_difference, rel_error

probs = arrays(np.float64, (5, 5), elements=st.floats(0.0, 1.0))
masks = arrays(np.float64, (5, 5), elements=st.sampled_from([0.0, 1.0]))


def test_perfect_prediction_scores_zero():
    t = np.array([[1.0, 0.0], [1.0, 1.0]])
    assert losses.dice_loss(t, t) == pytest.approx(0.0, abs=1e-12)
    assert losses.jaccard_loss(t, t) == pytest.approx(0.0, abs=1e-12)
    assert losses.combined_seg_loss(t, t) == pytest.approx(0.0, abs=1e-12)


def test_disjoint_prediction_near_one():
    p = np.array([[1.0, 0.0]])
    t = np.array([[0.0, 1.0]])
    assert losses.dice_loss(p, t) == pytest.approx(1.0, abs=1e-6)
    assert losses.jaccard_loss(p, t) == pytest.approx(1.0, abs=1e-6)


def test_combine_values():
    assert losses.combine(0.5, 0.5) == 0.25
    assert losses.combine(0.0, 0.0) == 0.0
    assert losses.combine(1.0, 0.0) == 0.0


def test_weighted_sum_left_to_right():
    assert losses.weighted_sum(0.1, 0.2, 0.3, losses.LossWeights()) == 2.3


def test_cce_uniform_is_log_classes():
    p = np.full((3, 3, 6), 1 / 6)
    t = np.zeros((3, 3), dtype=int)
    assert losses.weighted_cce(p, t, np.ones(6)) == pytest.approx(np.log(6))


def test_cce_clamps_zero_probability():
    p = np.zeros((1, 1, 6))
    p[0, 0, 1] = 1.0
    value = losses.weighted_cce(p, np.zeros((1, 1), dtype=int), np.ones(6))
    assert value == pytest.approx(-np.log(1e-7))


def test_cce_class_weights_scale_only_their_pixels():
    p = np.full((1, 2, 6), 1 / 6)
    t = np.array([[1, 2]])
    w = np.array([1.0, 3.0, 1.0, 1.0, 1.0, 1.0])
    assert losses.weighted_cce(p, t, w) == pytest.approx(2 * np.log(6))


def test_shape_and_weight_validation():
    with pytest.raises(ValueError):
        losses.dice_loss(np.zeros((2, 2)), np.zeros((2, 3)))
    with pytest.raises(ValueError):
        losses.weighted_cce(np.full((1, 1, 6), 1 / 6), np.zeros((1, 1), dtype=int), np.ones(5))
    with pytest.raises(ValueError):
        losses.weighted_cce(np.full((1, 1, 6), 1 / 6), np.full((1, 1), 6), np.ones(6))
    with pytest.raises(ValueError):
        losses.LossWeights(class_weights=(1, 1, 1, 1, 1, -1))
    with pytest.raises(ValueError):
        losses.LossWeights(0, 0, 0)


@settings(max_examples=200, deadline=None)
@given(p=probs, t=masks)
def test_seg_losses_bounded(p, t):
    for fn in (losses.dice_loss, losses.jaccard_loss, losses.combined_seg_loss):
        value = fn(p, t)
        assert -1e-12 <= value <= 1.0 + 1e-12


@settings(max_examples=200, deadline=None)
@given(p=probs, t=masks)
def test_combined_below_both_parts(p, t):
    d, j = losses.dice_loss(p, t), losses.jaccard_loss(p, t)
    c = losses.combined_seg_loss(p, t)
    assert c <= min(d, j) + 1e-12


@settings(max_examples=100, deadline=None)
@given(p=probs, t=masks)
def test_dice_never_exceeds_jaccard(p, t):
    assert losses.dice_loss(p, t) <= losses.jaccard_loss(p, t) + 1e-9


@settings(max_examples=100, deadline=None)
@given(p=probs, t=masks, scale=st.floats(0.1, 10.0))
def test_cce_linear_in_class_weights(p, t, scale):
    cp = np.stack([1 - p, p], axis=-1)
    target = t.astype(int)
    base = losses.weighted_cce(cp, target, [0.7, 1.3])
    assert losses.weighted_cce(cp, target, [0.7 * scale, 1.3 * scale]) == pytest.approx(base * scale)


@pytest.mark.parametrize(
    "loss, grad",
    [
        (losses.dice_loss, losses.dice_loss_grad),
        (losses.jaccard_loss, losses.jaccard_loss_grad),
        (losses.combined_seg_loss, losses.combined_seg_loss_grad),
    ],
)
def test_seg_gradients_match_finite_differences(loss, grad):
    rng = np.random.default_rng(0)
    for _ in range(10):
        p = rng.uniform(0.05, 0.95, (6, 6))
        t = (rng.random((6, 6)) < 0.4).astype(float)
        fd = central_difference(lambda x: loss(x, t), p)
        assert rel_error(grad(p, t), fd) < 1e-5


def test_cce_gradient_matches_finite_differences():
    rng = np.random.default_rng(1)
    w = rng.uniform(0.5, 2.0, 6)
    for _ in range(10):
        # moderate logits keep every p >= 0.08, where the finite-difference
        # truncation error of -log(p) stays far below the tolerance
        logits = rng.uniform(-1.0, 1.0, (4, 4, 6))
        p = np.exp(logits) / np.exp(logits).sum(-1, keepdims=True)
        t = rng.integers(0, 6, (4, 4))
        fd = central_difference(lambda x: losses.weighted_cce(x, t, w), p)
        assert rel_error(losses.weighted_cce_grad(p, t, w), fd) < 1e-5


def test_total_loss_breakdown():
    rng = np.random.default_rng(2)
    sem = rng.random((4, 4))
    edge = rng.random((4, 4))
    cp = np.full((4, 4, 6), 1 / 6)
    targets = ((sem > 0.5).astype(float), (edge > 0.5).astype(float), np.ones((4, 4), dtype=int))
    out = losses.total_loss((sem, edge, cp), targets)
    expected = out.semantic + 5 * out.edge + 4 * out.classification
    assert out.total == pytest.approx(expected)
    equal = losses.total_loss((sem, edge, cp), targets, losses.LossWeights().with_equal_class_weights())
    assert equal.total == out.total


def test_inverse_frequency_weights():
    cm = np.array([[0, 0, 0, 1]])
    w = losses.inverse_frequency_weights([cm], 3)
    assert w.mean() == pytest.approx(1.0)
    assert w[1] == pytest.approx(3 * w[0])
    assert w[2] == w[1]
    assert (losses.inverse_frequency_weights([], 4) == 1).all()


def test_config_parsing(tmp_path):
    path = tmp_path / "loss.cfg"
    path.write_text("# weights\nlambda_b = 2\nclass_weights=1,2,3,4,5,6  # per class\n\n")
    lw = losses.load_loss_weights(path)
    assert (lw.lambda_a, lw.lambda_b, lw.lambda_c) == (1.0, 2.0, 4.0)
    assert lw.class_weights == (1, 2, 3, 4, 5, 6)
    with pytest.raises(ValueError, match="line 1"):
        losses.parse_kv_config("no equals sign")
