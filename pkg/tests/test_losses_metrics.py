import math

import numpy as np
import pytest

from fdcheck import check
from neuroprog.segtrain import losses as Lo
from neuroprog.segtrain import metrics as M
from neuroprog.tensor import ShapeError, Tensor


def probs(rng, shape):
    return Tensor(rng.uniform(0.05, 0.95, size=shape), requires_grad=True)


def test_focal_single_pixel_hand_value(f64):
    got = Lo.focal_loss(Tensor(np.array([0.5])), np.array([1.0]), Lo.FocalParams(0.75, 2.0)).item()
    assert got == pytest.approx(0.75 * 0.25 * math.log(2), abs=1e-12)
    assert got == pytest.approx(0.1299651, abs=1e-7)


def test_focal_omega0_is_half_bce(f64):
    rng = np.random.default_rng(0)
    for _ in range(20):
        p = probs(rng, (2, 1, 8, 8))
        y = (rng.random((2, 1, 8, 8)) < 0.2).astype(float)
        f = Lo.focal_loss(p, y, Lo.FocalParams(0.5, 0.0)).item()
        assert abs(f - 0.5 * Lo.bce_loss(p, y).item()) < 1e-9


def test_focal_matches_direct_formula(f64):
    rng = np.random.default_rng(1)
    p = rng.uniform(0.01, 0.99, size=50)
    y = (rng.random(50) < 0.3).astype(float)
    a, w = 0.75, 2.0
    ref = -np.mean(a * y * (1 - p) ** w * np.log(p) + (1 - a) * (1 - y) * p ** w * np.log(1 - p))
    assert Lo.focal_loss(Tensor(p), y).item() == pytest.approx(ref, rel=1e-12)


@pytest.mark.parametrize("omega", [0.0, 1.0, 2.0, 2.5])
def test_focal_grad(f64, omega):
    rng = np.random.default_rng(2)
    p = probs(rng, (1, 1, 4, 4))
    y = (rng.random((1, 1, 4, 4)) < 0.4).astype(float)
    assert check(lambda: Lo.focal_loss(p, y, Lo.FocalParams(0.75, omega)), [p]) < 1e-6


@pytest.mark.parametrize("fn", [Lo.bce_loss, Lo.dice_loss, Lo.jaccard_loss])
def test_other_loss_grads(f64, fn):
    rng = np.random.default_rng(3)
    p = probs(rng, (2, 1, 4, 4))
    y = (rng.random((2, 1, 4, 4)) < 0.4).astype(float)
    assert check(lambda: fn(p, y), [p]) < 1e-6


def test_focal_finite_at_extremes(f64):
    p = Tensor(np.array([0.0, 1.0, 0.0, 1.0]))
    y = np.array([1.0, 0.0, 0.0, 1.0])
    assert math.isfinite(Lo.focal_loss(p, y).item())


def test_dice_ge_jaccard_seed9(f64):
    rng = np.random.default_rng(9)
    p = Tensor(rng.random((1, 1, 16, 16)))
    y = (rng.random((1, 1, 16, 16)) < 0.3).astype(float)
    assert 1 - Lo.dice_loss(p, y).item() >= 1 - Lo.jaccard_loss(p, y).item()


def test_loss_validation(f64):
    with pytest.raises(ValueError):
        Lo.FocalParams(alpha=1.0)
    with pytest.raises(ValueError):
        Lo.FocalParams(omega=-1)
    with pytest.raises(ShapeError):
        Lo.focal_loss(Tensor(np.zeros(3)), np.zeros(4))
    with pytest.raises(ValueError, match="unknown loss"):
        Lo.make_loss("hinge")


def test_hand_confusion():
    m = M.Metrics.from_counts(tp=8, fp=2, tn=88, fn=2)
    assert m.f1 == pytest.approx(0.8) and m.acc == pytest.approx(0.96)
    assert m.se == pytest.approx(0.8) and m.sp == pytest.approx(88 / 90)


def test_confusion_identities():
    rng = np.random.default_rng(4)
    for _ in range(50):
        n = int(rng.integers(10, 300))
        p, y = rng.random(n), rng.random(n) < 0.3
        tp, fp, tn, fn = M.confusion(p, y)
        assert tp + fp + tn + fn == n
        assert tp + fn == y.sum()
        m = M.Metrics.from_counts(tp, fp, tn, fn)
        if tp + fp and tp + fn:
            prec, rec = tp / (tp + fp), tp / (tp + fn)
            if prec + rec:
                assert m.f1 == pytest.approx(2 * prec * rec / (prec + rec), rel=1e-12)


def brute_auc(p, y):
    pos, neg = p[y], p[~y]
    s = 0.0
    for a in pos:
        for b in neg:
            s += 1.0 if a > b else (0.5 if a == b else 0.0)
    return s / (len(pos) * len(neg))


def test_auc_seed13_against_loop():
    rng = np.random.default_rng(13)
    p, y = rng.random(200), rng.random(200) < 0.3
    assert abs(M.auc(p, y) - brute_auc(p, y)) < 1e-9


def test_auc_with_ties():
    rng = np.random.default_rng(14)
    p = rng.integers(0, 5, size=120) / 4.0
    y = rng.random(120) < 0.4
    assert abs(M.auc(p, y) - brute_auc(p, y)) < 1e-9
    assert abs(M.pairwise_auc(p, y) - brute_auc(p, y)) < 1e-9


def test_fov_excludes_pixels():
    p = np.array([[0.9, 0.9], [0.1, 0.9]])
    y = np.array([[1, 0], [0, 1]])
    fov = np.array([[1, 0], [1, 1]])
    assert M.confusion(p, y, fov) == (2, 0, 1, 0)


def test_undefined_metrics_flagged():
    m = M.Metrics.from_counts(0, 0, 10, 0)
    assert math.isnan(m.f1) and "f1_undefined" in m.flags and m.fitness == 0.0
    with pytest.raises(M.MetricError):
        M.auc(np.ones(4), np.zeros(4))
    m = M.confusion_and_metrics(np.ones(4) * 0.2, np.zeros(4))
    assert "auc_undefined" in m.flags


def test_metric_input_errors():
    with pytest.raises(M.MetricError):
        M.confusion(np.zeros(3), np.zeros(4))
    with pytest.raises(M.MetricError):
        M.confusion(np.zeros(3), np.zeros(3), threshold=1.0)


def test_overlay_colours():
    img = M.overlay(np.array([[0.9, 0.9, 0.1, 0.1]]), np.array([[1, 0, 1, 0]]))
    assert img[0].tolist() == [[0, 255, 0], [0, 0, 255], [255, 0, 0], [0, 0, 0]]


def test_overlay_of_perfect_prediction_has_no_errors():
    y = (np.random.default_rng(0).random((8, 8)) < 0.3).astype(np.uint8)
    img = M.overlay(y.astype(float), y)
    assert not np.any(np.all(img == (0, 0, 255), axis=-1))
    assert not np.any(np.all(img == (255, 0, 0), axis=-1))
