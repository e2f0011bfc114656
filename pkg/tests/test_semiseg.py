import math

import numpy as np
import pytest

from tipsfuse.semiseg import (
    ConfidenceSchedule,
    confidence_threshold,
    consistency_loss,
    dice_loss,
    ema_update,
    pseudo_mask,
    seg_ft_loss,
    total_semi_loss,
    weighted_dice,
)

P22 = np.array([[1.0, 0.0], [0.0, 0.0]])
Y22 = np.array([[1.0, 1.0], [0.0, 0.0]])


def half_grid(n=16):
    Y = np.zeros((n, n))
    Y[: n // 2] = 1
    return Y


def test_weighted_dice_2x2_hand_value():
    # foreground: 1 - 3/4; background: (1-P)=(0,1,1,1), (1-Y)=(0,0,1,1) -> 1 - 5/6
    assert weighted_dice(P22, Y22, alpha=2 / 3) == pytest.approx(2 / 9, abs=1e-12)
    assert dice_loss(P22, Y22) == pytest.approx(0.25)


def test_weighted_dice_perfect_and_empty_mask():
    Y = half_grid()
    assert weighted_dice(Y, Y) == 0.0
    assert weighted_dice(np.random.default_rng(0).random(Y.shape), Y, np.zeros_like(Y)) == 0.0


def test_weighted_dice_in_unit_interval_and_checks():
    rng = np.random.default_rng(1)
    for _ in range(20):
        P, Y = rng.random((5, 5)), (rng.random((5, 5)) < 0.5).astype(float)
        assert 0.0 <= weighted_dice(P, Y) <= 1.0
    with pytest.raises(ValueError):
        weighted_dice(np.ones((2, 2)), np.ones((2, 3)))
    with pytest.raises(ValueError):
        weighted_dice(P22, Y22, alpha=1.5)


def test_confidence_schedule():
    s = ConfidenceSchedule(total=100)
    assert confidence_threshold(s, 0) == 0.8
    assert confidence_threshold(s, 100) == 0.95
    assert confidence_threshold(s, 50) == pytest.approx(0.875)
    with pytest.raises(ValueError):
        confidence_threshold(s, 101)


def test_pseudo_mask_rules():
    y, m = pseudo_mask(np.array([0.99, 0.6, 0.5, 0.02]), 0.95)
    assert y.tolist() == [1, 1, 1, 0]
    assert m.tolist() == [1, 0, 0, 1]
    with pytest.raises(ValueError):
        pseudo_mask(np.array([0.5]), 1.0)


def test_pseudo_mask_coverage_non_increasing_in_tau():
    P = np.random.default_rng(0).random(500)
    counts = [pseudo_mask(P, tau)[1].sum() for tau in np.linspace(0.5, 0.99, 20)]
    assert all(a >= b for a, b in zip(counts, counts[1:]))


def test_consistency_loss_cases():
    Y = half_grid()
    M = np.ones_like(Y)
    assert consistency_loss(Y, Y, Y, M) == 0.0
    assert consistency_loss(np.random.default_rng(0).random(Y.shape), Y, Y, np.zeros_like(Y)) == 0.0
    one = np.ones((2, 2))
    assert consistency_loss(Y22, P22, Y22, one) == pytest.approx(0.5 * 2 / 9, abs=1e-12)
    a, b = np.random.default_rng(1).random((2, 4, 4))
    assert consistency_loss(a, b, Y[:4, :4], M[:4, :4]) == consistency_loss(b, a, Y[:4, :4], M[:4, :4])


def test_total_semi_loss():
    assert total_semi_loss(0.2, 0.1, 1.0) == pytest.approx(0.3)
    assert total_semi_loss(0.2, 0.7, 0.0) == 0.2
    with pytest.raises(ValueError):
        total_semi_loss(0.2, 0.1, -1)


def test_ema_update_rules():
    s = np.random.default_rng(0).normal(size=(3, 2))
    np.testing.assert_array_equal(ema_update(np.zeros((3, 2)), s, 0.0), s)
    assert ema_update(np.array(1.0), np.array(0.0), 0.99) == pytest.approx(0.99)
    out = ema_update([np.ones(2), np.zeros(3)], [np.zeros(2), np.ones(3)], 0.5)
    assert out[0].tolist() == [0.5, 0.5] and out[1].tolist() == [0.5, 0.5, 0.5]
    with pytest.raises(ValueError):
        ema_update(np.ones(2), np.ones(3))
    with pytest.raises(ValueError):
        ema_update(np.ones(2), np.ones(2), 1.0)


def test_ema_geometric_convergence():
    teacher, student, m = np.array([3.0, -1.0]), np.array([0.5, 2.0]), 0.99
    t = teacher.copy()
    for k in range(1, 101):
        t = ema_update(t, student, m)
        closed = student + m ** k * (teacher - student)
        assert np.abs(t - closed).max() < 1e-12


def test_seg_ft_loss_cases():
    Y = half_grid()
    assert seg_ft_loss(Y, Y) < 1e-3
    P = np.full(Y.shape, 0.5)
    expected = dice_loss(P, Y) + math.log(2)
    assert seg_ft_loss(P, Y) == pytest.approx(expected, abs=1e-12)
    M = np.zeros_like(Y)
    M[:, :8] = 1
    P2 = np.where(M > 0, 0.5, 0.9)
    assert seg_ft_loss(P2, Y, M) == pytest.approx(dice_loss(P2 * M, Y * M) + math.log(2), abs=1e-12)
