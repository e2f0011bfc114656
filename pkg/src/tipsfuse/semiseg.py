"""Loss machinery for mean-teacher semi-supervised segmentation (numpy, no networks)."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

SMOOTH = 1.0
PROB_FLOOR = 1e-12


def _same_shape(*arrays):
    shapes = {np.shape(a) for a in arrays}
    if len(shapes) != 1:
        raise ValueError(f"shape mismatch: {sorted(shapes)}")


def dice_loss(p, y, s: float = SMOOTH) -> float:
    """1 - (2 sum(p y) + s) / (sum(p) + sum(y) + s); zero when both inputs are empty."""
    p = np.asarray(p, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    return float(1.0 - (2.0 * (p * y).sum() + s) / (p.sum() + y.sum() + s))


def weighted_dice(P, Y, M=None, alpha: float = 2.0 / 3.0, s: float = SMOOTH) -> float:
    """alpha * foreground dice loss + (1 - alpha) * background dice loss, both inside M."""
    P = np.asarray(P, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    M = np.ones_like(P) if M is None else np.asarray(M, dtype=np.float64)
    _same_shape(P, Y, M)
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    fg = dice_loss(P * M, Y * M, s)
    bg = dice_loss((1.0 - P) * M, (1.0 - Y) * M, s)
    return alpha * fg + (1.0 - alpha) * bg


@dataclass(frozen=True)
class ConfidenceSchedule:
    total: int
    start: float = 0.8
    end: float = 0.95


def confidence_threshold(schedule: ConfidenceSchedule, iteration: int) -> float:
    if not 0 <= iteration <= schedule.total:
        raise ValueError(f"iteration {iteration} outside [0, {schedule.total}]")
    if schedule.total == 0:
        return schedule.end
    if iteration == schedule.total:
        return schedule.end
    return schedule.start + (schedule.end - schedule.start) * iteration / schedule.total


def pseudo_mask(P_teacher, tau: float) -> tuple[np.ndarray, np.ndarray]:
    """Hard labels 1[p >= 0.5] and the confident-pixel mask max(p, 1 - p) >= tau."""
    if not 0.5 <= tau < 1.0:
        raise ValueError(f"tau must lie in [0.5, 1), got {tau}")
    P = np.asarray(P_teacher, dtype=np.float64)
    labels = (P >= 0.5).astype(np.float64)
    mask = (np.maximum(P, 1.0 - P) >= tau).astype(np.float64)
    return labels, mask


def consistency_loss(P_s1, P_s2, Y_hat, M, alpha: float = 2.0 / 3.0) -> float:
    _same_shape(P_s1, P_s2, Y_hat, M)
    return 0.5 * (weighted_dice(P_s1, Y_hat, M, alpha) + weighted_dice(P_s2, Y_hat, M, alpha))


def total_semi_loss(l_sup: float, l_con: float, lam: float = 1.0) -> float:
    if lam < 0:
        raise ValueError("lambda must be nonnegative")
    return l_sup + lam * l_con


def ema_update(teacher, student, momentum: float = 0.99):
    """Return teacher <- m * teacher + (1 - m) * student for each parameter array."""
    if not 0.0 <= momentum < 1.0:
        raise ValueError(f"momentum must lie in [0, 1), got {momentum}")
    single = isinstance(teacher, np.ndarray) or np.isscalar(teacher)
    ts = [teacher] if single else list(teacher)
    ss = [student] if single else list(student)
    if len(ts) != len(ss):
        raise ValueError(f"{len(ts)} teacher arrays vs {len(ss)} student arrays")
    out = []
    for t, s in zip(ts, ss):
        t, s = np.asarray(t, dtype=np.float64), np.asarray(s, dtype=np.float64)
        _same_shape(t, s)
        out.append(momentum * t + (1.0 - momentum) * s)
    return out[0] if single else out


def seg_ft_loss(P, Y, M=None) -> float:
    """Dice loss plus binary cross-entropy averaged over the pixels in M."""
    P = np.asarray(P, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    M = np.ones_like(P) if M is None else np.asarray(M, dtype=np.float64)
    _same_shape(P, Y, M)
    Pc = np.clip(P, PROB_FLOOR, 1.0 - PROB_FLOOR)
    bce = -(Y * np.log(Pc) + (1.0 - Y) * np.log(1.0 - Pc))
    n = M.sum()
    ce = float((bce * M).sum() / n) if n > 0 else 0.0
    return dice_loss(P * M, Y * M) + ce
