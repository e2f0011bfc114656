"""Survival and segmentation metrics: C-index, mean Brier, MAE/RMSE, KM, log-rank, Dice."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

log = logging.getLogger(__name__)


class UndefinedConcordance(ValueError):
    """No comparable pairs, so the concordance index has no value."""


@dataclass
class Concordance:
    concordant: int
    discordant: int
    tied: int
    comparable: int

    @property
    def undefined(self) -> bool:
        # no comparable pairs, or every comparable pair tied on risk
        return self.comparable == 0 or self.tied == self.comparable

    @property
    def value(self) -> float:
        if self.comparable == 0:
            return math.nan
        # integer numerator keeps the ratio exact up to the final division
        return (2 * self.concordant + self.tied) / (2 * self.comparable)


def concordance_detail(risks, times, censored) -> Concordance:
    risks = np.asarray(risks, dtype=np.float64).ravel()
    times = np.asarray(times, dtype=np.float64).ravel()
    censored = np.asarray(censored).ravel()
    if not risks.size == times.size == censored.size:
        raise ValueError(f"length mismatch: risks {risks.size}, times {times.size}, censor {censored.size}")
    if np.any(times <= 0):
        raise ValueError("times must be positive")
    conc = disc = tied = comp = 0
    for i in np.flatnonzero(censored == 0):
        later = times > times[i]
        r = risks[later]
        comp += r.size
        conc += int((risks[i] > r).sum())
        disc += int((risks[i] < r).sum())
        tied += int((risks[i] == r).sum())
    return Concordance(conc, disc, tied, comp)


def concordance_index(risks, times, censored) -> float:
    """Harrell's C: pairs (i, j) with t_i < t_j and i uncensored; higher risk should fail first."""
    res = concordance_detail(risks, times, censored)
    if res.comparable == 0:
        raise UndefinedConcordance("no comparable pairs (need an uncensored time below some other time)")
    return res.value


def mean_brier(S, y, censored) -> float:
    """Brier score averaged within (label, censor) categories, then across them.

    Observed status o(j) = 1 while j < y.  Censored patients only count on
    the bins before their own.
    """
    S = np.atleast_2d(np.asarray(S, dtype=np.float64))
    y = np.asarray(y, dtype=int).ravel()
    censored = np.asarray(censored, dtype=int).ravel()
    n_pat, n_bins = S.shape
    if not y.size == censored.size == n_pat:
        raise ValueError("S, y and censor flags must describe the same patients")
    j = np.arange(1, n_bins + 1)
    per_cat: dict[tuple[int, int], list[float]] = {}
    dropped = 0
    for i in range(n_pat):
        o = (j < y[i]).astype(np.float64)
        keep = j < y[i] if censored[i] else np.ones(n_bins, dtype=bool)
        if not keep.any():
            dropped += 1
            continue
        bs = float(np.mean((S[i, keep] - o[keep]) ** 2))
        per_cat.setdefault((int(y[i]), int(censored[i])), []).append(bs)
    if dropped:
        log.info("mean_brier: %d censored patient(s) in bin 1 have no evaluable bins and were skipped", dropped)
    if not per_cat:
        raise ValueError("mean_brier: no patient has an evaluable bin")
    return float(np.mean([np.mean(v) for v in per_cat.values()]))


def mae_rmse(pred, true) -> tuple[float, float]:
    pred = np.asarray(pred, dtype=np.float64).ravel()
    true = np.asarray(true, dtype=np.float64).ravel()
    if pred.size == 0 or pred.size != true.size:
        raise ValueError(f"need equal non-empty inputs, got {pred.size} and {true.size}")
    e = pred - true
    return float(np.abs(e).mean()), float(np.sqrt((e * e).mean()))


# ---------------------------------------------------------------------------
# Kaplan-Meier and log-rank


@dataclass
class KmCurve:
    times: np.ndarray      # distinct event times
    survival: np.ndarray   # S(t) just after each event time
    at_risk: np.ndarray
    events: np.ndarray

    def at(self, t: float) -> float:
        k = np.searchsorted(self.times, t, side="right")
        return 1.0 if k == 0 else float(self.survival[k - 1])


def km_curve(times, events) -> KmCurve:
    """Product-limit estimate; ``events`` is 1 where the event was observed."""
    times = np.asarray(times, dtype=np.float64).ravel()
    events = np.asarray(events, dtype=int).ravel()
    if np.any(times <= 0):
        raise ValueError("times must be positive")
    grid = np.unique(times[events == 1])
    at_risk = np.array([(times >= t).sum() for t in grid], dtype=int)
    d = np.array([((times == t) & (events == 1)).sum() for t in grid], dtype=int)
    # (n - d) / n rounds once, so hand fixtures like 2/3 come out exact
    surv = np.cumprod((at_risk - d) / np.maximum(at_risk, 1))
    return KmCurve(grid, surv, at_risk, d)


def _gamma_p_series(a: float, x: float) -> float:
    term = total = 1.0 / a
    ap = a
    for _ in range(10_000):
        ap += 1.0
        term *= x / ap
        total += term
        if abs(term) < abs(total) * 1e-16:
            break
    return total * math.exp(-x + a * math.log(x) - math.lgamma(a))


def _gamma_q_fraction(a: float, x: float) -> float:
    # modified Lentz evaluation of the continued fraction for Q(a, x)
    tiny = 1e-300
    b = x + 1.0 - a
    c = 1.0 / tiny
    d = 1.0 / b
    h = d
    for i in range(1, 10_000):
        an = -i * (i - a)
        b += 2.0
        d = an * d + b
        d = tiny if abs(d) < tiny else d
        c = b + an / c
        c = tiny if abs(c) < tiny else c
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < 1e-16:
            break
    return h * math.exp(-x + a * math.log(x) - math.lgamma(a))


def gamma_q(a: float, x: float) -> float:
    """Regularized upper incomplete gamma Q(a, x)."""
    if x <= 0:
        return 1.0
    if x < a + 1.0:
        return 1.0 - _gamma_p_series(a, x)
    return _gamma_q_fraction(a, x)


def chi2_sf(x: float, dof: int = 1) -> float:
    return gamma_q(dof / 2.0, x / 2.0)


@dataclass
class LogRankResult:
    statistic: float
    p_value: float
    observed_a: float = 0.0
    expected_a: float = 0.0


def logrank(times_a, events_a, times_b, events_b) -> LogRankResult:
    ta, ea = np.asarray(times_a, dtype=np.float64), np.asarray(events_a, dtype=int)
    tb, eb = np.asarray(times_b, dtype=np.float64), np.asarray(events_b, dtype=int)
    if ta.size == 0 or tb.size == 0:
        raise ValueError("both groups need at least one patient")
    grid = np.unique(np.concatenate([ta[ea == 1], tb[eb == 1]]))
    o = e = v = 0.0
    for t in grid:
        na, nb = (ta >= t).sum(), (tb >= t).sum()
        da = ((ta == t) & (ea == 1)).sum()
        d = da + ((tb == t) & (eb == 1)).sum()
        n = na + nb
        o += da
        e += d * na / n
        if n > 1:
            v += d * (na / n) * (nb / n) * (n - d) / (n - 1)
    if v <= 0:
        return LogRankResult(0.0, 1.0, o, e)
    stat = (o - e) ** 2 / v
    return LogRankResult(stat, chi2_sf(stat, 1), o, e)


def median_risk_stratify(risks) -> tuple[np.ndarray, np.ndarray]:
    """Split at the median risk; ties at the median go to the low group.

    Returns ``(high, low)`` index arrays.
    """
    risks = np.asarray(risks, dtype=np.float64).ravel()
    if risks.size < 2:
        raise ValueError("need at least two patients to stratify")
    med = np.median(risks)
    return np.flatnonzero(risks > med), np.flatnonzero(risks <= med)


def dice_jaccard(a, b) -> tuple[float, float]:
    a = np.asarray(a).astype(bool)
    b = np.asarray(b).astype(bool)
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    inter = int(np.logical_and(a, b).sum())
    union = int(np.logical_or(a, b).sum())
    total = int(a.sum() + b.sum())
    if total == 0:
        return 1.0, 1.0
    return 2.0 * inter / total, inter / union
