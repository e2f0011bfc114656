"""Task heads on h_final: discrete-hazard survival / OHE and bounded PPG change."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .nn import Linear, Module
from .tensor import Tensor


@dataclass
class TimeBins:
    cuts: np.ndarray  # ascending interior cut points, n - 1 of them

    @property
    def n(self) -> int:
        return self.cuts.size + 1

    def label(self, t) -> np.ndarray:
        """Bin labels in 1..n: the first j with t < cut_j, else n."""
        return 1 + np.searchsorted(self.cuts, np.asarray(t, dtype=np.float64), side="right")


def make_time_bins(times, censored, n: int = 4) -> TimeBins:
    times = np.asarray(times, dtype=np.float64)
    event = np.asarray(censored) == 0
    observed = times[event]
    if np.unique(observed).size < n:
        raise ValueError(f"need at least {n} distinct uncensored times to build {n} bins, got {np.unique(observed).size}")
    cuts = np.percentile(observed, np.linspace(0, 100, n + 1)[1:-1])
    if np.any(np.diff(cuts) <= 0):
        raise ValueError(f"quantile cut points are not strictly increasing: {cuts}")
    return TimeBins(cuts)


class HazardHead(Module):
    """in_dim -> h1 -> h2 -> n with ReLU, then sigmoid hazards."""

    def __init__(self, in_dim: int, n: int, rng: np.random.Generator, h1: int = 256, h2: int = 64):
        self.fc1 = Linear(in_dim, h1, rng)
        self.fc2 = Linear(h1, h2, rng)
        self.out = Linear(h2, n, rng)

    def __call__(self, h: Tensor) -> Tensor:
        return T.sigmoid(self.out(T.relu(self.fc2(T.relu(self.fc1(h))))))


SurvivalHead = OheHead = HazardHead


class PpgHead(Module):
    """Predicts the pressure change: main path on h_final plus a pressure subnet."""

    def __init__(self, in_dim: int, pressure_dim: int, rng: np.random.Generator,
                 h1: int = 256, h2: int = 64, h3: int = 16, bound: float = 50.0):
        self.fc1 = Linear(in_dim, h1, rng)
        self.fc2 = Linear(h1, h2, rng)
        self.sub = Linear(pressure_dim, h3, rng)
        self.out = Linear(h2 + h3, 1, rng)
        self.bound = bound

    def __call__(self, h: Tensor, pressure) -> Tensor:
        if pressure is None:
            raise ValueError("PPG head needs the pressure-group values")
        main = T.relu(self.fc2(T.relu(self.fc1(h))))
        side = T.relu(self.sub(T.as_tensor(pressure)))
        return T.scale(T.tanh(self.out(T.concat_cols(main, side))), self.bound)


def survival_curve(Z: Tensor) -> Tensor:
    """S(j) = prod_{k<=j} (1 - z_k)."""
    return T.cumprod_cols(T.sub(1.0, Z))


def nll_loss(Z: Tensor, y: int, c: int) -> Tensor:
    """Discrete-time censored likelihood with f(Z, 0) = 1.

    L = -c log f(Z, y) - (1 - c) log f(Z, y - 1) - (1 - c) log z_y
    """
    Z = T.as_tensor(Z)
    n = Z.shape[1]
    if not 1 <= y <= n:
        raise ValueError(f"bin label {y} outside 1..{n}")
    S = survival_curve(Z)
    if c:
        return T.scale(T.log(T.slice_cols(S, y - 1, y)), -1.0)
    terms = T.log(T.slice_cols(Z, y - 1, y))
    if y > 1:
        terms = T.add(terms, T.log(T.slice_cols(S, y - 2, y - 1)))
    return T.scale(terms, -1.0)


def risk_score(Z) -> float:
    """Negative sum of the survival curve; lies in [-n, 0], larger is riskier."""
    z = np.asarray(Z.data if isinstance(Z, Tensor) else Z, dtype=np.float64).reshape(-1)
    return float(-np.cumprod(1.0 - z).sum())


def risk_tensor(Z: Tensor) -> Tensor:
    return T.scale(T.sum_all(survival_curve(Z)), -1.0)


def ppg_loss(delta: Tensor, ppg_pre: float, ppg_post: float) -> Tensor:
    err = T.sub(T.add(delta, float(ppg_pre)), float(ppg_post))
    return T.sum_all(T.elemwise_mul(err, err))


def predicted_post(delta, ppg_pre: float) -> float:
    d = delta.item() if isinstance(delta, Tensor) else float(delta)
    return ppg_pre + d

