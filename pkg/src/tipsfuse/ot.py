"""Entropic optimal transport for co-attention between token sets."""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from . import tensor as T
from .tensor import Tensor


class OtError(ValueError):
    pass


@dataclass(frozen=True)
class OtConfig:
    epsilon: float = 0.1
    max_iters: int = 100
    tol: float = 1e-6

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")
        if self.max_iters < 1:
            raise ValueError(f"max_iters must be >= 1, got {self.max_iters}")


@dataclass
class TransportPlan:
    plan: np.ndarray
    mu: np.ndarray
    nu: np.ndarray
    cost: float
    iterations: int
    violations: list[float] = field(default_factory=list)

    @property
    def shape(self) -> tuple[int, int]:
        return self.plan.shape

    def marginal_error(self) -> float:
        return max(
            float(np.abs(self.plan.sum(axis=1) - self.mu).max()),
            float(np.abs(self.plan.sum(axis=0) - self.nu).max()),
        )


def cost_matrix(a, b) -> np.ndarray:
    """Pairwise Euclidean distances between the rows of ``a`` and ``b``."""
    a = np.atleast_2d(np.asarray(a.data if isinstance(a, Tensor) else a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b.data if isinstance(b, Tensor) else b, dtype=np.float64))
    if a.shape[1] != b.shape[1]:
        raise OtError(f"cost_matrix: feature dims differ ({a.shape[1]} vs {b.shape[1]})")
    sq = (a * a).sum(1)[:, None] + (b * b).sum(1)[None, :] - 2.0 * a @ b.T
    return np.sqrt(np.maximum(sq, 0.0))


def uniform(n: int) -> np.ndarray:
    return np.full(n, 1.0 / n)


def _check_marginal(x: np.ndarray, name: str) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64).ravel()
    if np.any(x < 0) or abs(x.sum() - 1.0) > 1e-9:
        raise OtError(f"{name} must be nonnegative and sum to 1 (sum={x.sum():.12g})")
    return x


def _sweeps(C, mu, nu, eps, f, g, n_sweeps, tol, violations=None):
    """Stabilized Sinkhorn sweeps at fixed eps; potentials are absorbed into (f, g)."""
    def kernel():
        return np.exp((f[:, None] + g[None, :] - C) / eps)

    K = kernel()
    u = np.ones_like(mu)
    v = np.ones_like(nu)
    done = 0
    for done in range(1, n_sweeps + 1):
        Kv = K @ v
        if np.any((Kv == 0) & (mu > 0)):
            f, g = f + eps * np.log(np.maximum(u, 1e-300)), g + eps * np.log(np.maximum(v, 1e-300))
            f = f + eps * (np.log(mu) - logsumexp((f[:, None] + g[None, :] - C) / eps, axis=1))
            K, u, v = kernel(), np.ones_like(mu), np.ones_like(nu)
            Kv = K @ v
        u = mu / Kv
        KTu = K.T @ u
        if np.any((KTu == 0) & (nu > 0)):
            f = f + eps * np.log(np.maximum(u, 1e-300))
            g = g + eps * (np.log(nu) - logsumexp((f[:, None] + g[None, :] - C) / eps, axis=0))
            K, u, v = kernel(), np.ones_like(mu), np.ones_like(nu)
            KTu = K.T @ u
        v = nu / KTu
        if max(np.abs(np.log(u)).max(), np.abs(np.log(v)).max()) > _ABSORB:
            f, g = f + eps * np.log(u), g + eps * np.log(v)
            K, u, v = kernel(), np.ones_like(mu), np.ones_like(nu)
        violation = float(np.abs(u * (K @ v) - mu).sum())
        if violations is not None:
            violations.append(violation)
        if violation < tol:
            break
    return f + eps * np.log(u), g + eps * np.log(v), done


_ABSORB = 30.0
_ANNEAL_RATIO = 50.0


def sinkhorn(C, mu=None, nu=None, cfg: OtConfig = OtConfig()) -> TransportPlan:
    """Sinkhorn-Knopp for min <T, C> - eps H(T) over couplings of (mu, nu).

    Scaling vectors are periodically absorbed into log-domain potentials so
    small eps does not underflow the kernel.  When max(C)/eps is large the
    potentials are warm-started by halving eps from max(C).  Each counted
    sweep ends with the column update, so column sums are exact and
    ``violations`` holds the L1 row violation per sweep at the target eps.
    """
    C = np.asarray(C, dtype=np.float64)
    if C.ndim != 2:
        raise OtError(f"cost must be a matrix, got ndim={C.ndim}")
    if not np.isfinite(C).all():
        raise OtError("cost matrix contains non-finite entries")
    n, m = C.shape
    mu = uniform(n) if mu is None else _check_marginal(mu, "mu")
    nu = uniform(m) if nu is None else _check_marginal(nu, "nu")
    if mu.size != n or nu.size != m:
        raise OtError(f"marginal sizes ({mu.size}, {nu.size}) do not match cost {C.shape}")
    if np.any(mu == 0) or np.any(nu == 0):
        raise OtError("marginals must be strictly positive")
    eps = cfg.epsilon
    with np.errstate(over="ignore", divide="ignore"):
        scaled = C / eps
    if not np.isfinite(scaled).all():
        raise OtError(f"epsilon={eps:g} is too small for this cost scale; exp(-C/eps) underflows, use a larger epsilon")

    f, g = np.zeros(n), np.zeros(m)
    top = float(C.max() - C.min())
    level = top / 2.0
    if top / eps > _ANNEAL_RATIO:
        while level > eps:
            f, g, _ = _sweeps(C, mu, nu, level, f, g, 20, cfg.tol)
            level /= 2.0
    violations: list[float] = []
    f, g, it = _sweeps(C, mu, nu, eps, f, g, cfg.max_iters, cfg.tol, violations)
    P = np.exp((f[:, None] + g[None, :] - C) / eps)
    if not np.isfinite(P).all() or np.any(P.sum(axis=1) == 0):
        raise OtError(f"epsilon={eps:g} is too small: some transport rows vanished, use a larger epsilon")
    P = round_to_marginals(P, mu, nu)
    return TransportPlan(P, mu, nu, float((P * C).sum()), it, violations)


def round_to_marginals(P: np.ndarray, mu: np.ndarray, nu: np.ndarray) -> np.ndarray:
    """Project a nearly feasible nonnegative plan onto the exact coupling set.

    Rows then columns are scaled down where they exceed their marginal and the
    leftover mass is added back as a rank-one correction (Altschuler, Weed and
    Rigollet, 2017).  The L1 change is at most twice the marginal violation.
    """
    r = P.sum(axis=1)
    X = P * np.minimum(mu / np.where(r > 0, r, 1.0), 1.0)[:, None]
    c = X.sum(axis=0)
    X = X * np.minimum(nu / np.where(c > 0, c, 1.0), 1.0)[None, :]
    # both residuals are nonnegative up to rounding
    err_r = np.maximum(mu - X.sum(axis=1), 0.0)
    err_c = np.maximum(nu - X.sum(axis=0), 0.0)
    mass = err_r.sum()
    if mass > 0:
        X = X + np.outer(err_r, err_c) / mass
    return X


def ot_aggregate(plan, F) -> Tensor:
    """Aggregate source rows ``F`` onto the plan's targets: (M * T^T) F.

    The plan is a constant, so gradients flow only into ``F``.  With uniform
    target mass each output row is a convex combination of the rows of F.
    """
    P = plan.plan if isinstance(plan, TransportPlan) else np.asarray(plan, dtype=np.float64)
    F = T.as_tensor(F)
    if P.shape[0] != F.shape[0]:
        raise OtError(f"ot_aggregate: plan has {P.shape[0]} rows but features have {F.shape[0]}")
    weights = Tensor._wrap(P.T * P.shape[1], "ot_aggregate")
    return T.matmul(weights, F)


# ---------------------------------------------------------------------------
# exact oracle

LP_ORACLE_MAX_CELLS = 64
_ENUMERATION_LIMIT = 200_000


@dataclass
class ExactPlan:
    plan: np.ndarray
    cost: float
    method: str


def _tree_flow(cells, mu, nu, n, m):
    """Unique flow on a spanning-tree basis by leaf peeling, or None for a cycle."""
    supply = list(mu) + list(nu)
    adj = {v: set() for v in range(n + m)}
    for (i, j) in cells:
        adj[i].add(n + j)
        adj[n + j].add(i)
    flow = {}
    remaining = set(cells)
    leaves = [v for v in adj if len(adj[v]) == 1]
    while remaining:
        if not leaves:
            return None
        v = leaves.pop()
        if len(adj[v]) != 1:
            continue
        (u,) = adj[v]
        cell = (v, u - n) if v < n else (u, v - n)
        x = supply[v]
        flow[cell] = x
        supply[u] -= x
        supply[v] = 0.0
        adj[v].clear()
        adj[u].discard(v)
        remaining.discard(cell)
        if len(adj[u]) == 1:
            leaves.append(u)
    return flow


def lp_oracle(C, mu=None, nu=None) -> ExactPlan:
    """Exact unregularized transport optimum for small problems.

    Enumerates basic feasible solutions (spanning trees of the bipartite
    support graph) when that is tractable, otherwise solves the LP with HiGHS.
    """
    C = np.asarray(C, dtype=np.float64)
    n, m = C.shape
    if n * m > LP_ORACLE_MAX_CELLS:
        raise OtError(f"lp_oracle handles at most {LP_ORACLE_MAX_CELLS} cells, got {n}x{m}")
    mu = uniform(n) if mu is None else _check_marginal(mu, "mu")
    nu = uniform(m) if nu is None else _check_marginal(nu, "nu")
    cells = [(i, j) for i in range(n) for j in range(m)]
    k = n + m - 1
    if math.comb(len(cells), k) <= _ENUMERATION_LIMIT:
        best, best_cost = None, math.inf
        for basis in itertools.combinations(cells, k):
            flow = _tree_flow(basis, mu, nu, n, m)
            if flow is None or min(flow.values()) < -1e-12:
                continue
            cost = sum(C[c] * x for c, x in flow.items())
            if cost < best_cost - 1e-15:
                best, best_cost = flow, cost
        P = np.zeros((n, m))
        for c, x in best.items():
            P[c] = max(x, 0.0)
        return ExactPlan(P, float((P * C).sum()), "enumeration")

    from scipy.optimize import linprog

    A_eq = np.zeros((n + m, n * m))
    for i in range(n):
        A_eq[i, i * m:(i + 1) * m] = 1.0
    for j in range(m):
        A_eq[n + j, j::m] = 1.0
    res = linprog(C.ravel(), A_eq=A_eq, b_eq=np.concatenate([mu, nu]), bounds=(0, None), method="highs")
    if not res.success:
        raise OtError(f"lp_oracle: solver failed ({res.message})")
    P = res.x.reshape(n, m)
    return ExactPlan(P, float((P * C).sum()), "highs")
