"""Fusion backbone: OT co-attention between modalities, disentanglement, clinical guidance.

Data flow for one patient::

    deep bag --phi_d--> F_d (N_d x d)          radiomics groups --SNN_k--> F_r (N_g x d)
    F_d_f  = OT(F_d -> F_r) aggregation        (N_g x d)
    F_r_c  = GAP(F_r, N_c)                     (N_c x d)
    F_d_c  = OT(F_d_f -> F_r_c) aggregation    (N_c x d)
    F_d_cat = [F_d_f; F_d_c],  F_r_cat = [F_r; F_r_c]
    H_d, H_r, H_cli = set encoders of F_d_cat, F_r_cat, SNN_cli(clinical groups)
    H_d_cli = OT(H_d -> H_cli),  H_r_cli = OT(H_r -> H_cli)
    h_final = [GAP1(H_d), GAP1(H_d_cli), GAP1(H_r), GAP1(H_r_cli), GAP1(H_cli)]  (1 x 5d)
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .nn import LayerNorm, Linear, Module, dropout, param
from .ot import OtConfig, TransportPlan, cost_matrix, ot_aggregate, sinkhorn
from .tensor import Tensor

PLAN_KEYS = ("d_r", "df_rc", "d_cli", "r_cli")
POOL_KEYS = ("d", "d_cli", "r", "r_cli", "cli")


class SnnEncoder(Module):
    """Two SELU layers with dropout: n_in -> d -> d."""

    def __init__(self, n_in: int, d: int, rng: np.random.Generator, rate: float = 0.25):
        self.fc1 = Linear(n_in, d, rng)
        self.fc2 = Linear(d, d, rng)
        self.rate = rate

    def __call__(self, x: Tensor, rng=None) -> Tensor:
        drop = rng if self.training else None
        h = dropout(T.selu(self.fc1(x)), self.rate, drop)
        return dropout(T.selu(self.fc2(h)), self.rate, drop)


class GapPool(Module):
    """Gated attention pooling of K tokens into ``heads`` summaries."""

    def __init__(self, d: int, heads: int, rng: np.random.Generator):
        s = 1.0 / math.sqrt(d)
        self.w_a = param(rng.normal(0.0, s, (d, d)))
        self.w_b = param(rng.normal(0.0, s, (d, d)))
        self.w_c = param(rng.normal(0.0, s, (d, heads)))
        self.rho = Linear(d, d, rng)
        self.heads = heads

    def weights(self, F: Tensor) -> Tensor:
        gate = T.elemwise_mul(T.tanh(T.matmul(F, self.w_a)), T.sigmoid(T.matmul(F, self.w_b)))
        return T.row_softmax(T.transpose(T.matmul(gate, self.w_c)))  # heads x K

    def __call__(self, F: Tensor) -> tuple[Tensor, Tensor]:
        a = self.weights(F)
        return self.rho(T.matmul(a, F)), a


class SetEncoder(Module):
    """One pre-norm transformer block without positional encoding."""

    def __init__(self, d: int, rng: np.random.Generator, heads: int = 4, ffn: int | None = None):
        if d % heads:
            raise ValueError(f"d={d} is not divisible by heads={heads}")
        self.ln1, self.ln2 = LayerNorm(d), LayerNorm(d)
        self.q, self.k, self.v, self.o = (Linear(d, d, rng) for _ in range(4))
        self.ff1 = Linear(d, ffn or 2 * d, rng)
        self.ff2 = Linear(ffn or 2 * d, d, rng)
        self.heads = heads
        self.dh = d // heads

    def attention(self, X: Tensor) -> Tensor:
        return self.o(T.multihead_attention(self.q(X), self.k(X), self.v(X), self.heads))

    def __call__(self, X: Tensor) -> Tensor:
        X = T.add(X, self.attention(self.ln1(X)))
        return T.add(X, self.ff2(T.relu(self.ff1(self.ln2(X)))))


# ---------------------------------------------------------------------------
# progressive orthogonal disentanglement


@dataclass
class PodState:
    total: int                 # T, the last iteration index
    alpha: float = 0.9
    beta: float = 0.99
    t: int = 0
    max0: float | None = None
    mu0: float | None = None
    sigma0: float | None = None
    ema_max: float | None = None

    def to_dict(self) -> dict:
        return dict(vars(self))

    @classmethod
    def from_dict(cls, d: dict) -> "PodState":
        return cls(**d)


def pod_gamma(state: PodState, S: np.ndarray) -> float:
    """Coverage ratio for this iteration; updates the EMA of max(S) first.

    The first call captures max/mean/std of S.  The returned value is
    clamped to (0, 1].
    """
    S = np.asarray(S, dtype=np.float64)
    if state.max0 is None:
        state.max0 = float(S.max())
        state.mu0 = float(S.mean())
        state.sigma0 = max(float(S.std()), 1e-6)
        state.ema_max = state.max0
    else:
        state.ema_max = state.beta * state.ema_max + (1.0 - state.beta) * float(S.max())
    t = min(max(state.t, 0), state.total)
    decay = (1.0 - t / state.total) ** state.alpha if state.total > 0 else 0.0
    ratio = state.ema_max / state.max0 if state.max0 != 0 else 1.0
    g = math.exp(-(state.max0 - state.mu0) / state.sigma0 * ratio * decay)
    return min(g, 1.0)


def cosine_matrix(A: Tensor, B: Tensor) -> Tensor:
    """Pairwise cosine similarity; a zero row gives similarity 0."""
    An = T.div(A, T.clamp_min(T.l2_row_norms(A), 1e-12))
    Bn = T.div(B, T.clamp_min(T.l2_row_norms(B), 1e-12))
    return T.matmul(An, T.transpose(Bn))


def pod_mask(S: np.ndarray, gamma: float) -> np.ndarray:
    eta = np.percentile(S, 100.0 * (1.0 - gamma))
    return S >= eta


def pod_loss(f_d: Tensor, f_r: Tensor, gamma: float) -> tuple[Tensor, np.ndarray]:
    """Mean |cos| over the pairs at or above the (1 - gamma) similarity percentile."""
    if f_d.shape != f_r.shape:
        raise T.ShapeError(f"pod_loss needs equal shapes, got {f_d.shape} and {f_r.shape}")
    S = cosine_matrix(f_d, f_r)
    mask = pod_mask(S.data, gamma)
    return masked_abs_mean(S, mask), mask


def masked_abs_mean(S: Tensor, mask: np.ndarray) -> Tensor:
    masked = T.elemwise_mul(T.abs_(S), Tensor._wrap(mask.astype(np.float64), "pod_mask"))
    return T.scale(T.sum_all(masked), 1.0 / mask.sum())


# ---------------------------------------------------------------------------
# backbone


@dataclass
class BackboneConfig:
    d: int = 256
    n_coarse: int = 6
    deep_dim: int = 1280
    group_dims: Sequence[int] = ()
    clinical_dims: Sequence[int] = ()
    dropout: float = 0.25
    heads: int = 4
    ot: OtConfig = field(default_factory=OtConfig)
    normalize_cost: bool = True


@dataclass
class PatientInputs:
    deep: np.ndarray                 # N_d x deep_dim
    radiomics: Tensor | np.ndarray   # 1 x n_features (normalized)
    groups: Sequence[Sequence[int]]  # feature positions of each radiomics group
    clinical: Sequence[Tensor | np.ndarray]  # one 1 x dim row per clinical group


@dataclass
class FusedRepresentation:
    h_final: Tensor
    f_dcat: Tensor
    f_rcat: Tensor
    plans: dict[str, TransportPlan | np.ndarray]
    gap_weights: dict[str, np.ndarray] = field(default_factory=dict)
    retained: bool = False


class FusionBackbone(Module):
    def __init__(self, cfg: BackboneConfig, rng: np.random.Generator):
        if not cfg.group_dims or not cfg.clinical_dims:
            raise ValueError("backbone needs at least one radiomics group and one clinical group")
        self.cfg = cfg
        d = cfg.d
        self.rad_enc = [SnnEncoder(n, d, rng, cfg.dropout) for n in cfg.group_dims]
        self.deep_proj = Linear(cfg.deep_dim, d, rng)
        self.cli_enc = [SnnEncoder(n, d, rng, cfg.dropout) for n in cfg.clinical_dims]
        self.coarse = GapPool(d, cfg.n_coarse, rng)
        self.enc_d = SetEncoder(d, rng, cfg.heads)
        self.enc_r = SetEncoder(d, rng, cfg.heads)
        self.enc_cli = SetEncoder(d, rng, cfg.heads)
        self.pools = [GapPool(d, 1, rng) for _ in POOL_KEYS]

    @property
    def out_dim(self) -> int:
        return 5 * self.cfg.d

    def encode_radiomics(self, x: Tensor, groups, rng=None) -> Tensor:
        if len(groups) != len(self.rad_enc):
            raise ValueError(f"expected {len(self.rad_enc)} radiomics groups, got {len(groups)}")
        return T.concat_rows(*(enc(T.gather_cols(x, idx), rng) for enc, idx in zip(self.rad_enc, groups)))

    def encode_deep(self, bag) -> Tensor:
        return self.deep_proj(T.as_tensor(bag))

    def encode_clinical(self, rows, rng=None) -> Tensor:
        if len(rows) != len(self.cli_enc):
            raise ValueError(f"expected {len(self.cli_enc)} clinical groups, got {len(rows)}")
        return T.concat_rows(*(enc(T.as_tensor(x), rng) for enc, x in zip(self.cli_enc, rows)))

    def _transport(self, key, src: Tensor, dst: Tensor, plans, fixed):
        if fixed is not None and key in fixed:
            plan = fixed[key]
        else:
            C = cost_matrix(src, dst)
            if self.cfg.normalize_cost and C.max() > 0:
                C = C / C.max()
            plan = sinkhorn(C, cfg=self.cfg.ot)
        plans[key] = plan
        return ot_aggregate(plan, src)

    def mgra(self, F_d: Tensor, F_r: Tensor, plans, fixed=None, weights=None):
        F_df = self._transport("d_r", F_d, F_r, plans, fixed)
        F_rc, a = self.coarse(F_r)
        if weights is not None:
            weights["coarse"] = a.data
        F_dc = self._transport("df_rc", F_df, F_rc, plans, fixed)
        return T.concat_rows(F_df, F_dc), T.concat_rows(F_r, F_rc)

    def cgpe(self, H_d: Tensor, H_r: Tensor, F_cli: Tensor, plans, fixed=None, weights=None) -> Tensor:
        H_cli = self.enc_cli(F_cli)
        H_dcli = self._transport("d_cli", H_d, H_cli, plans, fixed)
        H_rcli = self._transport("r_cli", H_r, H_cli, plans, fixed)
        pooled = []
        for key, pool, H in zip(POOL_KEYS, self.pools, (H_d, H_dcli, H_r, H_rcli, H_cli)):
            h, a = pool(H)
            if weights is not None:
                weights[key] = a.data
            pooled.append(h)
        return T.concat_cols(*pooled)

    def forward(self, inp: PatientInputs, rng=None, plans=None, retain: bool = False) -> FusedRepresentation:
        """One patient through the backbone.

        ``rng`` drives dropout in training mode.  ``plans`` maps plan keys to
        fixed couplings that replace the Sinkhorn solves.  With ``retain``
        the GAP attention weights are kept for inspection.
        """
        rng = rng if self.training else None
        F_d = self.encode_deep(inp.deep)
        F_r = self.encode_radiomics(T.as_tensor(inp.radiomics), inp.groups, rng)
        F_cli = self.encode_clinical(inp.clinical, rng)
        used: dict = {}
        weights = {} if retain else None
        F_dcat, F_rcat = self.mgra(F_d, F_r, used, plans, weights)
        H_d, H_r = self.enc_d(F_dcat), self.enc_r(F_rcat)
        h = self.cgpe(H_d, H_r, F_cli, used, plans, weights)
        return FusedRepresentation(h, F_dcat, F_rcat, used, weights or {}, retain)
