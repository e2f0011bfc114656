"""Staged training and batched inference.

Stage I fits the backbone and survival head on the survival likelihood plus
the weighted orthogonality penalty.  Stage II-a then fits a fresh PPG head
and Stage II-b a fresh OHE head, both on h_final from the frozen backbone.
"""
from __future__ import annotations

import csv
import hashlib
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .backbone import PodState, cosine_matrix, masked_abs_mean, pod_gamma, pod_mask
from .features.dataset import PatientDataset, PatientRecord
from .heads import TimeBins, make_time_bins, nll_loss, ppg_loss, risk_score
from .metrics import concordance_detail, mae_rmse, mean_brier
from .model import TipsFuseModel
from .tensor import Adam, Tensor

log = logging.getLogger(__name__)

LOG_HEADER = ("epoch", "stage", "loss", "metric_name", "metric_value")


@dataclass
class TrainConfig:
    e0: int = 20
    e1: int = 20
    e2: int = 20
    delta: float = 0.1
    lr: float = 2e-4
    weight_decay: float = 1e-5
    seed: int = 0

    def __post_init__(self):
        if min(self.e0, self.e1, self.e2) < 1:
            raise ValueError("every stage needs at least one epoch")
        if self.delta < 0:
            raise ValueError("delta must be nonnegative")


@dataclass
class LogRow:
    epoch: int
    stage: str
    loss: float
    metric_name: str
    metric_value: float

    def cells(self) -> list[str]:
        return [str(self.epoch), self.stage, f"{self.loss:.17g}", self.metric_name, f"{self.metric_value:.17g}"]


@dataclass
class TrainResult:
    model: TipsFuseModel
    bins_os: TimeBins
    bins_ohe: TimeBins
    pod: PodState
    log: list[LogRow] = field(default_factory=list)
    best_epochs: dict[str, int] = field(default_factory=dict)
    # backbone + survival head checksum at the end of each stage
    stage_checksums: dict[str, str] = field(default_factory=dict)


def ortho_loss(f_d: Tensor, f_r: Tensor, pod: PodState) -> tuple[Tensor, float]:
    """Orthogonality penalty with this iteration's coverage ratio from ``pod``."""
    S = cosine_matrix(f_d, f_r)
    gamma = pod_gamma(pod, S.data)
    return masked_abs_mean(S, pod_mask(S.data, gamma)), gamma


def param_checksum(params) -> str:
    h = hashlib.sha256()
    for p in params:
        h.update(np.ascontiguousarray(p.data).tobytes())
    return h.hexdigest()


def _cindex_or_nan(risks, times, censored) -> float:
    res = concordance_detail(risks, times, censored)
    return math.nan if res.comparable == 0 else res.value


def _better(new: float, best: float, lower: bool) -> bool:
    if math.isnan(new):
        return False
    if math.isnan(best):
        return True
    return new < best if lower else new > best


def worker_count() -> int:
    try:
        return max(1, int(os.environ.get("TIPSFUSE_THREADS", "1")))
    except ValueError:
        return 1


def encode_all(model: TipsFuseModel, records, threads: int | None = None) -> np.ndarray:
    """Eval-mode h_final for each record, stacked as rows."""
    model.eval()
    threads = threads or worker_count()

    def one(rec):
        return model.backbone.forward(model.inputs(rec)).h_final.data[0]

    if threads > 1 and len(records) > 1:
        with ThreadPoolExecutor(threads) as pool:
            rows = list(pool.map(one, records))
    else:
        rows = [one(r) for r in records]
    return np.stack(rows)


@dataclass
class Predictions:
    h: np.ndarray
    z_os: np.ndarray
    z_ohe: np.ndarray
    delta: np.ndarray

    @property
    def risk_os(self) -> np.ndarray:
        return np.array([risk_score(z) for z in self.z_os])

    @property
    def risk_ohe(self) -> np.ndarray:
        return np.array([risk_score(z) for z in self.z_ohe])


def predict(model: TipsFuseModel, records, h: np.ndarray | None = None, threads: int | None = None) -> Predictions:
    h = encode_all(model, records, threads) if h is None else h
    z_os, z_ohe, delta = [], [], []
    for rec, row in zip(records, h):
        ht = Tensor(row)
        z_os.append(model.surv(ht).data[0])
        z_ohe.append(model.ohe(ht).data[0])
        delta.append(model.ppg(ht, rec.pressure_values().reshape(1, -1)).item())
    return Predictions(h, np.array(z_os), np.array(z_ohe), np.array(delta))


def evaluate(model: TipsFuseModel, records, bins_os: TimeBins, bins_ohe: TimeBins,
             preds: Predictions | None = None) -> dict:
    preds = preds or predict(model, records)
    o = [r.outcomes for r in records]
    t_os, c_os = np.array([x.t_os for x in o]), np.array([x.c_os for x in o])
    t_ohe, c_ohe = np.array([x.t_ohe for x in o]), np.array([x.c_ohe for x in o])
    pre, post = np.array([x.ppg_pre for x in o]), np.array([x.ppg_post for x in o])
    out = {}
    for tag, z, t, c, bins in (("os", preds.z_os, t_os, c_os, bins_os), ("ohe", preds.z_ohe, t_ohe, c_ohe, bins_ohe)):
        risks = np.array([risk_score(zz) for zz in z])
        res = concordance_detail(risks, t, c)
        out[f"cindex_{tag}"] = res.value
        out[f"cindex_{tag}_undefined"] = res.undefined
        out[f"mbs_{tag}"] = mean_brier(np.cumprod(1.0 - z, axis=1), bins.label(t), c)
    mae, rmse = mae_rmse(pre + preds.delta, post)
    out["mae_ppg"], out["rmse_ppg"] = mae, rmse
    return out


class _Patient:
    __slots__ = ("rec", "inp", "y_os", "y_ohe")

    def __init__(self, model, rec, bins_os, bins_ohe):
        self.rec = rec
        self.inp = model.inputs(rec)
        self.y_os = int(bins_os.label(rec.outcomes.t_os))
        self.y_ohe = int(bins_ohe.label(rec.outcomes.t_ohe))


def staged_train(dataset: PatientDataset, model: TipsFuseModel, cfg: TrainConfig, progress=None) -> TrainResult:
    train, val = dataset.split("train"), dataset.split("val")
    if not train or not val:
        raise ValueError(f"need non-empty train and val splits (got {len(train)} / {len(val)})")
    bins_os = make_time_bins([r.outcomes.t_os for r in train], [r.outcomes.c_os for r in train], model.cfg.n_bins)
    bins_ohe = make_time_bins([r.outcomes.t_ohe for r in train], [r.outcomes.c_ohe for r in train], model.cfg.n_bins)
    pts = [_Patient(model, r, bins_os, bins_ohe) for r in train]
    order_rng = np.random.default_rng([cfg.seed, 1])
    drop_rng = np.random.default_rng([cfg.seed, 2])
    pod = PodState(total=cfg.e0 * len(train))
    result = TrainResult(model, bins_os, bins_ohe, pod)
    v_os = ([r.outcomes.t_os for r in val], [r.outcomes.c_os for r in val])
    v_ohe = ([r.outcomes.t_ohe for r in val], [r.outcomes.c_ohe for r in val])

    def emit(row: LogRow):
        result.log.append(row)
        if progress:
            progress(row)

    # Stage I: backbone + survival head
    stage_params = model.backbone.parameters() + model.surv.parameters()
    opt = Adam(stage_params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    best, best_state, best_epoch = math.nan, None, -1
    for epoch in range(cfg.e0):
        total = 0.0
        for i in order_rng.permutation(len(pts)):
            p = pts[i]
            model.train()
            with T.Tape() as tape:
                fused = model.backbone.forward(p.inp, drop_rng)
                l_surv = nll_loss(model.surv(fused.h_final), p.y_os, p.rec.outcomes.c_os)
                l_ortho, _ = ortho_loss(fused.f_dcat, fused.f_rcat, pod)
                loss = T.add(l_surv, T.scale(l_ortho, cfg.delta))
            opt.step(tape.backward(loss, stage_params))
            pod.t += 1
            total += loss.item()
        model.eval()
        h_val = encode_all(model, val)
        risks = [risk_score(model.surv(Tensor(h)).data) for h in h_val]
        metric = _cindex_or_nan(risks, *v_os)
        if _better(metric, best, lower=False) or best_state is None:
            best, best_epoch = metric, epoch
            best_state = [p.data.copy() for p in stage_params]
        emit(LogRow(epoch, "I", total / len(pts), "val_cindex_os", metric))
    for p, saved in zip(stage_params, best_state):
        p.data[...] = saved
    result.best_epochs["I"] = best_epoch
    result.stage_checksums["I"] = param_checksum(stage_params)
    model.eval()

    # Stage II runs on cached h_final; the backbone is never touched again
    h_train = encode_all(model, train)
    h_val = encode_all(model, val)
    pressure = [r.pressure_values().reshape(1, -1) for r in train]
    val_pressure = [r.pressure_values().reshape(1, -1) for r in val]
    epoch = cfg.e0

    head = model.reset_head("ppg", cfg.seed * 7919 + 11)
    opt = Adam(head.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    best, best_state = math.nan, None
    for _ in range(cfg.e1):
        total = 0.0
        for i in order_rng.permutation(len(pts)):
            o = pts[i].rec.outcomes
            with T.Tape() as tape:
                loss = ppg_loss(head(Tensor(h_train[i]), pressure[i]), o.ppg_pre, o.ppg_post)
            opt.step(tape.backward(loss, head.parameters()))
            total += loss.item()
        pred = [r.outcomes.ppg_pre + head(Tensor(h), pp).item() for r, h, pp in zip(val, h_val, val_pressure)]
        metric = mae_rmse(pred, [r.outcomes.ppg_post for r in val])[0]
        if _better(metric, best, lower=True) or best_state is None:
            best, result.best_epochs["II-a"] = metric, epoch
            best_state = head.state_dict()
        emit(LogRow(epoch, "II-a", total / len(pts), "val_mae_ppg", metric))
        epoch += 1
    head.load_state_dict(best_state)
    result.stage_checksums["II-a"] = param_checksum(stage_params)

    head = model.reset_head("ohe", cfg.seed * 7919 + 13)
    opt = Adam(head.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    best, best_state = math.nan, None
    for _ in range(cfg.e2):
        total = 0.0
        for i in order_rng.permutation(len(pts)):
            with T.Tape() as tape:
                loss = nll_loss(head(Tensor(h_train[i])), pts[i].y_ohe, pts[i].rec.outcomes.c_ohe)
            opt.step(tape.backward(loss, head.parameters()))
            total += loss.item()
        risks = [risk_score(head(Tensor(h)).data) for h in h_val]
        metric = _cindex_or_nan(risks, *v_ohe)
        if _better(metric, best, lower=False) or best_state is None:
            best, result.best_epochs["II-b"] = metric, epoch
            best_state = head.state_dict()
        emit(LogRow(epoch, "II-b", total / len(pts), "val_cindex_ohe", metric))
        epoch += 1
    head.load_state_dict(best_state)
    result.stage_checksums["II-b"] = param_checksum(stage_params)
    model.eval()
    return result


def write_log(rows, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LOG_HEADER)
        for r in rows:
            w.writerow(r.cells())
