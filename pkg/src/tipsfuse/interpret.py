"""Integrated-gradients attributions and co-attention heatmap tables."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .backbone import FusedRepresentation, PatientInputs
from .features.dataset import CLINICAL_GROUPS
from .heads import risk_tensor
from .model import TipsFuseModel
from .tensor import Tensor

TARGETS = ("risk", "ppg", "ohe")
MIN_STEPS = 16


class InterpretError(ValueError):
    pass


def integrated_gradients(fn: Callable[..., Tensor], xs: Sequence[np.ndarray], baselines=None, steps: int = 256):
    """Path-integrated gradients of scalar ``fn(*inputs)`` from baselines to ``xs``.

    The straight path is sampled at k/steps for k = 0..steps and the
    gradients are averaged with the trapezoid rule.  Returns
    ``(attributions, f(x), f(baseline))``.
    """
    if steps < MIN_STEPS:
        raise InterpretError(f"steps must be >= {MIN_STEPS}, got {steps}")
    xs = [np.atleast_2d(np.asarray(x, dtype=np.float64)) for x in xs]
    bs = [np.zeros_like(x) for x in xs] if baselines is None else [np.atleast_2d(np.asarray(b, dtype=np.float64)) for b in baselines]
    total = [np.zeros_like(x) for x in xs]
    for k in range(steps + 1):
        a = k / steps
        leaves = [Tensor(b + a * (x - b), requires_grad=True) for x, b in zip(xs, bs)]
        with T.Tape() as tape:
            out = fn(*leaves)
        if out.shape != (1, 1):
            raise InterpretError(f"attribution target must be scalar, got shape {out.shape}")
        if out._tape is not tape:
            grads = {p: np.zeros_like(p.data) for p in leaves}
        else:
            grads = tape.backward(out, leaves)
        w = 0.5 if k in (0, steps) else 1.0
        for acc, p in zip(total, leaves):
            acc += w * grads[p]
    attr = [(x - b) * g / steps for x, b, g in zip(xs, bs, total)]
    return attr, fn(*[Tensor(x) for x in xs]).item(), fn(*[Tensor(b) for b in bs]).item()


@dataclass
class AttributionReport:
    task: str
    radiomics: dict[str, float]
    clinical: dict[str, float]
    group_abs: dict[str, float]
    target_x: float
    target_baseline: float
    residual: float
    extra: dict = field(default_factory=dict)

    def rows(self) -> list[tuple[str, str, str, float]]:
        out = [(self.task, "level1", n, v) for n, v in self.radiomics.items()]
        out += [(self.task, "level2", n, v) for n, v in self.group_abs.items()]
        out += [(self.task, "clinical", n, v) for n, v in self.clinical.items()]
        return out


def _target(model: TipsFuseModel, target: str):
    if target == "risk":
        return lambda h, p: risk_tensor(model.surv(h))
    if target == "ohe":
        return lambda h, p: risk_tensor(model.ohe(h))
    if target == "ppg":
        return lambda h, p: model.ppg(h, p)
    raise InterpretError(f"unknown attribution target {target!r}; choose from {TARGETS}")


def attribute_patient(model: TipsFuseModel, inp: PatientInputs, target: str = "risk", steps: int = 256,
                      feature_names: Sequence[str] | None = None,
                      clinical_columns: dict[str, list[str]] | None = None) -> AttributionReport:
    """IG over the normalized radiomics and clinical inputs of one patient.

    The zero vector is the baseline.  Transport plans are those of the
    actual input and stay fixed along the path, matching how gradients
    treat them during training; the deep bag is held at its observed value.
    """
    if model.training:
        raise InterpretError("attribution needs a frozen model in eval mode (dropout makes gradients random)")
    head = _target(model, target)
    plans = model.backbone.forward(inp).plans
    pi = model.layout.pressure_index

    def fn(rad, *cli):
        fused = model.backbone.forward(PatientInputs(inp.deep, rad, inp.groups, list(cli)), plans=plans)
        return head(fused.h_final, cli[pi])

    xs = [np.asarray(inp.radiomics, dtype=np.float64).reshape(1, -1)] + [np.asarray(c, dtype=np.float64).reshape(1, -1) for c in inp.clinical]
    attr, fx, fb = integrated_gradients(fn, xs, steps=steps)
    rad = attr[0].ravel()
    names = list(feature_names) if feature_names else [f"f{i}" for i in range(rad.size)]
    radiomics = dict(zip(names, rad.tolist()))
    group_abs = {}
    for gname, members in zip(model.layout.group_names, model.layout.groups):
        group_abs[gname] = float(np.abs(rad[members]).sum())
    clinical = {}
    for gi, a in enumerate(attr[1:]):
        g = CLINICAL_GROUPS[gi] if gi < len(CLINICAL_GROUPS) else f"group{gi}"
        cols = (clinical_columns or {}).get(g) or [f"c{j}" for j in range(a.size)]
        for col, v in zip(cols, a.ravel()):
            clinical[f"{g}/{col}"] = float(v)
        group_abs[f"clinical:{g}"] = float(np.abs(a).sum())
    total = float(sum(a.sum() for a in attr))
    return AttributionReport(target, radiomics, clinical, group_abs, fx, fb, abs(total - (fx - fb)))


def top_attributions(values: dict[str, float] | AttributionReport, k: int = 10) -> list[tuple[str, float]]:
    """Largest |value| first, ties by name."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if isinstance(values, AttributionReport):
        values = {**values.radiomics, **values.clinical}
    return sorted(values.items(), key=lambda kv: (-abs(kv[1]), kv[0]))[:k]


def write_attributions(reports: Sequence[AttributionReport], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["task", "scope", "name", "attribution"])
        for rep in reports:
            for task, scope, name, v in rep.rows():
                w.writerow([task, scope, name, f"{v:.17g}"])


def coattention_export(fused: FusedRepresentation, group_names: Sequence[str], k: int | None = None):
    """Columns of the fine deep-to-radiomics plan as (voxel, group, weight) rows.

    Groups are ranked by column mass (stable, so equal masses keep their
    order) and the first ``k`` are exported.
    """
    if not fused.retained:
        raise InterpretError("co-attention maps were not retained; rerun the forward pass with retain=True")
    plan = fused.plans["d_r"]
    P = plan.plan if hasattr(plan, "plan") else np.asarray(plan)
    if P.shape[1] != len(group_names):
        raise InterpretError(f"plan has {P.shape[1]} columns but {len(group_names)} group names")
    mass = P.sum(axis=0)
    order = np.argsort(-mass, kind="stable")[: (k or len(group_names))]
    rows = [(v, group_names[j], float(P[v, j])) for j in order for v in range(P.shape[0])]
    return rows, [group_names[j] for j in order]


def write_heatmap(rows, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["voxel", "group", "weight"])
        for v, g, x in rows:
            w.writerow([v, g, f"{x:.17g}"])
