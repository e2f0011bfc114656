"""Synthetic cohorts with a planted latent risk.

Every patient gets r ~ N(0, 1).  Higher r means shorter survival, earlier
OHE, a larger pressure drop, a deep bag shifted further along a fixed
direction, and shifted radiomics / clinical values.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dataset import ClinicalItem, Outcomes, PatientDataset, PatientRecord
from .radiomics import build_group_index, reference_names

T_MIN, T_MAX = 0.1, 80.0


@dataclass(frozen=True)
class SyntheticSpec:
    deep_dim: int = 64
    n_groups: int = 12
    min_bag: int = 16
    max_bag: int = 48
    time_scale: float = 18.0     # median-ish survival in months at r = 0
    time_slope: float = 1.0      # log-time change per unit of r
    time_noise: float = 0.28     # exponent on the Exp(1) factor; 0 = noiseless
    censor_rate: float = 0.3
    deep_shift: float = 1.0
    deep_noise: float = 1.0
    feature_noise: float = 0.5
    signal_fraction: float = 0.6  # share of radiomics groups carrying r
    ppg_a: float = 6.0
    ppg_b: float = 8.0
    ppg_noise: float = 1.0

    def __post_init__(self):
        if self.min_bag < 1 or self.max_bag < self.min_bag:
            raise ValueError("need 1 <= min_bag <= max_bag")
        if not 0.0 <= self.censor_rate <= 1.0:
            raise ValueError("censor_rate must lie in [0, 1]")


@dataclass
class SyntheticTruth:
    ids: list[str]
    risk: np.ndarray


def _times(rng, r, spec: SyntheticSpec, scale: float):
    e = rng.exponential(1.0, size=r.size)
    t = scale * np.exp(-spec.time_slope * r) * e ** spec.time_noise
    t = np.clip(t, T_MIN, T_MAX)
    censored = rng.random(r.size) < spec.censor_rate
    # censoring happens at a uniformly drawn fraction of the true event time
    frac = 0.05 + 0.95 * rng.random(r.size)
    observed = np.where(censored, np.maximum(t * frac, T_MIN), t)
    return observed, censored.astype(int)


def generate_synthetic(seed: int, n_patients: int, spec: SyntheticSpec = SyntheticSpec()):
    """Returns ``(PatientDataset, SyntheticTruth)``; identical for identical seeds."""
    if n_patients < 4:
        raise ValueError(f"n_patients must be >= 4, got {n_patients}")
    rng = np.random.default_rng(seed)
    ref = build_group_index(reference_names())
    if not 1 <= spec.n_groups <= ref.n_groups:
        raise ValueError(f"n_groups must lie in [1, {ref.n_groups}]")
    picked = np.sort(rng.choice(ref.n_groups, size=spec.n_groups, replace=False))
    names = [ref.names[i] for k in picked for i in ref.members[k]]
    n_feat = len(names)
    group_of = np.concatenate([[j] * len(ref.members[k]) for j, k in enumerate(picked)])
    signal_groups = rng.random(spec.n_groups) < spec.signal_fraction
    signal_groups[0] = True
    loadings = rng.normal(0.0, 1.0, n_feat) * signal_groups[group_of]
    offsets = rng.normal(0.0, 3.0, n_feat)
    scales = np.exp(rng.normal(0.0, 1.0, n_feat))
    direction = rng.normal(0.0, 1.0, spec.deep_dim)
    direction /= np.linalg.norm(direction)

    r = rng.normal(0.0, 1.0, n_patients)
    t_os, c_os = _times(rng, r, spec, spec.time_scale)
    t_ohe, c_ohe = _times(rng, r, spec, spec.time_scale * 1.5)
    ppg_pre = rng.uniform(12.0, 32.0, n_patients)
    drop = spec.ppg_a + spec.ppg_b / (1.0 + np.exp(-r))
    ppg_post = np.maximum(ppg_pre - drop + spec.ppg_noise * rng.normal(size=n_patients), 0.0)

    records, ids = [], []
    for i in range(n_patients):
        pid = f"P{i + 1:04d}"
        ids.append(pid)
        n_d = int(rng.integers(spec.min_bag, spec.max_bag + 1))
        bag = spec.deep_shift * r[i] * direction + spec.deep_noise * rng.normal(size=(n_d, spec.deep_dim))
        rad = offsets + scales * (loadings * r[i] + spec.feature_noise * rng.normal(size=n_feat))
        nz = lambda: spec.feature_noise * rng.normal()
        cli = {
            "baseline": [
                ClinicalItem("age", float(55 + 10 * rng.normal()), "numeric"),
                ClinicalItem("sex", ["F", "M"][int(rng.random() < 0.6)], "categorical"),
                ClinicalItem("bmi", float(24 + 3 * (0.4 * r[i] + nz())), "numeric"),
            ],
            "pressure": [
                ClinicalItem("ppg_pre", float(ppg_pre[i]), "numeric"),
                ClinicalItem("hvpg", float(18 + 4 * (r[i] + nz())), "numeric"),
            ],
            "blood": [
                ClinicalItem("bilirubin", float(np.exp(3 + 0.5 * (r[i] + nz()))), "numeric"),
                ClinicalItem("albumin", float(35 - 4 * (r[i] + nz())), "numeric"),
                ClinicalItem("creatinine", float(np.exp(4.3 + 0.2 * (r[i] + nz()))), "numeric"),
            ],
            "scores": [
                ClinicalItem("meld", float(12 + 4 * (r[i] + nz())), "numeric"),
                ClinicalItem("child_pugh", "ABC"[int(np.digitize(r[i] + nz(), [-0.5, 0.7]))], "categorical"),
            ],
            "procedures": [
                ClinicalItem("prior_evl", ["no", "yes"][int(rng.random() < 0.4)], "categorical"),
                ClinicalItem("prior_tips_attempts", float(rng.integers(0, 3)), "numeric"),
            ],
        }
        out = Outcomes(float(t_os[i]), int(c_os[i]), float(t_ohe[i]), int(c_ohe[i]), float(ppg_pre[i]), float(ppg_post[i]))
        records.append(PatientRecord(pid, bag, rad, cli, out))
    return PatientDataset(records, names), SyntheticTruth(ids, r)
