"""The full model (backbone + three heads), per-patient inputs and checkpoints."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .backbone import BackboneConfig, FusedRepresentation, FusionBackbone, PatientInputs, PodState
from .features.dataset import CLINICAL_GROUPS, PRESSURE_GROUP, Normalizer, PatientDataset, PatientRecord
from .heads import HazardHead, PpgHead, TimeBins
from .nn import Module
from .ot import OtConfig
from .tensor import Tensor

CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class ModelConfig:
    d: int = 256
    n_coarse: int = 6
    heads: int = 4
    dropout: float = 0.25
    ot_epsilon: float = 0.1
    ot_max_iters: int = 100
    ot_tol: float = 1e-6
    normalize_cost: bool = True
    head_h1: int = 256
    head_h2: int = 64
    ppg_h3: int = 16
    ppg_bound: float = 50.0
    n_bins: int = 4


@dataclass
class Layout:
    """Shapes the model is built for; derived from a normalized dataset."""

    deep_dim: int
    groups: list[list[int]]
    group_names: list[str]
    clinical_dims: list[int]
    pressure_index: int
    group_digest: str = ""

    @classmethod
    def from_dataset(cls, ds: PatientDataset) -> "Layout":
        if ds.normalizer is None:
            raise ValueError("dataset must be normalized before building a model layout")
        gi = ds.group_index
        return cls(ds.deep_dim, [list(m) for m in gi.members], gi.group_names(),
                   ds.normalizer.group_dims(), CLINICAL_GROUPS.index(PRESSURE_GROUP), gi.digest())


class TipsFuseModel(Module):
    def __init__(self, cfg: ModelConfig, layout: Layout, seed: int = 0):
        self.cfg, self.layout, self.seed = cfg, layout, seed
        rng = np.random.default_rng(seed)
        ot = OtConfig(cfg.ot_epsilon, cfg.ot_max_iters, cfg.ot_tol)
        bcfg = BackboneConfig(cfg.d, cfg.n_coarse, layout.deep_dim, [len(g) for g in layout.groups],
                              layout.clinical_dims, cfg.dropout, cfg.heads, ot, cfg.normalize_cost)
        self.backbone = FusionBackbone(bcfg, rng)
        self.surv = self._make_head("surv", rng)
        self.ppg = self._make_head("ppg", rng)
        self.ohe = self._make_head("ohe", rng)

    def _make_head(self, which: str, rng) -> Module:
        c = self.cfg
        if which == "ppg":
            return PpgHead(5 * c.d, self.layout.clinical_dims[self.layout.pressure_index], rng,
                           c.head_h1, c.head_h2, c.ppg_h3, c.ppg_bound)
        return HazardHead(5 * c.d, c.n_bins, rng, c.head_h1, c.head_h2)

    def reset_head(self, which: str, seed: int) -> Module:
        head = self._make_head(which, np.random.default_rng(seed))
        setattr(self, which, head)
        return head

    def inputs(self, rec: PatientRecord) -> PatientInputs:
        if rec.rad_norm is None:
            raise ValueError(f"patient {rec.id}: not normalized")
        return PatientInputs(rec.deep, rec.rad_norm.reshape(1, -1), self.layout.groups,
                             [rec.cli_norm[g].reshape(1, -1) for g in CLINICAL_GROUPS])

    def pressure(self, inp: PatientInputs):
        return inp.clinical[self.layout.pressure_index]

    def heads_forward(self, h: Tensor, pressure) -> dict[str, Tensor]:
        return {"surv": self.surv(h), "ohe": self.ohe(h), "delta": self.ppg(h, pressure)}

    def forward(self, inp: PatientInputs, rng=None, plans=None, retain=False):
        fused: FusedRepresentation = self.backbone.forward(inp, rng, plans, retain)
        return fused, self.heads_forward(fused.h_final, self.pressure(inp))


# ---------------------------------------------------------------------------
# checkpoints


def _normalizer_to_json(n: Normalizer) -> dict:
    return {
        "rad_min": n.rad_min.tolist(), "rad_max": n.rad_max.tolist(),
        "numeric": [[g, k, lo, hi] for (g, k), (lo, hi) in n.numeric.items()],
        "levels": [[g, k, lv] for (g, k), lv in n.levels.items()],
        "layout": {g: [list(x) for x in items] for g, items in n.layout.items()},
    }


def _normalizer_from_json(d: dict) -> Normalizer:
    return Normalizer(np.array(d["rad_min"]), np.array(d["rad_max"]),
                      {(g, k): (lo, hi) for g, k, lo, hi in d["numeric"]},
                      {(g, k): lv for g, k, lv in d["levels"]},
                      {g: [tuple(x) for x in items] for g, items in d["layout"].items()})


@dataclass
class Checkpoint:
    model: TipsFuseModel
    bins_os: TimeBins
    bins_ohe: TimeBins
    normalizer: Normalizer
    pod: PodState | None = None
    extra: dict = field(default_factory=dict)


def save_checkpoint(path: str | Path, ck: Checkpoint) -> None:
    m = ck.model
    meta = {
        "version": CHECKPOINT_VERSION,
        "model": asdict(m.cfg),
        "layout": asdict(m.layout),
        "seed": m.seed,
        "d": m.cfg.d,
        "n_coarse": m.cfg.n_coarse,
        "group_digest": m.layout.group_digest,
        "bins_os": ck.bins_os.cuts.tolist(),
        "bins_ohe": ck.bins_ohe.cuts.tolist(),
        "normalizer": _normalizer_to_json(ck.normalizer),
        "pod": ck.pod.to_dict() if ck.pod else None,
        "extra": ck.extra,
    }
    arrays = {f"param/{k}": v for k, v in m.state_dict().items()}
    with open(path, "wb") as fh:
        np.savez(fh, meta=np.array(json.dumps(meta, sort_keys=True)), **arrays)


def load_checkpoint(path: str | Path) -> Checkpoint:
    try:
        with np.load(path, allow_pickle=False) as z:
            meta = json.loads(str(z["meta"]))
            state = {k[len("param/"):]: z[k] for k in z.files if k.startswith("param/")}
    except (OSError, KeyError, ValueError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None
    if meta.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"checkpoint version {meta.get('version')} != {CHECKPOINT_VERSION}")
    model = TipsFuseModel(ModelConfig(**meta["model"]), Layout(**meta["layout"]), meta["seed"])
    model.load_state_dict(state)
    model.eval()
    pod = PodState.from_dict(meta["pod"]) if meta["pod"] else None
    return Checkpoint(model, TimeBins(np.array(meta["bins_os"])), TimeBins(np.array(meta["bins_ohe"])),
                      _normalizer_from_json(meta["normalizer"]), pod, meta.get("extra", {}))
