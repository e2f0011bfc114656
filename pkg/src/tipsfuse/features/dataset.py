"""Patient records, CSV ingestion and train-fitted normalization.

On-disk layout of a dataset directory::

    deep/<id>.csv      N_d rows x dim columns, no header
    radiomics.csv      id,<feature names...>
    clinical.csv       id,group,name,kind,value   (long format)
    outcomes.csv       id,t_os,c_os,t_ohe,c_ohe,ppg_pre,ppg_post
"""
from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .radiomics import GroupIndex, build_group_index

log = logging.getLogger(__name__)

CLINICAL_GROUPS = ("baseline", "pressure", "blood", "scores", "procedures")
PRESSURE_GROUP = "pressure"
OUTCOME_COLUMNS = ("t_os", "c_os", "t_ohe", "c_ohe", "ppg_pre", "ppg_post")
SPLITS = ("train", "val", "test")


class DataError(ValueError):
    pass


def fmt(x: float) -> str:
    return f"{float(x):.17g}"


@dataclass(frozen=True)
class ClinicalItem:
    name: str
    value: float | str
    kind: str  # "numeric" or "categorical"


@dataclass
class Outcomes:
    t_os: float
    c_os: int
    t_ohe: float
    c_ohe: int
    ppg_pre: float
    ppg_post: float

    def validate(self, pid: str) -> None:
        if not (self.t_os > 0 and self.t_ohe > 0):
            raise DataError(f"patient {pid}: event times must be positive")
        if self.c_os not in (0, 1) or self.c_ohe not in (0, 1):
            raise DataError(f"patient {pid}: censor flags must be 0 or 1")
        if self.ppg_pre < 0 or self.ppg_post < 0:
            raise DataError(f"patient {pid}: pressures must be nonnegative")


@dataclass
class PatientRecord:
    id: str
    deep: np.ndarray
    radiomics: np.ndarray
    clinical: dict[str, list[ClinicalItem]]
    outcomes: Outcomes
    split: str = "train"
    # filled by Normalizer.apply; always derived from the raw fields above
    rad_norm: np.ndarray | None = None
    cli_norm: dict[str, np.ndarray] | None = None

    def __post_init__(self):
        self.deep = np.atleast_2d(np.asarray(self.deep, dtype=np.float64))
        self.radiomics = np.asarray(self.radiomics, dtype=np.float64).ravel()
        if self.deep.shape[0] < 1:
            raise DataError(f"patient {self.id}: empty deep-feature bag")
        missing = [g for g in CLINICAL_GROUPS if not self.clinical.get(g)]
        if missing or len(self.clinical) != len(CLINICAL_GROUPS):
            raise DataError(f"patient {self.id}: clinical groups must be exactly {CLINICAL_GROUPS}, missing/empty {missing}")
        self.outcomes.validate(self.id)

    def pressure_values(self) -> np.ndarray:
        if self.cli_norm is None:
            raise DataError(f"patient {self.id}: dataset is not normalized")
        return self.cli_norm[PRESSURE_GROUP]


@dataclass
class PatientDataset:
    records: list[PatientRecord]
    radiomics_names: list[str]
    group_index: GroupIndex = field(init=False)
    normalizer: "Normalizer | None" = None

    def __post_init__(self):
        self.group_index = build_group_index(self.radiomics_names)
        seen = set()
        for r in self.records:
            if r.id in seen:
                raise DataError(f"duplicate patient id {r.id!r}")
            seen.add(r.id)
            if r.radiomics.size != len(self.radiomics_names):
                raise DataError(f"patient {r.id}: {r.radiomics.size} radiomics values for {len(self.radiomics_names)} names")
        dims = {r.deep.shape[1] for r in self.records}
        if len(dims) > 1:
            raise DataError(f"deep-feature bags disagree on dimension: {sorted(dims)}")

    def __len__(self) -> int:
        return len(self.records)

    @property
    def deep_dim(self) -> int:
        return self.records[0].deep.shape[1]

    def split(self, name: str) -> list[PatientRecord]:
        return [r for r in self.records if r.split == name]

    def ids(self) -> list[str]:
        return [r.id for r in self.records]


# ---------------------------------------------------------------------------
# normalization


@dataclass
class Normalizer:
    """Min-max scaling for numerics and one-hot coding for categoricals.

    Statistics come from the training split only.  Values outside the
    training range are clamped to [0, 1]; a constant attribute maps to 0.
    """

    rad_min: np.ndarray
    rad_max: np.ndarray
    numeric: dict[tuple[str, str], tuple[float, float]]
    levels: dict[tuple[str, str], list[str]]
    layout: dict[str, list[tuple[str, str]]]  # group -> ordered (name, kind)
    warnings: list[str] = field(default_factory=list)

    @staticmethod
    def _scale(x, lo, hi):
        span = hi - lo
        safe = np.where(span > 0, span, 1.0)
        return np.where(span > 0, np.clip((x - lo) / safe, 0.0, 1.0), 0.0)

    @classmethod
    def fit(cls, train: Sequence[PatientRecord]) -> "Normalizer":
        if not train:
            raise DataError("cannot fit normalization on an empty training split")
        R = np.stack([r.radiomics for r in train])
        rad_min, rad_max = R.min(axis=0), R.max(axis=0)
        warnings = [f"radiomics column {j} is constant on train; mapped to 0" for j in np.flatnonzero(rad_max == rad_min)]
        layout: dict[str, list[tuple[str, str]]] = {}
        values: dict[tuple[str, str], list] = {}
        for rec in train:
            for g in CLINICAL_GROUPS:
                for item in rec.clinical[g]:
                    key = (g, item.name)
                    if key not in values:
                        layout.setdefault(g, []).append((item.name, item.kind))
                        values[key] = []
                    values[key].append(item.value)
        numeric, levels = {}, {}
        for g, items in layout.items():
            for name, kind in items:
                vals = values[(g, name)]
                if kind == "numeric":
                    lo, hi = float(min(vals)), float(max(vals))
                    if lo == hi:
                        warnings.append(f"clinical {g}/{name} is constant on train; mapped to 0")
                    numeric[(g, name)] = (lo, hi)
                else:
                    levels[(g, name)] = sorted({str(v) for v in vals})
        for w in warnings:
            log.warning(w)
        return cls(rad_min, rad_max, numeric, levels, layout, warnings)

    def columns(self, group: str) -> list[str]:
        cols = []
        for name, kind in self.layout[group]:
            if kind == "numeric":
                cols.append(name)
            else:
                cols.extend(f"{name}_bit{i}" for i in range(len(self.levels[(group, name)])))
        return cols

    def group_dims(self) -> list[int]:
        return [len(self.columns(g)) for g in CLINICAL_GROUPS]

    def encode_clinical(self, rec: PatientRecord) -> dict[str, np.ndarray]:
        out = {}
        for g in CLINICAL_GROUPS:
            have = {item.name: item for item in rec.clinical[g]}
            vec: list[float] = []
            for name, kind in self.layout[g]:
                if name not in have:
                    raise DataError(f"patient {rec.id}: clinical {g}/{name} missing")
                v = have[name].value
                if kind == "numeric":
                    lo, hi = self.numeric[(g, name)]
                    vec.append(float(self._scale(float(v), lo, hi)))
                else:
                    lv = self.levels[(g, name)]
                    bits = [0.0] * len(lv)
                    if str(v) in lv:
                        bits[lv.index(str(v))] = 1.0
                    else:
                        log.warning("patient %s: unseen level %r for %s/%s; all bits 0", rec.id, v, g, name)
                    vec.extend(bits)
            out[g] = np.asarray(vec)
        return out

    def apply(self, dataset: PatientDataset) -> PatientDataset:
        for rec in dataset.records:
            if rec.radiomics.shape != self.rad_min.shape:
                raise DataError(f"patient {rec.id}: {rec.radiomics.size} radiomics values, normalizer expects {self.rad_min.size}")
            rec.rad_norm = self._scale(rec.radiomics, self.rad_min, self.rad_max)
            rec.cli_norm = self.encode_clinical(rec)
        dataset.normalizer = self
        return dataset


def fit_apply_normalization(dataset: PatientDataset) -> tuple[PatientDataset, Normalizer]:
    norm = Normalizer.fit(dataset.split("train"))
    return norm.apply(dataset), norm


def assign_splits(dataset: PatientDataset, ratios=(0.6, 0.2, 0.2), seed: int = 0) -> PatientDataset:
    """Seeded shuffle of patients into train/val/test in the given proportions."""
    if len(ratios) != 3 or min(ratios) < 0 or abs(sum(ratios) - 1.0) > 1e-9:
        raise DataError(f"split ratios must be three nonnegative numbers summing to 1, got {ratios}")
    n = len(dataset)
    order = np.random.default_rng(seed).permutation(n)
    n_train = int(round(ratios[0] * n))
    n_val = int(round(ratios[1] * n))
    for rank, idx in enumerate(order):
        dataset.records[idx].split = "train" if rank < n_train else "val" if rank < n_train + n_val else "test"
    return dataset


# ---------------------------------------------------------------------------
# CSV surfaces


def _read_rows(path: Path) -> tuple[list[str], list[tuple[int, list[str]]]]:
    try:
        text = path.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise DataError(f"missing file {path}") from None
    rows = list(csv.reader(io.StringIO(text)))
    if not rows:
        raise DataError(f"{path}: empty file")
    return rows[0], [(i + 2, r) for i, r in enumerate(rows[1:]) if r]


def _float(s: str, path: Path, line: int) -> float:
    try:
        x = float(s)
    except ValueError:
        raise DataError(f"{path}:{line}: {s!r} is not a number") from None
    if not np.isfinite(x):
        raise DataError(f"{path}:{line}: non-finite value {s!r}")
    return x


def load_dataset(root: str | Path, deep_dir=None, radiomics_csv=None, clinical_csv=None, outcomes_csv=None) -> PatientDataset:
    root = Path(root)
    deep_dir = Path(deep_dir or root / "deep")
    rad_path = Path(radiomics_csv or root / "radiomics.csv")
    cli_path = Path(clinical_csv or root / "clinical.csv")
    out_path = Path(outcomes_csv or root / "outcomes.csv")

    header, rows = _read_rows(rad_path)
    if not header or header[0] != "id":
        raise DataError(f"{rad_path}: header must start with 'id'")
    names = header[1:]
    radiomics: dict[str, np.ndarray] = {}
    for line, row in rows:
        if len(row) != len(header):
            raise DataError(f"{rad_path}:{line}: {len(row)} columns, header has {len(header)}")
        if row[0] in radiomics:
            raise DataError(f"{rad_path}:{line}: duplicate patient id {row[0]!r}")
        radiomics[row[0]] = np.array([_float(v, rad_path, line) for v in row[1:]])

    header, rows = _read_rows(out_path)
    if tuple(header) != ("id",) + OUTCOME_COLUMNS:
        raise DataError(f"{out_path}: header must be id,{','.join(OUTCOME_COLUMNS)}")
    outcomes: dict[str, Outcomes] = {}
    for line, row in rows:
        if len(row) != 7:
            raise DataError(f"{out_path}:{line}: {len(row)} columns, expected 7")
        if row[0] in outcomes:
            raise DataError(f"{out_path}:{line}: duplicate patient id {row[0]!r}")
        v = [_float(x, out_path, line) for x in row[1:]]
        outcomes[row[0]] = Outcomes(v[0], int(v[1]), v[2], int(v[3]), v[4], v[5])

    header, rows = _read_rows(cli_path)
    if header != ["id", "group", "name", "kind", "value"]:
        raise DataError(f"{cli_path}: header must be id,group,name,kind,value")
    clinical: dict[str, dict[str, list[ClinicalItem]]] = {}
    for line, row in rows:
        if len(row) != 5:
            raise DataError(f"{cli_path}:{line}: {len(row)} columns, expected 5")
        pid, group, name, kind, value = row
        if group not in CLINICAL_GROUPS:
            raise DataError(f"{cli_path}:{line}: unknown clinical group {group!r}")
        if kind not in ("numeric", "categorical"):
            raise DataError(f"{cli_path}:{line}: kind must be numeric or categorical, got {kind!r}")
        val = _float(value, cli_path, line) if kind == "numeric" else value
        clinical.setdefault(pid, {}).setdefault(group, []).append(ClinicalItem(name, val, kind))

    ids = list(radiomics)
    all_ids = set(ids) | set(outcomes) | set(clinical)
    incomplete = sorted(i for i in all_ids if not (i in radiomics and i in outcomes and i in clinical))
    if incomplete:
        raise DataError(f"patients missing from at least one file: {incomplete[:20]}")
    records = []
    for pid in ids:
        path = deep_dir / f"{pid}.csv"
        if not path.exists():
            raise DataError(f"missing deep-feature file {path}")
        bag_rows = [r for r in csv.reader(io.StringIO(path.read_text(encoding="utf-8"))) if r]
        widths = {len(r) for r in bag_rows}
        if len(widths) != 1:
            raise DataError(f"{path}: ragged rows (widths {sorted(widths)})")
        bag = np.array([[_float(x, path, i + 1) for x in r] for i, r in enumerate(bag_rows)])
        records.append(PatientRecord(pid, bag, radiomics[pid], clinical[pid], outcomes[pid]))
    return PatientDataset(records, names)


def write_dataset(dataset: PatientDataset, root: str | Path) -> None:
    root = Path(root)
    (root / "deep").mkdir(parents=True, exist_ok=True)

    def write(path: Path, rows: Iterable[Sequence[str]]):
        with open(path, "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerows(rows)

    write(root / "radiomics.csv", [["id", *dataset.radiomics_names]]
          + [[r.id, *map(fmt, r.radiomics)] for r in dataset.records])
    write(root / "outcomes.csv", [["id", *OUTCOME_COLUMNS]] + [
        [r.id, fmt(o.t_os), str(o.c_os), fmt(o.t_ohe), str(o.c_ohe), fmt(o.ppg_pre), fmt(o.ppg_post)]
        for r in dataset.records for o in [r.outcomes]
    ])
    cli_rows = [["id", "group", "name", "kind", "value"]]
    for r in dataset.records:
        for g in CLINICAL_GROUPS:
            for item in r.clinical[g]:
                val = fmt(item.value) if item.kind == "numeric" else str(item.value)
                cli_rows.append([r.id, g, item.name, item.kind, val])
    write(root / "clinical.csv", cli_rows)
    for r in dataset.records:
        write(root / "deep" / f"{r.id}.csv", [list(map(fmt, row)) for row in r.deep])
