"""Radiomics feature names and their three-level grouping.

A feature name has the form ``<filter>_<featureclass>_<attribute>``.  The
filter token may itself carry hyphenated sub-band or parameter parts
(``wavelet-LHH``, ``lbp-3D-k``) but never an underscore.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from importlib import resources
from typing import Iterable

FEATURE_CLASSES = ("firstorder", "shape", "glcm", "glrlm", "glszm", "gldm", "ngtdm")


class RadiomicsNameError(ValueError):
    pass


@dataclass(frozen=True)
class RadiomicsFeature:
    name: str
    filter_class: str
    feature_class: str
    attribute: str
    value: float = 0.0

    @property
    def group(self) -> str:
        return f"{self.filter_class}_{self.feature_class}"


def parse_radiomics_name(name: str) -> tuple[str, str, str]:
    parts = name.split("_")
    if len(parts) != 3:
        raise RadiomicsNameError(
            f"{name!r}: expected <filter>_<featureclass>_<attribute>, found {len(parts)} underscore-separated segments"
        )
    filt, cls, attr = parts
    for label, seg in (("filter", filt), ("attribute", attr)):
        if not seg:
            raise RadiomicsNameError(f"{name!r}: empty {label} segment")
    if cls not in FEATURE_CLASSES:
        raise RadiomicsNameError(f"{name!r}: unknown feature class segment {cls!r}")
    return filt, cls, attr


def make_feature(name: str, value: float = 0.0) -> RadiomicsFeature:
    return RadiomicsFeature(name, *parse_radiomics_name(name), value=float(value))


@dataclass
class GroupIndex:
    """Level II groups (filter, class) and their Level III coarsenings.

    ``groups`` preserves first-appearance order of the (filter, class) pairs
    in ``names``; ``members[k]`` are the positions in ``names`` of group k.
    """

    names: list[str]
    groups: list[tuple[str, str]]
    members: list[list[int]]
    by_filter: dict[str, list[int]] = field(default_factory=dict)
    by_class: dict[str, list[int]] = field(default_factory=dict)

    @property
    def n_groups(self) -> int:
        return len(self.groups)

    def group_names(self) -> list[str]:
        return [f"{f}_{s}" for f, s in self.groups]

    def group_sizes(self) -> list[int]:
        return [len(m) for m in self.members]

    def digest(self) -> str:
        h = hashlib.sha256()
        for name in self.names:
            h.update(name.encode())
            h.update(b"\n")
        return h.hexdigest()[:16]

    def summary(self) -> str:
        return f"{self.n_groups} groups / {len(self.by_filter)} filters / {len(self.by_class)} classes"


def build_group_index(features: Iterable[RadiomicsFeature | str]) -> GroupIndex:
    names: list[str] = []
    seen: set[str] = set()
    slots: dict[tuple[str, str], int] = {}
    groups: list[tuple[str, str]] = []
    members: list[list[int]] = []
    for pos, feat in enumerate(features):
        if isinstance(feat, str):
            feat = make_feature(feat)
        if feat.name in seen:
            raise RadiomicsNameError(f"duplicate feature name {feat.name!r}")
        seen.add(feat.name)
        names.append(feat.name)
        key = (feat.filter_class, feat.feature_class)
        if key not in slots:
            slots[key] = len(groups)
            groups.append(key)
            members.append([])
        members[slots[key]].append(pos)
    by_filter: dict[str, list[int]] = {}
    by_class: dict[str, list[int]] = {}
    for k, (f, s) in enumerate(groups):
        by_filter.setdefault(f, []).append(k)
        by_class.setdefault(s, []).append(k)
    return GroupIndex(names, groups, members, by_filter, by_class)


def reference_names() -> list[str]:
    """The 1,595-name reference list: 17 image filters x 7 feature classes."""
    text = resources.files("tipsfuse.features").joinpath("data/radiomics_names.txt").read_text("utf-8")
    return [line for line in text.splitlines() if line]
