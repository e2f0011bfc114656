"""Flat ``key = value`` run configuration.

One setting per line, ``#`` starts a comment, no sections.  Unknown or
repeated keys are errors so that a typo never silently falls back to a
default.
"""
from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path

from .model import ModelConfig
from .training import TrainConfig


class ConfigError(ValueError):
    pass


def _bool(s: str) -> bool:
    low = s.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


# file key -> (attribute, parser)
KEYS: dict[str, tuple[str, type]] = {
    "seed": ("seed", int),
    "n_patients": ("n_patients", int),
    "data_dir": ("data_dir", str),
    "out": ("out", str),
    "checkpoint": ("checkpoint", str),
    "split.train": ("split_train", float),
    "split.val": ("split_val", float),
    "split.test": ("split_test", float),
    "d": ("d", int),
    "N_c": ("n_coarse", int),
    "heads": ("heads", int),
    "dropout": ("dropout", float),
    "n_bins": ("n_bins", int),
    "head.h1": ("head_h1", int),
    "head.h2": ("head_h2", int),
    "ppg.h3": ("ppg_h3", int),
    "E0": ("e0", int),
    "E1": ("e1", int),
    "E2": ("e2", int),
    "delta": ("delta", float),
    "lr": ("lr", float),
    "weight_decay": ("weight_decay", float),
    "ot.epsilon": ("ot_epsilon", float),
    "ot.max_iters": ("ot_max_iters", int),
    "ot.tol": ("ot_tol", float),
    "ot.normalize_cost": ("normalize_cost", _bool),
    "eval.split": ("eval_split", str),
    "km.task": ("km_task", str),
    "ig.target": ("ig_target", str),
    "ig.steps": ("ig_steps", int),
    "ig.patients": ("ig_patients", str),
    "ig.top_k": ("ig_top_k", int),
    "heatmap.top_k": ("heatmap_top_k", int),
    "names_file": ("names_file", str),
}


@dataclass
class RunConfig:
    seed: int = 0
    n_patients: int = 306
    data_dir: str = "data"
    out: str = "out"
    checkpoint: str = ""          # empty: <out>/checkpoint.npz
    split_train: float = 0.6
    split_val: float = 0.2
    split_test: float = 0.2
    d: int = 256
    n_coarse: int = 6
    heads: int = 4
    dropout: float = 0.25
    n_bins: int = 4
    head_h1: int = 256
    head_h2: int = 64
    ppg_h3: int = 16
    e0: int = 20
    e1: int = 20
    e2: int = 20
    delta: float = 0.1
    lr: float = 2e-4
    weight_decay: float = 1e-5
    ot_epsilon: float = 0.1
    ot_max_iters: int = 100
    ot_tol: float = 1e-6
    normalize_cost: bool = True
    eval_split: str = "test"
    km_task: str = "os"
    ig_target: str = "risk"
    ig_steps: int = 256
    ig_patients: str = ""         # comma-separated ids; empty: first patient of eval.split
    ig_top_k: int = 10
    heatmap_top_k: int = 6
    names_file: str = ""          # empty: the shipped reference name list

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        ratios = self.ratios
        if min(ratios) < 0 or abs(sum(ratios) - 1.0) > 1e-9:
            raise ConfigError(f"split ratios must be nonnegative and sum to 1, got {ratios}")
        if self.d < 1 or self.n_coarse < 1 or self.n_bins < 2:
            raise ConfigError("d and N_c must be positive and n_bins at least 2")
        if self.d % self.heads:
            raise ConfigError(f"d={self.d} is not divisible by heads={self.heads}")
        if min(self.e0, self.e1, self.e2) < 1:
            raise ConfigError("E0, E1 and E2 must be at least 1")
        if self.ot_epsilon <= 0 or self.lr <= 0:
            raise ConfigError("ot.epsilon and lr must be positive")
        if self.eval_split not in ("train", "val", "test"):
            raise ConfigError(f"eval.split must be train, val or test, got {self.eval_split!r}")
        if self.km_task not in ("os", "ohe"):
            raise ConfigError(f"km.task must be os or ohe, got {self.km_task!r}")

    @property
    def ratios(self) -> tuple[float, float, float]:
        return (self.split_train, self.split_val, self.split_test)

    def model_config(self) -> ModelConfig:
        return ModelConfig(d=self.d, n_coarse=self.n_coarse, heads=self.heads, dropout=self.dropout,
                           ot_epsilon=self.ot_epsilon, ot_max_iters=self.ot_max_iters, ot_tol=self.ot_tol,
                           normalize_cost=self.normalize_cost, head_h1=self.head_h1, head_h2=self.head_h2,
                           ppg_h3=self.ppg_h3, n_bins=self.n_bins)

    def train_config(self) -> TrainConfig:
        return TrainConfig(self.e0, self.e1, self.e2, self.delta, self.lr, self.weight_decay, self.seed)

    def items(self) -> list[tuple[str, str]]:
        """Every setting as (file key, text), in declaration order."""
        return [(key, str(getattr(self, attr))) for key, (attr, _) in KEYS.items()]

    def dumps(self) -> str:
        return "".join(f"{k} = {v}\n" for k, v in self.items())


def parse_config(text: str, source: str = "<config>", **overrides) -> RunConfig:
    values: dict[str, object] = {}
    seen: dict[str, int] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key = value, got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in KEYS:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        if key in seen:
            raise ConfigError(f"{source}:{lineno}: {key!r} already set on line {seen[key]}")
        seen[key] = lineno
        attr, kind = KEYS[key]
        try:
            values[attr] = kind(value)
        except ValueError as exc:
            raise ConfigError(f"{source}:{lineno}: bad value for {key!r}: {exc}") from None
    values.update({k: v for k, v in overrides.items() if v is not None})
    known = {f.name for f in fields(RunConfig)}
    assert set(values) <= known
    try:
        return RunConfig(**values)
    except TypeError as exc:  # pragma: no cover - guarded by KEYS
        raise ConfigError(str(exc)) from None


def load_config(path: str | Path, **overrides) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config(text, str(path), **overrides)
