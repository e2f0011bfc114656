"""Command-line front end.

    tipsfuse <synth|train|eval|km|ig|inspect-groups> --config FILE [--out DIR] [--seed N] [--force]

Exit codes: 0 success, 2 usage or config error, 3 data error, 4 numeric failure.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import math
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, RunConfig, load_config
from .features import (
    DataError,
    RadiomicsNameError,
    assign_splits,
    build_group_index,
    fit_apply_normalization,
    generate_synthetic,
    load_dataset,
    reference_names,
    write_dataset,
)
from .heads import make_time_bins
from .interpret import InterpretError, attribute_patient, coattention_export, top_attributions, write_attributions, write_heatmap
from .metrics import km_curve, logrank, median_risk_stratify
from .model import Checkpoint, CheckpointError, Layout, TipsFuseModel, load_checkpoint, save_checkpoint
from .ot import OtError
from .tensor import NonFiniteError, ShapeError
from .training import evaluate, predict, staged_train, write_log

log = logging.getLogger("tipsfuse")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
COMMANDS = ("synth", "train", "eval", "km", "ig", "inspect-groups")


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# helpers


def _prepare_out(out: Path, force: bool) -> None:
    if out.exists() and not out.is_dir():
        raise UsageError(f"output path {out} exists and is not a directory")
    if out.is_dir() and any(out.iterdir()) and not force:
        raise UsageError(f"output directory {out} is not empty (pass --force to write into it)")
    out.mkdir(parents=True, exist_ok=True)


def _file_hashes(root: Path) -> dict[str, str]:
    if root.is_file():
        return {root.name: hashlib.sha256(root.read_bytes()).hexdigest()}
    return {str(p.relative_to(root)): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(root.rglob("*")) if p.is_file()}


def _write_manifest(out: Path, command: str, cfg: RunConfig, started: float, inputs: dict, outputs: list[str]) -> None:
    manifest = {
        "command": command,
        "version": __version__,
        "config": dict(cfg.items()),
        "inputs": inputs,
        "outputs": sorted(outputs),
        "wall_time_s": round(time.perf_counter() - started, 3),
    }
    path = out / f"manifest_{command}.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _checkpoint_path(cfg: RunConfig) -> Path:
    return Path(cfg.checkpoint) if cfg.checkpoint else Path(cfg.out) / "checkpoint.npz"


def _load_for_inference(cfg: RunConfig):
    """Checkpoint plus the dataset split and normalized exactly as during training."""
    ck = load_checkpoint(_checkpoint_path(cfg))
    ds = load_dataset(cfg.data_dir)
    if ds.group_index.digest() != ck.model.layout.group_digest:
        raise DataError("radiomics names of the data do not match the checkpoint")
    meta = ck.extra
    assign_splits(ds, tuple(meta.get("ratios", cfg.ratios)), meta.get("split_seed", cfg.seed))
    ck.normalizer.apply(ds)
    if Layout.from_dataset(ds).clinical_dims != ck.model.layout.clinical_dims:
        raise DataError("clinical columns of the data do not match the checkpoint")
    train = ds.split("train")
    for tag, bins in (("os", ck.bins_os), ("ohe", ck.bins_ohe)):
        t = [getattr(r.outcomes, f"t_{tag}") for r in train]
        c = [getattr(r.outcomes, f"c_{tag}") for r in train]
        fresh = make_time_bins(t, c, ck.model.cfg.n_bins)
        if fresh.cuts.shape != bins.cuts.shape or not np.array_equal(fresh.cuts, bins.cuts):
            raise DataError(f"{tag} time bins of the checkpoint {bins.cuts.tolist()} do not match the data {fresh.cuts.tolist()}")
    return ck, ds


def _fmt(x) -> str:
    if isinstance(x, float):
        return "nan" if math.isnan(x) else f"{x:.6f}"
    return str(x)


# ---------------------------------------------------------------------------
# commands


def cmd_synth(cfg: RunConfig, out: Path, force: bool) -> list[str]:
    if cfg.n_patients < 4:
        raise UsageError(f"n_patients must be at least 4 so every time bin can be populated, got {cfg.n_patients}")
    _prepare_out(out, force)
    ds, truth = generate_synthetic(cfg.seed, cfg.n_patients)
    write_dataset(ds, out)
    with open(out / "truth.csv", "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "risk"])
        for pid, r in zip(truth.ids, truth.risk):
            w.writerow([pid, f"{r:.17g}"])
    print(f"wrote {len(ds)} synthetic patients to {out}")
    return ["radiomics.csv", "clinical.csv", "outcomes.csv", "deep/", "truth.csv"]


def cmd_train(cfg: RunConfig, out: Path, force: bool) -> list[str]:
    ds = load_dataset(cfg.data_dir)
    _prepare_out(out, force)
    assign_splits(ds, cfg.ratios, cfg.seed)
    _, norm = fit_apply_normalization(ds)
    model = TipsFuseModel(cfg.model_config(), Layout.from_dataset(ds), cfg.seed)

    def progress(row):
        print(f"[{row.stage:>4}] epoch {row.epoch:3d}  loss {row.loss:.5f}  {row.metric_name} {_fmt(row.metric_value)}", flush=True)

    res = staged_train(ds, model, cfg.train_config(), progress)
    write_log(res.log, out / "train_log.csv")
    extra = {"ratios": list(cfg.ratios), "split_seed": cfg.seed, "best_epochs": res.best_epochs}
    save_checkpoint(out / "checkpoint.npz", Checkpoint(model, res.bins_os, res.bins_ohe, norm, res.pod, extra))
    metrics = {split: evaluate(model, ds.split(split), res.bins_os, res.bins_ohe) for split in ("val", "test") if ds.split(split)}
    (out / "metrics.json").write_text(json.dumps(metrics, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return ["train_log.csv", "checkpoint.npz", "metrics.json"]


EVAL_COLUMNS = ("cindex_os", "mbs_os", "cindex_ohe", "mbs_ohe", "mae_ppg", "rmse_ppg")


def cmd_eval(cfg: RunConfig, out: Path, force: bool) -> list[str]:
    ck, ds = _load_for_inference(cfg)
    records = ds.split(cfg.eval_split)
    if not records:
        raise DataError(f"split {cfg.eval_split!r} is empty")
    report = evaluate(ck.model, records, ck.bins_os, ck.bins_ohe)
    for tag in ("os", "ohe"):
        if report[f"cindex_{tag}_undefined"]:
            log.warning("C-index (%s) is undefined on this split: no comparable pairs or all risks tied", tag)
    out.mkdir(parents=True, exist_ok=True)
    print(f"split={cfg.eval_split} n={len(records)}")
    print("  ".join(f"{c:>10}" for c in EVAL_COLUMNS))
    print("  ".join(f"{_fmt(float(report[c])):>10}" for c in EVAL_COLUMNS))
    name = f"eval_{cfg.eval_split}.json"
    (out / name).write_text(json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return [name]


def km_svg(curves: dict[str, "object"], p_value: float | None, title: str) -> str:
    """Step plot of KM curves as bare SVG markup."""
    w, h, pad = 480, 320, 40
    t_max = max([float(c.times.max()) for c in curves.values() if c.times.size] + [1.0])
    sx = lambda t: pad + (w - 2 * pad) * t / t_max
    sy = lambda s: h - pad - (h - 2 * pad) * s
    colors = {"high": "#c0392b", "low": "#2471a3"}
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">',
             f'<rect width="{w}" height="{h}" fill="white"/>',
             f'<line x1="{pad}" y1="{h - pad}" x2="{w - pad}" y2="{h - pad}" stroke="black"/>',
             f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{h - pad}" stroke="black"/>',
             f'<text x="{w / 2:.0f}" y="20" text-anchor="middle" font-size="14">{title}</text>']
    for k, (group, c) in enumerate(curves.items()):
        pts, s = [(0.0, 1.0)], 1.0
        for t, s_new in zip(c.times, c.survival):
            pts += [(float(t), s), (float(t), float(s_new))]
            s = float(s_new)
        pts.append((t_max, s))
        path = " ".join(f"{'M' if i == 0 else 'L'}{sx(t):.2f},{sy(v):.2f}" for i, (t, v) in enumerate(pts))
        color = colors.get(group, "#555555")
        parts.append(f'<path d="{path}" fill="none" stroke="{color}" stroke-width="2"/>')
        parts.append(f'<text x="{w - pad}" y="{pad + 16 * k}" text-anchor="end" font-size="12" fill="{color}">{group} risk</text>')
    label = "p omitted (single group)" if p_value is None else f"log-rank p = {p_value:.4g}"
    parts.append(f'<text x="{pad + 8}" y="{h - pad - 8}" font-size="12">{label}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def km_report(risks, times, censored, task: str):
    """Median split, one KM curve per non-empty group, log-rank p (None if a group is empty)."""
    times = np.asarray(times, dtype=np.float64)
    events = 1 - np.asarray(censored, dtype=int)
    high, low = median_risk_stratify(risks)
    curves = {g: km_curve(times[idx], events[idx]) for g, idx in (("high", high), ("low", low)) if idx.size}
    if len(curves) < 2:
        log.warning("median split of %s risks put every patient in one group; log-rank p omitted", task)
        return curves, None
    return curves, logrank(times[high], events[high], times[low], events[low]).p_value


def cmd_km(cfg: RunConfig, out: Path, force: bool) -> list[str]:
    ck, ds = _load_for_inference(cfg)
    records = ds.split(cfg.eval_split)
    if len(records) < 2:
        raise DataError(f"split {cfg.eval_split!r} needs at least two patients for a median split")
    preds = predict(ck.model, records)
    task = cfg.km_task
    risks = preds.risk_os if task == "os" else preds.risk_ohe
    times = [getattr(r.outcomes, f"t_{task}") for r in records]
    cens = [getattr(r.outcomes, f"c_{task}") for r in records]
    curves, p = km_report(risks, times, cens, task)
    out.mkdir(parents=True, exist_ok=True)
    stem = f"km_{task}_{cfg.eval_split}"
    with open(out / f"{stem}.csv", "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["time", "survival", "at_risk", "events", "group"])
        for group, c in curves.items():
            for row in zip(c.times, c.survival, c.at_risk, c.events):
                w.writerow([f"{row[0]:.17g}", f"{row[1]:.17g}", int(row[2]), int(row[3]), group])
    (out / f"{stem}.svg").write_text(km_svg(curves, p, f"{task.upper()} by median predicted risk"), encoding="utf-8")
    print(f"{task}: log-rank p = {'omitted' if p is None else f'{p:.4g}'}")
    return [f"{stem}.csv", f"{stem}.svg"]


def cmd_ig(cfg: RunConfig, out: Path, force: bool) -> list[str]:
    ck, ds = _load_for_inference(cfg)
    model = ck.model
    by_id = {r.id: r for r in ds.records}
    if cfg.ig_patients:
        ids = [s.strip() for s in cfg.ig_patients.split(",") if s.strip()]
        missing = [i for i in ids if i not in by_id]
        if missing:
            raise DataError(f"unknown patient ids {missing}")
    else:
        split = ds.split(cfg.eval_split)
        if not split:
            raise DataError(f"split {cfg.eval_split!r} is empty")
        ids = [split[0].id]
    clinical_columns = {g: ck.normalizer.columns(g) for g in ck.normalizer.layout}
    reports, heat_rows = [], []
    for pid in ids:
        inp = model.inputs(by_id[pid])
        rep = attribute_patient(model, inp, cfg.ig_target, cfg.ig_steps, ds.radiomics_names, clinical_columns)
        reports.append(rep)
        print(f"{pid} {cfg.ig_target}: f(x)={rep.target_x:.6g} f(0)={rep.target_baseline:.6g} completeness residual={rep.residual:.3g}")
        for name, v in top_attributions(rep, cfg.ig_top_k):
            print(f"  {v:+.6f}  {name}")
        fused = model.backbone.forward(inp, retain=True)
        rows, ranked = coattention_export(fused, model.layout.group_names, cfg.heatmap_top_k)
        heat_rows += [(f"{pid}:{v}", g, x) for v, g, x in rows]
    out.mkdir(parents=True, exist_ok=True)
    write_attributions(reports, out / f"ig_{cfg.ig_target}.csv")
    write_heatmap(heat_rows, out / "coattention.csv")
    return [f"ig_{cfg.ig_target}.csv", "coattention.csv"]


def cmd_inspect_groups(cfg: RunConfig, out: Path | None, force: bool) -> list[str]:
    if cfg.names_file:
        try:
            text = Path(cfg.names_file).read_text(encoding="utf-8")
        except OSError as exc:
            raise DataError(f"cannot read names file {cfg.names_file}: {exc.strerror}") from None
        names = [ln.strip() for ln in text.splitlines() if ln.strip()]
    else:
        names = reference_names()
    gi = build_group_index(names)
    print(gi.summary())
    if out is None:
        return []
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "groups.csv", "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["group", "size"])
        for name, size in zip(gi.group_names(), gi.group_sizes()):
            w.writerow([name, size])
    return ["groups.csv"]


HANDLERS = {
    "synth": cmd_synth, "train": cmd_train, "eval": cmd_eval,
    "km": cmd_km, "ig": cmd_ig, "inspect-groups": cmd_inspect_groups,
}


# ---------------------------------------------------------------------------
# entry point


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="tipsfuse", description="Multimodal fusion prognosis toolkit.")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", required=True, help="flat key = value settings file")
    p.add_argument("--out", help="output directory (overrides the 'out' key)")
    p.add_argument("--seed", type=int, help="overrides the 'seed' key")
    p.add_argument("--force", action="store_true", help="write into a non-empty output directory")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    started = time.perf_counter()
    try:
        args = build_parser().parse_args(argv)
        if args.verbose:
            logging.getLogger().setLevel(logging.INFO)
        cfg = load_config(args.config, out=args.out, seed=args.seed)
        out = Path(cfg.out) if (args.out or args.command != "inspect-groups") else None
        outputs = HANDLERS[args.command](cfg, out, args.force)
        if out is not None:
            inputs = {}
            if args.command in ("train", "eval", "km", "ig"):
                inputs["data"] = _file_hashes(Path(cfg.data_dir))
            if args.command in ("eval", "km", "ig"):
                inputs["checkpoint"] = _file_hashes(_checkpoint_path(cfg))
            _write_manifest(out, args.command.replace("-", "_"), cfg, started, inputs, outputs)
        return EXIT_OK
    except (UsageError, ConfigError) as exc:
        print(f"tipsfuse: usage: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, CheckpointError, RadiomicsNameError, InterpretError, FileNotFoundError) as exc:
        print(f"tipsfuse: data: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NonFiniteError, OtError, ShapeError, FloatingPointError) as exc:
        print(f"tipsfuse: numeric: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
