"""Experiment orchestration: multi-run training, evaluation, reports.

An experiment config (JSON, schema_version 1) names a train/val dataset
pair, the methods to train, the seeds, and shared TrainConfig overrides.
Each (method, seed) run lands in its own directory; the report command is
read-only over those directories and emits the comparison table, the
confidence-over-time series and betting-map panels.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import ConfigError, DataError
from .losses import IGNORE_INDEX, normalize_betting_map, pixel_cross_entropy
from .metrics import MetricReport
from .models import load_checkpoint
from .synthdata import Dataset, SceneSpec, class_palette, read_dataset, write_dataset
from .training import (
    TrainConfig,
    TrainLog,
    run_training,
    track_confidence,
    _to_tensors,
)

SCHEMA_VERSION = 1


@dataclass
class ExperimentConfig:
    train_dataset: str
    val_dataset: str
    out_dir: str
    methods: list[str]
    seeds: list[int]
    train_overrides: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.seeds:
            raise ConfigError("experiment needs at least one seed")
        for m in self.methods:
            TrainConfig(method=m)  # validates the method name


def load_experiment_config(path) -> ExperimentConfig:
    try:
        with open(path) as fh:
            data = json.load(fh)
    except OSError as exc:
        raise DataError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"malformed JSON in {path}: {exc}") from exc
    if data.get("schema_version") != SCHEMA_VERSION:
        raise ConfigError(f"unsupported config schema_version {data.get('schema_version')}")
    try:
        return ExperimentConfig(
            train_dataset=data["train_dataset"],
            val_dataset=data["val_dataset"],
            out_dir=data["out_dir"],
            methods=list(data["methods"]),
            seeds=[int(s) for s in data["seeds"]],
            train_overrides=dict(data.get("train", {})),
        )
    except KeyError as exc:
        raise ConfigError(f"config missing required key {exc}") from exc


def run_dir(out_dir, method: str, seed: int) -> Path:
    return Path(out_dir) / f"{method}_seed{seed}"


def make_train_config(method: str, seed: int, overrides: dict) -> TrainConfig:
    try:
        return TrainConfig(method=method, seed=seed, **overrides)
    except TypeError as exc:
        raise ConfigError(f"bad training override: {exc}") from exc


def generate_dataset(spec_file, n: int, out_dir) -> Dataset:
    """Write a dataset from a SceneSpec JSON file (default spec when None)."""
    if spec_file is None:
        spec = SceneSpec()
    else:
        try:
            with open(spec_file) as fh:
                raw = json.load(fh)
        except OSError as exc:
            raise DataError(f"cannot read scene spec {spec_file}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"malformed scene spec {spec_file}: {exc}") from exc
        raw = {k: tuple(v) if isinstance(v, list) else v for k, v in raw.items()}
        try:
            spec = SceneSpec(**raw)
        except TypeError as exc:
            raise ConfigError(f"bad scene spec field: {exc}") from exc
    if n < 0:
        raise ConfigError("sample count must be >= 0")
    return write_dataset(spec, n, out_dir)


def run_experiment(config: ExperimentConfig, methods=None, seeds=None, resume: bool = False):
    """Train every requested (method, seed); returns {(method, seed): TrainLog}."""
    train_ds = read_dataset(config.train_dataset)
    val_ds = read_dataset(config.val_dataset)
    train_samples = train_ds.samples()
    val_samples = val_ds.samples()
    logs = {}
    for method in methods or config.methods:
        for seed in seeds or config.seeds:
            cfg = make_train_config(method, seed, config.train_overrides)
            out = run_dir(config.out_dir, method, seed)
            meta = {"train_dataset": str(config.train_dataset), "val_dataset": str(config.val_dataset)}
            logs[(method, seed)] = run_training(cfg, train_samples, val_samples, out,
                                                resume=resume, meta=meta)
    return logs


def evaluate_checkpoint(checkpoint, dataset_dir, out_base=None) -> MetricReport:
    """Full MetricReport of a segmenter checkpoint on a dataset split."""
    segmenter, sidecar = load_checkpoint(checkpoint)
    ds = read_dataset(dataset_dir)
    num_classes = segmenter.spec.out_channels
    if ds.spec.num_classes != num_classes:
        raise ConfigError(
            f"checkpoint has {num_classes} classes but dataset has {ds.spec.num_classes}"
        )
    x, y = _to_tensors(ds.samples(), use_clean=True)
    segmenter.eval()
    with torch.no_grad():
        preds = torch.cat([segmenter(x[i : i + 16]) for i in range(0, len(x), 16)])
    from .metrics import evaluate_segmentation, hard_predictions

    report = evaluate_segmentation(
        list(hard_predictions(preds.numpy())), list(y.numpy()), num_classes,
        preds_soft=list(preds.numpy()),
    )
    report.extra["checkpoint"] = str(checkpoint)
    report.extra["config_hash"] = sidecar.get("config_hash")
    if out_base is not None:
        report.write(out_base)
    return report


def _colorize(label: np.ndarray, palette: np.ndarray) -> np.ndarray:
    img = np.zeros((*label.shape, 3))
    valid = label != IGNORE_INDEX
    img[valid] = palette[label[valid]]
    return (img * 255).round().astype(np.uint8)


def betting_panel(sample, pred: np.ndarray, bets: np.ndarray, num_classes: int) -> np.ndarray:
    """(H, 4W+6, 3) uint8 grid: rgb | ground truth | prediction | betting map."""
    palette = class_palette(num_classes)
    rgb = (sample.rgb * 255).round().astype(np.uint8)
    gt = _colorize(np.where(sample.ignore, IGNORE_INDEX, sample.clean), palette)
    pr = _colorize(pred, palette)
    peak = bets.max()
    gray = (bets / peak * 255).round().astype(np.uint8) if peak > 0 else np.zeros_like(bets, dtype=np.uint8)
    bet_img = np.stack([gray] * 3, axis=-1)
    sep = np.full((rgb.shape[0], 2, 3), 255, dtype=np.uint8)
    return np.concatenate([rgb, sep, gt, sep, pr, sep, bet_img], axis=1)


def inspect_bets(gambler_ckpt, segmenter_ckpt, dataset_dir, index: int, topk: int = 10):
    """Betting map for one sample plus the top-k bet pixels with their CE.

    Returns (bets (H, W) float array, pred_hard (H, W), top list of
    (row, col, bet, cross_entropy), sample). The smoothing factor is taken
    from the gambler checkpoint sidecar (default 0.02).
    """
    gambler, g_meta = load_checkpoint(gambler_ckpt)
    beta = float(g_meta.get("beta_smooth", 0.02))
    segmenter, _ = load_checkpoint(segmenter_ckpt)
    ds = read_dataset(dataset_dir)
    sample = ds[index]
    x = torch.from_numpy(np.ascontiguousarray(sample.rgb.transpose(2, 0, 1))).float().unsqueeze(0)
    label = sample.clean.copy()
    label[sample.ignore] = IGNORE_INDEX
    y = torch.from_numpy(label).long().unsqueeze(0)
    segmenter.eval()
    gambler.eval()
    with torch.no_grad():
        pred = segmenter(x)
        raw = gambler(torch.cat([x, pred], dim=1)).squeeze(1)
        bets = normalize_betting_map(raw, beta, ignore=y == IGNORE_INDEX)
        ce = pixel_cross_entropy(pred, y)
    bets_np = bets[0].numpy()
    ce_np = ce[0].numpy()
    flat = np.argsort(bets_np.ravel())[::-1][:topk]
    top = [(int(i // bets_np.shape[1]), int(i % bets_np.shape[1]),
            float(bets_np.ravel()[i]), float(ce_np.ravel()[i])) for i in flat]
    from .metrics import hard_predictions

    return bets_np, hard_predictions(pred[0].numpy()), top, sample


def write_betting_png(bets: np.ndarray, path) -> None:
    """Grayscale PNG of a betting map, min-max normalized by the max weight."""
    from PIL import Image

    peak = bets.max()
    gray = (bets / peak * 255).round().astype(np.uint8) if peak > 0 else np.zeros_like(bets, dtype=np.uint8)
    Image.fromarray(gray, mode="L").save(path)


def build_report(experiment_dir, audit_fraction: float = 0.0, panels: int = 2, rng_seed: int = 0) -> dict:
    """Aggregate run directories into comparison table + confidence curves.

    Missing runs leave explicit gaps. With ``audit_fraction`` > 0 a random
    subset of completed runs is re-evaluated from its checkpoint and
    compared against the logged final metrics.
    """
    root = Path(experiment_dir)
    runs = sorted(p for p in root.iterdir() if p.is_dir() and (p / "resolved_config.json").exists())
    rows = []
    curves = []
    gaps = []
    for run in runs:
        with open(run / "resolved_config.json") as fh:
            cfg = json.load(fh)["config"]
        log_path = run / "train_log.csv"
        if not log_path.exists() or not (run / "summary.json").exists():
            gaps.append(run.name)
            continue
        log = TrainLog.read_csv(log_path)
        series, final_conf = track_confidence(log, cfg.get("final_window", 10))
        last = log.records[-1]
        rows.append({
            "method": cfg["method"], "seed": cfg["seed"],
            "mean_iou": last.mean_iou, "mean_bf": last.mean_bf,
            "mean_hausdorff": last.mean_hausdorff,
            "final_confidence": final_conf, "run": run.name,
        })
        for step, mean, std in series:
            curves.append({"method": cfg["method"], "seed": cfg["seed"],
                           "step": step, "conf_mean": mean, "conf_std": std})
    by_method: dict[str, list[dict]] = {}
    for row in rows:
        by_method.setdefault(row["method"], []).append(row)
    table = []
    for method, mrows in sorted(by_method.items()):
        entry = {"method": method, "runs": len(mrows)}
        for key in ("mean_iou", "mean_bf", "mean_hausdorff", "final_confidence"):
            vals = np.array([r[key] for r in mrows], dtype=np.float64)
            entry[f"{key}_mean"] = float(np.nanmean(vals))
            entry[f"{key}_std"] = float(np.nanstd(vals))
        table.append(entry)

    with open(root / "comparison.csv", "w", newline="") as fh:
        if table:
            writer = csv.DictWriter(fh, fieldnames=list(table[0].keys()))
            writer.writeheader()
            writer.writerows(table)
    with open(root / "confidence_curves.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["method", "seed", "step", "conf_mean", "conf_std"])
        writer.writeheader()
        writer.writerows(curves)

    audit = _audit_runs(root, rows, audit_fraction, rng_seed) if audit_fraction > 0 else None
    panel_files = _emit_panels(root, rows, panels)
    payload = {"schema_version": SCHEMA_VERSION, "rows": rows, "table": table,
               "gaps": gaps, "panels": panel_files, "audit": audit}
    with open(root / "report.json", "w") as fh:
        json.dump(payload, fh, indent=2)
    return payload


def _audit_runs(root: Path, rows: list[dict], fraction: float, rng_seed: int) -> dict:
    rng = np.random.default_rng(rng_seed)
    n_pick = max(1, int(round(len(rows) * fraction)))
    picked = rng.choice(len(rows), size=min(n_pick, len(rows)), replace=False)
    checked = []
    for i in picked:
        run = root / rows[i]["run"]
        with open(run / "resolved_config.json") as fh:
            resolved = json.load(fh)
        val_dir = resolved.get("val_dataset")
        if val_dir is None:
            continue
        report = evaluate_checkpoint(run / "segmenter.pt", val_dir)
        ok = (
            abs(report.mean_iou - rows[i]["mean_iou"]) < 1e-9
            and abs(report.mean_bf - rows[i]["mean_bf"]) < 1e-9
            and abs(report.mean_hausdorff - rows[i]["mean_hausdorff"]) < 1e-9
        )
        checked.append({"run": rows[i]["run"], "ok": bool(ok)})
    return {"fraction": fraction, "checked": checked,
            "all_ok": all(c["ok"] for c in checked) if checked else True}


def _emit_panels(root: Path, rows: list[dict], panels: int) -> list[str]:
    from PIL import Image

    out_files = []
    for row in rows:
        if row["method"] != "gambling":
            continue
        run = root / row["run"]
        with open(run / "resolved_config.json") as fh:
            resolved = json.load(fh)
        val_dir = resolved.get("val_dataset")
        if val_dir is None or not (run / "gambler.pt").exists():
            continue
        ds = read_dataset(val_dir)
        for idx in range(min(panels, len(ds))):
            bets, pred_hard, _, sample = inspect_bets(run / "gambler.pt", run / "segmenter.pt",
                                                      val_dir, idx)
            panel = betting_panel(sample, pred_hard, bets, ds.spec.num_classes)
            path = run / f"panel_{idx:03d}.png"
            Image.fromarray(panel, mode="RGB").save(path)
            out_files.append(str(path))
    return out_files
