"""Structural and pixel-wise segmentation metrics.

All functions take numpy arrays. Label maps are integer (H, W) arrays with
class indices in [0, c); the value 255 marks ignored pixels. Hard
predictions come from per-pixel argmax with ties broken by lowest class
index (numpy's argmax default).

Contours are defined as pixels with at least one 4-neighbor of a different
value; the image border alone does not create contour pixels. Distances are
exact (KD-tree nearest neighbors, no distance-transform approximation).
"""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass, field

import numpy as np
from PIL import Image
from scipy.spatial import cKDTree

from .errors import DegenerateInputError, ShapeMismatchError

IGNORE_INDEX = 255

# Toleration distance for the BF-score, as a fraction of the image diagonal.
BF_TAU_DIAGONAL_FRACTION = 0.0075


def hard_predictions(pred) -> np.ndarray:
    """Argmax over the class axis of a (C, H, W) or (N, C, H, W) probability map."""
    pred = np.asarray(pred)
    axis = 0 if pred.ndim == 3 else 1
    return np.argmax(pred, axis=axis).astype(np.int64)


def _check_pair(pred_hard: np.ndarray, label: np.ndarray) -> None:
    if pred_hard.shape != label.shape or pred_hard.ndim != 2:
        raise ShapeMismatchError(
            f"expected matching (H, W) maps, got {pred_hard.shape} vs {label.shape}"
        )


def confusion_matrix(pred_hard: np.ndarray, label: np.ndarray, num_classes: int) -> np.ndarray:
    """(c, c) matrix with rows = ground truth, columns = prediction."""
    _check_pair(pred_hard, label)
    valid = label != IGNORE_INDEX
    if ((label[valid] < 0) | (label[valid] >= num_classes)).any():
        raise ShapeMismatchError("label contains out-of-range class indices")
    if ((pred_hard < 0) | (pred_hard >= num_classes)).any():
        raise ShapeMismatchError("prediction contains out-of-range class indices")
    idx = num_classes * label[valid].astype(np.int64) + pred_hard[valid].astype(np.int64)
    return np.bincount(idx, minlength=num_classes**2).reshape(num_classes, num_classes)


def iou_from_confusion(conf: np.ndarray) -> tuple[np.ndarray, float]:
    """Per-class IoU (nan for classes absent from both maps) and their mean."""
    tp = np.diag(conf).astype(np.float64)
    fp = conf.sum(axis=0) - tp
    fn = conf.sum(axis=1) - tp
    denom = tp + fp + fn
    with np.errstate(invalid="ignore"):
        iou = np.where(denom > 0, tp / denom, np.nan)
    if np.isnan(iou).all():
        raise DegenerateInputError("no class present in either map")
    return iou, float(np.nanmean(iou))


def confusion_and_iou(pred_hard: np.ndarray, label: np.ndarray, num_classes: int):
    """Per-class IoU and mean for one (prediction, ground truth) pair."""
    return iou_from_confusion(confusion_matrix(pred_hard, label, num_classes))


def extract_contours(label_map: np.ndarray, num_classes: int) -> dict[int, np.ndarray]:
    """Per-class boundary pixels: same-class pixels with a different 4-neighbor.

    Returns {class: (K, 2) array of (row, col)}; classes with no contour map
    to an empty array. Ignored pixels belong to no class but do count as a
    differing neighbor.
    """
    m = np.asarray(label_map)
    if m.ndim != 2:
        raise ShapeMismatchError(f"label map must be 2-D, got shape {m.shape}")
    boundary = np.zeros(m.shape, dtype=bool)
    boundary[1:, :] |= m[1:, :] != m[:-1, :]
    boundary[:-1, :] |= m[:-1, :] != m[1:, :]
    boundary[:, 1:] |= m[:, 1:] != m[:, :-1]
    boundary[:, :-1] |= m[:, :-1] != m[:, 1:]
    out: dict[int, np.ndarray] = {}
    for k in range(num_classes):
        rows, cols = np.nonzero(boundary & (m == k))
        out[k] = np.stack([rows, cols], axis=1) if rows.size else np.empty((0, 2), dtype=np.int64)
    return out


def modified_hausdorff(points_x: np.ndarray, points_y: np.ndarray) -> float:
    """0.5 * (mean nearest distance X->Y + mean nearest distance Y->X).

    Symmetric average of mean contour distances, robust to outliers.
    """
    x = np.asarray(points_x, dtype=np.float64).reshape(-1, 2)
    y = np.asarray(points_y, dtype=np.float64).reshape(-1, 2)
    if x.shape[0] == 0 or y.shape[0] == 0:
        raise DegenerateInputError("modified Hausdorff is undefined for empty point sets")
    d_xy = cKDTree(y).query(x)[0]
    d_yx = cKDTree(x).query(y)[0]
    return 0.5 * (float(d_xy.mean()) + float(d_yx.mean()))


def image_hausdorff(pred_hard: np.ndarray, label: np.ndarray, num_classes: int):
    """Per-class modified Hausdorff and the mean over shared-contour classes.

    Classes whose contour is empty in either map are skipped (nan); if no
    class qualifies a structured error is raised.
    """
    _check_pair(pred_hard, label)
    pred_contours = extract_contours(pred_hard, num_classes)
    label_contours = extract_contours(label, num_classes)
    per_class = np.full(num_classes, np.nan)
    for k in range(num_classes):
        if pred_contours[k].shape[0] and label_contours[k].shape[0]:
            per_class[k] = modified_hausdorff(pred_contours[k], label_contours[k])
    if np.isnan(per_class).all():
        raise DegenerateInputError("no class has contours in both prediction and ground truth")
    return per_class, float(np.nanmean(per_class))


def bf_score(pred_hard: np.ndarray, label: np.ndarray, num_classes: int, tau: float | None = None):
    """Boundary F1 per class and mean over classes present in both maps.

    precision = fraction of prediction-contour points within tau of any
    ground-truth contour point; recall symmetric; BF = 2PR/(P+R) (0 when
    P + R = 0). A class with both contours empty scores 1, with exactly one
    empty scores 0. Default tau is 0.75% of the image diagonal.
    """
    _check_pair(pred_hard, label)
    if tau is None:
        tau = BF_TAU_DIAGONAL_FRACTION * float(np.hypot(*pred_hard.shape))
    if tau < 0:
        raise DegenerateInputError(f"toleration distance must be >= 0, got {tau}")
    pred_contours = extract_contours(pred_hard, num_classes)
    label_contours = extract_contours(label, num_classes)
    per_class = np.full(num_classes, np.nan)
    for k in range(num_classes):
        in_pred = (pred_hard == k).any()
        in_label = (label == k).any()
        if not (in_pred and in_label):
            continue
        cp, cl = pred_contours[k], label_contours[k]
        if cp.shape[0] == 0 and cl.shape[0] == 0:
            per_class[k] = 1.0
            continue
        if cp.shape[0] == 0 or cl.shape[0] == 0:
            per_class[k] = 0.0
            continue
        precision = float(np.mean(cKDTree(cl.astype(np.float64)).query(cp.astype(np.float64))[0] <= tau))
        recall = float(np.mean(cKDTree(cp.astype(np.float64)).query(cl.astype(np.float64))[0] <= tau))
        per_class[k] = 0.0 if precision + recall == 0 else 2 * precision * recall / (precision + recall)
    if np.isnan(per_class).all():
        raise DegenerateInputError("no class present in both prediction and ground truth")
    return per_class, float(np.nanmean(per_class))


def mean_max_confidence(pred) -> tuple[float, float]:
    """Mean and std over all pixels of the maximum class probability."""
    pred = np.asarray(pred, dtype=np.float64)
    if pred.ndim == 3:
        pred = pred[None]
    if pred.ndim != 4 or pred.size == 0:
        raise DegenerateInputError(f"expected non-empty (N, C, H, W) predictions, got shape {pred.shape}")
    peaks = pred.max(axis=1)
    return float(peaks.mean()), float(peaks.std())


@dataclass
class MetricReport:
    """Per-class and mean structural/pixel metrics for one evaluation."""

    num_classes: int
    class_iou: list[float]
    class_bf: list[float]
    class_hausdorff: list[float]
    mean_iou: float
    mean_bf: float
    mean_hausdorff: float
    confidence_mean: float | None = None
    confidence_std: float | None = None
    extra: dict = field(default_factory=dict)

    def to_json(self) -> str:
        payload = {
            "num_classes": self.num_classes,
            "class_iou": _jsonable(self.class_iou),
            "class_bf": _jsonable(self.class_bf),
            "class_hausdorff": _jsonable(self.class_hausdorff),
            "mean_iou": _jsonable(self.mean_iou),
            "mean_bf": _jsonable(self.mean_bf),
            "mean_hausdorff": _jsonable(self.mean_hausdorff),
            "confidence_mean": _jsonable(self.confidence_mean),
            "confidence_std": _jsonable(self.confidence_std),
        }
        payload.update(self.extra)
        return json.dumps(payload, indent=2)

    def write(self, path_base) -> None:
        """Write <base>.json and <base>.csv (one row per class plus a mean row)."""
        with open(f"{path_base}.json", "w") as fh:
            fh.write(self.to_json())
        with open(f"{path_base}.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["class", "iou", "bf_score", "hausdorff", "confidence_mean", "confidence_std"])
            for k in range(self.num_classes):
                writer.writerow([k, _cell(self.class_iou[k]), _cell(self.class_bf[k]),
                                 _cell(self.class_hausdorff[k]), "", ""])
            writer.writerow(["mean", _cell(self.mean_iou), _cell(self.mean_bf),
                             _cell(self.mean_hausdorff), _cell(self.confidence_mean),
                             _cell(self.confidence_std)])

    @staticmethod
    def from_json(text: str) -> "MetricReport":
        data = json.loads(text)
        known = {"num_classes", "class_iou", "class_bf", "class_hausdorff",
                 "mean_iou", "mean_bf", "mean_hausdorff", "confidence_mean", "confidence_std"}
        return MetricReport(
            num_classes=data["num_classes"],
            class_iou=[_unjson(v) for v in data["class_iou"]],
            class_bf=[_unjson(v) for v in data["class_bf"]],
            class_hausdorff=[_unjson(v) for v in data["class_hausdorff"]],
            mean_iou=_unjson(data["mean_iou"]),
            mean_bf=_unjson(data["mean_bf"]),
            mean_hausdorff=_unjson(data["mean_hausdorff"]),
            confidence_mean=_unjson(data.get("confidence_mean")),
            confidence_std=_unjson(data.get("confidence_std")),
            extra={k: v for k, v in data.items() if k not in known},
        )


def _jsonable(value):
    if isinstance(value, list):
        return [_jsonable(v) for v in value]
    if value is None:
        return None
    value = float(value)
    return None if np.isnan(value) else value


def _unjson(value):
    if isinstance(value, list):
        return [_unjson(v) for v in value]
    return np.nan if value is None else value


def _cell(value):
    if value is None or (isinstance(value, float) and np.isnan(value)):
        return ""
    return f"{value:.6f}"


def evaluate_segmentation(
    preds_hard,
    labels,
    num_classes: int,
    tau: float | None = None,
    preds_soft=None,
) -> MetricReport:
    """Aggregate metrics over a split.

    IoU is computed from the confusion matrix pooled over all images;
    BF-score and modified Hausdorff are computed per image and averaged over
    the images where each class is scored.
    """
    preds_hard = [np.asarray(p) for p in preds_hard]
    labels = [np.asarray(l) for l in labels]
    if len(preds_hard) != len(labels) or not preds_hard:
        raise ShapeMismatchError("need equally many (>= 1) predictions and labels")
    conf = np.zeros((num_classes, num_classes), dtype=np.int64)
    bf_rows, hd_rows = [], []
    for pred, label in zip(preds_hard, labels):
        conf += confusion_matrix(pred, label, num_classes)
        try:
            bf_rows.append(bf_score(pred, label, num_classes, tau)[0])
        except DegenerateInputError:
            bf_rows.append(np.full(num_classes, np.nan))
        try:
            hd_rows.append(image_hausdorff(pred, label, num_classes)[0])
        except DegenerateInputError:
            hd_rows.append(np.full(num_classes, np.nan))
    class_iou, mean_iou = iou_from_confusion(conf)
    with warnings.catch_warnings():
        # classes never scored in any image reduce to nan, silently
        warnings.simplefilter("ignore", category=RuntimeWarning)
        class_bf = np.nanmean(np.stack(bf_rows), axis=0)
        class_hd = np.nanmean(np.stack(hd_rows), axis=0)
        mean_bf = float(np.nanmean(class_bf))
        mean_hd = float(np.nanmean(class_hd))
    conf_mean = conf_std = None
    if preds_soft is not None:
        conf_mean, conf_std = mean_max_confidence(np.stack([np.asarray(p) for p in preds_soft]))
    return MetricReport(
        num_classes=num_classes,
        class_iou=list(class_iou),
        class_bf=list(class_bf),
        class_hausdorff=list(class_hd),
        mean_iou=mean_iou,
        mean_bf=mean_bf,
        mean_hausdorff=mean_hd,
        confidence_mean=conf_mean,
        confidence_std=conf_std,
    )


def read_label_png(path) -> np.ndarray:
    """Read an 8-bit single-channel PNG as an int64 label map."""
    with Image.open(path) as img:
        if img.mode != "L":
            raise DegenerateInputError(f"{path}: expected 8-bit single-channel PNG, got mode {img.mode}")
        return np.asarray(img, dtype=np.int64)


def write_label_png(label: np.ndarray, path) -> None:
    label = np.asarray(label)
    if label.ndim != 2 or label.min() < 0 or label.max() > 255:
        raise DegenerateInputError("label map must be 2-D with values in [0, 255]")
    Image.fromarray(label.astype(np.uint8), mode="L").save(path)
