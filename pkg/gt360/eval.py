"""
Evaluation metrics and the evaluation report.

Report schema (``schema_version`` 1)::

    {
        "schema_version": 1,
        "overall": {"auc": float|null, "l2": float|null, "ap": float|null,
                    "precision": float|null, "recall": float|null, "f1": float|null},
        "per_source": {"<source>": {same keys as overall}},
        "counts": {"records": int, "ift": int, "missing_heatmaps": int, "no_p_ift": int, ...}
    }

A metric is null when the records carry nothing it can be computed from.
"""

import json
import logging
import math
import os
import warnings
from collections.abc import Iterable, Sequence
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import numpy as np
from sklearn.exceptions import UndefinedMetricWarning
from sklearn.metrics import average_precision_score, precision_recall_fscore_support, roc_auc_score

from .codec import read_heatmap
from .constants import GT_SIGMA_CELLS
from .core import GazeClass, GazeVerdict, HeadBox, HeatmapGrid, Point, extract_point
from .data import AnnotatedSample, SampleLabel, gaussian_grid, read_manifest_lines, target_cell
from .exceptions import InvalidInput, ManifestError

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
MIN_IOU = 0.5
METRIC_KEYS = ("auc", "l2", "ap", "precision", "recall", "f1")
# AP scores in/out of frame only; eye-contact truths are neither
IN_OUT_LABELS = frozenset({SampleLabel.IFT, SampleLabel.OFT})


@dataclass(frozen=True)
class EvalRecord:
    pred: GazeVerdict
    truth: AnnotatedSample


def point_distance(a: Point, b: Point) -> float:
    return math.hypot(a[0] - b[0], a[1] - b[1])


def positive_cells(target: Point, size: int, mode: str = "disk") -> np.ndarray:
    """Boolean grid of the cells counted as the target"""
    if mode == "cell":
        cells = np.zeros((size, size), dtype=bool)
        cells[target_cell(target, size)] = True
        return cells
    if mode == "disk":
        return gaussian_grid(target, size, GT_SIGMA_CELLS) > 0.5
    raise InvalidInput(f"Unknown AUC mode '{mode}'")


def heatmap_auc(pred: HeatmapGrid | np.ndarray, target: Point, mode: str = "disk") -> float:
    """ROC-AUC of the cell scores against the target cells; tied scores count half"""
    values = pred.values if isinstance(pred, HeatmapGrid) else np.asarray(pred, dtype=np.float64)
    if values.ndim != 2 or values.shape[0] != values.shape[1]:
        raise InvalidInput(f"heatmap must be a square grid, got shape {values.shape}")
    labels = positive_cells(target, values.shape[0], mode)
    return float(roc_auc_score(labels.ravel(), values.ravel()))


def mean_l2(records: Sequence[EvalRecord], point_mode: str = "argmax") -> float:
    if not records:
        raise InvalidInput("mean L2 of no records")
    distances = []
    for record in records:
        if record.pred.heatmap is None or record.truth.target is None:
            raise InvalidInput("mean L2 needs IFT records with a heatmap and a target")
        point = extract_point(record.pred.heatmap, point_mode)
        distances.append(point_distance(point, record.truth.target))
    return float(np.mean(distances))


def average_precision(scores: Sequence[tuple[float, bool]]) -> float:
    """Area under the step-wise precision-recall curve over descending score thresholds"""
    labels = [bool(label) for _score, label in scores]
    if len(set(labels)) != 2:
        raise InvalidInput("average precision needs at least one positive and one negative")
    return float(average_precision_score(labels, [float(score) for score, _label in scores]))


def ec_prf(preds: Sequence[bool], truths: Sequence[bool]) -> tuple[float, float, float]:
    """Precision, recall and F1 with EC as the positive class; undefined ratios are 0"""
    if len(preds) != len(truths):
        raise InvalidInput(f"{len(preds)} predictions for {len(truths)} labels")
    if not any(truths):
        raise InvalidInput("EC precision/recall needs at least one EC label")
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", UndefinedMetricWarning)
        precision, recall, f1, _support = precision_recall_fscore_support(
            [int(t) for t in truths],
            [int(p) for p in preds],
            average="binary",
            pos_label=1,
            zero_division="warn",
        )
    for warning in caught:
        log.warning(f"EC metrics: {warning.message}")
    return float(precision), float(recall), float(f1)


def _metrics(records: Sequence[EvalRecord], auc_mode: str, point_mode: str) -> dict[str, Any]:
    metrics: dict[str, Any] = dict.fromkeys(METRIC_KEYS)
    located = [r for r in records if r.truth.is_ift and r.pred.heatmap is not None]
    if located:
        metrics["auc"] = float(
            np.mean([heatmap_auc(r.pred.heatmap, r.truth.target, auc_mode) for r in located])
        )
        metrics["l2"] = mean_l2(located, point_mode)

    scored = [
        (r.pred.p_ift, r.truth.is_ift)
        for r in records
        if r.pred.p_ift is not None and r.truth.label in IN_OUT_LABELS
    ]
    if len({label for _p, label in scored}) == 2:
        metrics["ap"] = average_precision(scored)

    labelled = [r for r in records if r.truth.label is not SampleLabel.UNKNOWN]
    truths = [r.truth.label is SampleLabel.EC for r in labelled]
    if any(truths):
        preds = [r.pred.cls is GazeClass.EC for r in labelled]
        metrics["precision"], metrics["recall"], metrics["f1"] = ec_prf(preds, truths)
    return metrics


def evaluate_suite(
    records: Sequence[EvalRecord], auc_mode: str = "disk", point_mode: str = "argmax"
) -> dict[str, Any]:
    if not records:
        raise InvalidInput("nothing to evaluate")
    ift = [r for r in records if r.truth.is_ift]
    missing = sum(1 for r in ift if r.pred.heatmap is None)
    if missing:
        log.warning(f"{missing} in-frame targets have no predicted heatmap")
    per_source = {
        source: _metrics([r for r in records if r.truth.source == source], auc_mode, point_mode)
        for source in sorted({r.truth.source for r in records})
    }
    return {
        "schema_version": SCHEMA_VERSION,
        "overall": _metrics(records, auc_mode, point_mode),
        "per_source": per_source,
        "counts": {
            "records": len(records),
            "ift": len(ift),
            "missing_heatmaps": missing,
            "no_p_ift": sum(1 for r in records if r.pred.p_ift is None),
        },
    }


def verdict_from_dict(data: dict[str, Any], base: Path | None = None) -> GazeVerdict:
    cls = GazeClass(data["class"])
    head = HeadBox.from_list(data["box"], data.get("confidence", 1.0))
    heatmap = target = None
    if cls is GazeClass.IFT:
        path = data.get("heatmap_path")
        if not path:
            raise InvalidInput("IFT prediction without heatmap_path")
        path = Path(path)
        if base is not None and not path.is_absolute():
            path = base / path
        heatmap = HeatmapGrid(read_heatmap(path))
        target = tuple(data["target"])
    return GazeVerdict(head, cls, float(data["p_ec"]), data.get("p_ift"), heatmap, target)


def image_key(image: str | os.PathLike) -> str:
    """Resolved path of an image, or its bare name when it was recorded without a directory"""
    path = Path(image).expanduser()
    if len(path.parts) == 1:
        return path.name
    return str(path.resolve())


def load_predictions(path: str | os.PathLike) -> list[tuple[str, GazeVerdict]]:
    """(image path as written, verdict) per prediction line; failed heads are skipped"""
    path = Path(path)
    if not path.exists():
        raise ManifestError(f"Predictions not found: {path}")
    predictions = []
    for lineno, record in read_manifest_lines(path):
        if "error" in record:
            continue
        try:
            verdict = verdict_from_dict(record, base=path.parent)
            predictions.append((str(record["image"]), verdict))
        except (InvalidInput, KeyError, TypeError, ValueError) as e:
            raise ManifestError(f"{path}: invalid prediction: {e}", lineno) from e
    return predictions


def pair_records(
    preds: Iterable[tuple[str, GazeVerdict]],
    truths: Sequence[AnnotatedSample],
    min_iou: float = MIN_IOU,
) -> tuple[list[EvalRecord], dict[str, int]]:
    """
    Match every truth with the unused prediction on the same image whose head box overlaps it
    most (IoU >= ``min_iou``).

    Images are compared by resolved path. A prediction recorded with a bare file name matches
    a truth by name, but only while no two truth images share that name.
    """
    by_image: dict[str, list[GazeVerdict]] = {}
    for image, verdict in preds:
        by_image.setdefault(image_key(image), []).append(verdict)
    truth_paths: dict[str, set[str]] = {}
    for truth in truths:
        truth_paths.setdefault(Path(truth.image_ref).name, set()).add(
            str(Path(truth.image_ref).expanduser().resolve())
        )
    ambiguous = sorted(n for n, paths in truth_paths.items() if len(paths) > 1 and n in by_image)
    if ambiguous:
        log.warning(f"Predictions named only {ambiguous} match several truth images; ignored")

    used: set[int] = set()
    records = []
    unmatched = 0
    for truth in truths:
        name = Path(truth.image_ref).name
        candidates = list(by_image.get(str(Path(truth.image_ref).expanduser().resolve()), []))
        if len(truth_paths[name]) == 1:
            candidates += by_image.get(name, [])
        best, best_iou = None, min_iou
        for verdict in candidates:
            iou = verdict.head.iou(truth.head)
            if id(verdict) not in used and iou >= best_iou:
                best, best_iou = verdict, iou
        if best is None:
            unmatched += 1
            continue
        used.add(id(best))
        records.append(EvalRecord(best, truth))
    total = sum(len(v) for v in by_image.values())
    counts = {
        "matched": len(records),
        "unmatched_truths": unmatched,
        "unmatched_predictions": total - len(records),
    }
    if unmatched:
        log.warning(f"{unmatched} ground-truth heads have no matching prediction")
    return records, counts


def write_report(report: dict[str, Any], path: str | os.PathLike) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
