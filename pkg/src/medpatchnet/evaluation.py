"""End-to-end evaluation: classification, localization and bootstrap CIs.

Classification thresholds and saliency segmentation thresholds are both
chosen on the validation split; every test metric is then computed once
on the full test split and again on case-level bootstrap resamples.  All
metrics share the same resampled image indices.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from .backbone import Backbone
from .data import Sample
from .metrics import (
    LocalizationCase,
    MetricError,
    class_metrics,
    optimal_threshold,
    percentile_interval,
    resample_indices,
    saliency_threshold_search,
)
from .patches import PatchGridSpec, mean_patch_logits, predict_batch
from .saliency import ShiftSpec, gradcam_all_classes, most_salient_point, shifted_maps_batch, threshold_to_mask
from .tensor import sigmoid_np

METHODS = ("patch_raw", "patch_scaled", "gradcam")
METRICS = ("auroc", "sensitivity", "specificity", "accuracy", "hit_rate", "miou_all", "miou_tp")
HEADERS = {
    "auroc": "AUROC",
    "sensitivity": "Sensitivity",
    "specificity": "Specificity",
    "accuracy": "Accuracy",
    "hit_rate": "Hit rate",
    "miou_all": "mIoU (all)",
    "miou_tp": "mIoU (TP)",
}


# --------------------------------------------------------------- model outputs
def image_probabilities(images: np.ndarray, model: Backbone, spec: PatchGridSpec) -> np.ndarray:
    """ŷ ``[N, C]`` from the exactly rounded patch mean."""
    z = predict_batch(images, model, spec)
    C = z.shape[-1]
    return sigmoid_np(np.stack([mean_patch_logits(zi.reshape(-1, C)) for zi in z]))


def saliency_maps(images: np.ndarray, model: Backbone, spec: PatchGridSpec, method: str, shift: ShiftSpec, chunk: int = 16) -> np.ndarray:
    """Maps ``[N, C, S, S]`` for every image and class."""
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; choose from {', '.join(METHODS)}")
    images = np.asarray(images, dtype=np.float64)
    if method == "gradcam":
        if spec.patches_per_side != 1:
            raise ValueError("gradcam needs the full-image (P=1) model")
        return np.stack([gradcam_all_classes(img, model) for img in images])
    out = []
    for i in range(0, len(images), chunk):
        raw, scaled = shifted_maps_batch(images[i : i + chunk], model, spec, shift)
        out.append(scaled if method == "patch_scaled" else raw)
    return np.concatenate(out)


# ------------------------------------------------------------ per-case data
def _case_arrays(samples: Sequence[Sample], maps: np.ndarray, predicted: np.ndarray, thresholds: np.ndarray):
    """Per-image hit, IoU and TP indicators ``[N, C]``; NaN where a case does not count."""
    N, C = predicted.shape
    hits = np.full((N, C), np.nan)
    area = np.full((N, C), np.nan)
    ious = np.full((N, C), np.nan)
    tp = np.zeros((N, C), dtype=bool)
    for i, s in enumerate(samples):
        for c in range(C):
            gt = s.gt_mask(c)
            if gt is None:
                continue
            if gt.any():
                r, q = most_salient_point(maps[i, c])
                hits[i, c] = float(gt[r, q])
                area[i, c] = float(gt.mean())
            pred = threshold_to_mask(maps[i, c], thresholds[c]) if predicted[i, c] else None
            case = LocalizationCase(s.id, c, gt, bool(predicted[i, c]), pred)
            if case.category != "TN":
                ious[i, c] = case.case_iou()
                tp[i, c] = case.category == "TP"
    return hits, area, ious, tp


def _localization_cases(samples: Sequence[Sample], maps: np.ndarray, predicted: np.ndarray, c: int) -> List[LocalizationCase]:
    cases = []
    for i, s in enumerate(samples):
        gt = s.gt_mask(c)
        if gt is not None:
            cases.append(LocalizationCase(s.id, c, gt, bool(predicted[i, c]), saliency=maps[i, c]))
    return cases


def _nanmean(a: np.ndarray) -> Optional[float]:
    return float(np.nanmean(a)) if np.isfinite(a).any() else None


def _point_metrics(scores, labels, thresholds, hits, ious, tp) -> Dict[str, List[Optional[float]]]:
    """Every metric per class on one (possibly resampled) set of images."""
    C = labels.shape[1]
    out: Dict[str, List[Optional[float]]] = {m: [] for m in METRICS}
    for c in range(C):
        y = labels[:, c]
        try:
            cm = class_metrics(scores[:, c], y, thresholds[c])
            vals = [cm.auroc, cm.sensitivity, cm.specificity, cm.accuracy]
        except (MetricError, ZeroDivisionError):
            pred = scores[:, c] > thresholds[c]
            acc = float((pred == y.astype(bool)).mean())
            pos, neg = y == 1, y == 0
            vals = [None, float(pred[pos].mean()) if pos.any() else None, float((~pred[neg]).mean()) if neg.any() else None, acc]
        for m, v in zip(METRICS[:4], vals):
            out[m].append(v)
        out["hit_rate"].append(_nanmean(hits[:, c]))
        out["miou_all"].append(_nanmean(ious[:, c]))
        tp_ious = np.where(tp[:, c], ious[:, c], np.nan)
        out["miou_tp"].append(_nanmean(tp_ious))
    return out


def _mean(vals: Sequence[Optional[float]]) -> Optional[float]:
    defined = [v for v in vals if v is not None]
    return float(np.mean(defined)) if defined else None


# ----------------------------------------------------------------- the report
@dataclass
class EvalReport:
    method: str
    class_names: List[str]
    classes: List[Dict]
    mean: Dict
    config: Dict = field(default_factory=dict)

    def to_dict(self) -> Dict:
        return {"method": self.method, "config": self.config, "classes": self.classes, "mean": self.mean}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def format_table(self, metrics: Sequence[str] = METRICS) -> str:
        """Aligned text table, one row per class plus a Mean row; CIs in brackets."""

        def cell(entry):
            if entry is None or entry.get("point") is None:
                return "n/a"
            s = f"{entry['point']:.3f}"
            if "ci_lo" in entry:
                s += f" [{entry['ci_lo']:.3f}, {entry['ci_hi']:.3f}]"
            return s

        rows = [["Class"] + [HEADERS[m] for m in metrics]]
        for cls in self.classes:
            rows.append([cls["name"]] + [cell(cls[m]) for m in metrics])
        rows.append(["Mean"] + [cell(self.mean[m]) for m in metrics])
        widths = [max(len(r[k]) for r in rows) for k in range(len(rows[0]))]
        lines = ["  ".join(v.ljust(w) if k == 0 else v.rjust(w) for k, (v, w) in enumerate(zip(r, widths))).rstrip() for r in rows]
        lines.insert(1, "-" * len(lines[0]))
        lines.insert(len(lines) - 1, "-" * len(lines[0]))
        title = f"method: {self.method}"
        return title + "\n" + "\n".join(lines) + "\n"


def _finite_or_label(t: float):
    """JSON has no infinities; the two sentinel thresholds are written as strings."""
    if math.isfinite(t):
        return t
    return "+inf" if t > 0 else "-inf"


def _entry(point: Optional[float], dist: Optional[np.ndarray], level: float) -> Dict:
    entry: Dict = {"point": point}
    if dist is not None and point is not None and np.isfinite(dist).any():
        lo, hi = percentile_interval(dist, level)
        # percentile intervals of skewed statistics can miss the full-sample value
        entry["ci_lo"], entry["ci_hi"] = min(lo, point), max(hi, point)
    return entry


def evaluate(
    model: Backbone,
    spec: PatchGridSpec,
    valid: Sequence[Sample],
    test: Sequence[Sample],
    class_names: Sequence[str],
    method: str = "patch_raw",
    shift: Optional[ShiftSpec] = None,
    n_bootstrap: int = 1000,
    seed: int = 0,
    level: float = 0.95,
) -> EvalReport:
    shift = shift or ShiftSpec(spec.patch_side)
    C = model.config.num_classes
    if len(class_names) != C:
        raise ValueError(f"{len(class_names)} class names for a {C}-class model")
    if not valid or not test:
        raise ValueError("evaluation needs nonempty validation and test splits")

    def arrays(samples):
        images = np.stack([s.image for s in samples])
        labels = np.stack([s.labels for s in samples]).astype(np.float64)
        return images, labels, image_probabilities(images, model, spec)

    v_img, v_lab, v_prob = arrays(valid)
    t_img, t_lab, t_prob = arrays(test)
    thresholds = np.array([optimal_threshold(v_prob[:, c], v_lab[:, c]) for c in range(C)])

    v_maps = saliency_maps(v_img, model, spec, method, shift)
    v_pred = v_prob > thresholds
    seg_thresholds = []
    for c in range(C):
        try:
            seg_thresholds.append(saliency_threshold_search(_localization_cases(valid, v_maps, v_pred, c)))
        except MetricError:
            seg_thresholds.append(0.5)
    seg_thresholds = np.array(seg_thresholds)

    t_maps = saliency_maps(t_img, model, spec, method, shift)
    t_pred = t_prob > thresholds
    hits, area, ious, tp = _case_arrays(test, t_maps, t_pred, seg_thresholds)

    point = _point_metrics(t_prob, t_lab, thresholds, hits, ious, tp)
    point_mean = {m: _mean(point[m]) for m in METRICS}

    dists = None
    if n_bootstrap > 0:
        dists = {m: np.full((n_bootstrap, C), np.nan) for m in METRICS}
        mean_dists = {m: np.full(n_bootstrap, np.nan) for m in METRICS}
        for k, idx in enumerate(resample_indices(len(test), n_bootstrap, seed)):
            res = _point_metrics(t_prob[idx], t_lab[idx], thresholds, hits[idx], ious[idx], tp[idx])
            for m in METRICS:
                dists[m][k] = [np.nan if v is None else v for v in res[m]]
                mv = _mean(res[m])
                mean_dists[m][k] = np.nan if mv is None else mv

    classes = []
    for c, name in enumerate(class_names):
        row: Dict = {"name": name}
        for m in METRICS:
            row[m] = _entry(point[m][c], None if dists is None else dists[m][:, c], level)
        row["classification_threshold"] = _finite_or_label(float(thresholds[c]))
        row["saliency_threshold"] = float(seg_thresholds[c])
        base = _nanmean(area[:, c])
        row["hit_rate_baseline"] = base
        row["n_hit_cases"] = int(np.isfinite(hits[:, c]).sum())
        row["n_tp_cases"] = int(tp[:, c].sum())
        row["n_fp_fn_cases"] = int(np.isfinite(ious[:, c]).sum()) - row["n_tp_cases"]
        classes.append(row)
    mean = {m: _entry(point_mean[m], None if dists is None else mean_dists[m], level) for m in METRICS}
    config = {
        "method": method,
        "patch_grid": spec.to_dict(),
        "shift_offset": shift.offset,
        "bootstrap": {"n": n_bootstrap, "seed": seed, "level": level},
        "n_valid": len(valid),
        "n_test": len(test),
    }
    return EvalReport(method, list(class_names), classes, mean, config)


# ------------------------------------------------------------------- schema
_METRIC_ENTRY = {
    "type": "object",
    "required": ["point"],
    "properties": {
        "point": {"type": ["number", "null"]},
        "ci_lo": {"type": "number"},
        "ci_hi": {"type": "number"},
    },
    "dependentRequired": {"ci_lo": ["ci_hi"], "ci_hi": ["ci_lo"]},
    "additionalProperties": False,
}

REPORT_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "Evaluation report",
    "type": "object",
    "required": ["method", "config", "classes", "mean"],
    "properties": {
        "method": {"enum": list(METHODS)},
        "config": {"type": "object"},
        "classes": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "object",
                "required": ["name", *METRICS, "classification_threshold", "saliency_threshold"],
                "properties": {
                    "name": {"type": "string"},
                    **{m: _METRIC_ENTRY for m in METRICS},
                    "classification_threshold": {"anyOf": [{"type": "number"}, {"enum": ["+inf", "-inf"]}]},
                    "saliency_threshold": {"type": "number", "minimum": 0, "maximum": 1},
                    "hit_rate_baseline": {"type": ["number", "null"]},
                    "n_hit_cases": {"type": "integer", "minimum": 0},
                    "n_tp_cases": {"type": "integer", "minimum": 0},
                    "n_fp_fn_cases": {"type": "integer", "minimum": 0},
                },
            },
        },
        "mean": {"type": "object", "required": list(METRICS), "properties": {m: _METRIC_ENTRY for m in METRICS}},
    },
}


def ci_violations(report: Dict) -> List[str]:
    """Entries whose interval is inverted or misses its point estimate."""
    bad = []
    rows = [(c["name"], c) for c in report["classes"]] + [("Mean", report["mean"])]
    for name, row in rows:
        for m in METRICS:
            e = row[m]
            if "ci_lo" in e and not (e["ci_lo"] <= e["point"] <= e["ci_hi"]):
                bad.append(f"{name}.{m}")
    return bad
