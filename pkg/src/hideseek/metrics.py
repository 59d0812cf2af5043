"""Instance-level and global segmentation metrics.

Predicted instances are matched many-to-one: each prediction goes to the
reference it has the highest positive Dice with, so several fragments of one
lesion all count toward it instead of being false positives.

Undefined values (for example instance Dice with no detected lesion) are
``None`` and are left out of means.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree
from scipy.stats import rankdata

from . import imaging

METRICS = ("detection_precision", "detection_recall", "detection_f1", "instance_dice",
           "panoptic_dice", "assd", "global_dice", "rvd")
PHENOTYPES = ("blastic", "lytic", "mixed")


@dataclass
class InstanceMatching:
    pairs: dict[int, list[int]]  # reference id -> matched prediction ids (nonempty)
    unmatched_refs: list[int]
    unmatched_preds: list[int]

    @property
    def tp(self) -> int:
        return len(self.pairs)

    @property
    def fn(self) -> int:
        return len(self.unmatched_refs)

    @property
    def fp(self) -> int:
        return len(self.unmatched_preds)


def _ids(lab: np.ndarray) -> np.ndarray:
    ids = np.unique(lab)
    return ids[ids != 0]


def dice(a, b) -> float:
    a, b = imaging.as_mask(a), imaging.as_mask(b)
    total = a.sum() + b.sum()
    if total == 0:
        return 1.0
    return float(2.0 * (a & b).sum() / total)


def match_instances(pred, ref) -> InstanceMatching:
    """Assign each prediction to its best-Dice reference (Dice > 0, ties to the lowest id)."""
    pred, ref = np.asarray(pred), np.asarray(ref)
    imaging.check_same_shape(pred, ref, names=("pred", "ref"))
    p_ids, r_ids = _ids(pred), _ids(ref)
    pairs: dict[int, list[int]] = {}
    unmatched_preds = []
    if r_ids.size:
        p_size = np.bincount(pred.ravel())
        r_size = np.bincount(ref.ravel())
        both = (pred > 0) & (ref > 0)
        inter = np.zeros((int(pred.max()) + 1, int(ref.max()) + 1), dtype=np.int64)
        np.add.at(inter, (pred[both], ref[both]), 1)
    for p in p_ids.tolist():
        if not r_ids.size or inter[p].sum() == 0:
            unmatched_preds.append(p)
            continue
        d = 2.0 * inter[p, r_ids] / (p_size[p] + r_size[r_ids])
        best = int(r_ids[int(np.argmax(d))])  # argmax takes the first (lowest id) on ties
        pairs.setdefault(best, []).append(p)
    pairs = {r: pairs[r] for r in sorted(pairs)}
    unmatched_refs = [r for r in r_ids.tolist() if r not in pairs]
    return InstanceMatching(pairs=pairs, unmatched_refs=unmatched_refs, unmatched_preds=unmatched_preds)


def detection_scores(m: InstanceMatching) -> tuple[float, float, float]:
    """Precision, recall and F1 over lesions; an empty-vs-empty comparison scores 1."""
    tp, fp, fn = m.tp, m.fp, m.fn
    if tp + fp + fn == 0:
        return 1.0, 1.0, 1.0
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return precision, recall, f1


def pair_dices(pred, ref, m: InstanceMatching) -> dict[int, float]:
    pred, ref = np.asarray(pred), np.asarray(ref)
    return {r: dice(np.isin(pred, ps), ref == r) for r, ps in m.pairs.items()}


def instance_dice(pred, ref, m: InstanceMatching) -> float | None:
    """Mean Dice of each detected reference against the union of its matches."""
    d = pair_dices(pred, ref, m)
    return float(np.mean(list(d.values()))) if d else None


def surface(mask) -> np.ndarray:
    """Set pixels with at least one unset 4-neighbour; off-grid counts as unset."""
    m = imaging.as_mask(mask)
    p = np.pad(m, 1, constant_values=False)
    inner = p[:-2, 1:-1] & p[2:, 1:-1] & p[1:-1, :-2] & p[1:-1, 2:]
    return m & ~inner


def assd(a, b) -> float:
    """Average symmetric surface distance in pixels (Euclidean, pixel centres)."""
    sa, sb = np.argwhere(surface(a)), np.argwhere(surface(b))
    if len(sa) == 0 or len(sb) == 0:
        raise ValueError("empty surface")
    d_ab = cKDTree(sb).query(sa)[0]
    d_ba = cKDTree(sa).query(sb)[0]
    return float((d_ab.mean() + d_ba.mean()) / 2.0)


def global_dice_and_rvd(pred, ref) -> tuple[float, float | None]:
    pred, ref = imaging.as_mask(pred), imaging.as_mask(ref)
    imaging.check_same_shape(pred, ref, names=("pred", "ref"))
    n_ref, n_pred = int(ref.sum()), int(pred.sum())
    if n_ref == 0:
        return (1.0, 0.0) if n_pred == 0 else (0.0, None)
    return dice(pred, ref), (n_pred - n_ref) / n_ref


def evaluate_instances(pred, ref) -> dict[str, float | None]:
    """All per-sample metrics for one prediction/reference labeling pair."""
    pred, ref = np.asarray(pred), np.asarray(ref)
    m = match_instances(pred, ref)
    precision, recall, f1 = detection_scores(m)
    sq = instance_dice(pred, ref, m)
    if sq is not None:
        pq = f1 * sq
    else:
        # nothing detected: panoptic Dice is 0 unless both sides were empty
        pq = None if m.tp + m.fp + m.fn == 0 else 0.0
    dists = [assd(np.isin(pred, ps), ref == r) for r, ps in m.pairs.items()]
    gd, rvd = global_dice_and_rvd(pred > 0, ref > 0)
    return {
        "detection_precision": precision,
        "detection_recall": recall,
        "detection_f1": f1,
        "instance_dice": sq,
        "panoptic_dice": pq,
        "assd": float(np.mean(dists)) if dists else None,
        "global_dice": gd,
        "rvd": rvd,
    }


def merge_labelings(*labs) -> np.ndarray:
    """Stack labelings into one, offsetting ids so instances stay distinct."""
    out = np.zeros(np.shape(labs[0]), dtype=np.int32)
    k = 0
    for lab in labs:
        lab = np.asarray(lab)
        out = np.where(lab > 0, lab + k, out)
        k += int(lab.max(initial=0))
    return imaging.relabel_sequential(out)


def phenotype_views(result, sample) -> tuple[np.ndarray, np.ndarray]:
    """Prediction/reference labelings compared for a sample's phenotype category."""
    if sample.phenotype == "blastic":
        return result.blastic, sample.gt_blastic
    if sample.phenotype == "lytic":
        return result.lytic, sample.gt_lytic
    return merge_labelings(result.lytic, result.blastic), merge_labelings(sample.gt_lytic, sample.gt_blastic)


def evaluate_sample(result, sample) -> dict[str, float | None]:
    pred, ref = phenotype_views(result, sample)
    return evaluate_instances(pred, ref)


@dataclass
class MetricsReport:
    """Per-phenotype mean/sd/n of every metric for one method."""
    method: str
    per_sample: dict[str, list[dict]] = field(default_factory=dict)

    def add(self, phenotype: str, metrics: dict) -> None:
        self.per_sample.setdefault(phenotype, []).append(metrics)

    def summary(self, phenotype: str, metric: str) -> tuple[float | None, float | None, int]:
        vals = [m[metric] for m in self.per_sample.get(phenotype, []) if m[metric] is not None]
        if not vals:
            return None, None, 0
        sd = float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0
        return float(np.mean(vals)), sd, len(vals)

    def mean(self, phenotype: str, metric: str) -> float | None:
        return self.summary(phenotype, metric)[0]

    def rows(self) -> list[dict]:
        out = []
        for ph in PHENOTYPES:
            if ph not in self.per_sample:
                continue
            for metric in METRICS:
                mean, sd, n = self.summary(ph, metric)
                out.append({"method": self.method, "phenotype": ph, "metric": metric,
                            "mean": mean, "sd": sd, "n": n})
        return out

    def to_json(self) -> dict:
        return {ph: {metric: dict(zip(("mean", "sd", "n"), self.summary(ph, metric)))
                     for metric in METRICS}
                for ph in PHENOTYPES if ph in self.per_sample}


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return f"{v:.6f}"
    return str(v)


def write_csv(rows: list[dict], path, columns=None) -> None:
    """CSV with a header row; floats fixed to 6 decimals, absent values empty."""
    columns = list(columns or (rows[0].keys() if rows else []))
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(r.get(c)) for c in columns])


def write_reports(reports: list[MetricsReport], csv_path, json_path) -> None:
    rows = [r for rep in reports for r in rep.rows()]
    write_csv(rows, csv_path, ("method", "phenotype", "metric", "mean", "sd", "n"))
    Path(json_path).write_text(json.dumps({rep.method: rep.to_json() for rep in reports},
                                          indent=1, sort_keys=True) + "\n")


def comparison_rows(reports: list[MetricsReport]) -> list[dict]:
    """Side-by-side layout: one row per (phenotype, metric), one column per method."""
    rows = []
    for ph in PHENOTYPES:
        for metric in METRICS:
            row = {"phenotype": ph, "metric": metric}
            present = False
            for rep in reports:
                if ph in rep.per_sample:
                    present = True
                mean, sd, _ = rep.summary(ph, metric)
                row[rep.method] = "" if mean is None else f"{mean:.3f} ± {sd:.3f}"
            if present:
                rows.append(row)
    return rows


# --- score-based curves ------------------------------------------------------

def _check_binary(scores, labels):
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.shape != y.shape or s.ndim != 1:
        raise ValueError("scores and labels must be 1D of equal length")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("labels must be 0/1")
    if y.min(initial=0) == y.max(initial=0) or len(np.unique(y)) < 2:
        raise ValueError("both classes must be present")
    return s, y.astype(bool)


def roc_auc(scores, labels) -> float:
    """Mann-Whitney AUC; tied positive/negative pairs count one half."""
    s, y = _check_binary(scores, labels)
    ranks = rankdata(s)
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def pr_curve(scores, labels) -> list[tuple[float, float, float]]:
    """``(threshold, precision, recall)`` for each distinct score, high to low.

    A point at threshold ``t`` counts scores ``>= t`` as positive. The curve
    starts at ``(inf, 1.0, 0.0)``: nothing selected, precision taken as 1.
    """
    s, y = _check_binary(scores, labels)
    n_pos = int(y.sum())
    out = [(float("inf"), 1.0, 0.0)]
    for t in np.unique(s)[::-1]:
        sel = s >= t
        tp = int((sel & y).sum())
        out.append((float(t), tp / int(sel.sum()), tp / n_pos))
    return out
