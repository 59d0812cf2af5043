"""Hide-and-Seek attribution on top of a latent model and a latent classifier.

Pipeline for one vertebra: gate on the classifier, move the latent to a
near-zero malignancy probability, decode a healthy counterpart, split the
residual into brighter/darker parts, turn each part into connected candidate
regions, and score every candidate by revealing it alone (all other
candidates replaced by their healthy appearance), projecting the result back
through the latent model and asking the classifier how much of the original
malignancy it recovers.
"""
from __future__ import annotations

import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import imaging
from .classifier import HEALTHY, MALIGNANT, LinearClassifier, healthy_edit, malignancy_gate, probability
from .latent import LatentModel, decode, encode, project

POSITIVE, NEGATIVE = "positive", "negative"
FILTERS = {
    "lytic_only": ("lytic",),
    "blastic_only": ("blastic",),
    "both": ("lytic", "blastic"),
}
# blastic = hyperdense = brighter than healthy; lytic = hypodense = darker
DEFAULT_POLARITY_MAP = {"blastic": POSITIVE, "lytic": NEGATIVE}


@dataclass(frozen=True)
class AttributionConfig:
    p_target: float = 1e-4
    tau: float = 0.5
    eps: float = 1e-8
    binarization: str = "mean"
    connectivity: int = 8
    min_size: int = 5
    erosion: int = 2
    polarity_map: dict = field(default_factory=lambda: dict(DEFAULT_POLARITY_MAP))
    phenotype_filter: str = "both"
    gate_cutoff: float = 0.5

    def __post_init__(self):
        if self.tau <= 0 or self.eps <= 0:
            raise ValueError("tau and eps must be > 0")
        if not 0 < self.p_target < 1:
            raise ValueError("p_target must lie in (0, 1)")
        if self.binarization != "mean":
            raise ValueError(f"unsupported binarization {self.binarization!r}")
        if self.phenotype_filter not in FILTERS:
            raise ValueError(f"phenotype_filter must be one of {sorted(FILTERS)}")
        if set(self.polarity_map) != {"lytic", "blastic"} or \
                set(self.polarity_map.values()) != {POSITIVE, NEGATIVE}:
            raise ValueError("polarity_map must send lytic and blastic to distinct polarities")

    def phenotypes(self) -> tuple[str, ...]:
        return FILTERS[self.phenotype_filter]


def filter_for_phenotype(phenotype: str) -> str:
    """Polarity filter implied by a patient-level phenotype label."""
    return {"lytic": "lytic_only", "blastic": "blastic_only"}.get(phenotype, "both")


@dataclass
class ResidualPair:
    d_pos: np.ndarray
    d_neg: np.ndarray

    @property
    def residual(self) -> np.ndarray:
        return self.d_pos - self.d_neg

    def select(self, polarity: str) -> np.ndarray:
        if polarity == POSITIVE:
            return self.d_pos
        if polarity == NEGATIVE:
            return self.d_neg
        raise ValueError(f"unknown polarity {polarity!r}")


@dataclass(eq=False)
class LesionCandidate:
    mask: np.ndarray
    polarity: str
    phenotype: str
    delta: float = 0.0
    hide_probability: float = float("nan")
    kept: bool = False

    @property
    def size(self) -> int:
        return int(self.mask.sum())


@dataclass
class SegmentationResult:
    lytic: np.ndarray
    blastic: np.ndarray
    kept_candidates: list = field(default_factory=list)
    rejected_candidates: list = field(default_factory=list)
    gate_decision: str = MALIGNANT
    original_probability: float = float("nan")
    healthy_probability: float = float("nan")
    warning: str | None = None

    @property
    def candidates(self) -> list[LesionCandidate]:
        return self.kept_candidates + self.rejected_candidates

    def merged(self) -> np.ndarray:
        return (self.lytic > 0) | (self.blastic > 0)

    @classmethod
    def empty(cls, shape, **kw) -> "SegmentationResult":
        z = np.zeros(shape, dtype=np.int32)
        return cls(lytic=z, blastic=z.copy(), **kw)


def healthy_reconstruction(model: LatentModel, clf: LinearClassifier, img, cfg: AttributionConfig):
    """Return ``(z, z_healthy, healthy image)`` for ``img``."""
    z = encode(model, img)
    z_healthy = healthy_edit(clf, z, cfg.p_target)
    return z, z_healthy, decode(model, z_healthy)


def compute_residuals(img, img_healthy) -> ResidualPair:
    img = np.asarray(img, dtype=np.float64)
    img_healthy = np.asarray(img_healthy, dtype=np.float64)
    imaging.check_same_shape(img, img_healthy, names=("img", "img_healthy"))
    d = img - img_healthy
    return ResidualPair(d_pos=np.maximum(d, 0.0), d_neg=np.maximum(-d, 0.0))


def extract_candidates(res: ResidualPair, polarity: str, roi, cfg: AttributionConfig) -> list[np.ndarray]:
    """One mask per connected component of the mean-thresholded residual inside ``roi``.

    ``roi`` is expected to be the already-eroded body mask. No size filter is
    applied here; small components still take part in the occlusion.
    """
    binary = imaging.mean_threshold(res.select(polarity), roi)
    lab = imaging.connected_components(binary, cfg.connectivity)
    return [lab == k for k in range(1, int(lab.max()) + 1)]


def occlude(img, img_healthy, keep, others) -> np.ndarray:
    """Keep ``img`` everywhere except ``others``, which take the healthy values."""
    img = np.asarray(img, dtype=np.float64)
    img_healthy = np.asarray(img_healthy, dtype=np.float64)
    keep = imaging.as_mask(keep, "keep")
    others = imaging.as_mask(others, "others")
    imaging.check_same_shape(img, img_healthy, keep, others,
                             names=("img", "img_healthy", "keep", "others"))
    if (keep & others).any():
        raise ValueError("keep and others masks overlap")
    return np.where(others, img_healthy, img)


def delta_score(clf: LinearClassifier, z, z_healthy, z_hide, eps: float = 1e-8) -> float:
    """Share of the original malignancy probability recovered by ``z_hide``, floored at 0."""
    p = probability(clf, z)
    p_h = probability(clf, z_healthy)
    p_hide = probability(clf, z_hide)
    return max((p_hide - p_h) / (p - p_h + eps), 0.0)


def postprocess(mask, roi_eroded, cfg: AttributionConfig) -> np.ndarray:
    """Shared final step for every method: restrict to the eroded body, drop small parts, label."""
    mask = imaging.as_mask(mask) & roi_eroded
    lab = imaging.connected_components(mask, cfg.connectivity)
    return imaging.filter_small_components(lab, cfg.min_size)


def eroded_roi(body_mask, cfg: AttributionConfig) -> np.ndarray:
    roi = imaging.morphology(body_mask, "erode", cfg.erosion)
    if not roi.any():
        raise ValueError("empty ROI")
    return roi


def segment_vertebra(model: LatentModel, clf: LinearClassifier, img, body_mask,
                     cfg: AttributionConfig | None = None, jobs: int = 1) -> SegmentationResult:
    """Full Hide-and-Seek segmentation of one slice.

    Candidates of every admitted phenotype are scored against each other:
    when one is revealed, all others (of both polarities) are hidden.
    """
    cfg = cfg or AttributionConfig()
    img = imaging.as_image(img)
    body_mask = imaging.as_mask(body_mask, "body_mask")
    imaging.check_same_shape(img, body_mask, names=("img", "body_mask"))
    if not body_mask.any():
        raise ValueError("empty ROI")
    roi = eroded_roi(body_mask, cfg)

    z = encode(model, img)
    p_orig = probability(clf, z)
    if malignancy_gate(clf, z, cfg.gate_cutoff) == HEALTHY:
        return SegmentationResult.empty(img.shape, gate_decision=HEALTHY, original_probability=p_orig)

    _, z_healthy, img_healthy = healthy_reconstruction(model, clf, img, cfg)
    res = compute_residuals(img, img_healthy)
    cands = [LesionCandidate(mask=m, polarity=cfg.polarity_map[ph], phenotype=ph)
             for ph in cfg.phenotypes()
             for m in extract_candidates(res, cfg.polarity_map[ph], roi, cfg)]

    union_count = np.zeros(img.shape, dtype=np.int32)
    for c in cands:
        union_count += c.mask

    def score(c: LesionCandidate) -> tuple[float, float]:
        others = (union_count - c.mask) > 0
        hidden = occlude(img, img_healthy, c.mask, others)
        _, z_hide = project(model, hidden)
        # re-encode the projected image; identical for a linear model, kept for generality
        z_hide = encode(model, decode(model, z_hide, clamp=False))
        return delta_score(clf, z, z_healthy, z_hide, cfg.eps), probability(clf, z_hide)

    if jobs > 1 and len(cands) > 1:
        with ThreadPoolExecutor(jobs) as pool:
            scores = list(pool.map(score, cands))
    else:
        scores = [score(c) for c in cands]

    kept, rejected = [], []
    for c, (delta, p_hide) in zip(cands, scores):
        c.delta, c.hide_probability, c.kept = delta, p_hide, delta >= cfg.tau
        (kept if delta >= cfg.tau else rejected).append(c)

    out = {}
    for ph in ("lytic", "blastic"):
        m = np.zeros(img.shape, dtype=bool)
        for c in kept:
            if c.phenotype == ph:
                m |= c.mask
        out[ph] = postprocess(m, roi, cfg)
    return SegmentationResult(lytic=out["lytic"], blastic=out["blastic"], kept_candidates=kept,
                              rejected_candidates=rejected, gate_decision=MALIGNANT,
                              original_probability=p_orig,
                              healthy_probability=probability(clf, z_healthy))


# --- lesion-wise export ------------------------------------------------------

LESION_COLUMNS = ("sample_id", "phenotype", "polarity", "size", "delta", "kept", "match",
                  "p_orig", "p_hide")


def export_lesion_analysis(results, samples) -> list[dict]:
    """One row per scored candidate, flagged TP if it overlaps any ground-truth lesion
    of its own phenotype, else FP."""
    rows = []
    for res, s in zip(results, samples):
        gts = {"lytic": s.gt_lytic > 0, "blastic": s.gt_blastic > 0}
        for c in res.kept_candidates + res.rejected_candidates:
            rows.append({
                "sample_id": s.sample_id,
                "phenotype": c.phenotype,
                "polarity": c.polarity,
                "size": c.size,
                "delta": c.delta,
                "kept": c.kept,
                "match": "TP" if (c.mask & gts[c.phenotype]).any() else "FP",
                "p_orig": res.original_probability,
                "p_hide": c.hide_probability,
            })
    return rows


def write_candidate_ledger(result: SegmentationResult, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "polarity", "phenotype", "size", "delta", "kept", "p_hide"])
        for i, c in enumerate(result.candidates):
            w.writerow([i, c.polarity, c.phenotype, c.size, f"{c.delta:.10g}",
                        int(c.kept), f"{c.hide_probability:.10g}"])


def write_result(result: SegmentationResult, directory, stem: str) -> dict[str, Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = {
        "lytic": directory / f"{stem}_lytic.pgm",
        "blastic": directory / f"{stem}_blastic.pgm",
        "ledger": directory / f"{stem}_candidates.csv",
    }
    imaging.write_pgm(paths["lytic"], result.lytic)
    imaging.write_pgm(paths["blastic"], result.blastic)
    write_candidate_ledger(result, paths["ledger"])
    return paths
