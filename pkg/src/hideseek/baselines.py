"""Reference methods: Otsu intensity thresholding and pseudo-healthy anomaly detection.

Both end in ``attribution.postprocess``, the same restriction / size filter /
labeling step the main method uses.
"""
from __future__ import annotations

import numpy as np

from . import imaging
from .attribution import (AttributionConfig, LesionCandidate, SegmentationResult, compute_residuals,
                          eroded_roi, extract_candidates, postprocess)
from .latent import LatentModel, project


def otsu_baseline(img, roi, phenotype_filter: str = "both", min_size: int = 5, erosion: int = 2,
                  connectivity: int = 8) -> SegmentationResult:
    """Threshold the body with one (single phenotype) or two (both) Otsu levels.

    Lytic is below the lower threshold, blastic at or above the upper one.
    A histogram without contrast yields an empty result with a warning.
    """
    cfg = AttributionConfig(min_size=min_size, erosion=erosion, connectivity=connectivity,
                            phenotype_filter=phenotype_filter)
    img = imaging.as_image(img)
    roi = imaging.as_mask(roi, "roi")
    imaging.check_same_shape(img, roi, names=("img", "roi"))
    if not roi.any():
        raise ValueError("empty ROI")
    roi_e = eroded_roi(roi, cfg)
    levels = 2 if phenotype_filter == "both" else 1
    try:
        th = imaging.otsu_thresholds(img, roi, levels)
    except ValueError as exc:
        if "degenerate histogram" not in str(exc):
            raise
        return SegmentationResult.empty(img.shape, warning="degenerate histogram")
    masks = {"lytic": np.zeros(img.shape, bool), "blastic": np.zeros(img.shape, bool)}
    if "lytic" in cfg.phenotypes():
        masks["lytic"] = roi & (img < th[0])
    if "blastic" in cfg.phenotypes():
        masks["blastic"] = roi & (img >= th[-1])
    return SegmentationResult(lytic=postprocess(masks["lytic"], roi_e, cfg),
                              blastic=postprocess(masks["blastic"], roi_e, cfg))


def ad_baseline(healthy_model: LatentModel, img, roi, cfg: AttributionConfig | None = None) -> SegmentationResult:
    """Residuals against the projection onto a healthy-only model; every candidate is kept."""
    cfg = cfg or AttributionConfig()
    img = imaging.as_image(img)
    roi = imaging.as_mask(roi, "roi")
    roi_e = eroded_roi(roi, cfg)
    pseudo_healthy, _ = project(healthy_model, img)
    res = compute_residuals(img, pseudo_healthy)
    kept, out = [], {}
    for ph in ("lytic", "blastic"):
        m = np.zeros(img.shape, dtype=bool)
        if ph in cfg.phenotypes():
            pol = cfg.polarity_map[ph]
            for mask in extract_candidates(res, pol, roi_e, cfg):
                kept.append(LesionCandidate(mask=mask, polarity=pol, phenotype=ph, kept=True))
                m |= mask
        out[ph] = postprocess(m, roi_e, cfg)
    return SegmentationResult(lytic=out["lytic"], blastic=out["blastic"], kept_candidates=kept)
