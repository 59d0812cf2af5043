"""Synthetic vertebral-body slices with planted lytic and blastic lesions.

Each phantom is an elliptical body with a bright cortical rim and a
trabecular texture fixed in image coordinates. Lesions are blobs (unions of
one to three overlapping discs) that wipe out the trabecular texture and
shift intensity up (blastic, hyperdense) or down (lytic, hypodense).
Distractors are smooth low-contrast bumps that leave the texture intact,
standing in for benign findings; they appear in healthy and malignant
phantoms alike.

Generation is keyed on ``(seed, index)`` through a Philox counter-based
generator, so any sample can be produced independently of the others.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import imaging

HEALTHY, MALIGNANT = "healthy", "malignant"
PHENOTYPES = ("none", "lytic", "blastic", "mixed")
MALIGNANT_PHENOTYPES = ("blastic", "lytic", "mixed")
# reference clinical test composition (blastic / lytic / mixed), used for default test mixes
REFERENCE_TEST_MIX = {"blastic": 50, "lytic": 16, "mixed": 28}
MAX_PLACEMENT_TRIES = 200
MAX_LAYOUT_ATTEMPTS = 8

_SPLIT_CODES = {"generative": 1, "classifier": 2, "test": 3}


@dataclass(frozen=True)
class PhantomConfig:
    size: int = 64
    body_rx: tuple[float, float] = (20.0, 24.0)
    body_ry: tuple[float, float] = (17.0, 21.0)
    center_jitter: float = 1.5
    background: float = 0.12
    body_intensity: float = 0.5
    cortex_intensity: float = 0.72
    cortex_width: int = 2
    texture_amplitude: float = 0.13
    texture_period: float = 4.0
    lesion_count: dict = field(default_factory=lambda: {
        "blastic": (1, 6), "lytic": (1, 6), "mixed": (1, 3)})
    lesion_radius: tuple[float, float] = (3.0, 5.0)
    lesion_contrast: tuple[float, float] = (0.30, 0.40)
    edge_sigma: float = 0.7
    distractor_count: tuple[int, int] = (0, 2)
    distractor_radius: tuple[float, float] = (2.0, 3.5)
    distractor_contrast: tuple[float, float] = (0.09, 0.15)
    noise_sigma: float = 0.002

    def __post_init__(self):
        ranges = [self.body_rx, self.body_ry, self.lesion_radius, self.lesion_contrast,
                  self.distractor_count, self.distractor_radius, self.distractor_contrast,
                  *self.lesion_count.values()]
        for lo, hi in ranges:
            if lo > hi:
                raise ValueError(f"empty range ({lo}, {hi})")
        if self.size < 8:
            raise ValueError("image size must be >= 8")
        if max(self.body_rx[1], self.body_ry[1]) + self.center_jitter >= self.size / 2:
            raise ValueError("body does not fit in the image")
        if self.lesion_contrast[0] <= self.texture_amplitude:
            raise ValueError("lesion contrast must exceed texture amplitude")
        # lesions replace the texture, so the extremes are body +- max(texture, contrast)
        reach = max(self.texture_amplitude, self.lesion_contrast[1])
        if self.body_intensity + reach > 1.0 or self.body_intensity - reach < 0.0:
            raise ValueError("lesion contrast pushes intensities outside [0, 1]")


def easy_config(**overrides) -> PhantomConfig:
    """High contrast, low noise."""
    return replace(PhantomConfig(), **overrides)


def hard_config(**overrides) -> PhantomConfig:
    """Low contrast, stronger noise; lesions closer to the distractors."""
    base = PhantomConfig(lesion_contrast=(0.16, 0.22), noise_sigma=0.02,
                         distractor_contrast=(0.10, 0.18))
    return replace(base, **overrides)


PRESETS = {"easy": easy_config, "hard": hard_config}


@dataclass
class PhantomSample:
    image: np.ndarray
    body_mask: np.ndarray
    gt_lytic: np.ndarray
    gt_blastic: np.ndarray
    label: str
    phenotype: str
    sample_id: str
    distractors: np.ndarray = None  # labeling of planted benign bumps
    baseline: np.ndarray = None  # noise-free appearance without lesions (in memory only)

    @property
    def gt_union(self) -> np.ndarray:
        """Both lesion types in one labeling (lytic ids first)."""
        k = int(self.gt_lytic.max(initial=0))
        return np.where(self.gt_blastic > 0, self.gt_blastic + k, self.gt_lytic).astype(np.int32)


class _PlacementError(Exception):
    pass


def _rng(seed: int, index: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=[seed & (2**64 - 1), index & (2**64 - 1)]))


def trabecular_pattern(n: int, period: float) -> np.ndarray:
    """Fixed +-1 block pattern (a checkerboard of half-period squares)."""
    w = 2 * np.pi / period
    t = np.sign(np.cos(w * (np.arange(n) + 0.5)))
    return np.outer(t, t)


def _disc(yy, xx, cy, cx, r):
    return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r


def _blob(rng, yy, xx, cy, cx, r) -> np.ndarray:
    """Union of 1-3 overlapping discs around ``(cy, cx)``."""
    mask = _disc(yy, xx, cy, cx, r)
    for _ in range(rng.integers(0, 3)):
        ang = rng.uniform(0, 2 * np.pi)
        off = rng.uniform(0.3, 0.8) * r
        r2 = rng.uniform(0.5, 0.9) * r
        mask |= _disc(yy, xx, cy + off * np.sin(ang), cx + off * np.cos(ang), r2)
    return mask


def _place(rng, centers, occupied, make) -> np.ndarray:
    """Sample a center from ``centers`` until ``make`` yields a blob clear of ``occupied``."""
    cand = np.argwhere(centers)
    if len(cand) == 0:
        raise _PlacementError
    for _ in range(MAX_PLACEMENT_TRIES):
        cy, cx = cand[rng.integers(len(cand))] + rng.uniform(-0.5, 0.5, size=2)
        blob = make(cy, cx)
        if blob.sum() >= 5 and not (blob & occupied).any():
            return blob
    raise _PlacementError


def _largest_component(mask: np.ndarray) -> np.ndarray:
    lab = imaging.connected_components(mask, 8)
    if lab.max() <= 1:
        return mask
    return lab == np.argmax(np.bincount(lab.ravel())[1:]) + 1


def generate_phantom(seed: int, cfg: PhantomConfig | None = None, label: str = HEALTHY,
                     phenotype: str = "none", *, index: int = 0, sample_id: str | None = None,
                     n_lesions: int | tuple[int, int] | None = None,
                     n_distractors: int | None = None) -> PhantomSample:
    """Render one phantom, fully determined by ``(seed, index, cfg, label, phenotype)``.

    ``n_lesions`` forces the lesion count (for mixed, an int applies to each
    polarity or a ``(lytic, blastic)`` pair may be given); ``n_distractors``
    forces the number of benign bumps.
    """
    cfg = cfg or PhantomConfig()
    if label not in (HEALTHY, MALIGNANT) or phenotype not in PHENOTYPES:
        raise ValueError(f"invalid label/phenotype {label!r}/{phenotype!r}")
    if (phenotype == "none") != (label == HEALTHY):
        raise ValueError("phenotype must be 'none' exactly when label is healthy")
    sid = sample_id if sample_id is not None else f"{seed}-{index}"
    # whole-layout retries, each on its own deterministic stream
    for attempt in range(MAX_LAYOUT_ATTEMPTS):
        try:
            return _render(_rng(seed, index | (attempt << 56)), cfg, label, phenotype, sid,
                           n_lesions, n_distractors)
        except _PlacementError:
            continue
    raise RuntimeError("placement failure")


def _render(rng, cfg, label, phenotype, sid, n_lesions, n_distractors) -> PhantomSample:
    n = cfg.size
    yy, xx = np.mgrid[0:n, 0:n].astype(np.float64)

    cy, cx = n / 2 - 0.5 + rng.uniform(-cfg.center_jitter, cfg.center_jitter, size=2)
    rx, ry = rng.uniform(*cfg.body_rx), rng.uniform(*cfg.body_ry)
    body = ((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2 <= 1.0
    interior = imaging.morphology(body, "erode", cfg.cortex_width)
    rim = body & ~interior
    body_soft = ndimage.gaussian_filter(body.astype(float), 1.5)
    rim_soft = ndimage.gaussian_filter(rim.astype(float), 1.5)
    interior_soft = ndimage.gaussian_filter(interior.astype(float), 0.6)

    img = cfg.background + (cfg.body_intensity - cfg.background) * body_soft
    img += (cfg.cortex_intensity - cfg.body_intensity) * rim_soft
    texture = cfg.texture_amplitude * trabecular_pattern(n, cfg.texture_period) * interior_soft

    # lesion placement zone: one pixel inside the 2-pixel-eroded body
    zone = imaging.morphology(body, "erode", cfg.cortex_width + 1)
    counts = {"lytic": 0, "blastic": 0}
    if label == MALIGNANT:
        pols = ("lytic", "blastic") if phenotype == "mixed" else (phenotype,)
        lo, hi = cfg.lesion_count[phenotype]
        for pol in pols:
            counts[pol] = int(rng.integers(lo, hi + 1))
        if isinstance(n_lesions, tuple):
            counts = dict(zip(("lytic", "blastic"), n_lesions))
        elif n_lesions is not None:
            counts.update({pol: n_lesions for pol in pols})

    occupied = np.zeros((n, n), dtype=bool)
    gts = {"lytic": np.zeros((n, n), np.int32), "blastic": np.zeros((n, n), np.int32)}
    erase = np.ones((n, n))
    shift = np.zeros((n, n))
    order = [p for p in ("blastic", "lytic") for _ in range(counts[p])]
    for pol in order:
        r = rng.uniform(*cfg.lesion_radius)
        centers = imaging.morphology(zone, "erode", max(int(np.ceil(r)) - 1, 0))
        blob = _place(rng, centers, occupied,
                      lambda y0, x0: _largest_component(_blob(rng, yy, xx, y0, x0, r) & zone))
        occupied |= imaging.morphology(blob, "dilate", 2)
        soft = np.maximum(ndimage.gaussian_filter(blob.astype(float), cfg.edge_sigma), 0.5 * blob)
        c = rng.uniform(*cfg.lesion_contrast)
        shift += (c if pol == "blastic" else -c) * soft
        erase *= 1.0 - soft
        gts[pol][blob] = gts[pol].max() + 1

    lo, hi = cfg.distractor_count
    nd = int(rng.integers(lo, hi + 1)) if n_distractors is None else n_distractors
    distractors = np.zeros((n, n), np.int32)
    bumps = np.zeros((n, n))
    for _ in range(nd):
        s = rng.uniform(*cfg.distractor_radius)
        region = _place(rng, zone, occupied,
                        lambda y0, x0: _largest_component(_disc(yy, xx, y0, x0, 1.25 * s) & zone))
        ys, xs = np.argwhere(region).mean(axis=0)
        occupied |= imaging.morphology(region, "dilate", 2)
        c = rng.uniform(*cfg.distractor_contrast) * rng.choice([-1.0, 1.0])
        bumps += c * np.exp(-((yy - ys) ** 2 + (xx - xs) ** 2) / (2 * s * s)) * region
        distractors[region] = distractors.max() + 1

    clean = img + texture * erase + shift + bumps
    noisy = clean + rng.normal(0.0, cfg.noise_sigma, size=(n, n))
    # quantized to the 16-bit PGM grid so files round-trip bit-exactly
    image = np.rint(np.clip(noisy, 0.0, 1.0) * 65535.0) / 65535.0
    return PhantomSample(image=image, body_mask=body, gt_lytic=gts["lytic"],
                         gt_blastic=gts["blastic"], label=label, phenotype=phenotype,
                         sample_id=sid, distractors=distractors, baseline=img + texture + bumps)


def apportion(total: int, weights: dict[str, float]) -> dict[str, int]:
    """Largest-remainder split of ``total`` in proportion to ``weights``."""
    s = sum(weights.values())
    raw = {k: total * v / s for k, v in weights.items()}
    out = {k: int(np.floor(v)) for k, v in raw.items()}
    rest = total - sum(out.values())
    for k in sorted(raw, key=lambda k: (-(raw[k] - out[k]), list(raw).index(k)))[:rest]:
        out[k] += 1
    return out


@dataclass
class Dataset:
    generative_corpus: list[PhantomSample]
    classifier_subset: list[PhantomSample]
    test_set: list[PhantomSample]

    def splits(self) -> dict[str, list[PhantomSample]]:
        return {"generative": self.generative_corpus, "classifier": self.classifier_subset,
                "test": self.test_set}


def generate_dataset(seed: int, cfg: PhantomConfig | None = None,
                     counts: tuple[int, int, int] = (300, 120, 50), *,
                     classifier_healthy: int | None = None,
                     test_mix: dict[str, int] | None = None,
                     generative_malignant_fraction: float = 0.5) -> Dataset:
    """Three disjoint splits: generative corpus, classifier subset, malignant test set.

    Malignant phenotypes in the first two splits cycle through blastic, lytic
    and mixed. The test mix defaults to the proportions of REFERENCE_TEST_MIX.
    """
    cfg = cfg or PhantomConfig()
    n_gen, n_clf, n_test = counts
    n_healthy = n_clf // 2 if classifier_healthy is None else classifier_healthy
    n_malig = n_clf - n_healthy
    if n_gen < 64 or n_healthy < 16 or n_malig < 16 or n_test < 8:
        raise ValueError("invalid counts: need generative >= 64, classifier >= 16 per class, "
                         "test >= 8")
    if test_mix is None:
        test_mix = apportion(n_test, REFERENCE_TEST_MIX)
    if sum(test_mix.values()) != n_test or set(test_mix) - set(MALIGNANT_PHENOTYPES):
        raise ValueError(f"test mix {test_mix} does not sum to {n_test}")

    def make(split, i, label, phenotype):
        idx = (_SPLIT_CODES[split] << 32) | i
        return generate_phantom(seed, cfg, label, phenotype, index=idx,
                                sample_id=f"{split}-{i:05d}")

    n_gen_malig = int(round(n_gen * generative_malignant_fraction))
    gen = []
    for i in range(n_gen):
        if i < n_gen_malig:
            gen.append(make("generative", i, MALIGNANT, MALIGNANT_PHENOTYPES[i % 3]))
        else:
            gen.append(make("generative", i, HEALTHY, "none"))
    clf = [make("classifier", i, HEALTHY, "none") for i in range(n_healthy)]
    clf += [make("classifier", n_healthy + i, MALIGNANT, MALIGNANT_PHENOTYPES[i % 3])
            for i in range(n_malig)]
    test, i = [], 0
    for ph in MALIGNANT_PHENOTYPES:
        for _ in range(test_mix.get(ph, 0)):
            test.append(make("test", i, MALIGNANT, ph))
            i += 1
    return Dataset(gen, clf, test)


# --- on-disk layout -----------------------------------------------------------

def write_dataset(ds: Dataset, root, cfg: PhantomConfig | None = None, seed: int | None = None) -> Path:
    """Write PGM rasters plus ``manifest.json`` listing every sample."""
    root = Path(root)
    entries = []
    for split, samples in ds.splits().items():
        d = root / split
        d.mkdir(parents=True, exist_ok=True)
        for s in samples:
            paths = {}
            for key, arr, writer in (
                ("image", s.image, imaging.write_image_pgm),
                ("body_mask", s.body_mask, imaging.write_mask_pgm),
                ("gt_lytic", s.gt_lytic, imaging.write_pgm),
                ("gt_blastic", s.gt_blastic, imaging.write_pgm),
                ("distractors", s.distractors, imaging.write_pgm),
            ):
                rel = f"{split}/{s.sample_id}_{key}.pgm"
                writer(root / rel, arr)
                paths[key] = rel
            entries.append({"sample_id": s.sample_id, "split": split, "label": s.label,
                            "phenotype": s.phenotype, "paths": paths})
    manifest = {"seed": seed, "config": asdict(cfg) if cfg else None, "samples": entries}
    path = root / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1) + "\n")
    return path


def read_dataset(root) -> Dataset:
    root = Path(root)
    manifest = json.loads((root / "manifest.json").read_text())
    out = {"generative": [], "classifier": [], "test": []}
    for e in manifest["samples"]:
        p = e["paths"]
        out[e["split"]].append(PhantomSample(
            image=imaging.read_image_pgm(root / p["image"]),
            body_mask=imaging.read_mask_pgm(root / p["body_mask"]),
            gt_lytic=imaging.read_pnm(root / p["gt_lytic"]).astype(np.int32),
            gt_blastic=imaging.read_pnm(root / p["gt_blastic"]).astype(np.int32),
            label=e["label"], phenotype=e["phenotype"], sample_id=e["sample_id"],
            distractors=imaging.read_pnm(root / p["distractors"]).astype(np.int32),
        ))
    return Dataset(out["generative"], out["classifier"], out["test"])
