"""Experiment orchestration: configuration, stages, reports and overlays.

A run is a fixed sequence of stages (generate, train, segment, evaluate,
ablate, render). Each stage reads what earlier stages produced, either in
memory or from the run directory, so the command-line tool can execute them
one at a time. Every failure is re-raised as a :class:`StageError` naming the
stage.
"""
from __future__ import annotations

import ast
import configparser
import hashlib
import json
import os
import platform
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import scipy

from . import __version__, imaging, metrics
from .attribution import (AttributionConfig, SegmentationResult, LESION_COLUMNS, export_lesion_analysis,
                          filter_for_phenotype, healthy_reconstruction, occlude, segment_vertebra,
                          write_candidate_ledger)
from .baselines import ad_baseline, otsu_baseline
from .classifier import TrainConfig, load_classifier, save_classifier, train_classifier
from .latent import LatentModel, decode, encode, fit_latent_model, load_latent_model, project, save_latent_model
from .phantom import PRESETS, Dataset, PhantomConfig, PhantomSample, generate_dataset, read_dataset, write_dataset

OUT_ENV = "HIDESEEK_OUT"
METHOD = "hide_and_seek"
BASELINES = ("otsu", "ad")
STAGES = ("generate", "train", "segment", "evaluate", "ablate", "render")


class StageError(RuntimeError):
    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 20240917
    regime: str = "easy"
    phantom: PhantomConfig = field(default_factory=PhantomConfig)
    counts: tuple[int, int, int] = (600, 1200, 50)
    test_mix: dict | None = None
    latent_d: int = 28
    train: TrainConfig = field(default_factory=lambda: TrainConfig(l2=3e-5))
    attribution: AttributionConfig = field(default_factory=AttributionConfig)
    # "auto": polarity filter follows each test sample's phenotype label
    phenotype_filter: str = "auto"
    baselines: tuple[str, ...] = BASELINES
    out: Path = Path("runs/default")
    jobs: int = 1

    def __post_init__(self):
        object.__setattr__(self, "out", Path(self.out))
        if self.regime not in PRESETS:
            raise ValueError(f"regime must be one of {sorted(PRESETS)}")
        if self.phenotype_filter != "auto":
            replace(self.attribution, phenotype_filter=self.phenotype_filter)  # validates
        unknown = set(self.baselines) - set(BASELINES)
        if unknown:
            raise ValueError(f"unknown baselines {sorted(unknown)}")
        if self.latent_d < 2:
            raise ValueError("latent_d must be >= 2")
        if self.jobs < 1:
            raise ValueError("jobs must be >= 1")

    def filter_for(self, sample: PhantomSample) -> str:
        if self.phenotype_filter == "auto":
            return filter_for_phenotype(sample.phenotype)
        return self.phenotype_filter

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        for k in ("phantom", "train", "attribution"):
            d[k] = asdict(d[k])
        d["out"] = str(self.out)
        return _jsonable(d)

    def hash(self) -> str:
        """Digest of everything that affects results (not the output path or worker count)."""
        d = self.to_dict()
        d.pop("out")
        d.pop("jobs")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, Path):
        return str(x)
    return x


# --- config files ---------------------------------------------------------------

_SECTIONS = {"phantom": PhantomConfig, "train": TrainConfig, "attribution": AttributionConfig}
_TOP_KEYS = {"seed", "regime", "counts", "test_mix", "phenotype_filter", "baselines", "out", "jobs"}


def _value(text: str):
    text = text.strip()
    low = text.lower()
    if low in ("true", "yes", "on"):
        return True
    if low in ("false", "no", "off"):
        return False
    if low in ("none", ""):
        return None
    try:
        return ast.literal_eval(text)
    except (ValueError, SyntaxError):
        return text


def parse_settings(items) -> dict[str, object]:
    """``key = value`` pairs with dotted keys (``phantom.noise_sigma = 0.01``) to a flat dict."""
    out = {}
    for item in items:
        if "=" not in item:
            raise ValueError(f"expected key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = _value(v)
    return out


def read_config_file(path) -> dict[str, object]:
    """INI-style file; ``[phantom]`` + ``noise_sigma = 0.01`` becomes ``phantom.noise_sigma``.

    Keys outside any section (or in ``[experiment]``) are top-level.
    """
    text = Path(path).read_text()
    cp = configparser.ConfigParser(interpolation=None, default_section="__none__")
    cp.optionxform = str
    cp.read_string("[experiment]\n" + text)
    flat = {}
    for sec in cp.sections():
        for k, v in cp.items(sec):
            key = k if sec == "experiment" else f"{sec}.{k}"
            flat[key] = _value(v)
    return flat


def build_config(settings: dict[str, object] | None = None) -> ExperimentConfig:
    """Assemble an :class:`ExperimentConfig` from flat dotted settings over the defaults."""
    settings = dict(settings or {})
    base = ExperimentConfig()
    top, nested = {}, {k: {} for k in _SECTIONS}
    for key, val in settings.items():
        if key == "latent.d":
            top["latent_d"] = val
        elif key in _TOP_KEYS:
            top[key] = val
        elif "." in key and key.split(".", 1)[0] in _SECTIONS:
            sec, name = key.split(".", 1)
            if name not in {f.name for f in fields(_SECTIONS[sec])}:
                raise ValueError(f"unknown setting {key!r}")
            nested[sec][name] = val
        else:
            raise ValueError(f"unknown setting {key!r}")
    regime = top.get("regime", base.regime)
    if regime not in PRESETS:
        raise ValueError(f"regime must be one of {sorted(PRESETS)}")
    ph = nested["phantom"]
    for k in ("body_rx", "body_ry", "lesion_radius", "lesion_contrast", "distractor_count",
              "distractor_radius", "distractor_contrast"):
        if k in ph:
            ph[k] = tuple(ph[k])
    if "lesion_count" in ph:
        ph["lesion_count"] = {k: tuple(v) for k, v in ph["lesion_count"].items()}
    if "counts" in top:
        top["counts"] = tuple(int(c) for c in top["counts"])
    if "baselines" in top:
        b = top["baselines"]
        top["baselines"] = tuple(b) if isinstance(b, (list, tuple)) else \
            tuple(s.strip() for s in str(b or "").split(",") if s.strip())
    if "out" in top:
        top["out"] = Path(top["out"])
    return replace(base, **top,
                   phantom=PRESETS[regime](**ph),
                   train=replace(base.train, **nested["train"]),
                   attribution=replace(base.attribution, **nested["attribution"]))


def resolve_out(cfg: ExperimentConfig, flag: str | None = None) -> ExperimentConfig:
    """Output directory precedence: command-line flag, then environment, then config."""
    if flag:
        return replace(cfg, out=Path(flag))
    if os.environ.get(OUT_ENV):
        return replace(cfg, out=Path(os.environ[OUT_ENV]))
    return cfg


# --- run directory ---------------------------------------------------------------

class RunPaths:
    def __init__(self, root):
        self.root = Path(root)
        self.dataset = self.root / "dataset"
        self.models = self.root / "models"
        self.latent = self.models / "latent.hslm"
        self.latent_healthy = self.models / "latent_healthy.hslm"
        self.classifier = self.models / "classifier.json"
        self.segmentations = self.root / "segmentations"
        self.reports = self.root / "reports"
        self.overlays = self.root / "overlays"
        self.manifest = self.root / "manifest.json"

    def method_dir(self, method: str) -> Path:
        return self.segmentations / method


@dataclass
class Models:
    latent: LatentModel
    latent_healthy: LatentModel | None
    classifier: object


@dataclass
class RunManifest:
    config_hash: str
    artifacts: list[str] = field(default_factory=list)
    timings: dict[str, float] = field(default_factory=dict)
    versions: dict[str, str] = field(default_factory=dict)
    status: str = "complete"
    failed_stage: str | None = None
    error: str | None = None

    def to_dict(self) -> dict:
        return asdict(self)


def _versions() -> dict[str, str]:
    return {"hideseek": __version__, "python": platform.python_version(),
            "numpy": np.__version__, "scipy": scipy.__version__}


def _timed(manifest: RunManifest | None, stage: str, fn, *args, **kw):
    t0 = time.perf_counter()
    try:
        out = fn(*args, **kw)
    except StageError:
        raise
    except Exception as exc:  # noqa: BLE001 - re-tagged with the stage name
        raise StageError(stage, f"{type(exc).__name__}: {exc}") from exc
    if manifest is not None:
        manifest.timings[stage] = round(time.perf_counter() - t0, 3)
    return out


# --- stages ---------------------------------------------------------------------

def stage_generate(cfg: ExperimentConfig, write: bool = True) -> Dataset:
    ds = generate_dataset(cfg.seed, cfg.phantom, cfg.counts, test_mix=cfg.test_mix)
    if write:
        write_dataset(ds, RunPaths(cfg.out).dataset, cfg.phantom, cfg.seed)
    return ds


def _load_dataset(cfg: ExperimentConfig) -> Dataset:
    root = RunPaths(cfg.out).dataset
    if not (root / "manifest.json").exists():
        raise FileNotFoundError(f"no dataset under {root}; run 'generate' first")
    return read_dataset(root)


def stage_train(cfg: ExperimentConfig, ds: Dataset, write: bool = True) -> Models:
    corpus = [s.image for s in ds.generative_corpus]
    model = fit_latent_model(corpus, cfg.latent_d)
    healthy = None
    if "ad" in cfg.baselines:
        healthy = fit_latent_model([s.image for s in ds.generative_corpus if s.label == "healthy"],
                                   cfg.latent_d)
    Z = np.array([encode(model, s.image) for s in ds.classifier_subset])
    y = np.array([s.label == "malignant" for s in ds.classifier_subset], dtype=float)
    clf = train_classifier(Z, y, cfg.train)
    if write:
        p = RunPaths(cfg.out)
        p.models.mkdir(parents=True, exist_ok=True)
        save_latent_model(model, p.latent)
        if healthy is not None:
            save_latent_model(healthy, p.latent_healthy)
        save_classifier(clf, p.classifier)
    return Models(model, healthy, clf)


def _load_models(cfg: ExperimentConfig) -> Models:
    p = RunPaths(cfg.out)
    for f in (p.latent, p.classifier):
        if not f.exists():
            raise FileNotFoundError(f"missing {f}; run 'train' first")
    healthy = load_latent_model(p.latent_healthy) if p.latent_healthy.exists() else None
    return Models(load_latent_model(p.latent), healthy, load_classifier(p.classifier))


def _segment_one(cfg: ExperimentConfig, models: Models, s: PhantomSample) -> dict[str, SegmentationResult]:
    acfg = replace(cfg.attribution, phenotype_filter=cfg.filter_for(s))
    out = {METHOD: segment_vertebra(models.latent, models.classifier, s.image, s.body_mask, acfg)}
    if "otsu" in cfg.baselines:
        out["otsu"] = otsu_baseline(s.image, s.body_mask, acfg.phenotype_filter, acfg.min_size,
                                    acfg.erosion, acfg.connectivity)
    if "ad" in cfg.baselines:
        if models.latent_healthy is None:
            raise ValueError("AD baseline enabled but no healthy-only model was trained")
        out["ad"] = ad_baseline(models.latent_healthy, s.image, s.body_mask, acfg)
    return out


def stage_segment(cfg: ExperimentConfig, test: list[PhantomSample], models: Models,
                  write: bool = True) -> dict[str, list[SegmentationResult]]:
    """Segment every test sample with the method and each enabled baseline.

    Work is spread over ``cfg.jobs`` threads; results keep the test-set order.
    """
    if cfg.jobs > 1:
        with ThreadPoolExecutor(cfg.jobs) as pool:
            per_sample = list(pool.map(lambda s: _segment_one(cfg, models, s), test))
    else:
        per_sample = [_segment_one(cfg, models, s) for s in test]
    methods = [METHOD] + [b for b in BASELINES if b in cfg.baselines]
    results = {m: [r[m] for r in per_sample] for m in methods}
    if write:
        p = RunPaths(cfg.out)
        for m, rs in results.items():
            d = p.method_dir(m)
            d.mkdir(parents=True, exist_ok=True)
            for s, r in zip(test, rs):
                imaging.write_pgm(d / f"{s.sample_id}_lytic.pgm", r.lytic)
                imaging.write_pgm(d / f"{s.sample_id}_blastic.pgm", r.blastic)
                if m == METHOD:
                    write_candidate_ledger(r, d / f"{s.sample_id}_candidates.csv")
        rows = export_lesion_analysis(results[METHOD], test)
        metrics.write_csv(rows, p.segmentations / "lesion_analysis.csv", LESION_COLUMNS)
    return results


def _load_results(cfg: ExperimentConfig, test: list[PhantomSample]) -> dict[str, list[SegmentationResult]]:
    p = RunPaths(cfg.out)
    out = {}
    for m in [METHOD] + list(BASELINES):
        d = p.method_dir(m)
        if not d.is_dir():
            continue
        out[m] = [SegmentationResult(lytic=imaging.read_pnm(d / f"{s.sample_id}_lytic.pgm").astype(np.int32),
                                     blastic=imaging.read_pnm(d / f"{s.sample_id}_blastic.pgm").astype(np.int32))
                  for s in test]
    if METHOD not in out:
        raise FileNotFoundError(f"no segmentations under {p.segmentations}; run 'segment' first")
    return out


def stage_evaluate(cfg: ExperimentConfig, test: list[PhantomSample],
                   results: dict[str, list[SegmentationResult]], write: bool = True) -> list[metrics.MetricsReport]:
    reports = []
    per_sample_rows = []
    for m, rs in results.items():
        rep = metrics.MetricsReport(m)
        for s, r in zip(test, rs):
            vals = metrics.evaluate_sample(r, s)
            rep.add(s.phenotype, vals)
            per_sample_rows.append({"method": m, "sample_id": s.sample_id, "phenotype": s.phenotype, **vals})
        reports.append(rep)
    if write:
        p = RunPaths(cfg.out)
        p.reports.mkdir(parents=True, exist_ok=True)
        metrics.write_reports(reports, p.reports / "metrics.csv", p.reports / "metrics.json")
        rows = metrics.comparison_rows(reports)
        metrics.write_csv(rows, p.reports / "comparison.csv",
                          ["phenotype", "metric"] + [r.method for r in reports])
        metrics.write_csv(per_sample_rows, p.reports / "per_sample.csv",
                          ["method", "sample_id", "phenotype", *metrics.METRICS])
    return reports


def render_overlay(img, result: SegmentationResult, gt=None) -> np.ndarray:
    """RGB uint8 raster: grayscale image, blastic filled blue, lytic red, optional ground-truth
    outline in green (drawn last)."""
    img = imaging.as_image(img)
    imaging.check_same_shape(img, result.lytic, result.blastic, names=("img", "lytic", "blastic"))
    g = np.rint(img * 255.0).astype(np.uint8)
    rgb = np.stack([g, g, g], axis=-1)
    rgb[result.blastic > 0] = (0, 0, 255)
    rgb[result.lytic > 0] = (255, 0, 0)
    if gt is not None:
        gt = np.asarray(gt)
        imaging.check_same_shape(img, gt, names=("img", "gt"))
        rgb[metrics.surface(gt > 0)] = (0, 255, 0)
    return rgb


def stage_render(cfg: ExperimentConfig, test: list[PhantomSample],
                 results: dict[str, list[SegmentationResult]]) -> list[Path]:
    p = RunPaths(cfg.out)
    written = []
    for m, rs in results.items():
        d = p.overlays / m
        d.mkdir(parents=True, exist_ok=True)
        for s, r in zip(test, rs):
            path = d / f"{s.sample_id}.ppm"
            imaging.write_ppm(path, render_overlay(s.image, r, s.gt_union))
            written.append(path)
    return written


# --- ablations ----------------------------------------------------------------

PROJECTION_COLUMNS = ("sample_id", "ssim_masked", "ssim_masked_projected", "ssim_hidden",
                      "ssim_hidden_projected")

def _occlusion_views(models: Models, cfg: ExperimentConfig, s: PhantomSample, res: SegmentationResult):
    """Occlusions of every candidate except the best-scoring one.

    A lone candidate is itself occluded, and a phantom without candidates has its
    lesion pixels occluded instead, so every test phantom contributes. Returns
    ``(masked, hidden)``: the regions blanked to zero (a hard mask with sharp edges)
    and the regions replaced by the healthy reconstruction as the method does.
    None only when there is nothing at all to occlude.
    """
    others = np.zeros(s.image.shape, dtype=bool)
    if res.candidates:
        best = max(res.candidates, key=lambda c: c.delta)
        for c in res.candidates:
            if c is not best:
                others |= c.mask
        if not others.any():
            others = best.mask.copy()
    else:
        others = (s.gt_lytic > 0) | (s.gt_blastic > 0)
    if not others.any():
        return None
    keep = np.zeros_like(others)
    acfg = replace(cfg.attribution, phenotype_filter=cfg.filter_for(s))
    _, _, img_healthy = healthy_reconstruction(models.latent, models.classifier, s.image, acfg)
    masked = occlude(s.image, np.zeros_like(s.image), keep, others)
    hidden = occlude(s.image, img_healthy, keep, others)
    return masked, hidden


def run_ablations(cfg: ExperimentConfig, test: list[PhantomSample], models: Models,
                  results: list[SegmentationResult], write: bool = True) -> dict:
    """Reconstruction/edit fidelity, Delta-vs-probability AUC, and projection of occluded images."""
    # (a) fidelity of reconstruction and healthy edit
    fid_rows = []
    for s in test:
        z = encode(models.latent, s.image)
        rec = decode(models.latent, z)
        _, _, healthy = healthy_reconstruction(models.latent, models.classifier, s.image, cfg.attribution)
        fid_rows.append({"sample_id": s.sample_id, "phenotype": s.phenotype,
                         "ssim_reconstruction": imaging.ssim(rec, s.image),
                         "ssim_healthy_edit": imaging.ssim(healthy, s.image)})
    fid_summary = []
    for col in ("ssim_reconstruction", "ssim_healthy_edit"):
        v = np.array([r[col] for r in fid_rows])
        fid_summary.append({"quantity": col, "mean": float(v.mean()),
                            "sd": float(v.std(ddof=1)) if len(v) > 1 else 0.0, "n": len(v)})

    # (b) TP/FP discrimination of Delta vs the raw hidden-image probability
    lesion_rows = export_lesion_analysis(results, test)
    auc_rows = []
    for ph in ("blastic", "lytic", "all"):
        rows = [r for r in lesion_rows if ph == "all" or r["phenotype"] == ph]
        y = np.array([r["match"] == "TP" for r in rows], dtype=int)
        row = {"phenotype": ph, "n_tp": int(y.sum()), "n_fp": int(len(y) - y.sum()),
               "auc_delta": None, "auc_p_hide": None, "delta_ge_p_hide": None}
        if 0 < y.sum() < len(y):
            row["auc_delta"] = metrics.roc_auc([r["delta"] for r in rows], y)
            row["auc_p_hide"] = metrics.roc_auc([r["p_hide"] for r in rows], y)
            row["delta_ge_p_hide"] = int(row["auc_delta"] >= row["auc_p_hide"])
        auc_rows.append(row)

    # (c) projection of occluded images back through the latent model
    proj_rows = []
    for s, r in zip(test, results):
        views = _occlusion_views(models, cfg, s, r)
        if views is None:
            continue
        row = {"sample_id": s.sample_id}
        for name, occluded in zip(("masked", "hidden"), views):
            row[f"ssim_{name}"] = imaging.ssim(occluded, s.image)
            row[f"ssim_{name}_projected"] = imaging.ssim(project(models.latent, occluded)[0], s.image)
        proj_rows.append(row)
    proj_summary = {"n": len(proj_rows)}
    if proj_rows:
        for key in PROJECTION_COLUMNS[1:]:
            proj_summary[f"mean_{key}"] = float(np.mean([r[key] for r in proj_rows]))
        proj_summary["improvement"] = proj_summary["mean_ssim_masked_projected"] - proj_summary["mean_ssim_masked"]

    if write:
        p = RunPaths(cfg.out)
        p.reports.mkdir(parents=True, exist_ok=True)
        metrics.write_csv(fid_rows, p.reports / "ablation_fidelity.csv",
                          ["sample_id", "phenotype", "ssim_reconstruction", "ssim_healthy_edit"])
        metrics.write_csv(fid_summary, p.reports / "ablation_fidelity_summary.csv",
                          ["quantity", "mean", "sd", "n"])
        metrics.write_csv(auc_rows, p.reports / "ablation_delta_auc.csv",
                          ["phenotype", "n_tp", "n_fp", "auc_delta", "auc_p_hide", "delta_ge_p_hide"])
        metrics.write_csv(proj_rows, p.reports / "ablation_projection.csv", PROJECTION_COLUMNS)
    return {"fidelity": fid_summary, "delta_auc": auc_rows, "projection": proj_summary}


# --- whole run --------------------------------------------------------------------

def _artifacts(root: Path) -> list[str]:
    return sorted(str(p.relative_to(root)) for p in root.rglob("*")
                  if p.is_file() and p.name != "manifest.json")


def write_manifest(cfg: ExperimentConfig, manifest: RunManifest) -> Path:
    p = RunPaths(cfg.out)
    manifest.artifacts = _artifacts(p.root)
    doc = {**manifest.to_dict(), "config": cfg.to_dict()}
    p.manifest.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    return p.manifest


def run_experiment(cfg: ExperimentConfig, write_data: bool = False) -> RunManifest:
    """Every stage in order. The full dataset is only written with ``write_data``.

    On failure the manifest is still written, marked ``partial`` with the failing stage,
    and the :class:`StageError` propagates.
    """
    cfg.out.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest(config_hash=cfg.hash(), versions=_versions())
    try:
        ds = _timed(manifest, "generate", stage_generate, cfg, write=write_data)
        models = _timed(manifest, "train", stage_train, cfg, ds)
        results = _timed(manifest, "segment", stage_segment, cfg, ds.test_set, models)
        _timed(manifest, "evaluate", stage_evaluate, cfg, ds.test_set, results)
        _timed(manifest, "ablate", run_ablations, cfg, ds.test_set, models, results[METHOD])
        _timed(manifest, "render", stage_render, cfg, ds.test_set, results)
    except StageError as exc:
        manifest.status, manifest.failed_stage, manifest.error = "partial", exc.stage, str(exc)
        write_manifest(cfg, manifest)
        raise
    write_manifest(cfg, manifest)
    return manifest


# entry points used by the command-line tool for single stages

def cli_stage(cfg: ExperimentConfig, stage: str) -> None:
    if stage == "generate":
        _timed(None, "generate", stage_generate, cfg)
        return
    ds = _timed(None, stage, _load_dataset, cfg)
    if stage == "train":
        _timed(None, "train", stage_train, cfg, ds)
        return
    test = ds.test_set
    if stage == "segment":
        models = _timed(None, "segment", _load_models, cfg)
        _timed(None, "segment", stage_segment, cfg, test, models)
        return
    if stage == "evaluate":
        results = _timed(None, "evaluate", _load_results, cfg, test)
        _timed(None, "evaluate", stage_evaluate, cfg, test, results)
        return
    if stage == "ablate":
        models = _timed(None, "ablate", _load_models, cfg)
        # candidate scores are needed, so the method is re-run rather than read back
        results = [_timed(None, "ablate", segment_vertebra, models.latent, models.classifier, s.image,
                          s.body_mask, replace(cfg.attribution, phenotype_filter=cfg.filter_for(s)))
                   for s in test]
        _timed(None, "ablate", run_ablations, cfg, test, models, results)
        return
    if stage == "render":
        results = _timed(None, "render", _load_results, cfg, test)
        _timed(None, "render", stage_render, cfg, test, results)
        return
    raise StageError(stage, "unknown stage")
