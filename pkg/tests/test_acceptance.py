"""End-to-end acceptance checks.

Each test prints one ``AC<n> PASS|FAIL`` line with the measured values; the
lines are repeated together in the terminal summary.
"""
from __future__ import annotations

import csv
import json
import time
from dataclasses import replace

import numpy as np
import pytest

from hideseek import imaging, metrics, pipeline
from hideseek.attribution import compute_residuals
from hideseek.classifier import LinearClassifier, healthy_edit, probability
from hideseek.latent import decode, encode

import oracles
from conftest import ACCEPTANCE


def report(n: int, ok: bool, detail: str) -> None:
    line = f"AC{n} {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE[f"AC{n} "] = line
    print(line)


def read_csv(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def runs(tmp_path_factory):
    """The pinned easy-regime experiment, executed twice, plus its in-memory test set."""
    root = tmp_path_factory.mktemp("acceptance")
    cfg = replace(pipeline.ExperimentConfig(), out=root / "a")
    t0 = time.perf_counter()
    pipeline.run_experiment(cfg)
    elapsed = time.perf_counter() - t0
    second = replace(cfg, out=root / "b", jobs=2)
    pipeline.run_experiment(second)
    ds = pipeline.stage_generate(cfg, write=False)
    models = pipeline._load_models(cfg)
    results = pipeline._load_results(cfg, ds.test_set)
    return cfg, second, ds, models, results, elapsed


def test_criterion_1_healthy_edit_exactness():
    rng = np.random.default_rng(2024)
    pairs = []
    for _ in range(1000):
        d = int(rng.integers(2, 64))
        clf = LinearClassifier(normal=rng.normal(size=d) * rng.uniform(0.05, 20), bias=rng.normal() * 5)
        pairs.append((clf, rng.normal(size=d) * rng.uniform(0.1, 10)))
    t0 = time.perf_counter()
    worst_p = worst_idem = 0.0
    for clf, z in pairs:
        zh = healthy_edit(clf, z)
        worst_p = max(worst_p, abs(probability(clf, zh) - 1e-4))
        worst_idem = max(worst_idem, float(np.max(np.abs(healthy_edit(clf, zh) - zh))))
    elapsed = time.perf_counter() - t0
    ok = worst_p <= 1e-9 and worst_idem <= 1e-9 and elapsed < 1.0
    report(1, ok, f"max|c(z_h)-p_target|={worst_p:.2e} max idempotence gap={worst_idem:.2e} "
                  f"time={elapsed:.2f}s")
    assert ok


def test_criterion_2_oracle_equivalences():
    rng = np.random.default_rng(7)
    t0 = time.perf_counter()
    bad = {}
    bad["components"] = sum(
        not np.array_equal(imaging.connected_components(m, 8), oracles.flood_fill_labels(m, 8))
        for m in (rng.random((16, 16)) < rng.uniform(0.2, 0.7) for _ in range(1000)))
    n = 0
    bad["assd"] = 0
    while n < 200:
        a, b = rng.random((2, 12, 12)) < rng.uniform(0.05, 0.5)
        if a.any() and b.any():
            bad["assd"] += abs(metrics.assd(a, b) - oracles.assd_brute(a, b)) > 1e-12
            n += 1
    bad["matching"] = 0
    for _ in range(200):
        labs = []
        for _side in range(2):
            lab = np.zeros((8, 8), np.int32)
            for i in range(1, int(rng.integers(0, 5)) + 1):
                y, x = rng.integers(0, 6, size=2)
                h, w = rng.integers(1, 4, size=2)
                lab[y:y + h, x:x + w] = i
            labs.append(imaging.relabel_sequential(lab))
        m = metrics.match_instances(*labs)
        bad["matching"] += (m.pairs, m.unmatched_refs, m.unmatched_preds) != oracles.matching_brute(*labs)
    bad["otsu"] = 0
    for _ in range(100):
        img = np.clip(rng.normal(rng.uniform(0.2, 0.8, 2)[rng.integers(0, 2, 256)], 0.07), 0, 1)
        img = img.reshape(16, 16)
        roi = rng.random((16, 16)) < 0.9
        bad["otsu"] += imaging.otsu_thresholds(img, roi, 1) != [oracles.otsu_brute(img, roi)]
    bad["auc"] = 0
    for _ in range(100):
        s, y = np.round(rng.random(50), 1), rng.integers(0, 2, 50)
        y[:2] = (0, 1)
        bad["auc"] += abs(metrics.roc_auc(s, y) - oracles.auc_pairs(s, y)) > 1e-12
    elapsed = time.perf_counter() - t0
    ok = not any(bad.values()) and elapsed < 30
    report(2, ok, "mismatches " + " ".join(f"{k}={v}" for k, v in bad.items()) + f" time={elapsed:.1f}s")
    assert ok


def test_criterion_3_algebraic_identities(runs):
    cfg, _, ds, _, results, _ = runs
    rng = np.random.default_rng(3)
    resid_bad = 0
    for _ in range(500):
        a, b = rng.random((2, 32, 32))
        r = compute_residuals(a, b)
        resid_bad += not np.array_equal(r.d_pos - r.d_neg, a - b) or np.minimum(r.d_pos, r.d_neg).any()
    pq_gap, overlaps, n_reports = 0.0, 0, 0
    for method, rs in results.items():
        for s, r in zip(ds.test_set, rs):
            v = metrics.evaluate_sample(r, s)
            n_reports += 1
            if v["instance_dice"] is not None:
                pq_gap = max(pq_gap, abs(v["panoptic_dice"] - v["detection_f1"] * v["instance_dice"]))
            overlaps += bool(((r.lytic > 0) & (r.blastic > 0)).any())
    ok = resid_bad == 0 and pq_gap <= 1e-12 and overlaps == 0
    report(3, ok, f"residual violations={resid_bad}/500 max|PQ-RQ*SQ|={pq_gap:.1e} over {n_reports} "
                  f"reports, lytic/blastic overlaps={overlaps}")
    assert ok


def test_criterion_4_latent_fidelity(runs):
    _, _, ds, models, _, _ = runs
    m = models.latent
    ortho = float(np.max(np.abs(m.basis @ m.basis.T - np.eye(m.d))))
    rng = np.random.default_rng(4)
    zs = [encode(m, s.image) for s in ds.test_set]
    scale = float(np.std(zs))
    roundtrip = max(float(np.max(np.abs(encode(m, decode(m, z, clamp=False)) - z)))
                    for z in rng.normal(0, scale, size=(200, m.d)))
    ssims = [imaging.ssim(decode(m, z), s.image) for z, s in zip(zs, ds.test_set)]
    ok = ortho <= 1e-8 and roundtrip <= 1e-8 and np.mean(ssims) >= 0.90
    report(4, ok, f"orthonormality gap={ortho:.1e} encode(decode(z)) gap={roundtrip:.1e} "
                  f"held-out SSIM={np.mean(ssims):.4f}±{np.std(ssims, ddof=1):.4f}")
    assert ok


def test_criterion_5_benchmark(runs):
    cfg, _, _, _, _, elapsed = runs
    rep = json.loads((cfg.out / "reports" / "metrics.json").read_text())

    def mean(method, ph, metric):
        return rep[method][ph][metric]["mean"]

    ours = pipeline.METHOD
    checks = {
        "blastic F1>=0.80": mean(ours, "blastic", "detection_f1") >= 0.80,
        "blastic SQ>=0.70": mean(ours, "blastic", "instance_dice") >= 0.70,
        "lytic F1>=0.70": mean(ours, "lytic", "detection_f1") >= 0.70,
        "lytic SQ>=0.60": mean(ours, "lytic", "instance_dice") >= 0.60,
    }
    for ph in ("blastic", "lytic"):
        for b in pipeline.BASELINES:
            checks[f"{ph} PQ>{b}"] = mean(ours, ph, "panoptic_dice") > mean(b, ph, "panoptic_dice")
    checks["time<300s"] = elapsed < 300
    vals = " ".join(
        f"{ph}: F1={mean(ours, ph, 'detection_f1'):.3f} SQ={mean(ours, ph, 'instance_dice'):.3f} "
        f"PQ={mean(ours, ph, 'panoptic_dice'):.3f} (otsu {mean('otsu', ph, 'panoptic_dice'):.3f}, "
        f"ad {mean('ad', ph, 'panoptic_dice'):.3f});" for ph in ("blastic", "lytic"))
    failed = [k for k, v in checks.items() if not v]
    report(5, not failed, f"{vals} run={elapsed:.0f}s seed={cfg.seed}"
                          + (f" unmet: {', '.join(failed)}" if failed else ""))
    assert not failed


def test_criterion_6_delta_vs_probability(runs):
    cfg, *_ = runs
    rows = {r["phenotype"]: r for r in read_csv(cfg.out / "reports" / "ablation_delta_auc.csv")}
    bl = rows["blastic"]
    auc_d, auc_p = float(bl["auc_delta"]), float(bl["auc_p_hide"])
    ok = auc_d >= auc_p
    ly = rows["lytic"]
    report(6, ok, f"blastic AUC(delta)={auc_d:.4f} AUC(p_hide)={auc_p:.4f} "
                  f"(TP={bl['n_tp']}, FP={bl['n_fp']}); lytic {ly['auc_delta']} vs {ly['auc_p_hide']}")
    assert ok


def test_criterion_7_projection(runs):
    cfg, *_ = runs
    rows = read_csv(cfg.out / "reports" / "ablation_projection.csv")
    occ = np.mean([float(r["ssim_masked"]) for r in rows])
    prj = np.mean([float(r["ssim_masked_projected"]) for r in rows])
    hid = np.mean([float(r["ssim_hidden"]) for r in rows])
    hid_p = np.mean([float(r["ssim_hidden_projected"]) for r in rows])
    ok = prj > occ and len(rows) >= 50
    report(7, ok, f"n={len(rows)} SSIM occluded={occ:.4f} projected={prj:.4f} "
                  f"(healthy-fill variant {hid:.4f} -> {hid_p:.4f})")
    assert ok


def test_criterion_8_determinism(runs):
    cfg, second, *_ = runs
    a = {p.relative_to(cfg.out): p.read_bytes() for p in sorted(cfg.out.rglob("*.csv"))}
    b = {p.relative_to(second.out): p.read_bytes() for p in sorted(second.out.rglob("*.csv"))}
    differing = [str(k) for k in a if a[k] != b.get(k)]
    ok = bool(a) and a.keys() == b.keys() and not differing
    report(8, ok, f"{len(a)} CSV files compared, {len(differing)} differ "
                  f"(second run with {second.jobs} workers)")
    assert ok
