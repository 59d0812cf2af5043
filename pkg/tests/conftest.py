from __future__ import annotations

from dataclasses import replace

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from hideseek import classifier, latent, phantom, pipeline

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

# acceptance verdicts, printed together at the end of the session
ACCEPTANCE: dict[str, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE, key=lambda k: int(k.split()[0][2:])):
        terminalreporter.write_line(ACCEPTANCE[key])


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def small_config(out, **kw) -> pipeline.ExperimentConfig:
    """A run small enough for unit tests (a few seconds)."""
    cfg = replace(pipeline.ExperimentConfig(), seed=7, counts=(120, 64, 9), latent_d=10,
                  phantom=phantom.easy_config(), out=out)
    return replace(cfg, **kw)


@pytest.fixture(scope="session")
def small_run(tmp_path_factory):
    """One complete small run shared by the pipeline tests."""
    out = tmp_path_factory.mktemp("small_run")
    cfg = small_config(out)
    manifest = pipeline.run_experiment(cfg)
    return cfg, manifest


@pytest.fixture(scope="session")
def trained():
    """Easy-regime latent model and classifier fitted on a mid-size dataset."""
    ds = phantom.generate_dataset(3, phantom.easy_config(), (400, 600, 8))
    model = latent.fit_latent_model([s.image for s in ds.generative_corpus], 24)
    Z = np.array([latent.encode(model, s.image) for s in ds.classifier_subset])
    y = np.array([s.label == "malignant" for s in ds.classifier_subset], dtype=float)
    clf = classifier.train_classifier(Z, y, classifier.TrainConfig(l2=3e-5))
    healthy = latent.fit_latent_model([s.image for s in ds.generative_corpus if s.label == "healthy"], 24)
    return model, clf, healthy, ds
