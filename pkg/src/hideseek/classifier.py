"""Latent-space logistic regression and the closed-form healthy edit."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import expit, log_expit, logit

HEALTHY, MALIGNANT = "healthy", "malignant"
DEFAULT_P_TARGET = 1e-4


@dataclass(frozen=True)
class TrainConfig:
    l2: float = 1e-3
    max_iter: int = 3000
    tol: float = 1e-6
    step0: float = 1.0
    shrink: float = 0.5
    armijo: float = 1e-4

    def __post_init__(self):
        if self.l2 < 0:
            raise ValueError("l2 must be >= 0")
        if self.tol <= 0:
            raise ValueError("tol must be > 0")


@dataclass(frozen=True)
class LinearClassifier:
    normal: np.ndarray
    bias: float
    l2: float = 0.0
    p_target_default: float = DEFAULT_P_TARGET

    def __post_init__(self):
        n = np.asarray(self.normal, dtype=np.float64)
        if n.ndim != 1 or not np.all(np.isfinite(n)) or not np.isfinite(self.bias):
            raise ValueError("classifier parameters must be finite")
        if np.linalg.norm(n) <= 1e-12:
            raise ValueError("classifier normal vector is degenerate")
        object.__setattr__(self, "normal", n)
        object.__setattr__(self, "bias", float(self.bias))

    @property
    def d(self) -> int:
        return self.normal.shape[0]

    def logit(self, z) -> float:
        z = np.asarray(z, dtype=np.float64)
        if z.shape != self.normal.shape:
            raise ValueError(f"latent dimension {z.shape} does not match classifier ({self.d},)")
        return float(self.normal @ z + self.bias)


def _loss_grad(w, b, Z, y, l2):
    t = Z @ w + b
    # y log s(t) + (1-y) log s(-t), computed stably
    nll = -np.mean(y * log_expit(t) + (1 - y) * log_expit(-t))
    loss = nll + 0.5 * l2 * (w @ w)
    r = (expit(t) - y) / len(y)
    return loss, Z.T @ r + l2 * w, r.sum()


def train_classifier(latents, labels, cfg: TrainConfig | None = None) -> LinearClassifier:
    """L2-regularized logistic regression by full-batch gradient descent.

    Starts from zero, uses Armijo backtracking, and stops when the gradient
    norm drops below ``cfg.tol`` or after ``cfg.max_iter`` iterations. The bias
    is not penalized.
    """
    cfg = cfg or TrainConfig()
    Z = np.asarray(latents, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if Z.ndim != 2 or Z.shape[0] != y.shape[0]:
        raise ValueError("latents must be (n, d) with one label per row")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("labels must be 0 (healthy) or 1 (malignant)")
    if y.min() == y.max():
        raise ValueError("degenerate labels")

    w = np.zeros(Z.shape[1])
    b = 0.0
    loss, gw, gb = _loss_grad(w, b, Z, y, cfg.l2)
    step = cfg.step0
    for _ in range(cfg.max_iter):
        gnorm2 = gw @ gw + gb * gb
        if np.sqrt(gnorm2) <= cfg.tol:
            break
        while True:
            w_new, b_new = w - step * gw, b - step * gb
            loss_new, gw_new, gb_new = _loss_grad(w_new, b_new, Z, y, cfg.l2)
            if loss_new <= loss - cfg.armijo * step * gnorm2 or step < 1e-16:
                break
            step *= cfg.shrink
        w, b, loss, gw, gb = w_new, b_new, loss_new, gw_new, gb_new
        step = min(step * 2.0, cfg.step0 * 1e6)
    return LinearClassifier(normal=w, bias=b, l2=cfg.l2)


def probability(clf: LinearClassifier, z) -> float:
    """Malignancy probability ``sigmoid(n . z + b)``."""
    return float(expit(clf.logit(z)))


def signed_distance(clf: LinearClassifier, z) -> float:
    return clf.logit(z) / float(np.linalg.norm(clf.normal))


def healthy_edit(clf: LinearClassifier, z, p_target: float = DEFAULT_P_TARGET) -> np.ndarray:
    """Move ``z`` along the unit normal until the probability equals ``p_target``.

    The target distance is ``logit(p_target) / |n|``, which makes the edited
    probability hit ``p_target`` exactly rather than approximately.
    """
    if not 0.0 < p_target < 1.0:
        raise ValueError(f"p_target must lie in (0, 1), got {p_target}")
    z = np.asarray(z, dtype=np.float64)
    norm = float(np.linalg.norm(clf.normal))
    d_target = float(logit(p_target)) / norm
    return z - (signed_distance(clf, z) - d_target) * clf.normal / norm


def malignancy_gate(clf: LinearClassifier, z, cutoff: float = 0.5) -> str:
    """``"malignant"`` iff the probability reaches ``cutoff`` (inclusive)."""
    if cutoff == 0.5:
        # sign test: immune to sigmoid rounding at the boundary
        return MALIGNANT if clf.logit(z) >= 0.0 else HEALTHY
    return MALIGNANT if probability(clf, z) >= cutoff else HEALTHY


def classifier_to_dict(clf: LinearClassifier) -> dict:
    return {
        "d": clf.d,
        "n": clf.normal.tolist(),
        "b": clf.bias,
        "lambda": clf.l2,
        "p_target_default": clf.p_target_default,
    }


def classifier_from_dict(obj: dict) -> LinearClassifier:
    n = np.asarray(obj["n"], dtype=np.float64)
    if n.shape != (int(obj["d"]),):
        raise ValueError("classifier JSON: length of n does not match d")
    return LinearClassifier(
        normal=n,
        bias=obj["b"],
        l2=obj.get("lambda", 0.0),
        p_target_default=obj.get("p_target_default", DEFAULT_P_TARGET),
    )


def save_classifier(clf: LinearClassifier, path) -> None:
    Path(path).write_text(json.dumps(classifier_to_dict(clf), indent=2) + "\n")


def load_classifier(path) -> LinearClassifier:
    return classifier_from_dict(json.loads(Path(path).read_text()))
