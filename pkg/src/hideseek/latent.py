"""Linear (principal-component) stand-in for a generative autoencoder.

The model maps an image to a ``d``-dimensional latent code by projecting the
centered image onto ``d`` orthonormal principal directions, and back by linear
synthesis. ``project`` is encode followed by decode: the closest image the
model can represent.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAGIC = b"HSLM"
VERSION = 1
MIN_EIGENVALUE = 1e-12


@dataclass(frozen=True)
class LatentModel:
    mean_image: np.ndarray  # (height, width)
    basis: np.ndarray  # (d, height * width), orthonormal rows

    @property
    def d(self) -> int:
        return self.basis.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.mean_image.shape

    def encode(self, img) -> np.ndarray:
        return encode(self, img)

    def decode(self, z, clamp: bool = True) -> np.ndarray:
        return decode(self, z, clamp=clamp)

    def project(self, img) -> tuple[np.ndarray, np.ndarray]:
        return project(self, img)


def fit_latent_model(corpus, d: int) -> LatentModel:
    """Fit mean image and top-``d`` principal directions of ``corpus``.

    Uses the Gram-matrix eigenproblem when there are fewer images than pixels.
    Each basis row is sign-normalized so its largest-magnitude entry is positive.
    """
    X = np.stack([np.asarray(im, dtype=np.float64) for im in corpus])
    if X.ndim != 3:
        raise ValueError("corpus must be a sequence of equally shaped 2D images")
    n, h, w = X.shape
    if not 2 <= d < n:
        raise ValueError(f"d must satisfy 2 <= d < corpus size ({n}), got {d}")
    mean = X.mean(axis=0)
    Xc = (X - mean).reshape(n, h * w)

    if h * w > n:
        evals, evecs = np.linalg.eigh(Xc @ Xc.T)
        order = np.argsort(evals)[::-1][:d]
        evals, evecs = evals[order], evecs[:, order]
        if evals[-1] < MIN_EIGENVALUE:
            raise ValueError("insufficient rank")
        basis = (Xc.T @ evecs / np.sqrt(evals)).T
        # one Gram-Schmidt pass to remove round-off from the lift
        q, r = np.linalg.qr(basis.T)
        basis = (q * np.sign(np.diag(r))).T
    else:
        evals, evecs = np.linalg.eigh(Xc.T @ Xc)
        order = np.argsort(evals)[::-1][:d]
        evals, evecs = evals[order], evecs[:, order]
        if evals[-1] < MIN_EIGENVALUE:
            raise ValueError("insufficient rank")
        basis = evecs.T.copy()

    idx = np.argmax(np.abs(basis), axis=1)
    signs = np.sign(basis[np.arange(d), idx])
    basis *= signs[:, None]
    return LatentModel(mean_image=mean, basis=np.ascontiguousarray(basis))


def _check_image(m: LatentModel, img) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.shape != m.shape:
        raise ValueError(f"image shape {img.shape} does not match model shape {m.shape}")
    return img


def encode(m: LatentModel, img) -> np.ndarray:
    img = _check_image(m, img)
    return m.basis @ (img - m.mean_image).ravel()


def decode(m: LatentModel, z, clamp: bool = True) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    if z.shape != (m.d,):
        raise ValueError(f"latent must have shape ({m.d},), got {z.shape}")
    img = m.mean_image + (z @ m.basis).reshape(m.shape)
    return np.clip(img, 0.0, 1.0) if clamp else img


def project(m: LatentModel, img) -> tuple[np.ndarray, np.ndarray]:
    """Manifold projection: ``(decode(encode(img)), encode(img))``."""
    z = encode(m, img)
    return decode(m, z), z


def save_latent_model(m: LatentModel, path) -> None:
    h, w = m.shape
    header = MAGIC + struct.pack("<IIII", VERSION, m.d, w, h)
    body = m.mean_image.astype("<f8").tobytes() + m.basis.astype("<f8").tobytes()
    Path(path).write_bytes(header + body)


def load_latent_model(path) -> LatentModel:
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise ValueError("not a latent model file")
    version, d, w, h = struct.unpack_from("<IIII", buf, 4)
    if version != VERSION:
        raise ValueError(f"unsupported latent model version {version}")
    off = 4 + 16
    mean = np.frombuffer(buf, "<f8", count=h * w, offset=off).reshape(h, w)
    basis = np.frombuffer(buf, "<f8", count=d * h * w, offset=off + 8 * h * w).reshape(d, h * w)
    return LatentModel(mean_image=mean.astype(np.float64), basis=basis.astype(np.float64))
