import numpy as np
import pytest
from hypothesis import given, strategies as st

from hideseek import latent
from hideseek.latent import decode, encode, fit_latent_model, project


def random_corpus(n=32, shape=(6, 7), seed=0):
    rng = np.random.default_rng(seed)
    return [rng.random(shape) for _ in range(n)]


def test_basis_matches_dense_eigendecomposition():
    corpus = random_corpus()
    m = fit_latent_model(corpus, 8)
    X = np.stack([c.ravel() for c in corpus])
    Xc = X - X.mean(axis=0)
    C = Xc.T @ Xc
    evals, evecs = np.linalg.eigh(C)
    top = evals[::-1][:8]
    assert np.allclose(m.basis @ m.basis.T, np.eye(8), atol=1e-8)
    for v, lam in zip(m.basis, top):
        assert np.linalg.norm(C @ v - lam * v) <= 1e-6
    # same subspace as the oracle's leading eigenvectors
    ref = evecs[:, ::-1][:, :8]
    assert np.allclose(np.abs(np.linalg.svd(m.basis @ ref, compute_uv=False)), 1.0, atol=1e-8)


def test_pixel_count_below_corpus_size_uses_direct_path():
    corpus = random_corpus(n=80, shape=(4, 5))
    m = fit_latent_model(corpus, 6)
    assert np.allclose(m.basis @ m.basis.T, np.eye(6), atol=1e-10)


def test_sign_convention():
    m = fit_latent_model(random_corpus(), 8)
    idx = np.argmax(np.abs(m.basis), axis=1)
    assert np.all(m.basis[np.arange(8), idx] > 0)


def test_deterministic_given_corpus_order():
    a = fit_latent_model(random_corpus(), 5)
    b = fit_latent_model(random_corpus(), 5)
    assert np.array_equal(a.basis, b.basis)


def test_identical_images_are_rank_deficient():
    with pytest.raises(ValueError, match="insufficient rank"):
        fit_latent_model([np.full((4, 4), 0.5)] * 10, 2)


@pytest.mark.parametrize("d", [1, 32, 40])
def test_d_out_of_range(d):
    with pytest.raises(ValueError):
        fit_latent_model(random_corpus(), d)


def test_two_direction_corpus_reconstructs_exactly():
    rng = np.random.default_rng(4)
    base = np.full((5, 5), 0.5)
    u, v = rng.normal(size=(2, 5, 5)) * 0.05
    corpus = [base + a * u + b * v for a, b in rng.uniform(-1, 1, (12, 2))]
    m = fit_latent_model(corpus, 2)
    for img in corpus:
        assert np.allclose(project(m, img)[0], img, atol=1e-8)


def test_encode_decode_identity_on_latents():
    m = fit_latent_model(random_corpus(), 8)
    rng = np.random.default_rng(1)
    for _ in range(100):
        z = rng.normal(size=8)
        assert np.allclose(encode(m, decode(m, z, clamp=False)), z, atol=1e-8)


def test_projection_is_idempotent():
    m = fit_latent_model(random_corpus(), 8)
    img = np.random.default_rng(9).random((6, 7)) * 0.2 + 0.4
    p1, _ = project(m, img)
    p2, _ = project(m, p1)
    assert np.allclose(p1, p2, atol=1e-10)


def test_shape_and_dimension_errors():
    m = fit_latent_model(random_corpus(), 4)
    with pytest.raises(ValueError):
        encode(m, np.zeros((3, 3)))
    with pytest.raises(ValueError):
        decode(m, np.zeros(5))


def test_decode_clamps_by_default():
    m = fit_latent_model(random_corpus(), 4)
    z = np.full(4, 1e3)
    assert decode(m, z).max() <= 1.0
    assert decode(m, z, clamp=False).max() > 1.0


def test_save_load_round_trip(tmp_path):
    m = fit_latent_model(random_corpus(), 5)
    latent.save_latent_model(m, tmp_path / "m.hslm")
    back = latent.load_latent_model(tmp_path / "m.hslm")
    assert np.array_equal(back.basis, m.basis)
    assert np.array_equal(back.mean_image, m.mean_image)
    (tmp_path / "bad").write_bytes(b"XXXX" + bytes(32))
    with pytest.raises(ValueError):
        latent.load_latent_model(tmp_path / "bad")


@given(st.integers(0, 2**32 - 1), st.integers(2, 10))
def test_basis_orthonormal_for_random_corpora(seed, d):
    m = fit_latent_model(random_corpus(n=16, shape=(5, 5), seed=seed), d)
    assert np.allclose(m.basis @ m.basis.T, np.eye(d), atol=1e-8)
