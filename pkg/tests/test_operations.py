import numpy as np
import pytest

from augsearch import operations as ops
from augsearch import reference
from augsearch.autodiff import Tensor
from augsearch.gradcheck import mu_jacobian


def _apply(kind, x, mu, seed=0):
    return ops.apply(kind, Tensor(x), Tensor(np.float32(mu)), np.random.default_rng(seed)).data


@pytest.fixture
def images():
    return np.random.default_rng(0).random((4, 3, 16, 16)).astype(np.float32)


def test_seventeen_operations():
    assert len(ops.OP_NAMES) == 17 and len(set(ops.OP_NAMES)) == 17


@pytest.mark.parametrize("kind", ["shear_x", "shear_y", "translate_x", "translate_y", "rotate"])
def test_affine_identity_at_half(kind, images):
    np.testing.assert_allclose(_apply(kind, images, 0.5), images, atol=1e-6)


def test_rotate_magnitude_map():
    spec = ops.SPEC_BY_NAME["rotate"]
    assert spec.magnitude_to_param(20 / 60 + 0.5) == pytest.approx(20.0)


def test_flip_twice_is_identity(images):
    np.testing.assert_array_equal(_apply("flip", _apply("flip", images, 0.3), 0.3), images)


def test_invert_values(images):
    np.testing.assert_array_equal(_apply("invert", images, 0.1), 1 - images)


def test_solarize_threshold_from_magnitude():
    x = np.array([0.2, 0.6, 0.9], dtype=np.float32).reshape(1, 1, 1, 3)
    # threshold = 1 - mu = 0.5
    np.testing.assert_allclose(_apply("solarize", x, 0.5).ravel(), [0.2, 0.4, 0.1], atol=1e-7)


@pytest.mark.parametrize("mu,bits", [(0.0, 1), (1.0, 8), (0.5, 5)])
def test_posterize_bits(mu, bits):
    assert ops.posterize_bits(mu) == bits


def test_cutout_fills_a_square(images):
    out = _apply("cutout", images, 0.5)
    side = ops.cutout_side(0.5, 16, 16)
    filled = (out == ops.CUTOUT_FILL).all(axis=1)
    assert side == 4
    assert (filled.sum(axis=(1, 2)) <= side * side).all() and filled.any()


@pytest.mark.parametrize("n", [2, 3, 10])
def test_pairing_is_a_derangement(n):
    for seed in range(20):
        perm = ops.pairing_permutation(np.random.default_rng(seed), n)
        assert sorted(perm) == list(range(n)) and not np.any(perm == np.arange(n))


@pytest.mark.parametrize("kind", ["solarize", "posterize", "cutout"])
def test_discrete_ops_have_unit_magnitude_gradient(kind, images):
    assert np.all(mu_jacobian(kind, images[:1, :, :4, :4], 0.4) == 1.0)


@pytest.mark.parametrize("kind", ops.OP_NAMES)
def test_outputs_stay_in_unit_range(kind, images):
    for mu in (0.0, 0.3, 1.0):
        out = _apply(kind, images, mu)
        assert out.shape == images.shape and out.dtype == np.float32
        assert out.min() >= 0 and out.max() <= 1


@pytest.mark.parametrize("kind", ["equalize", "auto_contrast", "contrast", "sharpness"])
def test_constant_images_survive(kind):
    x = np.full((2, 3, 8, 8), 0.4, dtype=np.float32)
    out = _apply(kind, x, 0.7)
    assert np.all(np.isfinite(out))


def test_reference_matches_on_odd_sizes():
    x = np.random.default_rng(1).random((2, 3, 7, 9)).astype(np.float32)
    for kind in ("rotate", "shear_y", "translate_x", "equalize", "sharpness"):
        np.testing.assert_allclose(_apply(kind, x, 0.8), reference.apply(kind, x, float(np.float32(0.8))),
                                   atol=1e-5)


def test_affine_many_equals_single_applications(images):
    kinds = ["rotate", "shear_x", "flip"]
    mus = [Tensor(np.float32(m)) for m in (0.7, 0.2, 0.5)]
    many = ops.apply_affine_many(kinds, Tensor(images), mus).data
    for g, (kind, mu) in enumerate(zip(kinds, mus)):
        np.testing.assert_allclose(many[g], ops.apply(kind, Tensor(images), mu).data, atol=1e-6)
