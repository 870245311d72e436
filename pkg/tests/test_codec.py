import numpy as np
import pytest

from defectsynth.codec import MU, SIGMA, LatentSpec, decode, downsample_mask, encode
from defectsynth.errors import ShapeError
from defectsynth.textures import gen_normal


SPEC = LatentSpec(factor=4)


class TestEncodeDecode:
    def test_shape_arithmetic(self):
        img = np.zeros((32, 32, 3))
        assert encode(img, SPEC).shape == (8, 8, 48)

    def test_roundtrip_bitwise(self):
        img = gen_normal("noise", seed=1, size=32)
        assert decode(encode(img, SPEC), SPEC).tobytes() == img.tobytes()

    def test_constant_image_maps_to_affine_value(self):
        v = 0.625
        img = np.full((32, 32, 3), v)
        z = encode(img, SPEC)
        np.testing.assert_array_equal(z, np.full((8, 8, 48), (v - MU) / SIGMA))

    def test_zero_latent_decodes_to_mu(self):
        z = np.zeros((8, 8, 48))
        np.testing.assert_array_equal(decode(z, SPEC), np.full((32, 32, 3), MU))

    def test_latent_roundtrip_bitwise(self):
        rng = np.random.default_rng(2)
        z = rng.uniform(-2.0, 2.0, size=(8, 8, 48))
        assert encode(decode(z, SPEC), SPEC).tobytes() == z.tobytes()

    def test_100_random_roundtrips_exact(self):
        for seed in range(100):
            rng = np.random.default_rng(seed)
            img = rng.random((32, 32, 3))
            assert decode(encode(img, SPEC), SPEC).tobytes() == img.tobytes()

    def test_divisibility_error(self):
        with pytest.raises(ShapeError):
            encode(np.zeros((30, 30, 3)), SPEC)

    def test_spatial_block_layout(self):
        # each latent position holds exactly its f x f pixel block
        img = np.arange(32 * 32 * 3, dtype=np.float64).reshape(32, 32, 3) / (32 * 32 * 3)
        z = encode(img, SPEC)
        block = z[2, 3].reshape(4, 4, 3) * SIGMA + MU
        np.testing.assert_allclose(block, img[8:12, 12:16])


class TestMaskPooling:
    def test_all_zero(self):
        assert downsample_mask(np.zeros((32, 32), dtype=np.uint8), SPEC).sum() == 0

    def test_single_pixel_sets_single_patch(self):
        m = np.zeros((32, 32), dtype=np.uint8)
        m[9, 18] = 1
        patch = downsample_mask(m, SPEC)
        assert patch.sum() == 1
        assert patch[9 // 4, 18 // 4] == 1

    def test_full_mask(self):
        patch = downsample_mask(np.ones((32, 32), dtype=np.uint8), SPEC)
        assert patch.all()

    def test_monotone_in_pixels(self):
        rng = np.random.default_rng(5)
        m = (rng.random((32, 32)) > 0.9).astype(np.uint8)
        p1 = downsample_mask(m, SPEC)
        m2 = m.copy()
        m2[rng.integers(0, 32, 10), rng.integers(0, 32, 10)] = 1
        p2 = downsample_mask(m2, SPEC)
        assert np.all(p2 >= p1)
