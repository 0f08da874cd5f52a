import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from s3t.audio import Spectrogram
from s3t.preproc import bilinear_resize, fold_count, frequency_tile, preprocess, resize_to_model, time_fold


def spec(F, T, seed=0):
    return Spectrogram(np.random.default_rng(seed).random((F, T)).astype(np.float32), 1.0)


class TestFrequencyTile:
    def test_square_identity(self):
        s = spec(84, 84)
        assert np.array_equal(frequency_tile(s).values, s.values)

    def test_tiled_rows(self):
        s = spec(84, 200)
        out = frequency_tile(s).values
        assert out.shape == (200, 200)
        assert np.array_equal(out[100], s.values[16])

    def test_crop_only(self):
        s = spec(84, 50)
        out = frequency_tile(s).values
        assert out.shape == (50, 50)
        assert np.array_equal(out, s.values[:50])

    @settings(max_examples=40, deadline=None)
    @given(F=st.integers(1, 90), T=st.integers(1, 400))
    def test_periodic(self, F, T):
        out = frequency_tile(spec(F, T)).values
        assert out.shape == (T, T)
        i = np.arange(F, T)
        assert np.array_equal(out[i], out[i % F])


class TestTimeFold:
    def test_identity(self):
        s = spec(84, 84)
        assert np.array_equal(time_fold(s).values, s.values)

    def test_two_chunks(self):
        s = spec(84, 336)
        out = time_fold(s).values
        assert out.shape == (168, 168)
        assert np.array_equal(out[84:], s.values[:, 168:])
        assert np.array_equal(out[:84], s.values[:, :168])

    def test_padding(self):
        s = spec(84, 335)
        out = time_fold(s).values
        assert out.shape == (168, 168)
        assert np.array_equal(out[84:, :167], s.values[:, 168:])
        assert np.all(out[84:, 167] == 0)

    @settings(max_examples=60, deadline=None)
    @given(F=st.integers(1, 90), T=st.integers(1, 2000))
    def test_rearrangement_preserves_values(self, F, T):
        s = spec(F, T)
        out = time_fold(s).values
        n = fold_count(F, T)
        padded = np.zeros((F, out.shape[1] * n), np.float32)
        padded[:, :T] = s.values
        assert out.shape == (F * n, padded.shape[1] // n)
        assert np.array_equal(np.sort(out, axis=None), np.sort(padded, axis=None))
        assert math.fsum(out.ravel().tolist()) == math.fsum(padded.ravel().tolist())

    def test_exact_square_when_t_is_f_n_squared(self):
        out = time_fold(spec(10, 90)).values
        assert out.shape == (30, 30)


class TestResize:
    def test_identity_at_target(self):
        s = spec(256, 256)
        assert np.array_equal(resize_to_model(s, 256).values, s.values)

    @pytest.mark.parametrize("shape", [(1, 1), (84, 6), (300, 17)])
    def test_constant(self, shape):
        s = Spectrogram(np.full(shape, 0.3, np.float32), 1.0)
        out = resize_to_model(s, 64)
        assert out.values.shape == (64, 64)
        assert np.all(out.values == np.float32(0.3))

    def test_corners_align(self):
        out = bilinear_resize(np.array([[0.0, 1.0], [2.0, 3.0]]), 5)
        assert (out[0, 0], out[0, -1], out[-1, 0], out[-1, -1]) == (0, 1, 2, 3)
        # centre of a bilinear patch is the mean of the corners
        assert out[2, 2] == pytest.approx(1.5)

    def test_idempotent(self):
        once = resize_to_model(spec(84, 12), 64)
        twice = resize_to_model(Spectrogram(once.values, 1.0), 64)
        assert np.array_equal(once.values, twice.values)

    def test_rejects_empty(self):
        with pytest.raises(ValueError):
            bilinear_resize(np.zeros((0, 3)), 8)


def test_preprocess_tags_and_shapes():
    s = spec(84, 10)
    for kind in ("folding", "tiling"):
        mi = preprocess(s, kind, 256)
        assert mi.values.shape == (256, 256) and mi.values.dtype == np.float32
        assert mi.source_shape == (84, 10) and mi.preprocessor == kind
    with pytest.raises(ValueError):
        preprocess(s, "stretch")
