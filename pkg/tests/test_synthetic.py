import numpy as np
import pytest

from dquant.synthetic import SyntheticSpec, cross_channel_correlation, generate_synthetic, synthetic_images


def mean_abs_offdiag(c):
    return np.abs(c[~np.eye(len(c), dtype=bool)]).mean()


def test_redundancy_is_monotone():
    vals = [mean_abs_offdiag(cross_channel_correlation(
        generate_synthetic(SyntheticSpec(shape=(32, 6, 6), channel_redundancy=r, count=40), 0)))
        for r in (0.0, 0.5, 0.9)]
    assert vals[0] < vals[1] < vals[2]


def test_independent_channels_uncorrelated():
    # 4 x 50 x 50 = 10^4 samples per channel
    ts = generate_synthetic(SyntheticSpec(shape=(8, 50, 50), channel_redundancy=0.0, count=4), 1)
    assert np.abs(cross_channel_correlation(ts)[~np.eye(8, dtype=bool)]).max() < 0.05


def test_full_redundancy_without_noise_duplicates():
    ts = generate_synthetic(SyntheticSpec(shape=(5, 4, 4), channel_redundancy=1.0, noise_scale=0.0,
                                          scale_spread=0.0, count=3), 2)
    for t in ts:
        assert all(np.array_equal(t[0], t[c]) for c in range(5))
    assert np.allclose(cross_channel_correlation(ts), 1.0)


def test_correlation_length_changes_spatial_structure():
    def lag1(corr):
        t = generate_synthetic(SyntheticSpec(shape=(4, 32, 32), correlation_length=corr, count=4), 3)
        x = np.stack(t)
        return np.corrcoef(x[..., :-1].ravel(), x[..., 1:].ravel())[0, 1]

    assert abs(lag1(0.0)) < 0.05 and lag1(2.0) > 0.5


def test_determinism_and_validation():
    spec = SyntheticSpec(shape=(4, 3), count=5)
    a, b = generate_synthetic(spec, 7), generate_synthetic(spec, 7)
    assert all(x.tobytes() == y.tobytes() for x, y in zip(a, b))
    for bad in [dict(shape=(1, 4)), dict(shape=(4, 0)), dict(channel_redundancy=1.5), dict(count=0),
                dict(noise_scale=-1.0)]:
        with pytest.raises(ValueError):
            SyntheticSpec(**bad)


def test_synthetic_images():
    im = synthetic_images(5, 16, 3, seed=0)
    assert im.shape == (5, 3, 16, 16) and im.dtype == np.uint8
    assert np.array_equal(im, synthetic_images(5, 16, 3, seed=0))
    assert im.std() > 10
    assert not np.array_equal(im, synthetic_images(5, 16, 3, seed=1))
