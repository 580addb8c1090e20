import numpy as np
import pytest

from hdrbracket.hdr import MergeConfig, TonemapParams, hat_weight, merge, reinhard_curve, tonemap_reinhard
from hdrbracket.imaging import (ExposureMeta, ExposureStack, LdrImage, gamma_crf, invert_crf,
                                synth_stack, synthetic_radiance)


def _stack(values, dts):
    return ExposureStack([LdrImage(np.full((2, 2, 3), v), ExposureMeta.from_delta_t(t))
                          for v, t in zip(values, dts)])


@pytest.mark.parametrize("method", ["debevec-weighted", "robertson-ml"])
def test_consistent_linear_pair(method):
    E = merge(_stack([0.2, 0.4], [1, 2]), None, MergeConfig(method))
    np.testing.assert_allclose(E.pixels, 0.2, rtol=1e-12)
    assert not E.fallback.any()


def test_all_saturated_falls_back_to_shortest():
    E = merge(_stack([1.0, 1.0], [1, 2]))
    np.testing.assert_allclose(E.pixels, 1.0)
    assert E.fallback.all()


def test_all_black_falls_back_to_longest():
    E = merge(_stack([0.0, 0.0], [1, 2]))
    assert E.fallback.all()
    np.testing.assert_allclose(E.pixels, 0.0)


def test_hat_weight():
    np.testing.assert_allclose(hat_weight(np.array([0, 0.25, 0.5, 1])), [0, 0.5, 1, 0])
    assert hat_weight(0.01, saturation_epsilon=0.05) == 0


def test_merge_callable_and_crf_agree():
    E = synthetic_radiance(16, 16, seed=2, stops=6)
    crf = gamma_crf()
    s = synth_stack(E, [-2, 0, 2], crf, 16)
    a = merge(s, crf).pixels
    b = merge(s, lambda z: invert_crf(crf, z)).pixels
    np.testing.assert_array_equal(a, b)


@pytest.mark.parametrize("method", ["debevec-weighted", "robertson-ml"])
def test_oracle_round_trip_16bit(method):
    E = synthetic_radiance(32, 32, seed=5)
    crf = gamma_crf()
    out = merge(synth_stack(E, list(range(-4, 5)), crf, 16), crf, MergeConfig(method))
    rel = np.abs(out.pixels - E.pixels) / E.pixels
    assert rel.max() <= 5e-3


def test_merge_needs_two():
    with pytest.raises(ValueError):
        merge(_stack([0.5], [1]))
    with pytest.raises(ValueError):
        MergeConfig("median")


def test_reinhard_scalar_cases():
    assert reinhard_curve(1.0) == pytest.approx(0.5, abs=1e-12)
    assert 0.18 / 1.18 == pytest.approx(0.1526, abs=1e-4)
    out = tonemap_reinhard(np.full((4, 4, 3), 0.7), TonemapParams(0.18, np.inf))
    np.testing.assert_allclose(out.pixels, 0.18 / 1.18, atol=1e-6)


def test_reinhard_white_point_maps_to_one():
    assert reinhard_curve(3.0, 3.0) == pytest.approx(1.0)


def test_tonemap_range_and_errors():
    E = synthetic_radiance(16, 16, seed=1, stops=10).pixels
    out = tonemap_reinhard(E).pixels
    assert out.min() >= 0 and out.max() <= 1
    with pytest.raises(ValueError):
        tonemap_reinhard(-E)
    with pytest.raises(ValueError):
        TonemapParams(key_a=0)
