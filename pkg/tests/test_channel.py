import math

import numpy as np
import pytest

from dtcnsim.channel import (
    ChannelConfig,
    DegenerateFrameError,
    HopTag,
    SemanticFrame,
    awgn_transmit,
    hop_noise,
    hop_rng,
    hop_transmit,
    measure_empirical_snr,
    normalize_power,
)
from dtcnsim.numcore import ComputationTape, Tensor, gradients, sum_all


def random_frame(rows, cols, seed=0, hop=HopTag.DEVICE_TO_RELAY):
    symbols = np.random.default_rng(seed).normal(size=(rows, cols)) * 3.0
    return SemanticFrame(Tensor(symbols), hop)


def test_normalized_frames_have_unit_power_rows():
    frame = normalize_power(random_frame(50, 12))
    power = np.mean(frame.symbols.data**2, axis=1)
    np.testing.assert_allclose(power, 1.0, rtol=1e-12)
    assert frame.hop_tag is HopTag.DEVICE_TO_RELAY


@pytest.mark.parametrize("snr_db", [-10.0, -5.0, 0.0, 5.0, 10.0])
def test_empirical_snr_matches_configured_snr(snr_db):
    clean = normalize_power(random_frame(1000, 1000, seed=4))
    cfg = ChannelConfig(snr_db=snr_db, seed=9)
    noisy = awgn_transmit(clean, cfg, hop_rng(9, HopTag.DEVICE_TO_RELAY, 0))
    assert abs(measure_empirical_snr(clean, noisy) - snr_db) < 0.1


def test_noise_variance_follows_snr():
    assert ChannelConfig(snr_db=0.0).noise_variance == 1.0
    assert ChannelConfig(snr_db=10.0).noise_variance == pytest.approx(0.1)
    assert ChannelConfig(snr_db=math.inf).noise_variance == 0.0


def test_infinite_snr_leaves_frame_untouched():
    clean = normalize_power(random_frame(4, 6))
    noisy = awgn_transmit(clean, ChannelConfig(snr_db=math.inf))
    np.testing.assert_array_equal(noisy.symbols.data, clean.symbols.data)
    assert measure_empirical_snr(clean, noisy) == math.inf


def test_zero_rows_cannot_be_normalized():
    symbols = np.ones((4, 3))
    symbols[1] = 0.0
    symbols[3] = 0.0
    with pytest.raises(DegenerateFrameError) as excinfo:
        normalize_power(SemanticFrame(Tensor(symbols), HopTag.RELAY_TO_RECEIVER))
    assert excinfo.value.rows == [1, 3]


def test_hops_and_draws_have_independent_noise():
    a = hop_rng(5, HopTag.DEVICE_TO_RELAY, 0).standard_normal(8)
    b = hop_rng(5, HopTag.RELAY_TO_RECEIVER, 0).standard_normal(8)
    c = hop_rng(5, HopTag.DEVICE_TO_RELAY, 1).standard_normal(8)
    again = hop_rng(5, HopTag.DEVICE_TO_RELAY, 0).standard_normal(8)
    np.testing.assert_array_equal(a, again)
    assert not np.array_equal(a, b)
    assert not np.array_equal(a, c)


def test_sample_noise_depends_only_on_the_sample_id():
    noise = hop_noise(5, HopTag.RELAY_TO_RECEIVER, 2, np.array([7, 3, 7]), 6)
    np.testing.assert_array_equal(noise[0], noise[2])
    assert not np.array_equal(noise[0], noise[1])
    alone = hop_noise(5, HopTag.RELAY_TO_RECEIVER, 2, np.array([3]), 6)
    np.testing.assert_array_equal(alone[0], noise[1])


def test_hop_transmit_uses_per_sample_noise():
    clean = normalize_power(random_frame(3, 5, hop=HopTag.RELAY_TO_RECEIVER))
    cfg = ChannelConfig(snr_db=0.0, seed=4)
    ids = np.array([10, 11, 12])
    noisy = hop_transmit(clean, cfg, 1, ids)
    expected = clean.symbols.data + hop_noise(4, HopTag.RELAY_TO_RECEIVER, 1, ids, 5)
    np.testing.assert_allclose(noisy.symbols.data, expected, rtol=0, atol=1e-15)
    assert hop_transmit(clean, ChannelConfig(snr_db=math.inf), 1, ids) is clean


def test_gradient_passes_through_the_channel():
    symbols = Tensor(np.random.default_rng(2).normal(size=(3, 4)), requires_grad=True)
    with ComputationTape():
        frame = normalize_power(SemanticFrame(symbols, HopTag.DEVICE_TO_RELAY))
        noisy = awgn_transmit(frame, ChannelConfig(snr_db=5.0, seed=1))
        loss = sum_all(noisy.symbols * noisy.symbols)
        (grad,) = gradients(loss, [symbols])
    assert grad.shape == (3, 4)
    assert np.all(np.isfinite(grad))
    assert np.any(grad != 0.0)
