import math
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from slu_transformer.features import (LOG_FLOOR, CmvnStats, Waveform, cmvn_apply, cmvn_fit,
                                      cmvn_invert, featurize, filter_centers, frame_and_window,
                                      log_spectral, mel_filterbank, quantize_pcm16,
                                      read_feature_store, read_wav, stack_frames,
                                      to_float32_grid, write_feature_store, write_wav)


def tone(freq, seconds=0.5, amp=0.3, sr=16000):
    t = np.arange(int(seconds * sr)) / sr
    return Waveform(amp * np.sin(2 * np.pi * freq * t), sr)


# -- framing ----------------------------------------------------------------

def test_exactly_one_window_gives_one_frame():
    assert frame_and_window(Waveform(np.zeros(400))).shape == (1, 400)


def test_one_second_gives_98_frames():
    assert frame_and_window(Waveform(np.zeros(16000))).shape == (98, 400)


def test_constant_input_frame_is_the_hamming_window():
    frames = frame_and_window(Waveform(np.ones(400)))
    n = np.arange(400)
    hamming = 0.54 - 0.46 * np.cos(2 * np.pi * n / 399)
    np.testing.assert_allclose(frames[0], hamming, atol=1e-15)


def test_short_waveform_rejected():
    with pytest.raises(ValueError, match="shorter"):
        frame_and_window(Waveform(np.zeros(399)))


def test_waveform_must_be_mono():
    with pytest.raises(ValueError):
        Waveform(np.zeros((2, 400)))


@settings(max_examples=40, deadline=None)
@given(st.integers(400, 5000))
def test_frame_count_formula(n):
    assert frame_and_window(Waveform(np.zeros(n))).shape[0] == (n - 400) // 160 + 1


# -- log-mel ----------------------------------------------------------------

def test_zero_frame_is_all_floor():
    out = log_spectral(np.zeros((1, 400)))
    assert out.shape == (1, 80)
    assert np.all(out == math.log(LOG_FLOOR))


def test_filterbank_shape_and_nonnegative():
    fb = mel_filterbank()
    assert fb.shape == (80, 257)
    assert fb.min() >= 0 and fb.max() <= 1.0


@pytest.mark.parametrize("band", [10, 30, 55])
def test_tone_at_filter_center_dominates_distant_bands(band):
    center = filter_centers()[band]
    out = log_spectral(frame_and_window(tone(center))).mean(axis=0)
    distant = [b for b in range(80) if abs(b - band) >= 2]
    assert np.all(out[band] > out[distant])


def test_doubling_amplitude_adds_log4():
    w = tone(1000.0, amp=0.1)
    a = log_spectral(frame_and_window(w))
    b = log_spectral(frame_and_window(Waveform(2 * w.samples)))
    live = a > math.log(LOG_FLOOR) + 1.0
    assert live.sum() > 100
    np.testing.assert_allclose((b - a)[live], math.log(4), atol=1e-9)


# -- stacking ---------------------------------------------------------------

def test_stack_four_frames_is_one_row():
    f = np.arange(4 * 80, dtype=float).reshape(4, 80)
    out = stack_frames(f)
    assert out.shape == (1, 320)
    assert np.array_equal(out[0], f.ravel())


def test_stack_ten_frames_starts_at_0_3_6():
    f = np.repeat(np.arange(10.0)[:, None], 80, axis=1)
    out = stack_frames(f)
    assert out.shape == (3, 320)
    assert out[:, 0].tolist() == [0.0, 3.0, 6.0]


def test_stack_markers_land_in_place():
    T = 12
    f = np.arange(T * 80, dtype=float).reshape(T, 80)  # every value distinct
    out = stack_frames(f)
    for i in range(out.shape[0]):
        for k in range(4):
            assert np.array_equal(out[i, 80 * k:80 * (k + 1)], f[3 * i + k])


def test_stack_too_few_frames():
    with pytest.raises(ValueError):
        stack_frames(np.zeros((3, 80)))


@settings(max_examples=40, deadline=None)
@given(st.integers(4, 60))
def test_stack_output_length(T):
    assert stack_frames(np.zeros((T, 80))).shape == ((T - 4) // 3 + 1, 320)


def test_featurize_is_deterministic_and_320_wide():
    w = tone(700.0, seconds=0.7)
    a, b = featurize(w), featurize(Waveform(w.samples.copy()))
    assert a.shape[1] == 320
    assert np.array_equal(a, b)


# -- CMVN -------------------------------------------------------------------

def test_cmvn_fit_apply_gives_zero_mean_unit_variance():
    rng = np.random.default_rng(0)
    mats = [rng.normal(3.0, 2.0, size=(n, 5)) for n in (7, 11, 4)]
    stats = cmvn_fit(mats)
    pooled = np.concatenate([cmvn_apply(m, stats) for m in mats])
    assert np.abs(pooled.mean(axis=0)).max() < 1e-9
    assert np.abs(pooled.var(axis=0) - 1).max() < 1e-6


def test_cmvn_identity_stats():
    x = np.random.default_rng(1).normal(size=(6, 4))
    stats = CmvnStats(np.zeros(4), np.ones(4), 0)
    assert np.array_equal(cmvn_apply(x, stats), x)


def test_cmvn_hand_moments():
    # 2 frames of 1s and 3 frames of 6s: mean 4, E[x^2] = (2 + 108) / 5 = 22, var 6
    stats = cmvn_fit([np.ones((2, 3)), np.full((3, 3), 6.0)])
    np.testing.assert_allclose(stats.mean, 4.0, atol=1e-15)
    np.testing.assert_allclose(stats.variance, 6.0, atol=1e-14)
    assert stats.frame_count == 5


def test_cmvn_needs_two_frames():
    with pytest.raises(ValueError):
        cmvn_fit([])
    with pytest.raises(ValueError):
        cmvn_fit([np.zeros((1, 3))])


def test_cmvn_constant_dimension_is_floored():
    stats = cmvn_fit([np.zeros((4, 2))])
    assert np.all(np.isfinite(cmvn_apply(np.ones((1, 2)), stats)))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_cmvn_round_trip(seed):
    rng = np.random.default_rng(seed)
    mats = [rng.normal(rng.normal(size=6) * 10, rng.uniform(0.1, 5, size=6), size=(9, 6))]
    stats = cmvn_fit(mats)
    assert np.abs(cmvn_invert(cmvn_apply(mats[0], stats), stats) - mats[0]).max() < 1e-9


# -- files ------------------------------------------------------------------

def test_feature_store_round_trip(tmp_path):
    rng = np.random.default_rng(2)
    feats = {"a": rng.normal(size=(3, 320)), "ünï": rng.normal(size=(5, 320))}
    path = tmp_path / "f.sluf"
    write_feature_store(path, feats)
    back = read_feature_store(path)
    assert list(back) == ["a", "ünï"]
    for k in feats:
        assert np.array_equal(back[k], to_float32_grid(feats[k]))


def test_feature_store_layout(tmp_path):
    path = tmp_path / "f.sluf"
    write_feature_store(path, {"x": np.array([[1.5, -2.0]])})
    raw = path.read_bytes()
    assert raw[:4] == b"SLUF"
    assert struct.unpack("<IIcII", raw[4:21]) == (1, 1, b"x", 1, 2)
    assert struct.unpack("<2f", raw[21:]) == (1.5, -2.0)


def test_feature_store_rejects_wrong_magic(tmp_path):
    path = tmp_path / "bad"
    path.write_bytes(b"NOPE\x01\x00\x00\x00")
    with pytest.raises(ValueError):
        read_feature_store(path)


def test_cmvn_file_round_trip(tmp_path):
    stats = CmvnStats(np.array([0.1, -3.0]), np.array([2.0, 1e-3]), 7)
    stats.save(tmp_path / "c.sluc")
    raw = (tmp_path / "c.sluc").read_bytes()
    assert raw[:8] == b"SLUC" + struct.pack("<I", 2) and len(raw) == 8 + 32
    back = CmvnStats.load(tmp_path / "c.sluc")
    assert np.array_equal(back.mean, stats.mean) and np.array_equal(back.variance, stats.variance)


def test_wav_round_trip_is_exact_on_pcm_grid(tmp_path):
    w = Waveform(quantize_pcm16(tone(440.0).samples))
    write_wav(tmp_path / "t.wav", w)
    back = read_wav(tmp_path / "t.wav")
    assert np.array_equal(back.samples, w.samples)
    assert np.array_equal(featurize(back), featurize(w))


def test_wav_wrong_rate_is_an_error(tmp_path):
    write_wav(tmp_path / "t.wav", Waveform(np.zeros(800), 8000))
    with pytest.raises(ValueError, match="8000"):
        read_wav(tmp_path / "t.wav")
