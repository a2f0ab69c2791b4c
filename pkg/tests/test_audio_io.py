"""PCM codecs, resampling, STFT/ISTFT streaming, and round trips."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from earshot.audio_io import (AudioFrame, IstftSynthesizer, RawDecoder,
                              Resampler, SpectralFrame, StftAnalyzer,
                              StreamGapError, float_to_pcm, istft_array,
                              pcm_to_float, stft_array)
from earshot.config import RawInputConfig


# ---------------------------------------------------------------------------
# PCM codec
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("bits", [8, 16, 24, 32])
def test_pcm_round_trip_within_one_lsb(bits):
    rng = np.random.default_rng(bits)
    x = rng.uniform(-1.0, 1.0 - 2.0 ** (1 - bits), size=(3, 997))
    data = float_to_pcm(x, bits)
    y = pcm_to_float(data, bits, 3)
    lsb = 2.0 ** (1 - bits)
    assert np.abs(x - y).max() <= lsb


@pytest.mark.parametrize("bits", [8, 16, 24, 32])
def test_pcm_full_scale_clipping(bits):
    x = np.array([[1.5, -1.5, 1.0, -1.0]])
    y = pcm_to_float(float_to_pcm(x, bits), bits, 1)
    assert y.max() <= 1.0 and y.min() >= -1.0
    lsb = 2.0 ** (1 - bits)
    assert y[0, 0] == pytest.approx(1.0, abs=lsb)
    assert y[0, 1] == pytest.approx(-1.0, abs=lsb)


def test_pcm_rejects_unknown_bit_depth():
    with pytest.raises(ValueError):
        float_to_pcm(np.zeros((1, 4)), 12)


def test_pcm_discards_trailing_partial_frame():
    data = float_to_pcm(np.zeros((2, 5)), 16)
    y = pcm_to_float(data + b"\x01", 16, 2)
    assert y.shape == (2, 5)


@given(st.integers(min_value=0, max_value=2**16 - 1))
@settings(max_examples=64, deadline=None)
def test_pcm16_bit_exact_integers(value):
    signed = value - 2**15
    x = np.array([[signed / 2.0**15]])
    data = float_to_pcm(x, 16)
    assert int.from_bytes(data, "little", signed=True) == signed


# ---------------------------------------------------------------------------
# RawDecoder
# ---------------------------------------------------------------------------

def _decoder(n_channels=3, hop=256):
    raw = RawInputConfig(sample_rate_hz=16000, bits_per_sample=16,
                         n_channels=n_channels, hop_size_samples=hop)
    return RawDecoder(raw, list(range(n_channels)))


def test_decoder_emits_hop_sized_frames():
    dec = _decoder()
    rng = np.random.default_rng(0)
    x = rng.uniform(-1, 1, size=(3, 600))
    frames = dec.push(float_to_pcm(x, 16))
    assert [f.frame_index for f in frames] == [0, 1]
    assert all(f.samples.shape == (3, 256) for f in frames)


def test_decoder_handles_byte_dribble():
    dec = _decoder()
    rng = np.random.default_rng(1)
    x = rng.uniform(-1, 1, size=(3, 512))
    data = float_to_pcm(x, 16)
    frames = []
    for i in range(0, len(data), 7):        # deliberately unaligned pushes
        frames.extend(dec.push(data[i:i + 7]))
    assert len(frames) == 2
    joined = np.concatenate([f.samples for f in frames], axis=1)
    assert np.abs(joined - x[:, :512]).max() <= 2.0 ** -15


def test_decoder_mapping_selects_and_orders():
    raw = RawInputConfig(sample_rate_hz=16000, bits_per_sample=16,
                         n_channels=4, hop_size_samples=4)
    dec = RawDecoder(raw, [2, 0])
    x = np.arange(16, dtype=float).reshape(4, 4) / 32.0
    frames = dec.push(float_to_pcm(x, 16))
    assert frames[0].samples.shape == (2, 4)
    assert np.allclose(frames[0].samples[0], x[2], atol=2.0 ** -15)
    assert np.allclose(frames[0].samples[1], x[0], atol=2.0 ** -15)


def test_decoder_counts_consumed_bytes():
    dec = _decoder()                      # hop bytes = 256 * 3 * 2 = 1536
    dec.push(b"\x00" * 100)
    assert dec.bytes_consumed == 0        # partial hop still pending
    dec.push(b"\x00" * 1536)
    assert dec.bytes_consumed == 1536


# ---------------------------------------------------------------------------
# Resampler
# ---------------------------------------------------------------------------

def test_resampler_identity_when_rates_match():
    rs = Resampler(16000, 16000, 2)
    x = np.random.default_rng(2).standard_normal((2, 333))
    out = np.concatenate([rs.push(x), rs.finish()], axis=1)
    assert np.allclose(out, x)


def test_resampler_preserves_tone():
    fs_in, fs_out, f0 = 44100, 16000, 440.0
    t_in = np.arange(fs_in) / fs_in
    x = np.sin(2 * np.pi * f0 * t_in)[None, :]
    rs = Resampler(fs_in, fs_out, 1)
    y = np.concatenate([rs.push(x), rs.finish()], axis=1)[0]
    n = int(0.8 * fs_out)
    mid = y[fs_out // 10: fs_out // 10 + n]
    t_out = (np.arange(mid.size) + fs_out // 10) / fs_out
    ref = np.sin(2 * np.pi * f0 * t_out)
    # group-delay aligned: direct sample-domain comparison
    assert np.sqrt(np.mean((mid - ref) ** 2)) < 0.01


def test_resampler_streaming_matches_one_shot():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((2, 10000))
    one = Resampler(48000, 16000, 2)
    ref = np.concatenate([one.push(x), one.finish()], axis=1)
    two = Resampler(48000, 16000, 2)
    parts = [two.push(x[:, i:i + 777]) for i in range(0, 10000, 777)]
    parts.append(two.finish())
    out = np.concatenate(parts, axis=1)
    assert out.shape == ref.shape
    assert np.allclose(out, ref, atol=1e-12)


# ---------------------------------------------------------------------------
# STFT / ISTFT
# ---------------------------------------------------------------------------

def test_stft_istft_round_trip_rms():
    rng = np.random.default_rng(4)
    x = rng.standard_normal((2, 16000)) * 0.3
    frames = stft_array(x, 512, 256)
    y = istft_array(frames, 512, 256)
    n = min(x.shape[1], y.shape[1])
    # sample 0 has zero window weight (periodic Hann) and is unrecoverable
    err = np.sqrt(np.mean((x[:, 1:n] - y[:, 1:n]) ** 2))
    assert err <= 1e-6


def test_streaming_stft_matches_array_form():
    rng = np.random.default_rng(5)
    x = rng.standard_normal((2, 4096)) * 0.2
    ref = stft_array(x, 512, 256)
    an = StftAnalyzer(512, 256, 2, 16000)
    got = []
    for i in range(0, 4096, 256):
        frame = AudioFrame(samples=x[:, i:i + 256], frame_index=i // 256, fs_hz=16000)
        got.extend(an.push(frame))
    assert len(got) == ref.shape[0]
    stacked = np.stack([g.bins for g in got])
    assert np.allclose(stacked, ref, atol=1e-12)


def test_streaming_istft_matches_array_form():
    rng = np.random.default_rng(6)
    x = rng.standard_normal((1, 4096)) * 0.2
    frames = stft_array(x, 512, 256)
    ref = istft_array(frames, 512, 256)
    syn = IstftSynthesizer(512, 256, 16000)
    chunks = []
    for k in range(frames.shape[0]):
        sf = SpectralFrame(bins=frames[k], frame_index=k, fs_hz=16000, frame_size=512)
        chunks.extend(a.samples for a in syn.push(sf))
    chunks.extend(a.samples for a in syn.finish())
    out = np.concatenate(chunks, axis=1)
    n = min(out.shape[1], ref.shape[1])
    assert np.allclose(out[:, :n], ref[:, :n], atol=1e-9)


def test_istft_gap_detection():
    syn = IstftSynthesizer(512, 256, 16000)
    bins = np.zeros((1, 257), complex)
    syn.push(SpectralFrame(bins=bins, frame_index=0, fs_hz=16000, frame_size=512))
    with pytest.raises(StreamGapError):
        syn.push(SpectralFrame(bins=bins, frame_index=2, fs_hz=16000, frame_size=512))


def test_stft_tone_lands_in_expected_bin():
    fs, n = 16000, 512
    k0 = 40                                   # bin-centered tone
    t = np.arange(fs) / fs
    x = np.cos(2 * np.pi * (k0 * fs / n) * t)[None, :]
    frames = stft_array(x, n, 256)
    mag = np.abs(frames[4, 0])
    assert mag.argmax() == k0
