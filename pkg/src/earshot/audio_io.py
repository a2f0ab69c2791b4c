"""RAW PCM ingestion, channel mapping, resampling, and the STFT front/back ends.

RAW streams are headerless interleaved little-endian signed integers.
Samples are normalized to [-1, 1] by division by 2**(bits-1).  All
frequency-domain processing uses a periodic Hann analysis window; the
inverse transform is weighted overlap-add normalized by the accumulated
squared window, which reconstructs exactly for any hop <= frame size.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import RawInputConfig

SUPPORTED_BITS = (8, 16, 24, 32)


class StreamGapError(ValueError):
    """A spectral-frame stream skipped one or more frame indices."""


@dataclass
class AudioFrame:
    """One hop of time-domain audio, channels x samples, in [-1, 1]."""

    samples: np.ndarray     # (C, H) float64
    frame_index: int
    fs_hz: int


@dataclass
class SpectralFrame:
    """One STFT frame: channels x (frame_size/2 + 1) complex bins."""

    bins: np.ndarray        # (C, F) complex128
    frame_index: int
    fs_hz: int
    frame_size: int


def _check_bits(bits: int) -> None:
    if bits not in SUPPORTED_BITS:
        raise ValueError(f"unsupported bit depth {bits}; expected one of {SUPPORTED_BITS}")


def pcm_to_float(data: bytes, bits: int, n_channels: int) -> np.ndarray:
    """Decode interleaved little-endian signed PCM to (C, T) floats in [-1, 1].

    A trailing partial frame (fewer bytes than one sample per channel) is
    discarded.
    """
    _check_bits(bits)
    bytes_per_sample = bits // 8
    frame_bytes = bytes_per_sample * n_channels
    usable = (len(data) // frame_bytes) * frame_bytes
    data = data[:usable]
    if usable == 0:
        return np.zeros((n_channels, 0))
    if bits == 8:
        raw = np.frombuffer(data, dtype=np.int8).astype(np.int32)
    elif bits == 16:
        raw = np.frombuffer(data, dtype="<i2").astype(np.int32)
    elif bits == 32:
        raw = np.frombuffer(data, dtype="<i4").astype(np.int64)
    else:  # 24-bit: assemble 3-byte little-endian groups and sign-extend
        b = np.frombuffer(data, dtype=np.uint8).reshape(-1, 3).astype(np.int32)
        raw = b[:, 0] | (b[:, 1] << 8) | (b[:, 2] << 16)
        raw -= (raw & 0x800000) << 1
    scale = float(1 << (bits - 1))
    return (raw.astype(np.float64) / scale).reshape(-1, n_channels).T


def float_to_pcm(samples: np.ndarray, bits: int) -> bytes:
    """Encode (C, T) floats to interleaved little-endian signed PCM.

    Values outside [-1, 1] are clamped; quantization is round-to-nearest,
    so decode(encode(x)) is within one LSB of x.
    """
    _check_bits(bits)
    scale = float(1 << (bits - 1))
    q = np.rint(np.clip(samples, -1.0, 1.0) * scale)
    q = np.clip(q, -scale, scale - 1).astype(np.int64)
    interleaved = q.T.reshape(-1)
    if bits == 8:
        return interleaved.astype(np.int8).tobytes()
    if bits == 16:
        return interleaved.astype("<i2").tobytes()
    if bits == 32:
        return interleaved.astype("<i4").tobytes()
    u = interleaved.astype(np.int32) & 0xFFFFFF
    out = np.empty((interleaved.size, 3), dtype=np.uint8)
    out[:, 0] = u & 0xFF
    out[:, 1] = (u >> 8) & 0xFF
    out[:, 2] = (u >> 16) & 0xFF
    return out.tobytes()


class RawDecoder:
    """Streaming RAW decoder: bytes in, mapped AudioFrames of one hop out."""

    def __init__(self, raw: RawInputConfig, mapping: list[int]):
        _check_bits(raw.bits_per_sample)
        self.raw = raw
        self.mapping = list(mapping)
        self._pending = b""
        self._frame_index = 0
        self.bytes_consumed = 0

    def push(self, data: bytes) -> list[AudioFrame]:
        self._pending += data
        hop_bytes = self.raw.hop_size_samples * self.raw.n_channels * self.raw.bits_per_sample // 8
        frames = []
        while len(self._pending) >= hop_bytes:
            chunk, self._pending = self._pending[:hop_bytes], self._pending[hop_bytes:]
            samples = pcm_to_float(chunk, self.raw.bits_per_sample, self.raw.n_channels)
            frames.append(AudioFrame(
                samples=np.ascontiguousarray(samples[self.mapping]),
                frame_index=self._frame_index,
                fs_hz=self.raw.sample_rate_hz,
            ))
            self._frame_index += 1
            self.bytes_consumed += hop_bytes
        return frames

    def finish(self) -> list[AudioFrame]:
        """Trailing bytes shorter than a hop are discarded per the RAW contract."""
        self._pending = b""
        return []


def decode_raw(data: bytes, raw: RawInputConfig, mapping: list[int]) -> np.ndarray:
    """One-shot decode of a whole RAW buffer to a mapped (len(mapping), T) array."""
    samples = pcm_to_float(data, raw.bits_per_sample, raw.n_channels)
    return np.ascontiguousarray(samples[mapping])


# ---------------------------------------------------------------------------
# Resampling: windowed-sinc polyphase, 64 taps per phase, Kaiser beta = 8
# ---------------------------------------------------------------------------

TAPS_PER_PHASE = 64
KAISER_BETA = 8.0


def _design_polyphase(up: int, down: int) -> np.ndarray:
    n_taps = TAPS_PER_PHASE * up
    cutoff = 0.5 / max(up, down)      # cycles per sample at the upsampled rate
    n = np.arange(n_taps) - (n_taps - 1) / 2.0
    h = 2.0 * cutoff * np.sinc(2.0 * cutoff * n) * np.kaiser(n_taps, KAISER_BETA)
    return h * (up / h.sum())


class Resampler:
    """Streaming rational resampler for multichannel float audio.

    The output is aligned to remove the filter group delay, so sample n of
    the output corresponds to time n / fs_out of the input.
    """

    def __init__(self, fs_in: int, fs_out: int, n_channels: int):
        if fs_in <= 0 or fs_out <= 0:
            raise ValueError("sample rates must be positive")
        self.fs_in, self.fs_out = fs_in, fs_out
        self.identity = fs_in == fs_out
        self.n_channels = n_channels
        if not self.identity:
            g = np.gcd(fs_in, fs_out)
            self.up, self.down = fs_out // g, fs_in // g
            self.taps = _design_polyphase(self.up, self.down)
            self.delay = (self.taps.size - 1) // 2
            self._buffer = np.zeros((n_channels, 0))
            self._in_count = 0
            self._out_count = 0
            self._buffer_start = 0   # input index of _buffer[:, 0]

    def push(self, samples: np.ndarray) -> np.ndarray:
        """Feed (C, T) input, get all output samples computable so far."""
        if self.identity:
            return samples
        if samples.shape[0] != self.n_channels:
            raise ValueError(f"expected {self.n_channels} channels, got {samples.shape[0]}")
        self._buffer = np.concatenate([self._buffer, samples], axis=1)
        self._in_count += samples.shape[1]
        return self._drain(self._in_count * self.up)

    def finish(self) -> np.ndarray:
        """Flush: emit the remaining outputs using zero-padding on the right."""
        if self.identity:
            return np.zeros((self.n_channels, 0))
        total_out = (self._in_count * self.up) // self.down
        pad = (self.taps.size // self.up) + 2
        self._buffer = np.concatenate(
            [self._buffer, np.zeros((self.n_channels, pad))], axis=1)
        self._in_count += pad
        out = self._drain(self._in_count * self.up, limit=total_out)
        return out

    def _drain(self, up_available: int, limit: int | None = None) -> np.ndarray:
        # output n taps upsampled-domain indices n*down + delay - k, k in [0, n_taps)
        first = self._out_count
        last = (up_available - self.taps.size) // self.down  # inclusive-ish bound
        if limit is not None:
            last = min(last, limit - 1)
        if last < first:
            return np.zeros((self.n_channels, 0))
        n = np.arange(first, last + 1)
        top = n * self.down + self.delay                     # (N,) upsampled index
        phase = top % self.up
        base = top // self.up                                # input-sample index
        k = np.arange(TAPS_PER_PHASE)
        in_idx = base[:, None] - k[None, :]                  # (N, 64) input indices
        tap_idx = phase[:, None] + k[None, :] * self.up      # (N, 64) filter indices
        coeff = self.taps[tap_idx]
        rel = in_idx - self._buffer_start
        valid = (in_idx >= 0) & (rel < self._buffer.shape[1])
        rel = np.clip(rel, 0, max(self._buffer.shape[1] - 1, 0))
        gathered = self._buffer[:, rel] * np.where(valid, 1.0, 0.0)[None, :, :]
        out = np.einsum("cnk,nk->cn", gathered, coeff)
        self._out_count = last + 1
        # drop buffer samples no longer reachable by future outputs
        min_needed = (self._out_count * self.down + self.delay) // self.up - TAPS_PER_PHASE
        if min_needed > self._buffer_start:
            cut = min_needed - self._buffer_start
            self._buffer = self._buffer[:, cut:]
            self._buffer_start = min_needed
        return out


def resample(samples: np.ndarray, fs_in: int, fs_out: int) -> np.ndarray:
    """One-shot resample of a (C, T) buffer; fs_in == fs_out is a passthrough."""
    if fs_in == fs_out:
        return samples
    r = Resampler(fs_in, fs_out, samples.shape[0])
    parts = [r.push(samples), r.finish()]
    return np.concatenate(parts, axis=1)


# ---------------------------------------------------------------------------
# STFT / inverse STFT
# ---------------------------------------------------------------------------

def periodic_hann(frame_size: int) -> np.ndarray:
    n = np.arange(frame_size)
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * n / frame_size)


class StftAnalyzer:
    """Streaming STFT: frame k covers samples [k*hop, k*hop + frame_size)."""

    def __init__(self, frame_size: int, hop: int, n_channels: int, fs_hz: int):
        if hop <= 0 or hop > frame_size:
            raise ValueError(f"hop must be in [1, frame_size], got {hop}")
        self.frame_size, self.hop = frame_size, hop
        self.fs_hz = fs_hz
        self.window = periodic_hann(frame_size)
        self._buffer = np.zeros((n_channels, 0))
        self._frame_index = 0

    def push(self, frame: AudioFrame) -> list[SpectralFrame]:
        self._buffer = np.concatenate([self._buffer, frame.samples], axis=1)
        out = []
        while self._buffer.shape[1] >= self.frame_size:
            seg = self._buffer[:, : self.frame_size]
            bins = np.fft.rfft(seg * self.window[None, :], axis=1)
            out.append(SpectralFrame(
                bins=bins, frame_index=self._frame_index,
                fs_hz=self.fs_hz, frame_size=self.frame_size,
            ))
            self._frame_index += 1
            self._buffer = self._buffer[:, self.hop:]
        return out


class IstftSynthesizer:
    """Weighted overlap-add inverse STFT with squared-window normalization."""

    def __init__(self, frame_size: int, hop: int, fs_hz: int):
        self.frame_size, self.hop = frame_size, hop
        self.fs_hz = fs_hz
        self.window = periodic_hann(frame_size)
        self._acc: np.ndarray | None = None
        self._norm: np.ndarray | None = None
        self._expected_index = 0
        self._out_index = 0

    def push(self, frame: SpectralFrame) -> list[AudioFrame]:
        if frame.frame_index != self._expected_index:
            raise StreamGapError(
                f"spectral stream gap: expected frame {self._expected_index}, got {frame.frame_index}"
            )
        self._expected_index += 1
        n_ch = frame.bins.shape[0]
        if self._acc is None:
            self._acc = np.zeros((n_ch, self.frame_size))
            self._norm = np.zeros(self.frame_size)
        seg = np.fft.irfft(frame.bins, n=self.frame_size, axis=1)
        self._acc[:, -self.frame_size:] += seg * self.window[None, :]
        self._norm[-self.frame_size:] += self.window ** 2
        out = self._emit(self.hop)
        self._acc = np.concatenate([self._acc, np.zeros((n_ch, self.hop))], axis=1)
        self._norm = np.concatenate([self._norm, np.zeros(self.hop)])
        return out

    def _emit(self, n: int) -> list[AudioFrame]:
        if self._acc is None or n <= 0:
            return []
        chunk = self._acc[:, :n] / np.maximum(self._norm[:n], 1e-12)[None, :]
        self._acc = self._acc[:, n:]
        self._norm = self._norm[n:]
        frame = AudioFrame(samples=chunk, frame_index=self._out_index, fs_hz=self.fs_hz)
        self._out_index += 1
        return [frame]

    def finish(self) -> list[AudioFrame]:
        """Flush the synthesis tail; total output of K frames is (K-1)*hop + frame_size."""
        if self._acc is None:
            return []
        # everything still accumulated becomes one final frame
        tail_len = self.frame_size - self.hop
        if tail_len <= 0 or self._acc.shape[1] < tail_len:
            tail_len = self._acc.shape[1]
        chunk = self._acc[:, :tail_len] / np.maximum(self._norm[:tail_len], 1e-12)[None, :]
        self._acc = None
        self._norm = None
        if chunk.shape[1] == 0:
            return []
        frame = AudioFrame(samples=chunk, frame_index=self._out_index, fs_hz=self.fs_hz)
        self._out_index += 1
        return [frame]


def stft_array(samples: np.ndarray, frame_size: int, hop: int) -> np.ndarray:
    """STFT of a whole (C, T) buffer: (n_frames, C, frame_size/2 + 1)."""
    window = periodic_hann(frame_size)
    n_frames = max(0, (samples.shape[1] - frame_size) // hop + 1)
    frames = [
        np.fft.rfft(samples[:, k * hop: k * hop + frame_size] * window[None, :], axis=1)
        for k in range(n_frames)
    ]
    return np.array(frames) if frames else np.zeros((0, samples.shape[0], frame_size // 2 + 1), complex)


def istft_array(frames: np.ndarray, frame_size: int, hop: int) -> np.ndarray:
    """Inverse of stft_array: (n_frames, C, F) bins to a (C, T) buffer."""
    if frames.shape[0] == 0:
        return np.zeros((frames.shape[1] if frames.ndim == 3 else 1, 0))
    window = periodic_hann(frame_size)
    n_frames, n_ch = frames.shape[0], frames.shape[1]
    total = (n_frames - 1) * hop + frame_size
    acc = np.zeros((n_ch, total))
    norm = np.zeros(total)
    for k in range(n_frames):
        seg = np.fft.irfft(frames[k], n=frame_size, axis=1)
        acc[:, k * hop: k * hop + frame_size] += seg * window[None, :]
        norm[k * hop: k * hop + frame_size] += window ** 2
    return acc / np.maximum(norm, 1e-12)[None, :]
