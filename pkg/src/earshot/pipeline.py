"""The streaming graph: decode → resample → STFT → localize → track →
separate → synthesize, with JSON telemetry and per-target RAW output.

The same stage objects run in two modes.  Single-context mode drives them
in a plain loop; threaded mode gives each stage its own thread connected
by bounded queues (blocking producers, so back-pressure propagates and
memory stays bounded).  Both modes visit frames in the same order with the
same state, so their outputs are byte-identical.
"""

from __future__ import annotations

import os
import queue
import threading
import time
from dataclasses import dataclass, field
from typing import BinaryIO, Iterable, Iterator, Union

import numpy as np

from .audio_io import (AudioFrame, IstftSynthesizer, RawDecoder, Resampler,
                       SpectralFrame, StftAnalyzer, float_to_pcm)
from .config import PipelineConfig
from .geometry import ArrayModel, build_icosphere, select_pairs, tdoa_table
from .localization import GccPhat, NoiseTracker, PotentialDoa, ScanCounters, SrpScanner
from .protocol import LineSink, NullSink, format_pot_line, format_src_line
from .separation import (GssSeparator, Postfilter, SteeringTarget, delay_and_sum,
                         project_noise, steering_phases)
from .tracking import TrackedSource, Tracker

QUEUE_CAPACITY = 8
READ_CHUNK_BYTES = 1 << 16

FIXED_TAG = "fixed"
DYNAMIC_TAG = "dynamic"


# ---------------------------------------------------------------------------
# Events
# ---------------------------------------------------------------------------

@dataclass
class PotentialDoaSet:
    frame_index: int
    timestamp: float
    doas: list[PotentialDoa]


@dataclass
class TrackedSourceSet:
    frame_index: int
    timestamp: float
    sources: list[TrackedSource]


@dataclass
class SeparatedFrameSet:
    frame_index: int
    timestamp: float
    keys: list[str]           # "<tag>_<id:03d>", aligned with bins rows
    bins: np.ndarray          # (n_targets, frame_size/2 + 1), post-filter


@dataclass
class Diagnostics:
    frame_index: int
    timestamp: float
    message: str


PipelineEvent = Union[PotentialDoaSet, TrackedSourceSet, SeparatedFrameSet, Diagnostics]


def emit_json(events: Iterable[PipelineEvent]) -> Iterator[str]:
    """Serialize the telemetry-bearing events to protocol lines, in order."""
    for ev in events:
        if isinstance(ev, PotentialDoaSet):
            yield format_pot_line(ev.frame_index, ev.doas)
        elif isinstance(ev, TrackedSourceSet):
            yield format_src_line(ev.frame_index, ev.sources)


# ---------------------------------------------------------------------------
# Run report
# ---------------------------------------------------------------------------

@dataclass
class RunReport:
    """What one run did: volumes, operation counters, timing, losses."""

    frames: int                     # hop-sized audio frames at the processing rate
    spectral_frames: int
    duration_s: float               # audio seconds processed
    wall_s: float
    realtime_factor: float          # wall_s / duration_s (< 1 means faster than live)
    counters: ScanCounters
    gss_resets: int
    subarray_fallback_frames: int
    sink_dropped: dict[str, int]
    queue_peaks: dict[str, int]
    separated_paths: dict[str, str]

    def counter_table(self) -> str:
        c = self.counters
        rows = [
            ("frames", self.frames),
            ("spectral frames", self.spectral_frames),
            ("pairs correlated", c.pairs_correlated),
            ("coarse points scanned", c.coarse_points),
            ("fine points scanned", c.fine_points),
            ("gss resets", self.gss_resets),
            ("subarray fallback frames", self.subarray_fallback_frames),
        ]
        width = max(len(name) for name, _ in rows)
        lines = [f"{name:<{width}}  {value}" for name, value in rows]
        lines.append(f"{'realtime factor':<{width}}  {self.realtime_factor:.3f}")
        return "\n".join(lines)


# ---------------------------------------------------------------------------
# Separated-output writer
# ---------------------------------------------------------------------------

class SeparatedWriter:
    """One inverse STFT and one RAW file per separated target.

    Target keys look like ``dynamic_003``; each key's file holds the
    concatenated audio of the frames during which the target was active.
    """

    def __init__(self, directory: str | None, bits: int, fs_hz: int,
                 frame_size: int, hop: int):
        self.directory = directory
        self.bits = bits
        self.fs_hz = fs_hz
        self.frame_size, self.hop = frame_size, hop
        self._synths: dict[str, IstftSynthesizer] = {}
        self._files: dict[str, BinaryIO] = {}
        self._paths: dict[str, str] = {}
        self._next_index: dict[str, int] = {}
        if directory is not None:
            os.makedirs(directory, exist_ok=True)

    def push(self, key: str, bins: np.ndarray) -> None:
        if self.directory is None:
            return
        synth = self._synths.get(key)
        if synth is None:
            synth = IstftSynthesizer(self.frame_size, self.hop, self.fs_hz)
            self._synths[key] = synth
            path = os.path.join(self.directory, f"{key}.raw")
            self._files[key] = open(path, "wb")
            self._paths[key] = path
            self._next_index[key] = 0
        frame = SpectralFrame(bins=bins[None, :], frame_index=self._next_index[key],
                              fs_hz=self.fs_hz, frame_size=self.frame_size)
        self._next_index[key] += 1
        for out in synth.push(frame):
            self._files[key].write(float_to_pcm(out.samples, self.bits))

    def finish(self) -> dict[str, str]:
        for key, synth in self._synths.items():
            for out in synth.finish():
                self._files[key].write(float_to_pcm(out.samples, self.bits))
        for fh in self._files.values():
            fh.close()
        self._synths.clear()
        self._files.clear()
        return dict(self._paths)


# ---------------------------------------------------------------------------
# The session: all stage state, drivable from one thread or several
# ---------------------------------------------------------------------------

class PipelineSession:
    """Stage state and per-frame processing for one audio stream.

    ``push_bytes``/``finish`` drive everything inline (single-context
    mode); the ``stage_*`` methods expose the same steps individually for
    the threaded runner.  Telemetry lines and separated audio are written
    by the final stage, so both modes produce identical sink output.
    """

    def __init__(self, cfg: PipelineConfig,
                 doa_sink: LineSink | None = None,
                 tracks_sink: LineSink | None = None,
                 sep_dir: str | None = None):
        self.cfg = cfg
        general = cfg.general
        self.array = ArrayModel.from_mics(general.mics)
        self.fs = general.fs_processing_hz
        self.frame_size = general.frame_size_samples
        self.hop = general.hop_size_samples
        self.speed = general.speed_of_sound_mps
        n_ch = len(cfg.mapping)
        n_bins = self.frame_size // 2 + 1

        self._decoder = RawDecoder(cfg.raw, cfg.mapping)
        self._resampler = Resampler(cfg.raw.sample_rate_hz, self.fs, n_ch)
        self._analyzer = StftAnalyzer(self.frame_size, self.hop, n_ch, self.fs)
        self._hop_pending = np.zeros((n_ch, 0))

        half = bool(cfg.ssl.scan_half_sphere)
        coarse = build_icosphere(cfg.ssl.coarse_level, half)
        fine = build_icosphere(cfg.ssl.fine_level, half)
        if cfg.ssl.prune_pairs:
            pairs = select_pairs(self.array, fine)
        else:
            m = self.array.n_mics
            pairs = [(i, j) for i in range(m) for j in range(i + 1, m)]
        uncertainty = general.speed_of_sound_uncertainty_mps
        coarse_table = tdoa_table(self.array, coarse, self.fs, self.speed,
                                  cfg.ssl.interpolation_rate, pairs, uncertainty)
        fine_table = tdoa_table(self.array, fine, self.fs, self.speed,
                                cfg.ssl.interpolation_rate, pairs, uncertainty)
        self._noise = NoiseTracker(cfg.mcra, n_ch, n_bins)
        self._gcc = GccPhat(fine_table, self.frame_size, cfg.ssl.snr_weighting)
        self._scanner = SrpScanner(coarse, fine, coarse_table, fine_table, cfg.ssl)
        self._tracker = Tracker(cfg.sst, cfg.frame_dt_s)

        self._gss: GssSeparator | None = None
        if cfg.sss.method == "gss":
            self._gss = GssSeparator(self.array, self.frame_size, self.fs,
                                     self.speed, cfg.sss)
        self._postfilter = Postfilter(cfg.sss) if cfg.sss.postfilter.enabled else None
        self._fixed_targets: list[SteeringTarget] | None = None
        if cfg.sss.fixed_doas:
            self._fixed_targets = [
                SteeringTarget.build(self.array, np.asarray(d, float), i + 1,
                                     self.fs, self.speed)
                for i, d in enumerate(cfg.sss.fixed_doas)
            ]
            if self._gss is not None:
                self._gss.retarget(self._fixed_targets)

        self._doa_sink = doa_sink if doa_sink is not None else NullSink()
        self._tracks_sink = tracks_sink if tracks_sink is not None else NullSink()
        self._writer = SeparatedWriter(sep_dir, cfg.sss.output.bits_per_sample,
                                       self.fs, self.frame_size, self.hop)

        self.counters = ScanCounters()
        self.frames = 0
        self.spectral_frames = 0
        self.subarray_fallback_frames = 0
        self.wall_s = 0.0
        self._fell_back_keys: set[str] = set()

    # -- stage 1: bytes to spectral frames ---------------------------------

    def stage_frontend(self, data: bytes) -> list[SpectralFrame]:
        try:
            audio = self._decoder.push(data)
        except ValueError as exc:
            raise ValueError(
                f"source decode failed at byte offset {self._decoder.bytes_consumed}: {exc}"
            ) from exc
        out: list[SpectralFrame] = []
        for af in audio:
            out.extend(self._ingest(self._resampler.push(af.samples)))
        return out

    def stage_frontend_finish(self) -> list[SpectralFrame]:
        self._decoder.finish()
        return self._ingest(self._resampler.finish())

    def _ingest(self, samples: np.ndarray) -> list[SpectralFrame]:
        """Chunk resampled audio into hop-sized frames and run the STFT."""
        if samples.shape[1]:
            self._hop_pending = np.concatenate([self._hop_pending, samples], axis=1)
        out: list[SpectralFrame] = []
        while self._hop_pending.shape[1] >= self.hop:
            chunk = self._hop_pending[:, : self.hop]
            self._hop_pending = self._hop_pending[:, self.hop:]
            frame = AudioFrame(samples=chunk, frame_index=self.frames, fs_hz=self.fs)
            self.frames += 1
            out.extend(self._analyzer.push(frame))
        return out

    # -- stage 2: localization ----------------------------------------------

    def stage_ssl(self, spec: SpectralFrame
                  ) -> tuple[SpectralFrame, np.ndarray, list[PotentialDoa]]:
        lambda_d = self._noise.update(spec.bins)
        cc = self._gcc.compute(spec.bins, lambda_d)
        pots = self._scanner.scan(cc, spec.frame_index, self.counters)
        return spec, lambda_d, pots

    # -- stage 3: tracking ----------------------------------------------------

    def stage_sst(self, item: tuple[SpectralFrame, np.ndarray, list[PotentialDoa]]
                  ) -> tuple[SpectralFrame, np.ndarray, list[PotentialDoa], list[TrackedSource]]:
        spec, lambda_d, pots = item
        tracked = self._tracker.step(pots, spec.frame_index)
        return spec, lambda_d, pots, tracked

    # -- stage 4: separation, synthesis, and all sink writes -----------------

    def stage_sss(self, item: tuple[SpectralFrame, np.ndarray,
                                    list[PotentialDoa], list[TrackedSource]]
                  ) -> list[PipelineEvent]:
        spec, lambda_d, pots, tracked = item
        k = spec.frame_index
        now = time.time()
        events: list[PipelineEvent] = [
            PotentialDoaSet(frame_index=k, timestamp=now, doas=pots),
            TrackedSourceSet(frame_index=k, timestamp=now, sources=tracked),
        ]
        self._doa_sink.write(format_pot_line(k, pots))
        self._tracks_sink.write(format_src_line(k, tracked))

        targets, tag = self._current_targets(tracked)
        keys = [f"{tag}_{t.track_id:03d}" for t in targets]
        events.extend(self._diagnose_fallbacks(targets, keys, k, now))
        bins = self._separate(spec, targets, lambda_d)
        for key, row in zip(keys, bins):
            self._writer.push(key, row)
        events.append(SeparatedFrameSet(frame_index=k, timestamp=now,
                                        keys=keys, bins=bins))
        self.spectral_frames += 1
        return events

    def _current_targets(self, tracked: list[TrackedSource]
                         ) -> tuple[list[SteeringTarget], str]:
        if self._fixed_targets is not None:
            return self._fixed_targets, FIXED_TAG
        targets = [
            SteeringTarget.build(self.array, t.direction, t.id, self.fs, self.speed)
            for t in tracked
        ]
        return targets, DYNAMIC_TAG

    def _diagnose_fallbacks(self, targets: list[SteeringTarget], keys: list[str],
                            frame_index: int, now: float) -> list[Diagnostics]:
        events = []
        fell = {k for k, t in zip(keys, targets) if t.fell_back}
        if fell:
            self.subarray_fallback_frames += 1
        for key in sorted(fell - self._fell_back_keys):
            events.append(Diagnostics(
                frame_index=frame_index, timestamp=now,
                message=f"empty subarray for {key}: falling back to the full array"))
        self._fell_back_keys = fell
        return events

    def _separate(self, spec: SpectralFrame, targets: list[SteeringTarget],
                  lambda_d: np.ndarray) -> np.ndarray:
        n_bins = self.frame_size // 2 + 1
        if not targets:
            return np.zeros((0, n_bins), complex)
        if self._gss is not None:
            if self._fixed_targets is None:
                self._gss.retarget(targets)
            bins = self._gss.step_frame(spec.bins)
            if self._postfilter is not None:
                weights = np.transpose(self._gss.demix, (1, 2, 0))
                noise = project_noise(lambda_d[self._gss.mics], weights)
                bins = self._postfilter.apply(bins, noise)
            return bins
        bins = np.stack([delay_and_sum(spec.bins, t, self.frame_size) for t in targets])
        if self._postfilter is not None:
            weights = np.zeros((len(targets), spec.bins.shape[0], n_bins), complex)
            for ti, t in enumerate(targets):
                weights[ti, t.subarray] = steering_phases(t.delays, self.frame_size) \
                    / len(t.subarray)
            noise = project_noise(lambda_d, weights)
            bins = self._postfilter.apply(bins, noise)
        return bins

    # -- single-context driving ----------------------------------------------

    def push_bytes(self, data: bytes) -> list[PipelineEvent]:
        t0 = time.perf_counter()
        events: list[PipelineEvent] = []
        for spec in self.stage_frontend(data):
            events.extend(self.stage_sss(self.stage_sst(self.stage_ssl(spec))))
        self.wall_s += time.perf_counter() - t0
        return events

    def finish(self) -> RunReport:
        t0 = time.perf_counter()
        for spec in self.stage_frontend_finish():
            self.stage_sss(self.stage_sst(self.stage_ssl(spec)))
        self.wall_s += time.perf_counter() - t0
        return self._finalize({})

    def _finalize(self, queue_peaks: dict[str, int]) -> RunReport:
        paths = self._writer.finish()
        self._doa_sink.close()
        self._tracks_sink.close()
        duration = self.frames * self.hop / self.fs
        return RunReport(
            frames=self.frames,
            spectral_frames=self.spectral_frames,
            duration_s=duration,
            wall_s=self.wall_s,
            realtime_factor=self.wall_s / duration if duration > 0 else 0.0,
            counters=self.counters,
            gss_resets=self._gss.resets if self._gss is not None else 0,
            subarray_fallback_frames=self.subarray_fallback_frames,
            sink_dropped={"doa": self._doa_sink.dropped,
                          "tracks": self._tracks_sink.dropped},
            queue_peaks=dict(queue_peaks),
            separated_paths=paths,
        )


# ---------------------------------------------------------------------------
# Runners
# ---------------------------------------------------------------------------

def _byte_chunks(source: Union[str, bytes, BinaryIO],
                 stop: threading.Event | None) -> Iterator[bytes]:
    if isinstance(source, bytes):
        for start in range(0, len(source), READ_CHUNK_BYTES):
            if stop is not None and stop.is_set():
                return
            yield source[start: start + READ_CHUNK_BYTES]
        return
    if isinstance(source, str):
        import sys
        fh = sys.stdin.buffer if source == "-" else open(source, "rb")
        owns = source != "-"
    else:
        fh, owns = source, False
    try:
        while True:
            if stop is not None and stop.is_set():
                return
            chunk = fh.read(READ_CHUNK_BYTES)
            if not chunk:
                return
            yield chunk
    finally:
        if owns:
            fh.close()


class _Queue:
    """Bounded queue that records its high-water mark."""

    def __init__(self, name: str, capacity: int = QUEUE_CAPACITY):
        self.name = name
        self._q: queue.Queue = queue.Queue(maxsize=capacity)
        self.peak = 0

    def put(self, item) -> None:
        self._q.put(item)
        self.peak = max(self.peak, self._q.qsize())

    def get(self):
        return self._q.get()


def _run_threaded(session: PipelineSession, source, stop) -> RunReport:
    """Stage-per-thread execution with bounded queues; output identical to
    single-context mode because every stage is the same sequential code."""
    q_spec = _Queue("frontend->ssl")
    q_ssl = _Queue("ssl->sst")
    q_sst = _Queue("sst->sss")
    errors: list[BaseException] = []

    def guard(fn):
        def wrapped():
            try:
                fn()
            except BaseException as exc:   # propagate to the main thread
                errors.append(exc)
        return wrapped

    def frontend():
        try:
            for chunk in _byte_chunks(source, stop):
                for spec in session.stage_frontend(chunk):
                    q_spec.put(spec)
            for spec in session.stage_frontend_finish():
                q_spec.put(spec)
        finally:
            q_spec.put(None)

    def ssl_worker():
        try:
            while (spec := q_spec.get()) is not None:
                q_ssl.put(session.stage_ssl(spec))
        finally:
            q_ssl.put(None)

    def sst_worker():
        try:
            while (item := q_ssl.get()) is not None:
                q_sst.put(session.stage_sst(item))
        finally:
            q_sst.put(None)

    threads = [threading.Thread(target=guard(t), name=n, daemon=True)
               for t, n in ((frontend, "frontend"), (ssl_worker, "ssl"),
                            (sst_worker, "sst"))]
    t0 = time.perf_counter()
    for t in threads:
        t.start()
    while (item := q_sst.get()) is not None:
        session.stage_sss(item)
    for t in threads:
        t.join()
    if errors:
        raise errors[0]
    session.wall_s = time.perf_counter() - t0
    # finish() must not re-run the frontend: it already drained in its thread
    report = session._finalize({q.name: q.peak for q in (q_spec, q_ssl, q_sst)})
    return report


def run(cfg: PipelineConfig, source: Union[str, bytes, BinaryIO],
        doa_sink: LineSink | None = None, tracks_sink: LineSink | None = None,
        sep_dir: str | None = None, mode: str = "single",
        stop: threading.Event | None = None) -> RunReport:
    """Process an entire RAW source (path, ``-`` for stdin, bytes, or file
    object) through the full pipeline.  ``mode`` is ``single`` or
    ``threaded``; both produce identical sink output."""
    if mode not in ("single", "threaded"):
        raise ValueError(f"mode must be 'single' or 'threaded', got {mode!r}")
    session = PipelineSession(cfg, doa_sink=doa_sink, tracks_sink=tracks_sink,
                              sep_dir=sep_dir)
    if mode == "threaded":
        return _run_threaded(session, source, stop)
    for chunk in _byte_chunks(source, stop):
        session.push_bytes(chunk)
    return session.finish()
