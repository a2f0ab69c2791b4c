"""Noise tracking, GCC-PHAT, and the SRP scan against naive references."""

import numpy as np
import pytest

from earshot.config import McraConfig, MicSpec, SslConfig
from earshot.geometry import ArrayModel, build_icosphere, select_pairs, tdoa_table
from earshot.harness import (FixedTrajectory, Scene, SourceSpec,
                             oracle_exhaustive_scan, oracle_srp_values, render,
                             xcorr_delay, xcorr_delay_interp)
from earshot.localization import GccPhat, NoiseTracker, ScanCounters, SrpScanner
from earshot.audio_io import stft_array

from conftest import FRAME, FS, HOP, SPEED, circular_mics

# ---------------------------------------------------------------------------
# MCRA noise tracker
# ---------------------------------------------------------------------------


def _white_frames(sigma, n_frames, seed=0, extra=None):
    rng = np.random.default_rng(seed)
    n = n_frames * HOP + FRAME
    x = sigma * rng.standard_normal(n)
    if extra is not None:
        x = x + extra(np.arange(n) / FS)
    return stft_array(x[None, :], FRAME, HOP)


def test_mcra_converges_to_sample_psd():
    cfg = McraConfig()
    frames = _white_frames(0.1, 12 * cfg.l_window)
    tracker = NoiseTracker(cfg, 1, FRAME // 2 + 1)
    for k in range(frames.shape[0]):
        lam = tracker.update(frames[k])
    sample_psd = np.mean(np.abs(frames) ** 2, axis=0)    # (1, F)
    ratio_db = 10 * np.log10(np.mean(lam) / np.mean(sample_psd))
    assert abs(ratio_db) <= 1.0
    # per-bin agreement is also tight in the median
    per_bin = 10 * np.log10(lam / sample_psd)
    assert abs(np.median(per_bin)) <= 1.0


def test_mcra_all_zero_input_is_finite():
    tracker = NoiseTracker(McraConfig(), 2, FRAME // 2 + 1)
    bins = np.zeros((2, FRAME // 2 + 1), complex)
    for _ in range(10):
        lam = tracker.update(bins)
    assert np.isfinite(lam).all()
    assert (lam == 0).all()


def test_mcra_ignores_intermittent_tone_bursts():
    cfg = McraConfig()
    k0 = 40
    f0 = k0 * FS / FRAME
    n_frames = 12 * cfg.l_window
    n = n_frames * HOP + FRAME
    rng = np.random.default_rng(3)
    noise = 0.05 * rng.standard_normal(n)
    tone = np.sqrt(2.0) * np.sin(2 * np.pi * f0 * np.arange(n) / FS)
    # bursts: 30 frames on, 50 frames off (each window has tone-free minima)
    gate = np.zeros(n)
    period, on = 80 * HOP, 30 * HOP
    for start in range(0, n, period):
        gate[start: start + on] = 1.0
    frames_noise = stft_array(noise[None, :], FRAME, HOP)
    frames_burst = stft_array((noise + tone * gate)[None, :], FRAME, HOP)

    t_noise = NoiseTracker(cfg, 1, FRAME // 2 + 1)
    t_burst = NoiseTracker(cfg, 1, FRAME // 2 + 1)
    for k in range(n_frames):
        lam_noise = t_noise.update(frames_noise[k])
        lam_burst = t_burst.update(frames_burst[k])
    shift_db = 10 * np.log10(lam_burst[0, k0] / lam_noise[0, k0])
    assert abs(shift_db) < 3.0


def test_mcra_tracks_level_change():
    cfg = McraConfig()
    tracker = NoiseTracker(cfg, 1, FRAME // 2 + 1)
    lo = _white_frames(0.05, 6 * cfg.l_window, seed=1)
    hi = _white_frames(0.5, 6 * cfg.l_window, seed=2)
    for k in range(lo.shape[0]):
        tracker.update(lo[k])
    level_lo = float(np.mean(tracker.lambda_d))
    for k in range(hi.shape[0]):
        tracker.update(hi[k])
    level_hi = float(np.mean(tracker.lambda_d))
    # 20 dB input step; estimate must follow most of the way up
    assert 10 * np.log10(level_hi / level_lo) > 15.0


# ---------------------------------------------------------------------------
# GCC-PHAT
# ---------------------------------------------------------------------------

def _pair_table(rate=1, separation=0.343, sigma=0.0):
    mics = [MicSpec(position_m=(separation / 2, 0.0, 0.0), sigma_pos_m=sigma),
            MicSpec(position_m=(-separation / 2, 0.0, 0.0), sigma_pos_m=sigma)]
    array = ArrayModel.from_mics(mics)
    return tdoa_table(array, build_icosphere(0), FS, SPEED, rate, [(0, 1)])


def _stft_mid(x):
    frames = stft_array(x, FRAME, HOP)
    return frames[frames.shape[0] // 2]


def test_gcc_identical_signals_peak_at_zero():
    rng = np.random.default_rng(4)
    x = rng.standard_normal(FS)
    bins = _stft_mid(np.stack([x, x]))
    gcc = GccPhat(_pair_table(), FRAME, snr_weighting=False)
    cc = gcc.compute(bins, None)
    assert cc.shape == (1, FRAME)
    assert int(np.argmax(cc[0])) == 0
    assert cc[0, 0] == pytest.approx(1.0, abs=0.01)


def test_gcc_integer_delay_matches_xcorr_oracle():
    rng = np.random.default_rng(5)
    x = rng.standard_normal(FS)
    delayed = np.roll(x, 5)                  # mic 1 hears 5 samples later
    bins = _stft_mid(np.stack([x, delayed]))
    gcc = GccPhat(_pair_table(), FRAME, snr_weighting=False)
    cc = gcc.compute(bins, None)
    peak = int(np.argmax(cc[0]))
    # oracle: time-domain cross-correlation on the same raw channels
    d = xcorr_delay(delayed, x, max_lag=16)
    assert d == 5
    assert peak == (-d) % FRAME              # r peaks at minus the TDOA


def test_gcc_fractional_delay_with_interpolation():
    rng = np.random.default_rng(6)
    x = rng.standard_normal(FS)
    # exact fractional delay of 3.25 samples via frequency-domain shift
    spectrum = np.fft.rfft(x)
    f = np.fft.rfftfreq(x.size)
    delayed = np.fft.irfft(spectrum * np.exp(-2j * np.pi * f * 3.25), n=x.size)
    rate = 4
    bins = _stft_mid(np.stack([x, delayed]))
    gcc = GccPhat(_pair_table(rate=rate), FRAME, snr_weighting=False)
    cc = gcc.compute(bins, None)
    peak = int(np.argmax(cc[0]))
    assert peak == (-13) % (rate * FRAME)    # -3.25 samples at rate 4
    d = xcorr_delay_interp(delayed[:4096], x[:4096], max_lag=8, rate=rate)
    assert d == pytest.approx(3.25, abs=1 / rate)


def test_gcc_values_bounded():
    rng = np.random.default_rng(7)
    bins = _stft_mid(rng.standard_normal((2, FS)))
    gcc = GccPhat(_pair_table(rate=2), FRAME, snr_weighting=False)
    cc = gcc.compute(bins, None)
    assert cc.max() <= 1.0 + 1e-6
    assert cc.min() >= -1.0 - 1e-6


def test_gcc_snr_weighting_suppresses_noise_only_bins():
    rng = np.random.default_rng(8)
    x = rng.standard_normal(FS)
    bins = _stft_mid(np.stack([x, np.roll(x, 3)]))
    table = _pair_table()
    plain = GccPhat(table, FRAME, snr_weighting=False).compute(bins, None)
    # lambda_d equal to the observed power => SNR estimate 0 => zero weight
    lam = np.abs(bins) ** 2
    weighted = GccPhat(table, FRAME, snr_weighting=True).compute(bins, lam)
    assert np.abs(weighted).max() < 1e-12
    assert np.abs(plain).max() > 0.5


# ---------------------------------------------------------------------------
# SRP scan
# ---------------------------------------------------------------------------

def _scan_setup(n_mics=4, rate=4, sigma=0.002, coarse_level=1, fine_level=2,
                **ssl_kw):
    mics = circular_mics(n_mics)
    mics = [MicSpec(position_m=m.position_m, orientation=m.orientation,
                    fov_deg=m.fov_deg, sigma_pos_m=sigma) for m in mics]
    array = ArrayModel.from_mics(mics)
    coarse = build_icosphere(coarse_level)
    fine = build_icosphere(fine_level)
    pairs = select_pairs(array, fine)
    ct = tdoa_table(array, coarse, FS, SPEED, rate, pairs)
    ft = tdoa_table(array, fine, FS, SPEED, rate, pairs)
    cfg = SslConfig(interpolation_rate=rate, coarse_level=coarse_level,
                    fine_level=fine_level, **ssl_kw)
    scanner = SrpScanner(coarse, fine, ct, ft, cfg)
    gcc = GccPhat(ft, FRAME, snr_weighting=False)
    return array, fine, ft, scanner, gcc


def _naive_srp(cc, table):
    """Triple-loop steered power, straight from the definition."""
    n_pairs, n_pts = table.center.shape
    length = cc.shape[1]
    out = np.zeros(n_pts)
    for p in range(n_pts):
        total, n_vis = 0.0, 0
        for q in range(n_pairs):
            if not table.visible[q, p]:
                continue
            n_vis += 1
            best = -np.inf
            for off in range(-int(table.halfwidth[q, p]), int(table.halfwidth[q, p]) + 1):
                best = max(best, cc[q, (-int(table.center[q, p]) + off) % length])
            total += best
        out[p] = max(total / n_vis, 0.0) if n_vis else 0.0
    return out


def _scene_cc(array, gcc, direction, seed=11):
    scene = Scene(sources=[SourceSpec(
        kind="white", trajectory=FixedTrajectory(direction=list(direction)))],
        duration_s=0.2, seed=seed, noise_floor_db=-20.0)
    result = render(scene, array, FS, SPEED)
    return gcc.compute(_stft_mid(result.mixture), None)


def test_srp_oracle_matches_naive_triple_loop():
    array, fine, ft, scanner, gcc = _scan_setup()
    cc = _scene_cc(array, gcc, [0.6, 0.64, 0.48])
    naive = _naive_srp(cc, ft)
    oracle = oracle_srp_values(cc, ft, fine)
    assert np.allclose(naive, oracle, atol=1e-9)


def test_srp_exhaustive_scan_matches_oracle_argmax():
    array, fine, ft, scanner, gcc = _scan_setup(
        scan_mode="exhaustive", n_potential_doas=1)
    cc = _scene_cc(array, gcc, [0.6, 0.64, 0.48], seed=12)
    pot = scanner.scan(cc, 0)[0]
    direction, power, idx = oracle_exhaustive_scan(cc, ft, fine)
    assert np.allclose(pot.direction, direction)
    assert pot.power == pytest.approx(power, abs=1e-12)


def test_srp_finds_single_source_direction():
    array, fine, ft, scanner, gcc = _scan_setup(
        fine_level=3, n_potential_doas=1)
    d = np.array([0.6, 0.64, 0.48])
    d /= np.linalg.norm(d)
    cc = _scene_cc(array, gcc, d, seed=13)
    pot = scanner.scan(cc, 0)[0]
    err = np.arccos(np.clip(pot.direction @ d, -1, 1))
    assert err <= 2 * fine.max_nn_spacing_rad()


def test_srp_second_peak_after_zeroing():
    array, fine, ft, scanner, gcc = _scan_setup(n_potential_doas=2)
    dA = np.array([1.0, 0.0, 0.0])
    dB = np.array([0.0, 0.0, 1.0])
    scene = Scene(sources=[
        SourceSpec(kind="white", trajectory=FixedTrajectory(direction=dA.tolist())),
        SourceSpec(kind="white", trajectory=FixedTrajectory(direction=dB.tolist())),
    ], duration_s=0.2, seed=14, noise_floor_db=-30.0)
    result = render(scene, array, FS, SPEED)
    cc = gcc.compute(_stft_mid(result.mixture), None)
    pots = scanner.scan(cc, 0)
    assert len(pots) == 2
    assert [p.rank for p in pots] == [1, 2]
    assert pots[0].power >= pots[1].power >= 0.0
    # the two extracted peaks resolve distinct directions
    angle = np.degrees(np.arccos(np.clip(pots[0].direction @ pots[1].direction, -1, 1)))
    assert angle > 30.0
    # each true source is near one of the peaks
    for d in (dA, dB):
        best = min(np.degrees(np.arccos(np.clip(p.direction @ d, -1, 1))) for p in pots)
        assert best < 25.0


def test_srp_silence_yields_zero_power():
    array, fine, ft, scanner, gcc = _scan_setup()
    cc = np.zeros((ft.n_pairs, 4 * FRAME))
    pots = scanner.scan(cc, 7)
    assert len(pots) == SslConfig().n_potential_doas
    assert all(p.power == 0.0 for p in pots)
    assert all(p.frame_index == 7 for p in pots)
    assert all(np.isfinite(p.direction).all() for p in pots)


def test_scan_counters_hierarchical_vs_exhaustive():
    array, fine, ft, h_scanner, gcc = _scan_setup(
        fine_level=4, coarse_level=2, n_potential_doas=1)
    _, _, _, e_scanner, _ = _scan_setup(
        fine_level=4, coarse_level=2, n_potential_doas=1, scan_mode="exhaustive")
    cc = _scene_cc(array, gcc, [1.0, 0.0, 0.0], seed=15)

    hc, ec = ScanCounters(), ScanCounters()
    n_scans = 3
    for k in range(n_scans):
        h_scanner.scan(cc, k, hc)
        e_scanner.scan(cc, k, ec)
    assert hc.frames == ec.frames == n_scans
    assert hc.pairs_correlated == ec.pairs_correlated == n_scans * ft.n_pairs
    assert hc.coarse_points == n_scans * 162
    assert ec.coarse_points == 0
    assert ec.fine_points == n_scans * 2562
    assert 0 < hc.fine_points <= 0.25 * ec.fine_points


def test_scan_counters_merge():
    a = ScanCounters(frames=1, pairs_correlated=2, coarse_points=3, fine_points=4)
    b = ScanCounters(frames=10, pairs_correlated=20, coarse_points=30, fine_points=40)
    a.merge(b)
    assert (a.frames, a.pairs_correlated, a.coarse_points, a.fine_points) == (11, 22, 33, 44)
