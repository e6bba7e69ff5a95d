"""Objective quality metrics: short-time intelligibility and SI-SDR.

The intelligibility score follows the standard recipe: energetic frames
are kept (40 dB range below the loudest clean frame), frame spectra are
grouped into 15 one-third-octave bands from 150 Hz to ~4.3 kHz, and
clipped normalized correlations between clean and processed band
envelopes are averaged over 384 ms segments. Runs directly on 16 kHz
input with 32 ms frames.
"""

from __future__ import annotations

import math

import numpy as np

from .dsp import SAMPLE_RATE, hann_window

STOI_FRAME = 512
STOI_HOP = 256
STOI_NBANDS = 15
STOI_LOWEST_CF = 150.0
STOI_SEG_FRAMES = 24  # 24 * 16 ms = 384 ms
STOI_DYN_RANGE_DB = 40.0
STOI_CLIP_DB = -15.0
SI_SDR_CAP_DB = 60.0

_EPS = 1e-12


def _frame(x: np.ndarray, frame: int, hop: int) -> np.ndarray:
    n = 1 + (len(x) - frame) // hop
    idx = np.arange(frame)[None, :] + hop * np.arange(n)[:, None]
    return x[idx]


def third_octave_bands(frame_len: int = STOI_FRAME, sr: int = SAMPLE_RATE) -> np.ndarray:
    """(n_bands, n_bins) 0/1 matrix selecting rfft bins per band."""
    freqs = np.fft.rfftfreq(frame_len, d=1.0 / sr)
    centers = STOI_LOWEST_CF * 2.0 ** (np.arange(STOI_NBANDS) / 3.0)
    lo = centers * 2.0 ** (-1.0 / 6.0)
    hi = centers * 2.0 ** (1.0 / 6.0)
    bands = np.zeros((STOI_NBANDS, freqs.size))
    for k in range(STOI_NBANDS):
        bands[k, (freqs >= lo[k]) & (freqs < hi[k])] = 1.0
    return bands


def _band_envelopes(frames: np.ndarray, bands: np.ndarray) -> np.ndarray:
    spec = np.fft.rfft(frames * hann_window(STOI_FRAME), axis=1)
    power = np.abs(spec) ** 2
    return np.sqrt(power @ bands.T)  # (n_frames, n_bands)


def stoi(clean: np.ndarray, processed: np.ndarray) -> float:
    """Short-time intelligibility of `processed` against `clean`, in [0, 1]."""
    clean = np.asarray(clean, dtype=np.float64)
    processed = np.asarray(processed, dtype=np.float64)
    if clean.shape != processed.shape:
        raise ValueError(f"length mismatch: {clean.shape} vs {processed.shape}")
    if clean.size < SAMPLE_RATE // 2:
        raise ValueError("signals must be at least 0.5 s long")

    x_frames = _frame(clean, STOI_FRAME, STOI_HOP)
    y_frames = _frame(processed, STOI_FRAME, STOI_HOP)

    # keep frames within 40 dB of the loudest clean frame
    norms = np.linalg.norm(x_frames * hann_window(STOI_FRAME), axis=1)
    thresh = norms.max() * 10.0 ** (-STOI_DYN_RANGE_DB / 20.0)
    keep = norms > max(thresh, _EPS)
    x_frames, y_frames = x_frames[keep], y_frames[keep]
    if x_frames.shape[0] < STOI_SEG_FRAMES:
        raise ValueError("too few energetic frames for a 384 ms analysis segment")

    bands = third_octave_bands()
    x_env = _band_envelopes(x_frames, bands)
    y_env = _band_envelopes(y_frames, bands)

    clip = 10.0 ** (-STOI_CLIP_DB / 20.0)
    n = STOI_SEG_FRAMES
    scores = []
    for m in range(n, x_env.shape[0] + 1):
        x_seg = x_env[m - n : m]  # (n, bands)
        y_seg = y_env[m - n : m]
        alpha = np.linalg.norm(x_seg, axis=0) / (np.linalg.norm(y_seg, axis=0) + _EPS)
        y_prime = np.minimum(y_seg * alpha, x_seg * (1.0 + clip))
        xc = x_seg - x_seg.mean(axis=0)
        yc = y_prime - y_prime.mean(axis=0)
        num = (xc * yc).sum(axis=0)
        den = np.linalg.norm(xc, axis=0) * np.linalg.norm(yc, axis=0) + _EPS
        scores.append(num / den)
    return float(np.clip(np.mean(scores), 0.0, 1.0))


def si_sdr(clean: np.ndarray, processed: np.ndarray) -> float:
    """Scale-invariant signal-to-distortion ratio in dB, capped at +/-60."""
    clean = np.asarray(clean, dtype=np.float64)
    processed = np.asarray(processed, dtype=np.float64)
    if clean.shape != processed.shape:
        raise ValueError(f"length mismatch: {clean.shape} vs {processed.shape}")
    e_clean = float(np.dot(clean, clean))
    if e_clean == 0.0:
        raise ValueError("si_sdr needs a nonzero clean reference")
    alpha = float(np.dot(processed, clean)) / e_clean
    target = alpha * clean
    residual = processed - target
    e_target = float(np.dot(target, target))
    e_res = float(np.dot(residual, residual))
    if e_res <= e_target * 10.0 ** (-SI_SDR_CAP_DB / 10.0):
        return SI_SDR_CAP_DB
    if e_target <= e_res * 10.0 ** (-SI_SDR_CAP_DB / 10.0):
        return -SI_SDR_CAP_DB
    return 10.0 * math.log10(e_target / e_res)
