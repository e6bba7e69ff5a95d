"""Analysis/synthesis front end: Hann windowing, STFT/iSTFT, SNR mixing.

All functions are pure and operate on float64 numpy arrays at 16 kHz.
The STFT pads `hop` zeros in front and enough zeros at the end so every
original sample is covered by two overlapping windows; the inverse then
divides by the summed squared window and trims the padding, giving
reconstruction down to float rounding error.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.io import wavfile

SAMPLE_RATE = 16000

# Floor for the summed-squared-window normalization in istft. Interior
# samples have window-power >= 0.5, so this only guards padded edges.
_WIN_NORM_FLOOR = 1e-10


class DegenerateInputError(ValueError):
    """A signal has no energy where nonzero energy is required."""


@dataclass
class Spectrogram:
    """Complex STFT frames, shape (T, F) with F = frame_len // 2 + 1."""

    values: np.ndarray
    frame_len: int
    hop: int
    out_len: int  # sample count of the signal before padding

    def __post_init__(self):
        t, f = self.values.shape
        if f != self.frame_len // 2 + 1:
            raise ValueError(f"expected {self.frame_len // 2 + 1} bins, got {f}")
        if t < 1:
            raise ValueError("spectrogram must have at least one frame")

    @property
    def n_frames(self) -> int:
        return self.values.shape[0]

    @property
    def n_bins(self) -> int:
        return self.values.shape[1]


def hann_window(n: int) -> np.ndarray:
    """Periodic Hann window of length n (COLA at hop = n/2)."""
    if n < 2:
        raise ValueError(f"window length must be >= 2, got {n}")
    k = np.arange(n)
    return 0.5 * (1.0 - np.cos(2.0 * np.pi * k / n))


def n_frames_for(n_samples: int, hop: int) -> int:
    """Frame count stft() produces for a signal of n_samples."""
    return int(math.ceil(n_samples / hop)) + 1


def stft(x: np.ndarray, frame_len: int = 512, hop: int = 256) -> Spectrogram:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or x.size == 0:
        raise ValueError("stft expects a non-empty 1-D signal")
    if not np.all(np.isfinite(x)):
        raise ValueError("signal contains non-finite values")

    n = x.size
    t = n_frames_for(n, hop)
    buf = np.zeros((t - 1) * hop + frame_len, dtype=np.float64)
    buf[hop : hop + n] = x

    starts = np.arange(t) * hop
    frames = np.lib.stride_tricks.sliding_window_view(buf, frame_len)[starts]
    window = hann_window(frame_len)
    spec = np.fft.rfft(frames * window, axis=1)
    return Spectrogram(values=spec, frame_len=frame_len, hop=hop, out_len=n)


def istft(spec: Spectrogram, hop: int | None = None, out_len: int | None = None) -> np.ndarray:
    """Overlap-add inverse with summed-squared-window normalization."""
    if hop is not None and hop != spec.hop:
        raise ValueError(f"hop mismatch: spectrogram has {spec.hop}, got {hop}")
    hop = spec.hop
    if out_len is None:
        out_len = spec.out_len

    frame_len = spec.frame_len
    window = hann_window(frame_len)
    frames = np.fft.irfft(spec.values, n=frame_len, axis=1) * window

    total = (spec.n_frames - 1) * hop + frame_len
    out = np.zeros(total, dtype=np.float64)
    norm = np.zeros(total, dtype=np.float64)
    win_sq = window * window
    for i in range(spec.n_frames):
        s = i * hop
        out[s : s + frame_len] += frames[i]
        norm[s : s + frame_len] += win_sq
    out /= np.maximum(norm, _WIN_NORM_FLOOR)

    if hop + out_len > total:
        raise ValueError(f"out_len {out_len} exceeds synthesized length")
    return out[hop : hop + out_len]


def spec_to_channels(spec: Spectrogram) -> np.ndarray:
    """Pack a complex spectrogram into a (T, F, 2) real array (re, im)."""
    return np.stack([spec.values.real, spec.values.imag], axis=-1)


def channels_to_spec(
    arr: np.ndarray, frame_len: int, hop: int, out_len: int | None = None
) -> Spectrogram:
    arr = np.asarray(arr)
    if arr.ndim != 3 or arr.shape[-1] != 2:
        raise ValueError(f"expected shape (T, F, 2), got {arr.shape}")
    values = arr[..., 0].astype(np.float64) + 1j * arr[..., 1].astype(np.float64)
    if out_len is None:
        out_len = (arr.shape[0] - 1) * hop
    return Spectrogram(values=values, frame_len=frame_len, hop=hop, out_len=out_len)


def energy(x: np.ndarray) -> float:
    x = np.asarray(x, dtype=np.float64)
    return float(np.sum(x * x))


def mix_at_snr(clean: np.ndarray, noise: np.ndarray, snr_db: float):
    """Return (clean + scale * noise, scale) hitting the requested SNR."""
    clean = np.asarray(clean, dtype=np.float64)
    noise = np.asarray(noise, dtype=np.float64)
    if clean.shape != noise.shape:
        raise ValueError(f"length mismatch: {clean.shape} vs {noise.shape}")
    e_clean, e_noise = energy(clean), energy(noise)
    if e_clean == 0.0 or e_noise == 0.0:
        raise DegenerateInputError("mix_at_snr needs nonzero-energy inputs")
    scale = math.sqrt(e_clean / (e_noise * 10.0 ** (snr_db / 10.0)))
    return clean + scale * noise, scale


def mix_fixed(speech: np.ndarray, noise: np.ndarray, coeff: float = 0.3) -> np.ndarray:
    """Weighted linear mixture speech + coeff * noise."""
    speech = np.asarray(speech, dtype=np.float64)
    noise = np.asarray(noise, dtype=np.float64)
    if speech.shape != noise.shape:
        raise ValueError(f"length mismatch: {speech.shape} vs {noise.shape}")
    return speech + coeff * noise


def measure_snr(clean: np.ndarray, residual: np.ndarray) -> float:
    """10*log10(E_clean / E_residual); +inf flags a zero-energy residual."""
    clean = np.asarray(clean, dtype=np.float64)
    residual = np.asarray(residual, dtype=np.float64)
    if clean.shape != residual.shape:
        raise ValueError(f"length mismatch: {clean.shape} vs {residual.shape}")
    e_clean = energy(clean)
    if e_clean == 0.0:
        raise DegenerateInputError("measure_snr needs a nonzero-energy clean signal")
    e_res = energy(residual)
    if e_res == 0.0:
        return math.inf
    return 10.0 * math.log10(e_clean / e_res)


def load_wav(path) -> np.ndarray:
    """Load 16 kHz mono 16-bit PCM, normalized to [-1, 1]."""
    try:
        rate, data = wavfile.read(path)
    except (OSError, ValueError) as exc:
        raise ValueError(f"cannot read WAV {path}: {exc}") from exc
    if rate != SAMPLE_RATE:
        raise ValueError(f"{path}: expected {SAMPLE_RATE} Hz, got {rate}")
    if data.ndim != 1:
        raise ValueError(f"{path}: expected mono, got shape {data.shape}")
    if data.dtype != np.int16:
        raise ValueError(f"{path}: expected 16-bit PCM, got {data.dtype}")
    return data.astype(np.float64) / 32768.0


def save_wav(path, x: np.ndarray) -> None:
    x = np.asarray(x, dtype=np.float64)
    pcm = np.clip(np.round(x * 32767.0), -32768, 32767).astype(np.int16)
    wavfile.write(path, SAMPLE_RATE, pcm)
