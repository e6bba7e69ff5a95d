"""Seedable synthetic corpus: pseudo-speech, noise generators, manifests.

Stands in for licensed speech/noise corpora so the whole pipeline runs
from a cold checkout. Waveforms are pure functions of their seeds; a
manifest with the same seeds rebuilds bit-identical WAV files.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import signal as sps

from . import __version__
from .config import Config
from .dsp import SAMPLE_RATE, mix_at_snr, mix_fixed, save_wav, load_wav, stft, spec_to_channels

MANIFEST_SCHEMA_VERSION = 1
NOISE_KINDS = ("white", "filtered_burst", "babble")


@dataclass
class PseudoSpeechParams:
    f0_range: tuple = (90.0, 300.0)
    n_harmonics: int = 12
    am_rate: float = 4.0  # syllabic amplitude modulation, Hz
    segment_s: float = 4.0

    def __post_init__(self):
        lo, hi = self.f0_range
        if not (50.0 < lo < hi < 500.0):
            raise ValueError(f"f0_range must lie inside (50, 500): {self.f0_range}")
        if self.n_harmonics < 1:
            raise ValueError("n_harmonics must be >= 1")
        if self.segment_s <= 0 or self.am_rate <= 0:
            raise ValueError("segment_s and am_rate must be > 0")

    @classmethod
    def from_config(cls, cfg: Config) -> "PseudoSpeechParams":
        return cls(
            f0_range=(cfg.f0_min, cfg.f0_max),
            n_harmonics=cfg.n_harmonics,
            am_rate=cfg.am_rate,
            segment_s=cfg.segment_seconds,
        )


def gen_pseudo_speech(params: PseudoSpeechParams, seed: int) -> np.ndarray:
    """Harmonic tone complex with drifting f0, syllabic AM and silent gaps.

    Deterministic per seed; peak-normalized to 0.9. Harmonics stay below
    n_harmonics * f0_max, so energy above 4 kHz is negligible with the
    default parameters.
    """
    rng = np.random.default_rng(seed)
    n = int(round(params.segment_s * SAMPLE_RATE))
    t = np.arange(n) / SAMPLE_RATE

    # f0 drifts smoothly inside its range: two slow sinusoids with random
    # phase/rate, mapped into [f0_min, f0_max].
    lo, hi = params.f0_range
    drift = 0.6 * np.sin(2 * np.pi * rng.uniform(0.1, 0.3) * t + rng.uniform(0, 2 * np.pi))
    drift += 0.4 * np.sin(2 * np.pi * rng.uniform(0.03, 0.1) * t + rng.uniform(0, 2 * np.pi))
    f0 = lo + (hi - lo) * (0.5 + 0.5 * np.clip(drift, -1.0, 1.0))
    phase = 2.0 * np.pi * np.cumsum(f0) / SAMPLE_RATE

    x = np.zeros(n)
    for k in range(1, params.n_harmonics + 1):
        amp = k ** -1.2 * rng.uniform(0.6, 1.0)
        x += amp * np.sin(k * phase + rng.uniform(0, 2 * np.pi))

    # Syllabic envelope plus hard gaps: one syllable cell per AM period,
    # ~20% of cells silenced, at least one gap forced per 2 s.
    env = 0.55 + 0.45 * np.sin(2 * np.pi * params.am_rate * t + rng.uniform(0, 2 * np.pi))
    cell = max(1, int(round(SAMPLE_RATE / params.am_rate)))
    n_cells = max(1, n // cell)
    gate = np.ones(n)
    silenced = rng.random(n_cells) < 0.2
    cells_per_2s = max(1, int(round(2.0 * SAMPLE_RATE / cell)))
    for blk in range(0, n_cells, cells_per_2s):
        blk_slice = silenced[blk : blk + cells_per_2s]
        if blk_slice.size and not blk_slice.any():
            blk_slice[rng.integers(blk_slice.size)] = True
    ramp = np.hanning(2 * int(0.005 * SAMPLE_RATE))
    half = ramp.size // 2
    for i in np.nonzero(silenced)[0]:
        s, e = i * cell, min((i + 1) * cell, n)
        gate[s:e] = 0.0
        if s - half >= 0:
            gate[s - half : s] *= ramp[half:][::-1]
        if e + half <= n:
            gate[e : e + half] *= ramp[half:]

    x *= env * gate
    peak = np.max(np.abs(x))
    if peak > 0:
        x *= 0.9 / peak
    return x


def _gen_white(n: int, rng: np.random.Generator) -> np.ndarray:
    return rng.standard_normal(n)


def _gen_filtered_burst(n: int, rng: np.random.Generator) -> np.ndarray:
    """Factory-like noise: band-passed hum plus random impulsive bursts."""
    base = rng.standard_normal(n)
    sos = sps.butter(2, [250.0, 2200.0], btype="bandpass", fs=SAMPLE_RATE, output="sos")
    x = sps.sosfilt(sos, base)
    env = np.ones(n)
    n_bursts = max(1, int(n / SAMPLE_RATE * 3))  # ~3 bursts/s
    decay = np.exp(-np.arange(int(0.05 * SAMPLE_RATE)) / (0.01 * SAMPLE_RATE))
    for _ in range(n_bursts):
        pos = rng.integers(0, n)
        gain = rng.uniform(2.0, 6.0)
        end = min(n, pos + decay.size)
        env[pos:end] += gain * decay[: end - pos]
    return x * env


def _gen_babble(n: int, rng: np.random.Generator, streams: int = 6) -> np.ndarray:
    params = PseudoSpeechParams(segment_s=n / SAMPLE_RATE)
    x = np.zeros(n)
    for _ in range(streams):
        x += gen_pseudo_speech(params, int(rng.integers(0, 2**31 - 1)))[:n]
    return x


def gen_noise(kind: str, duration_s: float, seed: int, babble_streams: int = 6) -> np.ndarray:
    """Unit-RMS noise of the given kind; `a+b` sums kinds before normalizing."""
    if duration_s <= 0:
        raise ValueError("duration must be > 0")
    n = int(round(duration_s * SAMPLE_RATE))
    rng = np.random.default_rng(seed)
    parts = kind.split("+")
    x = np.zeros(n)
    for part in parts:
        if part == "white":
            comp = _gen_white(n, rng)
        elif part == "filtered_burst":
            comp = _gen_filtered_burst(n, rng)
        elif part == "babble":
            comp = _gen_babble(n, rng, streams=babble_streams)
        else:
            raise ValueError(f"unknown noise kind: {part!r}")
        rms = np.sqrt(np.mean(comp**2))
        x += comp / rms
    rms = np.sqrt(np.mean(x**2))
    return x / rms


@dataclass
class ManifestEntry:
    id: str
    split: str
    clean_seed: int
    noise_kind: str
    noise_seed: int
    mix_rule: dict  # {"kind": "snr", "snr_db": x} or {"kind": "fixed", "coeff": c}
    clean_path: str
    noise_path: str
    mix_path: str
    gain: float = 1.0  # joint de-clip gain applied to the stored triplet

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "split": self.split,
            "clean_seed": self.clean_seed,
            "noise_kind": self.noise_kind,
            "noise_seed": self.noise_seed,
            "mix_rule": self.mix_rule,
            "clean_path": self.clean_path,
            "noise_path": self.noise_path,
            "mix_path": self.mix_path,
            "gain": self.gain,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ManifestEntry":
        return cls(
            id=d["id"],
            split=d["split"],
            clean_seed=d["clean_seed"],
            noise_kind=d["noise_kind"],
            noise_seed=d["noise_seed"],
            mix_rule=d["mix_rule"],
            clean_path=d["clean_path"],
            noise_path=d["noise_path"],
            mix_path=d["mix_path"],
            gain=d.get("gain", 1.0),
        )


@dataclass
class DatasetManifest:
    root: Path
    entries: list = field(default_factory=list)

    def split(self, name: str) -> list:
        return [e for e in self.entries if e.split == name]

    def by_id(self, entry_id: str) -> ManifestEntry:
        for e in self.entries:
            if e.id == entry_id:
                return e
        raise KeyError(f"no manifest entry with id {entry_id!r}")

    def save(self, path=None) -> Path:
        path = Path(path) if path else self.root / "manifest.json"
        doc = {
            "schema_version": MANIFEST_SCHEMA_VERSION,
            "generator_version": __version__,
            "numpy_version": np.__version__,
            "sample_rate": SAMPLE_RATE,
            "entries": [e.to_dict() for e in self.entries],
        }
        path.write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")
        return path

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        path = Path(path)
        doc = json.loads(path.read_text(encoding="utf-8"))
        if doc.get("schema_version") != MANIFEST_SCHEMA_VERSION:
            raise ValueError(
                f"{path}: manifest schema {doc.get('schema_version')} "
                f"unsupported (want {MANIFEST_SCHEMA_VERSION})"
            )
        m = cls(root=path.parent)
        m.entries = [ManifestEntry.from_dict(d) for d in doc["entries"]]
        ids = [e.id for e in m.entries]
        if len(ids) != len(set(ids)):
            raise ValueError(f"{path}: duplicate entry ids")
        return m


def _plan_entries(cfg: Config) -> list:
    """Deterministic entry plan: seeds, noise kinds, mix rules per split."""
    rng = np.random.default_rng(cfg.data_seed)
    plan = []
    split_sizes = (("train", cfg.n_train), ("val", cfg.n_val), ("test", cfg.n_test))
    for split, count in split_sizes:
        levels = cfg.train_snr_db if split == "train" else cfg.eval_snr_db
        for i in range(count):
            entry_id = f"{split}-{i:04d}"
            kind = cfg.noise_kinds[i % len(cfg.noise_kinds)]
            if cfg.mix_rule == "fixed":
                rule = {"kind": "fixed", "coeff": cfg.fixed_coeff}
            else:
                rule = {"kind": "snr", "snr_db": float(levels[i % len(levels)])}
            plan.append(
                ManifestEntry(
                    id=entry_id,
                    split=split,
                    clean_seed=int(rng.integers(0, 2**31 - 1)),
                    noise_kind=kind,
                    noise_seed=int(rng.integers(0, 2**31 - 1)),
                    mix_rule=rule,
                    clean_path=f"clean/{entry_id}.wav",
                    noise_path=f"noise/{entry_id}.wav",
                    mix_path=f"mix/{entry_id}.wav",
                )
            )
    return plan


def synthesize_entry(entry: ManifestEntry, cfg: Config):
    """Regenerate (clean, noise, mix) for an entry, de-clipped jointly."""
    params = PseudoSpeechParams.from_config(cfg)
    clean = gen_pseudo_speech(params, entry.clean_seed)
    noise = gen_noise(
        entry.noise_kind, cfg.segment_seconds, entry.noise_seed, babble_streams=cfg.babble_streams
    )
    rule = entry.mix_rule
    if rule["kind"] == "snr":
        mix, scale = mix_at_snr(clean, noise, rule["snr_db"])
        noise_scaled = scale * noise
    else:
        noise_scaled = noise  # store the unscaled noise; mix applies coeff
        mix = mix_fixed(clean, noise, rule["coeff"])
    peak = max(np.max(np.abs(mix)), np.max(np.abs(clean)), np.max(np.abs(noise_scaled)))
    gain = min(1.0, 0.95 / peak) if peak > 0 else 1.0
    entry.gain = float(gain)
    return clean * gain, noise_scaled * gain, mix * gain


def build_dataset(cfg: Config, out_dir) -> DatasetManifest:
    """Generate all WAV triplets plus manifest.json under out_dir."""
    root = Path(out_dir)
    manifest = DatasetManifest(root=root)
    manifest.entries = _plan_entries(cfg)
    if manifest.entries:
        for sub in ("clean", "noise", "mix"):
            (root / sub).mkdir(parents=True, exist_ok=True)
    else:
        root.mkdir(parents=True, exist_ok=True)
    for entry in manifest.entries:
        try:
            clean, noise, mix = synthesize_entry(entry, cfg)
            save_wav(root / entry.clean_path, clean)
            save_wav(root / entry.noise_path, noise)
            save_wav(root / entry.mix_path, mix)
        except Exception as exc:
            raise RuntimeError(f"failed to build entry {entry.id}: {exc}") from exc
    manifest.save()
    return manifest


def load_pair(entry: ManifestEntry, root, cfg: Config):
    """Load (noisy, clean) as (T, F, 2) float32 arrays scaled by spec_scale."""
    root = Path(root)
    out = []
    for rel in (entry.mix_path, entry.clean_path):
        path = root / rel
        if not path.exists():
            raise FileNotFoundError(f"entry {entry.id}: missing file {path}")
        try:
            wav = load_wav(path)
        except ValueError as exc:
            raise ValueError(f"entry {entry.id}: {exc}") from exc
        spec = stft(wav, cfg.frame_len, cfg.hop)
        out.append((spec_to_channels(spec) * cfg.spec_scale).astype(np.float32))
    noisy, clean = out
    return noisy, clean
