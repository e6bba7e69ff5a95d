"""Evaluation harness: file enhancement, complexity accounting, ablations.

Produces machine-readable reports: per-utterance CSV, aggregate JSON, and
metric-vs-SNR SVG plots. An external PESQ binary can be hooked in via
``pesq_cmd``; scores it prints are merged into the reports.
"""

from __future__ import annotations

import csv
import json
import re
import statistics
import subprocess
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .checkpoint import Checkpoint, load_checkpoint
from .config import Config
from .dsp import channels_to_spec, istft, load_wav, save_wav, spec_to_channels, stft
from .metrics import si_sdr, stoi
from .network import Enhancer, count_network_flops, make_mask_provider
from .policy import FeatureFilter
from .synth import DatasetManifest
from .training import PairDataset, restore_models, stage1_train, stage2_train


def count_flops(cfg: Config, t_frames: int, nonlocal_fractions=None, with_filter=None) -> int:
    """Analytic MAC count of one forward at the config's geometry."""
    from .network import NetworkConfig

    net = NetworkConfig.from_config(cfg)
    if with_filter is None:
        with_filter = net.fusion == "feature_filter"
    f_bins = cfg.frame_len // 2 + 1
    return count_network_flops(
        net, t_frames, f_bins, nonlocal_fractions=nonlocal_fractions, with_filter=with_filter
    )


def enhance_waveform(model, filt, cfg: Config, wav: np.ndarray, routing="argmax") -> np.ndarray:
    """stft -> routed forward -> istft; routing in argmax / all_local /
    all_nonlocal / random."""
    spec = stft(wav, cfg.frame_len, cfg.hop)
    arr = (spec_to_channels(spec) * cfg.spec_scale).astype(np.float32)
    y = torch.from_numpy(arr).permute(2, 0, 1).unsqueeze(0)

    model.eval()
    if filt is not None:
        filt.eval()
    with torch.no_grad():
        if routing == "argmax":
            provider = make_mask_provider(
                "policy", model, policy=filt, mode="argmax", routing=cfg.routing
            )
        else:
            provider = make_mask_provider(
                routing, model, generator=torch.Generator().manual_seed(0)
            )
        trace = model(y, mask_provider=provider, need_intermediates=False)
    out = trace.s_pred[0].permute(1, 2, 0).numpy().astype(np.float64) / cfg.spec_scale
    return istft(channels_to_spec(out, cfg.frame_len, cfg.hop, out_len=len(wav)))


def run_pesq_cmd(pesq_cmd: str, ref_wav, deg_wav):
    """Invoke an external PESQ binary; returns its last printed float."""
    try:
        proc = subprocess.run(
            [pesq_cmd, str(ref_wav), str(deg_wav)],
            capture_output=True, text=True, timeout=120, check=True,
        )
    except (OSError, subprocess.SubprocessError) as exc:
        raise RuntimeError(f"pesq command failed: {exc}") from exc
    floats = re.findall(r"-?\d+\.\d+", proc.stdout)
    if not floats:
        raise RuntimeError(f"pesq command printed no score: {proc.stdout!r}")
    return float(floats[-1])


def enhance_file(ckpt_path, in_wav, out_wav, reference=None, pesq_cmd=None) -> dict:
    """Enhance one WAV with argmax routing; returns a per-file report row."""
    ckpt = ckpt_path if isinstance(ckpt_path, Checkpoint) else load_checkpoint(ckpt_path)
    model, filt, _, _, cfg = restore_models(ckpt)
    wav = load_wav(in_wav)
    enhanced = enhance_waveform(model, filt, cfg, wav, routing="argmax")
    save_wav(out_wav, np.clip(enhanced, -1.0, 1.0))

    row = {"input": str(in_wav), "output": str(out_wav), "n_samples": len(wav)}
    if reference is not None:
        ref = load_wav(reference)
        row["stoi"] = stoi(ref, enhanced)
        row["si_sdr"] = si_sdr(ref, enhanced)
        row["stoi_noisy"] = stoi(ref, wav)
        row["si_sdr_noisy"] = si_sdr(ref, wav)
        if pesq_cmd:
            row["pesq"] = run_pesq_cmd(pesq_cmd, reference, out_wav)
    return row


def measure_rtf(model, filt, cfg: Config, wav: np.ndarray, routing="argmax", runs=5, warmup=1) -> float:
    """Median wall-clock enhancement time over audio duration."""
    duration = len(wav) / cfg.sample_rate
    for _ in range(warmup):
        enhance_waveform(model, filt, cfg, wav, routing=routing)
    times = []
    for _ in range(runs):
        t0 = time.perf_counter()
        enhance_waveform(model, filt, cfg, wav, routing=routing)
        times.append(time.perf_counter() - t0)
    return statistics.median(times) / duration


# ---------------------------------------------------------------------------
# Corpus evaluation
# ---------------------------------------------------------------------------


def evaluate_corpus(ckpt, manifest: DatasetManifest, split="test", pesq_cmd=None,
                    routing="argmax", out_dir=None, log=None) -> dict:
    """Enhance a manifest split and aggregate metrics; write reports."""
    ckpt = ckpt if isinstance(ckpt, Checkpoint) else load_checkpoint(ckpt)
    model, filt, _, _, cfg = restore_models(ckpt)

    rows = []
    tmp_dir = Path(out_dir) / "enhanced" if out_dir else None
    if tmp_dir:
        tmp_dir.mkdir(parents=True, exist_ok=True)
    for entry in manifest.split(split):
        noisy = load_wav(manifest.root / entry.mix_path)
        clean = load_wav(manifest.root / entry.clean_path)
        enhanced = enhance_waveform(model, filt, cfg, noisy, routing=routing)
        row = {
            "id": entry.id,
            "noise_kind": entry.noise_kind,
            "snr_db": entry.mix_rule.get("snr_db", ""),
            "stoi": stoi(clean, enhanced),
            "si_sdr": si_sdr(clean, enhanced),
            "stoi_noisy": stoi(clean, noisy),
            "si_sdr_noisy": si_sdr(clean, noisy),
        }
        if tmp_dir or pesq_cmd:
            out_wav = (tmp_dir or manifest.root) / f"{entry.id}_enhanced.wav"
            save_wav(out_wav, np.clip(enhanced, -1.0, 1.0))
            if pesq_cmd:
                row["pesq"] = run_pesq_cmd(pesq_cmd, manifest.root / entry.clean_path, out_wav)
        rows.append(row)
        if log:
            log(f"eval {entry.id}: stoi {row['stoi']:.3f} (noisy {row['stoi_noisy']:.3f})")

    t_frames = 1 + int(np.ceil(len(noisy) / cfg.hop))
    summary = {
        "split": split,
        "count": len(rows),
        "routing": routing,
        "stoi": float(np.mean([r["stoi"] for r in rows])),
        "si_sdr": float(np.mean([r["si_sdr"] for r in rows])),
        "stoi_noisy": float(np.mean([r["stoi_noisy"] for r in rows])),
        "si_sdr_noisy": float(np.mean([r["si_sdr_noisy"] for r in rows])),
        "flops": count_flops(cfg, t_frames),
        "by_snr": _group_means(rows, "snr_db"),
        "by_noise_kind": _group_means(rows, "noise_kind"),
    }
    if any("pesq" in r for r in rows):
        summary["pesq"] = float(np.mean([r["pesq"] for r in rows if "pesq" in r]))
    if out_dir:
        write_report(rows, summary, out_dir)
    return {"rows": rows, "summary": summary}


def _group_means(rows, key):
    groups = {}
    for r in rows:
        groups.setdefault(r[key], []).append(r)
    return {
        str(k): {
            "stoi": float(np.mean([r["stoi"] for r in g])),
            "si_sdr": float(np.mean([r["si_sdr"] for r in g])),
            "count": len(g),
        }
        for k, g in sorted(groups.items(), key=lambda kv: str(kv[0]))
    }


def write_report(rows, summary, out_dir, name="report"):
    """CSV per utterance + JSON summary + metric-vs-SNR SVG plot."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if rows:
        fields = list(rows[0].keys())
        for r in rows[1:]:
            for k in r:
                if k not in fields:
                    fields.append(k)
        with open(out / f"{name}.csv", "w", newline="", encoding="utf-8") as fh:
            writer = csv.DictWriter(fh, fieldnames=fields, quoting=csv.QUOTE_MINIMAL)
            writer.writeheader()
            writer.writerows(rows)
    (out / f"{name}.json").write_text(json.dumps(summary, indent=2) + "\n", encoding="utf-8")
    try:
        plot_metric_vs_snr(summary, out / f"{name}_stoi_vs_snr.svg")
    except Exception:
        pass  # plotting is best-effort; reports stay valid without it
    return out


def plot_metric_vs_snr(summary, out_svg):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    by_snr = summary.get("by_snr", {})
    pairs = []
    for k, v in by_snr.items():
        try:
            pairs.append((float(k), v))
        except ValueError:
            continue
    if not pairs:
        return
    pairs.sort()
    snrs = [p[0] for p in pairs]
    fig, axes = plt.subplots(1, 2, figsize=(8, 3))
    axes[0].plot(snrs, [p[1]["stoi"] for p in pairs], "o-")
    axes[0].set_xlabel("SNR (dB)")
    axes[0].set_ylabel("STOI")
    axes[1].plot(snrs, [p[1]["si_sdr"] for p in pairs], "s-")
    axes[1].set_xlabel("SNR (dB)")
    axes[1].set_ylabel("SI-SDR (dB)")
    fig.tight_layout()
    fig.savefig(out_svg, format="svg")
    plt.close(fig)


# ---------------------------------------------------------------------------
# Ablation runner
# ---------------------------------------------------------------------------


@dataclass
class AblationCase:
    case_id: int
    local_on: bool
    nonlocal_on: bool
    fusion: str
    n_blocks: int


ABLATION_CASES = {
    0: AblationCase(0, True, True, "feature_filter", 4),
    1: AblationCase(1, True, False, "none", 4),
    2: AblationCase(2, False, True, "none", 4),
    3: AblationCase(3, True, True, "concat", 4),
    4: AblationCase(4, True, True, "selective", 4),
    5: AblationCase(5, False, False, "none", 4),
    6: AblationCase(6, True, True, "feature_filter", 3),
    7: AblationCase(7, True, True, "feature_filter", 2),
    8: AblationCase(8, True, True, "feature_filter", 1),
    9: AblationCase(9, True, True, "feature_filter", 5),
}


def case_config(cfg: Config, case: AblationCase) -> Config:
    d = cfg.to_dict()
    d.update(
        local_attention=case.local_on,
        nonlocal_attention=case.nonlocal_on,
        fusion=case.fusion,
        n_dynamic_blocks=case.n_blocks,
    )
    return Config.from_dict(d)


def case_param_counts(cfg: Config, case: AblationCase):
    """(backbone params, filter params) for a case, without training."""
    from .network import NetworkConfig
    from .training import build_models

    ccfg = case_config(cfg, case)
    model, filt, _, _ = build_models(ccfg, seed=cfg.seed)
    backbone = sum(p.numel() for p in model.parameters())
    filter_params = (
        sum(p.numel() for p in filt.parameters()) if case.fusion == "feature_filter" else 0
    )
    return backbone, filter_params


def run_ablation(case_ids, manifest: DatasetManifest, cfg: Config, out_dir=None, log=None):
    """Train and evaluate cases under a shared seed and desk-scale budget.

    Per-case failures are caught and reported in that case's row; the
    remaining cases still run.
    """
    rows = []
    for cid in case_ids:
        case = ABLATION_CASES[int(cid)]
        try:
            rows.append(_run_case(case, manifest, cfg, log=log))
        except Exception as exc:  # noqa: BLE001 - isolate per-case failures
            rows.append({"case": case.case_id, "error": f"{type(exc).__name__}: {exc}"})
            if log:
                log(f"case {case.case_id} failed: {exc}")
    summary = {"cases": rows, "budget": {
        "n_train": cfg.ablation_n_train,
        "n_test": cfg.ablation_n_test,
        "stage1_epochs": cfg.ablation_stage1_epochs,
        "stage2_epochs": cfg.ablation_stage2_epochs,
        "seed": cfg.seed,
    }}
    if out_dir:
        write_report(rows, summary, out_dir, name="ablation")
    return rows


def _run_case(case: AblationCase, manifest: DatasetManifest, cfg: Config, log=None):
    ccfg = case_config(cfg, case)
    train_entries = manifest.split("train")[: cfg.ablation_n_train]
    test_entries = manifest.split("test")[: cfg.ablation_n_test]
    if not train_entries or not test_entries:
        raise ValueError("manifest too small for the ablation budget")

    sub_train = _subset_dataset(manifest, train_entries, ccfg)
    uses_filter = case.fusion == "feature_filter"
    s1_epochs = cfg.ablation_stage1_epochs
    s2_epochs = cfg.ablation_stage2_epochs

    if log:
        log(f"case {case.case_id}: training ({case.fusion}, N={case.n_blocks})")
    if uses_filter:
        res1 = stage1_train(ccfg, manifest, dataset=sub_train, epochs=s1_epochs, seed=cfg.seed)
        res = stage2_train(
            res1.checkpoint, ccfg, dataset=sub_train, epochs=s2_epochs, seed=cfg.seed
        )
    else:
        # no routing policy to train: spend the full budget on supervised
        res = stage1_train(
            ccfg, manifest, dataset=sub_train, epochs=s1_epochs + s2_epochs, seed=cfg.seed
        )

    model, filt, _, _, _ = restore_models(res.checkpoint)
    stoi_vals, sdr_vals = [], []
    routed = []
    for entry in test_entries:
        noisy = load_wav(manifest.root / entry.mix_path)
        clean = load_wav(manifest.root / entry.clean_path)
        routing = "argmax" if uses_filter else "all_local"
        enhanced = enhance_waveform(model, filt if uses_filter else None, ccfg, noisy, routing=routing)
        stoi_vals.append(stoi(clean, enhanced))
        sdr_vals.append(si_sdr(clean, enhanced))
    backbone_params, filter_params = case_param_counts(cfg, case)
    t_frames = 1 + int(np.ceil(len(noisy) / ccfg.hop))
    row = {
        "case": case.case_id,
        "local": case.local_on,
        "nonlocal": case.nonlocal_on,
        "fusion": case.fusion,
        "n_blocks": case.n_blocks,
        "stoi": float(np.mean(stoi_vals)),
        "si_sdr": float(np.mean(sdr_vals)),
        "params": backbone_params + filter_params,
        "filter_params": filter_params,
        "flops": count_flops(case_config(cfg, case), t_frames),
    }
    if log:
        log(f"case {case.case_id}: stoi {row['stoi']:.3f} params {row['params']}")
    return row


def _subset_dataset(manifest: DatasetManifest, entries, cfg: Config) -> PairDataset:
    sub = DatasetManifest(root=manifest.root, entries=list(entries))
    return PairDataset(sub, entries[0].split, cfg)
