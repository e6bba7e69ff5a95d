"""Command-line interface.

Subcommands:
  sekit synth   --config <path> --out <dir>
  sekit train   --stage {1,2} --config <path> [--resume <ckpt>] [--seed N]
  sekit eval    --ckpt <dir> --manifest <path> [--pesq-cmd <exe>]
  sekit enhance --ckpt <dir> --in <wav> --out <wav> [--ref <wav>]
  sekit ablate  --cases 0..9 --config <path>
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .checkpoint import load_checkpoint
from .config import Config, load_config
from .synth import DatasetManifest, build_dataset


def _load_cfg(path) -> Config:
    return load_config(path) if path else Config()


def _manifest_for(cfg: Config, override=None) -> DatasetManifest:
    path = Path(override) if override else Path(cfg.data_dir) / "manifest.json"
    if not path.exists():
        raise SystemExit(f"manifest not found at {path}; run `sekit synth` first")
    return DatasetManifest.load(path)


def cmd_synth(args):
    cfg = _load_cfg(args.config)
    manifest = build_dataset(cfg, args.out)
    print(f"wrote {len(manifest.entries)} entries under {args.out}")


def cmd_train(args):
    from .training import stage1_train, stage2_train

    cfg = _load_cfg(args.config)
    manifest = _manifest_for(cfg, args.data)
    out_dir = Path(args.out) if args.out else Path(cfg.ckpt_dir) / f"stage{args.stage}"
    log = print if not args.quiet else None

    if args.stage == 1:
        res = stage1_train(cfg, manifest, out_dir=out_dir, seed=args.seed, log=log)
    else:
        if not args.resume:
            raise SystemExit("stage 2 requires --resume <stage-1 checkpoint>")
        ckpt = load_checkpoint(args.resume)
        res = stage2_train(ckpt, cfg, manifest, out_dir=out_dir, seed=args.seed, log=log)
    print(f"checkpoint written to {out_dir} (final loss {res.loss_history[-1]:.5f})")


def cmd_eval(args):
    from .evaluate import evaluate_corpus

    manifest = DatasetManifest.load(args.manifest)
    out_dir = args.out or (Path(args.ckpt) / "reports")
    result = evaluate_corpus(
        args.ckpt,
        manifest,
        split=args.split,
        pesq_cmd=args.pesq_cmd,
        out_dir=out_dir,
        log=print if not args.quiet else None,
    )
    s = result["summary"]
    print(
        f"{s['count']} utterances: stoi {s['stoi']:.4f} (noisy {s['stoi_noisy']:.4f}) "
        f"si_sdr {s['si_sdr']:.2f} dB; reports in {out_dir}"
    )


def cmd_enhance(args):
    from .evaluate import enhance_file

    row = enhance_file(
        args.ckpt, args.infile, args.outfile, reference=args.ref, pesq_cmd=args.pesq_cmd
    )
    msg = f"enhanced {args.infile} -> {args.outfile}"
    if "stoi" in row:
        msg += f" (stoi {row['stoi']:.4f}, si_sdr {row['si_sdr']:.2f} dB)"
    print(msg)


def _parse_cases(spec: str):
    out = []
    for part in spec.split(","):
        part = part.strip()
        if ".." in part:
            lo, hi = part.split("..")
            out.extend(range(int(lo), int(hi) + 1))
        elif part:
            out.append(int(part))
    bad = [c for c in out if c not in range(10)]
    if bad:
        raise SystemExit(f"unknown ablation cases: {bad}")
    return out


def cmd_ablate(args):
    from .evaluate import run_ablation

    cfg = _load_cfg(args.config)
    manifest = _manifest_for(cfg, args.data)
    out_dir = args.out or "ablation"
    rows = run_ablation(
        _parse_cases(args.cases), manifest, cfg, out_dir=out_dir,
        log=print if not args.quiet else None,
    )
    width = max(len(str(r.get("case", ""))) for r in rows)
    for r in rows:
        if "error" in r:
            print(f"case {r['case']:>{width}}: FAILED {r['error']}")
        else:
            print(
                f"case {r['case']:>{width}}: stoi {r['stoi']:.4f} si_sdr {r['si_sdr']:.2f} "
                f"params {r['params']} flops {r['flops']}"
            )
    print(f"reports in {out_dir}")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sekit", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("synth", help="generate a synthetic corpus")
    sp.add_argument("--config", default=None)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_synth)

    tp = sub.add_parser("train", help="run stage-1 or stage-2 training")
    tp.add_argument("--stage", type=int, choices=(1, 2), required=True)
    tp.add_argument("--config", default=None)
    tp.add_argument("--resume", default=None, help="checkpoint to continue from")
    tp.add_argument("--seed", type=int, default=None)
    tp.add_argument("--data", default=None, help="manifest path (default: config data_dir)")
    tp.add_argument("--out", default=None, help="checkpoint output directory")
    tp.add_argument("--quiet", action="store_true")
    tp.set_defaults(func=cmd_train)

    ep = sub.add_parser("eval", help="evaluate a checkpoint on a manifest split")
    ep.add_argument("--ckpt", required=True)
    ep.add_argument("--manifest", required=True)
    ep.add_argument("--split", default="test")
    ep.add_argument("--pesq-cmd", dest="pesq_cmd", default=None)
    ep.add_argument("--out", default=None)
    ep.add_argument("--quiet", action="store_true")
    ep.set_defaults(func=cmd_eval)

    np_ = sub.add_parser("enhance", help="enhance a single WAV file")
    np_.add_argument("--ckpt", required=True)
    np_.add_argument("--in", dest="infile", required=True)
    np_.add_argument("--out", dest="outfile", required=True)
    np_.add_argument("--ref", default=None, help="clean reference for metrics")
    np_.add_argument("--pesq-cmd", dest="pesq_cmd", default=None)
    np_.set_defaults(func=cmd_enhance)

    ap = sub.add_parser("ablate", help="train/evaluate ablation cases")
    ap.add_argument("--cases", default="0..9", help="e.g. 0..9 or 0,3,5")
    ap.add_argument("--config", default=None)
    ap.add_argument("--data", default=None)
    ap.add_argument("--out", default=None)
    ap.add_argument("--quiet", action="store_true")
    ap.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    args.func(args)
    return 0


if __name__ == "__main__":
    sys.exit(main())
