"""Checkpoint persistence: binary parameter archive + JSON metadata.

A checkpoint is a directory holding

  params.bin  -- magic, version, then named float32 little-endian arrays,
                 each shape-prefixed
  meta.json   -- schema version, stage tag, global step, full config,
                 optimizer param groups and integer buffers

Round trips are bit-exact: loading a checkpoint and re-running a forward
pass reproduces the pre-save outputs bit for bit on the same machine.
"""

from __future__ import annotations

import json
import struct
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

MAGIC = b"SEKTCKPT"
BIN_VERSION = 1
SCHEMA_VERSION = 1


class CheckpointError(RuntimeError):
    """Unreadable, truncated, or version-mismatched checkpoint."""


@dataclass
class Checkpoint:
    backbone: "OrderedDict[str, torch.Tensor]"
    filter: "OrderedDict[str, torch.Tensor]"
    opt_backbone: dict
    opt_filter: dict
    config: dict
    stage: str
    step: int


def _write_array(fh, name: str, arr: np.ndarray):
    data = np.ascontiguousarray(arr, dtype="<f4")
    name_b = name.encode("utf-8")
    fh.write(struct.pack("<H", len(name_b)))
    fh.write(name_b)
    fh.write(struct.pack("<B", data.ndim))
    for d in data.shape:
        fh.write(struct.pack("<I", d))
    fh.write(data.tobytes())


def _read_exact(fh, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise CheckpointError("truncated parameter archive")
    return buf


def _read_array(fh):
    (name_len,) = struct.unpack("<H", _read_exact(fh, 2))
    name = _read_exact(fh, name_len).decode("utf-8")
    (ndim,) = struct.unpack("<B", _read_exact(fh, 1))
    shape = tuple(struct.unpack("<I", _read_exact(fh, 4))[0] for _ in range(ndim))
    count = int(np.prod(shape)) if shape else 1
    data = np.frombuffer(_read_exact(fh, 4 * count), dtype="<f4").reshape(shape)
    return name, data.copy()


def _split_state(state_dict):
    """Separate float arrays from integer buffers (e.g. BN batch counters)."""
    arrays, ints = OrderedDict(), {}
    for name, tensor in state_dict.items():
        if tensor.dtype in (torch.int64, torch.int32, torch.long):
            ints[name] = int(tensor.item()) if tensor.ndim == 0 else tensor.tolist()
        else:
            arrays[name] = tensor
    return arrays, ints


def _opt_arrays(opt_state: dict, prefix: str):
    """Flatten an optimizer state dict into named arrays + JSON leftovers."""
    arrays = OrderedDict()
    meta = {"param_groups": opt_state.get("param_groups", []), "steps": {}}
    for idx, slots in opt_state.get("state", {}).items():
        for slot, value in slots.items():
            if slot == "step":
                v = value.item() if isinstance(value, torch.Tensor) else value
                meta["steps"][str(idx)] = float(v)
            else:
                arrays[f"{prefix}/{idx}/{slot}"] = value
    return arrays, meta


def _opt_from_arrays(arrays: dict, meta: dict, prefix: str) -> dict:
    state = {}
    for name, arr in arrays.items():
        _, idx, slot = name.split("/")
        state.setdefault(int(idx), {})[slot] = torch.from_numpy(arr.copy())
    for idx_s, step in meta.get("steps", {}).items():
        state.setdefault(int(idx_s), {})["step"] = torch.tensor(float(step))
    return {"state": state, "param_groups": meta.get("param_groups", [])}


def save_checkpoint(ckpt: Checkpoint, path) -> Path:
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)

    backbone_arrays, backbone_ints = _split_state(ckpt.backbone)
    filter_arrays, filter_ints = _split_state(ckpt.filter)
    ob_arrays, ob_meta = _opt_arrays(ckpt.opt_backbone, "opt_backbone")
    of_arrays, of_meta = _opt_arrays(ckpt.opt_filter, "opt_filter")

    records = OrderedDict()
    for prefix, arrays in (("backbone", backbone_arrays), ("filter", filter_arrays)):
        for name, tensor in arrays.items():
            records[f"{prefix}/{name}"] = tensor.detach().cpu().numpy()
    for arrays in (ob_arrays, of_arrays):
        for name, tensor in arrays.items():
            records[name] = tensor.detach().cpu().numpy()

    with open(root / "params.bin", "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", BIN_VERSION, len(records)))
        for name, arr in records.items():
            _write_array(fh, name, arr)

    meta = {
        "schema_version": SCHEMA_VERSION,
        "stage": ckpt.stage,
        "step": ckpt.step,
        "config": ckpt.config,
        "torch_version": torch.__version__,
        "int_buffers": {"backbone": backbone_ints, "filter": filter_ints},
        "opt_backbone": ob_meta,
        "opt_filter": of_meta,
    }
    (root / "meta.json").write_text(json.dumps(meta, indent=2) + "\n", encoding="utf-8")
    return root


def load_checkpoint(path) -> Checkpoint:
    root = Path(path)
    bin_path, meta_path = root / "params.bin", root / "meta.json"
    if not bin_path.exists() or not meta_path.exists():
        raise CheckpointError(f"{root} is not a checkpoint directory")

    try:
        meta = json.loads(meta_path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"unreadable metadata: {exc}") from exc
    if meta.get("schema_version") != SCHEMA_VERSION:
        raise CheckpointError(
            f"schema version {meta.get('schema_version')} unsupported (want {SCHEMA_VERSION})"
        )

    records = {}
    with open(bin_path, "rb") as fh:
        if _read_exact(fh, len(MAGIC)) != MAGIC:
            raise CheckpointError("bad magic in parameter archive")
        version, count = struct.unpack("<II", _read_exact(fh, 8))
        if version != BIN_VERSION:
            raise CheckpointError(f"archive version {version} unsupported (want {BIN_VERSION})")
        for _ in range(count):
            name, arr = _read_array(fh)
            if name in records:
                raise CheckpointError(f"duplicate array {name!r}")
            records[name] = arr
        if fh.read(1):
            raise CheckpointError("trailing bytes in parameter archive")

    def collect(prefix):
        out = OrderedDict()
        for name, arr in records.items():
            if name.startswith(prefix + "/") and not name.startswith("opt_"):
                out[name[len(prefix) + 1 :]] = torch.from_numpy(arr)
        return out

    backbone = collect("backbone")
    filt = collect("filter")
    for section, ints in meta.get("int_buffers", {}).items():
        target = backbone if section == "backbone" else filt
        for name, value in ints.items():
            target[name] = torch.tensor(value, dtype=torch.int64)

    ob_arrays = {k: v for k, v in records.items() if k.startswith("opt_backbone/")}
    of_arrays = {k: v for k, v in records.items() if k.startswith("opt_filter/")}

    return Checkpoint(
        backbone=backbone,
        filter=filt,
        opt_backbone=_opt_from_arrays(ob_arrays, meta["opt_backbone"], "opt_backbone"),
        opt_filter=_opt_from_arrays(of_arrays, meta["opt_filter"], "opt_filter"),
        config=meta["config"],
        stage=meta["stage"],
        step=meta["step"],
    )
