"""Checkpoint directories.

Layout::

    ckpt/
      manifest.txt        run manifest (key=value)
      index.txt           "<tensor name> <blob file>" per line
      state.txt           trainer counters (full checkpoints only)
      blobs/<name>.bin    uint32 ndim, uint32 dims..., float32 data (little-endian)

Optimizer momentum buffers are stored as extra blobs named ``optim.<param>``.
"""

from __future__ import annotations

import dataclasses
import shutil
import struct
from pathlib import Path

import numpy as np
import torch

from .backbone import build_backbone, strip_for_inference
from .config import RunManifest
from .errors import CheckpointError
from .relation import build_model

MANIFEST = "manifest.txt"
INDEX = "index.txt"
STATE = "state.txt"
BLOB_DIR = "blobs"
TRAINING_ONLY_PREFIXES = ("rn.", "aux.", "logit_rib.")


def write_blob(path: Path, tensor: torch.Tensor) -> None:
    array = tensor.detach().cpu().to(torch.float32).numpy()
    with open(path, "wb") as fh:
        fh.write(struct.pack("<I", array.ndim))
        fh.write(struct.pack(f"<{array.ndim}I", *array.shape))
        fh.write(array.astype("<f4").tobytes())


def read_blob(path: Path, name: str = "") -> torch.Tensor:
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(str(exc), name) from None
    try:
        (ndim,) = struct.unpack_from("<I", raw, 0)
        if ndim > 8:
            raise ValueError(f"implausible rank {ndim}")
        shape = struct.unpack_from(f"<{ndim}I", raw, 4)
        offset = 4 + 4 * ndim
        count = int(np.prod(shape)) if ndim else 1
        if len(raw) - offset != 4 * count:
            raise ValueError(f"payload is {len(raw) - offset} bytes, header implies {4 * count}")
    except (struct.error, ValueError) as exc:
        raise CheckpointError(f"corrupt blob ({exc})", name) from None
    data = np.frombuffer(raw, dtype="<f4", offset=offset, count=count).reshape(shape)
    return torch.from_numpy(data.astype(np.float32))


def _blob_file(name: str) -> str:
    return f"{BLOB_DIR}/{name}.bin"


def save_checkpoint(out_dir, manifest: RunManifest, tensors: dict[str, torch.Tensor],
                    state: dict[str, int] | None = None) -> Path:
    out_dir = Path(out_dir)
    if out_dir.exists():
        shutil.rmtree(out_dir)
    (out_dir / BLOB_DIR).mkdir(parents=True)
    lines = []
    for name in sorted(tensors):
        write_blob(out_dir / _blob_file(name), tensors[name])
        lines.append(f"{name} {_blob_file(name)}")
    (out_dir / INDEX).write_text("\n".join(lines) + "\n", encoding="utf-8")
    (out_dir / MANIFEST).write_text(manifest.to_text(), encoding="utf-8")
    if state is not None:
        (out_dir / STATE).write_text("".join(f"{k}={v}\n" for k, v in state.items()), encoding="utf-8")
    return out_dir


def read_index(ckpt_dir) -> dict[str, str]:
    ckpt_dir = Path(ckpt_dir)
    index = ckpt_dir / INDEX
    if not index.is_file():
        raise CheckpointError(f"{ckpt_dir}: missing {INDEX}")
    out = {}
    for line in index.read_text(encoding="utf-8").splitlines():
        if line.strip():
            name, rel = line.split()
            out[name] = rel
    return out


def load_tensors(ckpt_dir) -> dict[str, torch.Tensor]:
    ckpt_dir = Path(ckpt_dir)
    return {name: read_blob(ckpt_dir / rel, name) for name, rel in read_index(ckpt_dir).items()}


def load_manifest(ckpt_dir) -> RunManifest:
    path = Path(ckpt_dir) / MANIFEST
    if not path.is_file():
        raise CheckpointError(f"{ckpt_dir}: missing {MANIFEST}")
    return RunManifest.from_text(path.read_text(encoding="utf-8"), source=str(path))


def load_state(ckpt_dir) -> dict[str, int]:
    path = Path(ckpt_dir) / STATE
    if not path.is_file():
        return {}
    out = {}
    for line in path.read_text(encoding="utf-8").splitlines():
        if "=" in line:
            key, value = line.split("=", 1)
            out[key.strip()] = int(value)
    return out


def model_tensors(module: torch.nn.Module) -> dict[str, torch.Tensor]:
    return dict(module.state_dict())


def apply_tensors(module: torch.nn.Module, tensors: dict[str, torch.Tensor]) -> None:
    own = module.state_dict()
    missing = sorted(set(own) - set(tensors))
    if missing:
        raise CheckpointError(f"checkpoint lacks {len(missing)} tensors", missing[0])
    for name, target in own.items():
        value = tensors[name]
        if tuple(value.shape) != tuple(target.shape):
            raise CheckpointError(f"shape {tuple(value.shape)} != {tuple(target.shape)}", name)
    module.load_state_dict({name: tensors[name].to(own[name].dtype) for name in own})


def load_model(ckpt_dir):
    """Rebuild the bundle (or bare backbone, for stripped checkpoints)."""
    manifest = load_manifest(ckpt_dir)
    tensors = load_tensors(ckpt_dir)
    backbone = build_backbone(manifest.backbone, manifest.num_classes, manifest.input_shape, seed=manifest.cfg.seed)
    if manifest.stripped:
        prefix = "backbone."
        apply_tensors(backbone, {k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)})
        return backbone, manifest
    model = build_model(backbone, manifest.cfg)
    apply_tensors(model, {k: v for k, v in tensors.items() if not k.startswith("optim.")})
    return model, manifest


def export_stripped(ckpt_dir, out_dir) -> Path:
    """Write a backbone-only copy of ``ckpt_dir``; idempotent on stripped input."""
    if Path(out_dir).resolve() == Path(ckpt_dir).resolve():
        raise CheckpointError(f"{out_dir}: export target must differ from the source checkpoint")
    model, manifest = load_model(ckpt_dir)
    backbone = strip_for_inference(model)
    tensors = {f"backbone.{k}": v for k, v in backbone.state_dict().items()}
    return save_checkpoint(out_dir, dataclasses.replace(manifest, stripped=True), tensors)
