"""Flat float32 checkpoint container.

A checkpoint is a directory holding exactly two files:

  index.json  - {"entries": [{name, dtype, shape, byte_offset}, ...],
                 "metadata": {...}}
  params.bin  - the tensors' row-major little-endian float32 bytes,
                concatenated in index order

The format is deliberately dumb: language portable, diffable, and byte
stable, so frozen-tensor checks and save/load round-trip tests can compare
raw bytes. Model checkpoints store only learnable parameters; probe tensors
are regenerated from the probe seed recorded in the metadata.
"""

from __future__ import annotations

import json
import os

import numpy as np
import torch

from . import denoiser as dn

INDEX_NAME = "index.json"
PARAMS_NAME = "params.bin"


def save_checkpoint(path: str, arrays: dict, metadata: dict) -> None:
    """Write name -> float32 array pairs plus metadata to directory `path`."""
    os.makedirs(path, exist_ok=True)
    entries = []
    offset = 0
    blobs = []
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr, dtype="<f4")
        entries.append(
            {"name": name, "dtype": "f32", "shape": list(arr.shape), "byte_offset": offset}
        )
        blob = arr.tobytes()
        blobs.append(blob)
        offset += len(blob)
    with open(os.path.join(path, PARAMS_NAME), "wb") as fh:
        for blob in blobs:
            fh.write(blob)
    index = {"entries": entries, "metadata": metadata}
    with open(os.path.join(path, INDEX_NAME), "w", encoding="utf-8") as fh:
        json.dump(index, fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_checkpoint(path: str) -> tuple[dict, dict]:
    """Read back (arrays, metadata); validates sizes against the index."""
    index_path = os.path.join(path, INDEX_NAME)
    if not os.path.exists(index_path):
        raise FileNotFoundError(f"no checkpoint index at {index_path}")
    with open(index_path, encoding="utf-8") as fh:
        index = json.load(fh)
    with open(os.path.join(path, PARAMS_NAME), "rb") as fh:
        raw = fh.read()
    expected = sum(int(np.prod(e["shape"])) * 4 for e in index["entries"])
    if expected != len(raw):
        raise ValueError(
            f"params.bin is {len(raw)} bytes but the index describes {expected}"
        )
    arrays = {}
    for e in index["entries"]:
        n = int(np.prod(e["shape"])) * 4
        off = e["byte_offset"]
        arrays[e["name"]] = np.frombuffer(raw[off:off + n], dtype="<f4").reshape(e["shape"]).copy()
    return arrays, index["metadata"]


def _model_arrays(model) -> dict:
    return {name: p.detach().numpy() for name, p in model.named_parameters()}


def save_model(path: str, model, train_step: int = 0) -> None:
    metadata = {
        "kind": "denoiser",
        "architecture_hash": dn.architecture_hash(model),
        "vocabulary": list(model.text.vocab.tokens),
        "probe_seed": model.probe_seed,
        "train_step": int(train_step),
    }
    save_checkpoint(path, _model_arrays(model), metadata)


def load_model(path: str, model) -> dict:
    """Load parameters into `model`; refuses architecture mismatches."""
    arrays, metadata = load_checkpoint(path)
    if metadata.get("kind") != "denoiser":
        raise ValueError(f"{path} is a {metadata.get('kind')!r} checkpoint, not a denoiser")
    want = dn.architecture_hash(model)
    got = metadata.get("architecture_hash")
    if got != want:
        raise ValueError(
            f"architecture hash mismatch: checkpoint {got} vs model {want}; "
            "refusing to load"
        )
    with torch.no_grad():
        for name, p in model.named_parameters():
            p.copy_(torch.from_numpy(arrays[name]))
    return metadata


def build_model_from(path: str):
    """Construct a model matching a checkpoint's vocabulary and probe seed."""
    from .textenc import Vocabulary

    _, metadata = load_checkpoint(path)
    model = dn.build_model(
        vocab=Vocabulary(metadata["vocabulary"]), probe_seed=metadata["probe_seed"]
    )
    load_model(path, model)
    return model, metadata


def save_optimizer(path: str, model, opt: torch.optim.AdamW, train_step: int) -> None:
    arrays = {}
    for name, p in model.named_parameters():
        state = opt.state.get(p)
        if not state:
            continue
        arrays[f"exp_avg.{name}"] = state["exp_avg"].numpy()
        arrays[f"exp_avg_sq.{name}"] = state["exp_avg_sq"].numpy()
    save_checkpoint(path, arrays, {"kind": "adamw_state", "train_step": int(train_step)})


def load_optimizer(path: str, model, opt: torch.optim.AdamW) -> None:
    arrays, metadata = load_checkpoint(path)
    if metadata.get("kind") != "adamw_state":
        raise ValueError(f"{path} does not hold optimizer state")
    step = float(metadata["train_step"])
    for name, p in model.named_parameters():
        key = f"exp_avg.{name}"
        if key not in arrays:
            continue
        opt.state[p] = {
            "step": torch.tensor(step),
            "exp_avg": torch.from_numpy(arrays[key].copy()),
            "exp_avg_sq": torch.from_numpy(arrays[f"exp_avg_sq.{name}"].copy()),
        }
