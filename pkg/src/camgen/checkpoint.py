"""Checkpoint container: text manifest + named float32 little-endian tensors.

Layout (all header lines are UTF-8 text ending in '\\n'):

    camgen-checkpoint 1
    config <json, one line>
    config_hash <sha256 hex of the config line>
    step <int>
    seed <int>
    tensors <count>
    --- then per tensor ---
    tensor <name> <ndim> <d1> <d2> ...
    <raw little-endian float32 bytes, prod(shape) * 4 of them>

Saves are atomic: data is written to a temporary file in the target
directory and moved into place with os.replace.
"""

import hashlib
import json
import os
import tempfile
from dataclasses import asdict

import numpy as np
import torch

FORMAT_NAME = "camgen-checkpoint"
FORMAT_VERSION = 1


class CheckpointFormatError(Exception):
    """Raised for corrupt, truncated or version-mismatched checkpoint files."""


def config_hash(config_dict: dict) -> str:
    canon = json.dumps(config_dict, sort_keys=True)
    return hashlib.sha256(canon.encode()).hexdigest()


def save(model, path, step: int = 0, seed: int = 0) -> None:
    cfg = asdict(model.config)
    cfg_line = json.dumps(cfg, sort_keys=True)
    state = model.state_dict()
    # tied tensors appear once under their canonical name
    seen = {}
    items = []
    for name, tensor in state.items():
        key = tensor.data_ptr()
        if key in seen:
            continue
        seen[key] = name
        items.append((name, tensor))

    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(f"{FORMAT_NAME} {FORMAT_VERSION}\n".encode())
            fh.write(f"config {cfg_line}\n".encode())
            fh.write(f"config_hash {config_hash(cfg)}\n".encode())
            fh.write(f"step {step}\n".encode())
            fh.write(f"seed {seed}\n".encode())
            fh.write(f"tensors {len(items)}\n".encode())
            for name, tensor in items:
                arr = tensor.detach().cpu().to(torch.float32).numpy()
                dims = " ".join(str(d) for d in arr.shape)
                fh.write(f"tensor {name} {arr.ndim}{' ' if dims else ''}{dims}\n".encode())
                fh.write(arr.astype("<f4").tobytes())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _read_line(fh) -> str:
    raw = b""
    while True:
        ch = fh.read(1)
        if not ch:
            raise CheckpointFormatError("unexpected end of file")
        if ch == b"\n":
            return raw.decode()
        raw += ch


def load(path, model_factory=None):
    """Load a checkpoint; returns (model, metadata dict).

    `model_factory(config_dict)` builds the model; by default the bundled
    transformer is constructed from the stored config.
    """
    try:
        with open(path, "rb") as fh:
            magic = _read_line(fh).split()
            if len(magic) != 2 or magic[0] != FORMAT_NAME:
                raise CheckpointFormatError("not a checkpoint file")
            if int(magic[1]) != FORMAT_VERSION:
                raise CheckpointFormatError(f"unsupported format version {magic[1]}")
            key, _, cfg_line = _read_line(fh).partition(" ")
            if key != "config":
                raise CheckpointFormatError("missing config line")
            cfg = json.loads(cfg_line)
            key, _, stored_hash = _read_line(fh).partition(" ")
            if key != "config_hash" or stored_hash != config_hash(cfg):
                raise CheckpointFormatError("config hash mismatch")
            key, _, step = _read_line(fh).partition(" ")
            key2, _, seed = _read_line(fh).partition(" ")
            if key != "step" or key2 != "seed":
                raise CheckpointFormatError("malformed header")
            key, _, count = _read_line(fh).partition(" ")
            if key != "tensors":
                raise CheckpointFormatError("missing tensor count")
            tensors = {}
            for _ in range(int(count)):
                parts = _read_line(fh).split()
                if parts[0] != "tensor":
                    raise CheckpointFormatError("malformed tensor header")
                name, ndim = parts[1], int(parts[2])
                shape = tuple(int(x) for x in parts[3:3 + ndim])
                n = int(np.prod(shape)) if shape else 1
                buf = fh.read(n * 4)
                if len(buf) != n * 4:
                    raise CheckpointFormatError("truncated tensor data")
                arr = np.frombuffer(buf, dtype="<f4").reshape(shape)
                tensors[name] = torch.from_numpy(arr.copy())
    except (ValueError, json.JSONDecodeError) as exc:
        raise CheckpointFormatError(str(exc)) from exc

    if model_factory is None:
        from .model import CamTransformer, ModelConfig
        model_factory = lambda c: CamTransformer(ModelConfig(**c))
    model = model_factory(cfg)
    # aliases of tied parameters resolve through the fresh model's sharing,
    # so copying the canonical name updates every alias in place
    state = model.state_dict()
    for name in state:
        if name in tensors:
            state[name] = tensors[name]
    model.load_state_dict(state)
    meta = {"step": int(step), "seed": int(seed), "config": cfg}
    return model, meta
