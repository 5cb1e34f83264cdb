"""Checkpoint container: a single .npz holding named tensors plus a JSON manifest.

The manifest records the format version, network/training configuration, step
count, training variant, and the adaptive-parameter slice table. Writes are
atomic (temp file, then rename). Tensor round-trips are bit-exact.
"""

from __future__ import annotations

import hashlib
import io
import json
import os
import tempfile
from pathlib import Path

import numpy as np
import torch
from torch import nn, optim

FORMAT_VERSION = 1
MANIFEST_KEY = "__manifest__"


def write_archive(path: Path | str, manifest: dict, arrays: dict[str, np.ndarray]) -> None:
    """Atomically write manifest + named arrays to `path`."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = dict(arrays)
    payload[MANIFEST_KEY] = np.frombuffer(json.dumps(manifest).encode("utf-8"), dtype=np.uint8)
    buf = io.BytesIO()
    np.savez(buf, **payload)
    fd, tmp_name = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(buf.getvalue())
        os.replace(tmp_name, path)
    except BaseException:
        if os.path.exists(tmp_name):
            os.unlink(tmp_name)
        raise


def read_archive(path: Path | str) -> tuple[dict, dict[str, np.ndarray]]:
    with np.load(Path(path)) as data:
        arrays = {k: data[k] for k in data.files if k != MANIFEST_KEY}
        manifest = json.loads(bytes(data[MANIFEST_KEY]).decode("utf-8"))
    return manifest, arrays


def file_sha256(path: Path | str) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


# -- torch module / optimizer <-> array helpers ------------------------------------


def module_arrays(module: nn.Module, prefix: str) -> dict[str, np.ndarray]:
    """Parameters and buffers of a module as named numpy arrays."""
    return {f"{prefix}/{k}": v.detach().cpu().numpy().copy() for k, v in module.state_dict().items()}


def load_module_arrays(module: nn.Module, arrays: dict[str, np.ndarray], prefix: str) -> None:
    head = f"{prefix}/"
    state = {
        k[len(head):]: torch.from_numpy(v.copy())
        for k, v in arrays.items()
        if k.startswith(head)
    }
    module.load_state_dict(state, strict=True)


def optimizer_arrays(opt: optim.Optimizer, prefix: str) -> dict[str, np.ndarray]:
    out = {}
    state = opt.state_dict()["state"]
    for pid, entries in state.items():
        for key, value in entries.items():
            tensor = value if isinstance(value, torch.Tensor) else torch.tensor(float(value))
            out[f"{prefix}/{pid}/{key}"] = tensor.detach().cpu().numpy().copy()
    return out


def load_optimizer_arrays(opt: optim.Optimizer, arrays: dict[str, np.ndarray], prefix: str) -> None:
    head = f"{prefix}/"
    state: dict[int, dict] = {}
    for key, value in arrays.items():
        if not key.startswith(head):
            continue
        pid_str, entry = key[len(head):].split("/", 1)
        state.setdefault(int(pid_str), {})[entry] = torch.from_numpy(value.copy())
    base = opt.state_dict()
    base["state"] = state
    opt.load_state_dict(base)


def torch_rng_array() -> np.ndarray:
    return torch.get_rng_state().numpy().copy()


def restore_torch_rng(array: np.ndarray) -> None:
    torch.set_rng_state(torch.from_numpy(array.copy()))


def numpy_rng_state(rng: np.random.Generator) -> dict:
    return json.loads(json.dumps(rng.bit_generator.state, default=int))


def restore_numpy_rng(state: dict) -> np.random.Generator:
    rng = np.random.default_rng()
    rng.bit_generator.state = state
    return rng
