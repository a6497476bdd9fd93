"""Checkpoint archives: a zip holding ``checkpoint.json`` and raw tensor files.

Parameters and optimizer moments are stored in the same binary tensor
format as datasets; their names and order are listed in the JSON.
"""
from __future__ import annotations

import hashlib
import io
import json
import os
import zipfile
from pathlib import Path
from typing import Any

import numpy as np
import torch

from .tensorio import FormatError, atomic_write_bytes, decode_tensors, encode_tensors

CHECKPOINT_VERSION = 1


def parameter_hash(module: torch.nn.Module) -> str:
    h = hashlib.sha256()
    for name, p in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(p.detach().cpu().numpy().tobytes())
    return h.hexdigest()


def save_checkpoint(
    path: str | os.PathLike,
    model: torch.nn.Module,
    meta: dict[str, Any],
    optimizer: torch.optim.Optimizer | None = None,
) -> Path:
    """Write ``model`` (and optionally the optimizer) with ``meta`` to a zip archive, atomically."""
    state = model.state_dict()
    names = list(state)
    info = dict(meta)
    info["format_version"] = CHECKPOINT_VERSION
    info["param_names"] = names
    files = {"params.bin": encode_tensors([state[n].detach().cpu().numpy() for n in names])}
    if optimizer is not None:
        opt_state = optimizer.state_dict()
        param_ids = [pid for g in opt_state["param_groups"] for pid in g["params"]]
        arrays, entries = [], []
        for pid in param_ids:
            st = opt_state["state"].get(pid)
            if st is None:
                entries.append(None)
                continue
            entries.append({"step": float(st["step"])})
            arrays += [st["exp_avg"].cpu().numpy(), st["exp_avg_sq"].cpu().numpy()]
        groups = [{k: v for k, v in g.items() if k != "params"} | {"n_params": len(g["params"])}
                  for g in opt_state["param_groups"]]
        info["optimizer"] = {"groups": groups, "entries": entries}
        files["optimizer.bin"] = encode_tensors(arrays)
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w", zipfile.ZIP_DEFLATED) as zf:
        zf.writestr("checkpoint.json", json.dumps(info, indent=2, sort_keys=True, default=_json_default))
        for name, data in files.items():
            zf.writestr(name, data)
    atomic_write_bytes(path, buf.getvalue())
    return Path(path)


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


def read_checkpoint(path: str | os.PathLike) -> tuple[dict[str, Any], dict[str, np.ndarray], list[np.ndarray] | None]:
    """Return ``(meta, params, optimizer_arrays)`` without building any model."""
    path = Path(path)
    try:
        with zipfile.ZipFile(path) as zf:
            info = json.loads(zf.read("checkpoint.json"))
            version = info.get("format_version")
            if version != CHECKPOINT_VERSION:
                raise FormatError(f"{path}: checkpoint version {version}, this build reads {CHECKPOINT_VERSION}")
            arrays = decode_tensors(zf.read("params.bin"), len(info["param_names"]), f"{path}:params.bin")
            opt = None
            if "optimizer.bin" in zf.namelist():
                opt = decode_tensors(zf.read("optimizer.bin"), source=f"{path}:optimizer.bin")
    except (zipfile.BadZipFile, KeyError) as exc:
        raise FormatError(f"{path}: not a valid checkpoint archive ({exc})") from exc
    return info, dict(zip(info["param_names"], arrays)), opt


def load_params(model: torch.nn.Module, params: dict[str, np.ndarray], strict: bool = True) -> None:
    state = model.state_dict()
    missing = set(state) - set(params)
    unexpected = set(params) - set(state)
    if strict and (missing or unexpected):
        raise FormatError(f"parameter mismatch: missing {sorted(missing)}, unexpected {sorted(unexpected)}")
    for name, arr in params.items():
        if name not in state:
            continue
        if tuple(state[name].shape) != tuple(arr.shape):
            raise FormatError(f"parameter {name}: checkpoint shape {arr.shape}, model shape {tuple(state[name].shape)}")
        state[name] = torch.from_numpy(arr).to(state[name].dtype)
    model.load_state_dict(state)


def load_optimizer(optimizer: torch.optim.Optimizer, info: dict[str, Any], arrays: list[np.ndarray]) -> None:
    saved = info["optimizer"]
    current = optimizer.state_dict()
    if len(saved["groups"]) != len(current["param_groups"]) or any(
        s["n_params"] != len(c["params"]) for s, c in zip(saved["groups"], current["param_groups"])
    ):
        raise FormatError("optimizer layout in checkpoint does not match the trainer")
    state = {}
    it = iter(arrays)
    param_ids = [pid for g in current["param_groups"] for pid in g["params"]]
    for pid, entry in zip(param_ids, saved["entries"]):
        if entry is None:
            continue
        state[pid] = {
            "step": torch.tensor(entry["step"]),
            "exp_avg": torch.from_numpy(next(it)),
            "exp_avg_sq": torch.from_numpy(next(it)),
        }
    groups = []
    for s, c in zip(saved["groups"], current["param_groups"]):
        g = {k: v for k, v in s.items() if k != "n_params"}
        if "betas" in g:
            g["betas"] = tuple(g["betas"])
        g["params"] = c["params"]
        groups.append(g)
    optimizer.load_state_dict({"state": state, "param_groups": groups})
