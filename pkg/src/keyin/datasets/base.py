from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from ..tensorio import FormatError, atomic_write_bytes, read_tensors, write_tensors

FORMAT_VERSION = 1
TENSOR_FIELDS = ("frames", "actions", "states")


@dataclass
class Episode:
    """One recorded sequence.

    ``frames`` is ``[T_total, H, W, C]`` in ``[0, 1]``; ``actions`` and
    ``states`` are optional per-step arrays.  ``true_keyframes`` are frame
    indices into ``frames``.
    """

    frames: np.ndarray
    true_keyframes: list[int]
    actions: np.ndarray | None = None
    states: np.ndarray | None = None
    meta: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float32)
        self.true_keyframes = [int(k) for k in self.true_keyframes]
        if self.frames.ndim != 4:
            raise ValueError(f"frames must be [T, H, W, C], got {self.frames.shape}")
        kf = self.true_keyframes
        if any(b <= a for a, b in zip(kf, kf[1:])):
            raise ValueError(f"true keyframes must be strictly increasing: {kf}")
        if kf and (kf[0] < 0 or kf[-1] >= len(self.frames)):
            raise ValueError(f"true keyframes {kf} outside [0, {len(self.frames)})")

    def __len__(self):
        return len(self.frames)

    def __eq__(self, other):
        if not isinstance(other, Episode):
            return NotImplemented
        return (
            self.true_keyframes == other.true_keyframes
            and self.meta == other.meta
            and _arr_eq(self.frames, other.frames)
            and _arr_eq(self.actions, other.actions)
            and _arr_eq(self.states, other.states)
        )


def _arr_eq(a, b):
    if a is None or b is None:
        return a is None and b is None
    return a.shape == b.shape and np.array_equal(a, b)


@dataclass
class Dataset:
    name: str
    episodes: list[Episode]
    params: dict[str, Any] = field(default_factory=dict)

    def __len__(self):
        return len(self.episodes)

    def __getitem__(self, i):
        return self.episodes[i]

    def __iter__(self):
        return iter(self.episodes)

    @property
    def frame_shape(self) -> tuple[int, ...]:
        return tuple(self.episodes[0].frames.shape[1:]) if self.episodes else ()

    @property
    def T_total(self) -> int:
        return len(self.episodes[0]) if self.episodes else 0

    def frames_array(self) -> np.ndarray:
        return np.stack([e.frames for e in self.episodes])


def write_dataset(dataset: Dataset, path: str | os.PathLike) -> Path:
    """Write ``manifest.json`` plus one tensor file and annotation sidecar per episode."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    index = []
    for i, ep in enumerate(dataset.episodes):
        names = [n for n in TENSOR_FIELDS if getattr(ep, n) is not None]
        fname, aname = f"episode_{i:06d}.bin", f"episode_{i:06d}.json"
        write_tensors(root / fname, [getattr(ep, n) for n in names])
        sidecar = {"true_keyframes": ep.true_keyframes, "meta": ep.meta}
        atomic_write_bytes(root / aname, json.dumps(sidecar, sort_keys=True).encode())
        index.append({"file": fname, "annotations": aname, "tensors": names})
    manifest = {
        "name": dataset.name,
        "format_version": FORMAT_VERSION,
        "episode_count": len(dataset.episodes),
        "T_total": dataset.T_total,
        "frame_shape": list(dataset.frame_shape),
        "params": dataset.params,
        "index": index,
    }
    atomic_write_bytes(root / "manifest.json", json.dumps(manifest, indent=2, sort_keys=True).encode())
    return root


def read_manifest(path: str | os.PathLike) -> dict:
    root = Path(path)
    mpath = root / "manifest.json"
    if not mpath.exists():
        raise FileNotFoundError(f"no manifest.json in {root}")
    try:
        manifest = json.loads(mpath.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{mpath}: invalid JSON ({exc})") from exc
    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise FormatError(f"{mpath}: dataset format version {version}, expected {FORMAT_VERSION}")
    index = manifest.get("index", [])
    if manifest.get("episode_count") != len(index):
        raise FormatError(f"{mpath}: episode_count {manifest.get('episode_count')} but index has {len(index)}")
    on_disk = sorted(p.name for p in root.glob("episode_*.bin"))
    if len(on_disk) != len(index):
        raise FormatError(f"{root}: manifest lists {len(index)} episodes, {len(on_disk)} files on disk")
    for entry in index:
        for key in ("file", "annotations"):
            if not (root / entry[key]).exists():
                raise FormatError(f"{root}: missing episode file {entry[key]}")
    return manifest


def read_dataset(path: str | os.PathLike) -> Dataset:
    root = Path(path)
    manifest = read_manifest(root)
    episodes = []
    for entry in manifest["index"]:
        names = entry["tensors"]
        arrays = read_tensors(root / entry["file"], count=len(names))
        ann = json.loads((root / entry["annotations"]).read_text())
        kw = dict(zip(names, arrays))
        episodes.append(Episode(true_keyframes=ann["true_keyframes"], meta=ann["meta"], **kw))
    return Dataset(manifest["name"], episodes, manifest["params"])


def add_noise(dataset: Dataset, sigma: float, seed: int = 0) -> Dataset:
    """I.i.d. Gaussian pixel noise, clipped to [0, 1]; annotations are kept."""
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    out = []
    for i, ep in enumerate(dataset.episodes):
        frames = ep.frames
        if sigma > 0:
            rng = np.random.default_rng([seed, i])
            frames = np.clip(frames + rng.normal(0.0, sigma, frames.shape), 0.0, 1.0).astype(np.float32)
        out.append(
            Episode(
                frames=frames.copy(),
                true_keyframes=list(ep.true_keyframes),
                actions=None if ep.actions is None else ep.actions.copy(),
                states=None if ep.states is None else ep.states.copy(),
                meta=dict(ep.meta),
            )
        )
    params = dict(dataset.params)
    if sigma > 0:
        params["noise"] = {"sigma": sigma, "seed": seed}
    return Dataset(dataset.name, out, params)
