"""Two-stage training loop with logging, checkpointing and seeded reproducibility.

Stage 1 trains the inpainter (together with the frame encoder/decoder) on
ground-truth segments of random length.  Stage 2 freezes the inpainter, and by
default the encoder/decoder it works through, and trains the keyframe
predictor and inference network through the relaxed objective.  The dense stochastic predictor used by the surprise baseline
has its own trainer kind.

Every random draw (batch indices, offsets, window starts, reparameterization
noise) comes from one ``numpy.random.Generator`` whose state is saved in
checkpoints, so a resumed run follows the uninterrupted trajectory.
"""
from __future__ import annotations

import csv
import json
import math
import os
import time
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Any

import numpy as np
import torch

from .checkpoint import load_optimizer, load_params, parameter_hash, read_checkpoint, save_checkpoint
from .datasets.base import Dataset
from .models import DenseStochasticPredictor, KeyInModel, ModelConfig
from .tensorio import FormatError, write_tensors

KINDS = ("inpainter", "keyframer", "dense")
DEFAULT_ITERATIONS = {1: 100_000, 2: 200_000}
# fields that change parameter shapes; a checkpoint cannot be reused if any differs
STRUCTURAL_FIELDS = ("image_size", "channels", "J", "embed_dim", "hidden_dim", "lstm_layers", "latent_dim",
                     "inpaint_latent_dim", "base_channels", "enc_layers")


class ConfigMismatch(ValueError):
    pass


@dataclass
class TrainConfig:
    stage: int = 1
    iterations: int | None = None
    batch_size: int = 30
    lr: float = 2e-4
    adam_betas: tuple[float, float] = (0.9, 0.999)
    offset_min: int = 2
    offset_max: int = 8
    seed: int = 0
    grad_clip: float = 10.0
    checkpoint_every: int = 5000
    flush_every: int = 50
    # stage 2: also train the frame encoder/decoder (the frozen inpainter reads and renders through them)
    train_autoencoder: bool = False
    # stage 2: bonus on offset entropy, decayed linearly to zero over entropy_anneal iterations
    entropy_weight: float = 0.0
    entropy_anneal: int = 0

    def __post_init__(self):
        if self.stage not in (1, 2):
            raise ValueError(f"stage must be 1 or 2, got {self.stage}")
        if self.iterations is None:
            self.iterations = DEFAULT_ITERATIONS[self.stage]
        self.adam_betas = tuple(float(b) for b in self.adam_betas)
        if self.iterations < 0 or self.batch_size < 1 or self.lr <= 0:
            raise ValueError("iterations must be >= 0, batch_size >= 1 and lr > 0")
        if self.entropy_weight < 0 or self.entropy_anneal < 0:
            raise ValueError("entropy_weight and entropy_anneal must be >= 0")
        if not 2 <= self.offset_min <= self.offset_max:
            raise ValueError(f"offset range [{self.offset_min}, {self.offset_max}] must start at 2 or above")

    def check_offsets(self, J: int) -> None:
        if self.offset_max > J:
            raise ValueError(f"offset range [{self.offset_min}, {self.offset_max}] exceeds J = {J}")

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["adam_betas"] = list(self.adam_betas)
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


class TrainLog:
    """Append-only CSV of per-iteration scalars plus a JSON summary."""

    def __init__(self, path: str | os.PathLike | None, flush_every: int = 50):
        self.path = Path(path) if path is not None else None
        self.rows: list[dict[str, float]] = []
        self._pending: list[dict[str, float]] = []
        self._columns: list[str] | None = None
        self.flush_every = flush_every
        self.checkpoints: list[str] = []
        if self.path is not None and self.path.exists():
            with open(self.path, newline="") as fh:
                self._columns = next(csv.reader(fh), None)

    def append(self, row: dict[str, float]) -> None:
        if self.rows and row["iteration"] <= self.rows[-1]["iteration"]:
            raise ValueError("log iterations must increase")
        self.rows.append(row)
        self._pending.append(row)
        if len(self._pending) >= self.flush_every:
            self.flush()

    def flush(self) -> None:
        if self.path is None or not self._pending:
            self._pending.clear()
            return
        new = self._columns is None
        if new:
            self._columns = list(self._pending[0])
        with open(self.path, "a", newline="") as fh:
            w = csv.DictWriter(fh, self._columns)
            if new:
                w.writeheader()
            w.writerows(self._pending)
        self._pending.clear()

    def summary(self) -> dict[str, Any]:
        if not self.rows:
            return {"iterations": 0, "checkpoints": self.checkpoints}
        keys = [k for k in self.rows[0] if k not in ("iteration", "wall_time")]
        head, tail = self.rows[:100], self.rows[-100:]
        return {
            "iterations": self.rows[-1]["iteration"],
            "wall_time": self.rows[-1]["wall_time"],
            "first_100_median": {k: float(np.median([r[k] for r in head])) for k in keys},
            "last_100_median": {k: float(np.median([r[k] for r in tail])) for k in keys},
            "checkpoints": self.checkpoints,
        }


def read_log(path: str | os.PathLike) -> list[dict[str, float]]:
    """Rows of a training CSV; when a resumed run re-logs an iteration the later row wins."""
    by_iter: dict[int, dict[str, float]] = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            r = {k: float(v) for k, v in row.items()}
            by_iter[int(r["iteration"])] = r
    return [by_iter[k] for k in sorted(by_iter)]


def prepare_frames(dataset: Dataset | np.ndarray, image_size: int) -> np.ndarray:
    """Stack episode frames to ``[E, T_total, H, W, C]`` float32, average-pooling down to ``image_size``."""
    frames = dataset if isinstance(dataset, np.ndarray) else dataset.frames_array()
    frames = np.asarray(frames, dtype=np.float32)
    H = frames.shape[2]
    if H == image_size:
        return np.ascontiguousarray(frames)
    if H % image_size:
        raise ValueError(f"cannot pool {H} px frames to {image_size} px")
    f = H // image_size
    E, T, _, W, C = frames.shape
    pooled = frames.reshape(E, T, image_size, f, W // f, f, C).mean((3, 5))
    return np.ascontiguousarray(pooled, dtype=np.float32)


def build_model(kind: str, cfg: ModelConfig, seed: int = 0):
    if kind not in KINDS:
        raise ValueError(f"unknown model kind {kind!r}")
    torch.manual_seed(seed)
    return DenseStochasticPredictor(cfg) if kind == "dense" else KeyInModel(cfg)


def check_compatible(saved: ModelConfig, wanted: ModelConfig) -> None:
    diffs = {k: (getattr(saved, k), getattr(wanted, k)) for k in STRUCTURAL_FIELDS
             if getattr(saved, k) != getattr(wanted, k)}
    if diffs:
        desc = ", ".join(f"{k}: checkpoint={a} config={b}" for k, (a, b) in diffs.items())
        raise ConfigMismatch(f"config mismatch with checkpoint ({desc})")


class Trainer:
    """Optimizes one model kind on an in-memory frame array ``[E, T_total, H, W, C]``."""

    def __init__(self, model, kind: str, cfg: TrainConfig, frames: np.ndarray,
                 out_dir: str | os.PathLike | None = None, extra_meta: dict[str, Any] | None = None):
        if kind not in KINDS:
            raise ValueError(f"unknown trainer kind {kind!r}")
        self.model, self.kind, self.cfg = model, kind, cfg
        mcfg: ModelConfig = model.cfg
        self.mcfg = mcfg
        self.frames = frames
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.extra_meta = dict(extra_meta or {})
        E, T_total = frames.shape[:2]
        if tuple(frames.shape[2:]) != (mcfg.image_size, mcfg.image_size, mcfg.channels):
            raise ValueError(f"frames {frames.shape[2:]} do not match model input "
                             f"{(mcfg.image_size, mcfg.image_size, mcfg.channels)}")
        if kind == "inpainter":
            cfg.check_offsets(mcfg.J)
            if T_total - 1 < cfg.offset_max:
                raise ValueError(f"dataset horizon {T_total} frames is shorter than max offset {cfg.offset_max}")
        elif T_total < mcfg.C + mcfg.T:
            raise ValueError(f"episodes of {T_total} frames cannot hold {mcfg.C} conditioning + {mcfg.T} targets")

        self.frozen: list[torch.nn.Parameter] = []
        if kind == "keyframer":
            self.frozen = list(model.inpainter.parameters())
            if not cfg.train_autoencoder:
                self.frozen += list(model.encoder.parameters()) + list(model.decoder.parameters())
        frozen_ids = {id(p) for p in self.frozen}
        for p in model.parameters():
            p.requires_grad_(id(p) not in frozen_ids)
        self.params = [p for p in model.parameters() if p.requires_grad]
        self.optimizer = torch.optim.Adam(self.params, lr=cfg.lr, betas=cfg.adam_betas)
        self.rng = np.random.default_rng(cfg.seed)
        self.iteration = 0
        self.wall_offset = 0.0
        self.log = TrainLog(self.out_dir / "log.csv" if self.out_dir else None, cfg.flush_every)
        if self.out_dir:
            self.out_dir.mkdir(parents=True, exist_ok=True)

    # ------------------------------------------------------------ batches

    def sample_batch(self) -> dict[str, np.ndarray]:
        rng, cfg, m = self.rng, self.cfg, self.mcfg
        E, T_total = self.frames.shape[:2]
        B = cfg.batch_size
        idx = rng.integers(0, E, size=B)
        if self.kind == "inpainter":
            offsets = rng.integers(cfg.offset_min, cfg.offset_max + 1, size=B)
            starts = rng.integers(0, T_total - offsets)
            steps = np.arange(1, m.J + 1)
            t = np.minimum(starts[:, None] + steps, T_total - 1)
            between = self.frames[idx[:, None], t] * (steps[None] <= offsets[:, None])[..., None, None, None]
            return {
                "starts": self.frames[idx, starts],
                "ends": self.frames[idx, starts + offsets],
                "between": between.astype(np.float32),
                "offsets": offsets,
                "eps": rng.standard_normal((B, m.inpaint_latent_dim)),
            }
        L = m.C + m.T
        s = rng.integers(0, T_total - L + 1, size=B)
        window = self.frames[idx[:, None], s[:, None] + np.arange(L)]
        eps_shape = (B, m.N, m.latent_dim) if self.kind == "keyframer" else (B, m.T, m.latent_dim)
        return {"cond": window[:, : m.C], "targets": window[:, m.C :], "eps": rng.standard_normal(eps_shape)}

    def objective(self, batch: dict[str, np.ndarray]) -> dict[str, torch.Tensor]:
        t = {k: torch.from_numpy(np.asarray(v)) for k, v in batch.items()}
        for k in t:
            if t[k].is_floating_point():
                t[k] = t[k].float()
        if self.kind == "inpainter":
            return self.model.inpainter_loss(t["starts"], t["ends"], t["between"], t["offsets"], t["eps"])
        if self.kind == "keyframer":
            out = self.model.keyframe_objective(t["cond"], t["targets"], t["eps"])
            w = self.entropy_bonus()
            if w > 0:
                out["total"] = out["total"] - w * out["delta_entropy"]
            return out
        return self.model.loss(t["cond"], t["targets"], t["eps"])

    def entropy_bonus(self) -> float:
        """Weight on the offset-entropy bonus at the current iteration."""
        cfg = self.cfg
        if cfg.entropy_weight == 0 or self.iteration >= cfg.entropy_anneal:
            return 0.0
        return cfg.entropy_weight * (1 - self.iteration / cfg.entropy_anneal)

    # ------------------------------------------------------------ loop

    def step(self) -> dict[str, float]:
        self.model.train()
        batch = self.sample_batch()
        losses = self.objective(batch)
        self.optimizer.zero_grad(set_to_none=True)
        losses["total"].backward()
        for p in self.frozen:
            if p.grad is not None and torch.any(p.grad != 0):
                raise AssertionError("frozen parameter received a nonzero gradient")
        grad_norm = torch.nn.utils.clip_grad_norm_(self.params, self.cfg.grad_clip)
        scalars = {k: float(v.detach()) for k, v in losses.items()}
        scalars["grad_norm"] = float(grad_norm)
        bad = [k for k, v in scalars.items() if not math.isfinite(v)]
        if bad:
            self._dump(batch, scalars)
            raise FloatingPointError(f"non-finite {', '.join(bad)} at iteration {self.iteration + 1}; "
                                     f"batch dumped to {self.out_dir}")
        self.optimizer.step()
        self.iteration += 1
        return scalars

    def _dump(self, batch, scalars) -> None:
        if self.out_dir is None:
            return
        names = sorted(batch)
        write_tensors(self.out_dir / "nan_batch.bin", [np.asarray(batch[k], dtype=np.float32) for k in names])
        info = {"iteration": self.iteration + 1, "tensors": names, "scalars": {k: repr(v) for k, v in scalars.items()}}
        (self.out_dir / "nan_batch.json").write_text(json.dumps(info, indent=2))

    def run(self, iterations: int | None = None, callback=None) -> TrainLog:
        """Train until ``iterations`` total (defaults to the config), checkpointing along the way."""
        target = self.cfg.iterations if iterations is None else iterations
        start = time.perf_counter() - self.wall_offset
        while self.iteration < target:
            scalars = self.step()
            row = {"iteration": self.iteration, "wall_time": round(time.perf_counter() - start, 3), **scalars}
            self.log.append(row)
            if callback is not None:
                callback(self, row)
            if self.out_dir and self.cfg.checkpoint_every and self.iteration % self.cfg.checkpoint_every == 0:
                self.wall_offset = time.perf_counter() - start
                self.save(self.out_dir / "checkpoint.zip")
        self.wall_offset = time.perf_counter() - start
        self.log.flush()
        if self.out_dir:
            self.save(self.out_dir / "checkpoint.zip")
            summary = self.log.summary() | {"kind": self.kind, "train_config": self.cfg.to_dict()}
            (self.out_dir / "summary.json").write_text(json.dumps(summary, indent=2))
        return self.log

    # ------------------------------------------------------------ persistence

    def meta(self) -> dict[str, Any]:
        return {
            "kind": self.kind,
            "model_config": self.mcfg.to_dict(),
            "train_config": self.cfg.to_dict(),
            "iteration": self.iteration,
            "wall_time": self.wall_offset,
            "rng_state": self.rng.bit_generator.state,
            **self.extra_meta,
        }

    def save(self, path: str | os.PathLike) -> Path:
        self.log.flush()
        path = save_checkpoint(path, self.model, self.meta(), self.optimizer)
        self.log.checkpoints.append(str(path))
        return path

    @classmethod
    def resume(cls, path: str | os.PathLike, frames: np.ndarray, out_dir=None, iterations: int | None = None):
        """Rebuild a trainer from a checkpoint, restoring parameters, optimizer moments and RNG state."""
        info, params, opt = read_checkpoint(path)
        if "train_config" not in info or opt is None:
            raise FormatError(f"{path}: checkpoint carries no trainer state")
        mcfg = ModelConfig.from_dict(info["model_config"])
        tcfg = TrainConfig.from_dict(info["train_config"])
        if iterations is not None:
            tcfg.iterations = iterations
        model = build_model(info["kind"], mcfg, tcfg.seed)
        load_params(model, params)
        extra = {k: v for k, v in info.items() if k in ("inpainter_checkpoint", "inpainter_hash")}
        trainer = cls(model, info["kind"], tcfg, frames, out_dir, extra)
        load_optimizer(trainer.optimizer, info, opt)
        trainer.rng.bit_generator.state = info["rng_state"]
        trainer.iteration = int(info["iteration"])
        trainer.wall_offset = float(info.get("wall_time", 0.0))
        return trainer


def load_model(path: str | os.PathLike):
    """``(model, meta)`` from any checkpoint, in eval mode."""
    info, params, _ = read_checkpoint(path)
    mcfg = ModelConfig.from_dict(info["model_config"])
    model = build_model(info.get("kind", "keyframer"), mcfg)
    load_params(model, params)
    model.eval()
    return model, info


# ---------------------------------------------------------------- entry points

def pretrain_inpainter(dataset, model_cfg: ModelConfig, cfg: TrainConfig, out_dir=None) -> Trainer:
    if cfg.stage != 1:
        raise ValueError("inpainter pretraining runs with stage = 1")
    frames = prepare_frames(dataset, model_cfg.image_size)
    model = build_model("inpainter", model_cfg, cfg.seed)
    trainer = Trainer(model, "inpainter", cfg, frames, out_dir)
    trainer.run()
    return trainer


STAGE1_MODULES = ("encoder", "decoder", "inpainter")


def keyframer_from_inpainter(inpainter_checkpoint, cfg: TrainConfig, frames: np.ndarray,
                             model_cfg: ModelConfig | None = None, out_dir=None) -> Trainer:
    info, params, _ = read_checkpoint(inpainter_checkpoint)
    if info.get("kind") != "inpainter":
        raise ConfigMismatch(f"{inpainter_checkpoint} is a {info.get('kind')!r} checkpoint, expected a stage-1 one")
    saved = ModelConfig.from_dict(info["model_config"])
    if model_cfg is None:
        model_cfg = saved
    check_compatible(saved, model_cfg)
    model = build_model("keyframer", model_cfg, cfg.seed)
    # stage 1 trained encoder, decoder and inpainter; the rest starts from the seeded init
    trained = {k: v for k, v in params.items() if k.split(".", 1)[0] in STAGE1_MODULES}
    load_params(model, trained, strict=False)
    meta = {"inpainter_checkpoint": str(inpainter_checkpoint), "inpainter_hash": parameter_hash(model.inpainter)}
    return Trainer(model, "keyframer", cfg, frames, out_dir, meta)


def train_keyframer(dataset, inpainter_checkpoint, cfg: TrainConfig, model_cfg: ModelConfig | None = None,
                    out_dir=None) -> Trainer:
    if cfg.stage != 2:
        raise ValueError("keyframe training runs with stage = 2")
    info, _, _ = read_checkpoint(inpainter_checkpoint)
    size = (model_cfg or ModelConfig.from_dict(info["model_config"])).image_size
    trainer = keyframer_from_inpainter(inpainter_checkpoint, cfg, prepare_frames(dataset, size), model_cfg, out_dir)
    before = trainer.extra_meta["inpainter_hash"]
    trainer.run()
    if parameter_hash(trainer.model.inpainter) != before:
        raise AssertionError("inpainter parameters changed during stage 2")
    return trainer


def train_dense(dataset, model_cfg: ModelConfig, cfg: TrainConfig, out_dir=None) -> Trainer:
    frames = prepare_frames(dataset, model_cfg.image_size)
    model = build_model("dense", model_cfg, cfg.seed)
    trainer = Trainer(model, "dense", cfg, frames, out_dir)
    trainer.run()
    return trainer
