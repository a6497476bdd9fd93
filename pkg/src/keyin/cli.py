"""Command-line entry point: ``keyin <subcommand> [options]``.

Every subcommand writes a ``run.json`` reproducibility record into its
output directory.  Failures print one line ``error: <kind>: <message>`` to
stderr and exit with status 1 (2 for usage errors).
"""
from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import math
import os
import shutil
import sys
import tempfile
import time
from pathlib import Path
from typing import Any

import numpy as np

from . import __version__

CACHE_ENV = "KEYIN_CACHE"
SECTIONS = ("model", "train", "planner", "data")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# ---------------------------------------------------------------- config

def cache_root() -> Path:
    return Path(os.environ.get(CACHE_ENV, Path.home() / ".cache" / "keyin"))


def resolve_input(path: str | None) -> Path | None:
    """Use ``path`` as given when it exists, else look it up under the cache root."""
    if path is None:
        return None
    p = Path(path)
    if p.exists():
        return p
    alt = cache_root() / path
    if alt.exists():
        return alt
    raise FileNotFoundError(f"{path} not found (also looked in {alt})")


def _toml():
    try:
        import tomllib
    except ImportError:  # Python < 3.11
        import tomli as tomllib
    return tomllib


def parse_value(text: str):
    toml = _toml()
    try:
        return toml.loads(f"v = {text}")["v"]
    except toml.TOMLDecodeError:
        return text


def load_config(path: str | None, overrides: list[str]) -> dict[str, dict[str, Any]]:
    """TOML file sections plus ``section.key=value`` overrides, checked against the dataclass fields."""
    from .models.config import PRESETS, ModelConfig
    from .training import TrainConfig
    from .planner import PlannerConfig

    conf: dict[str, dict[str, Any]] = {s: {} for s in SECTIONS}
    if path:
        with open(path, "rb") as fh:
            raw = _toml().load(fh)
        for k, v in raw.items():
            if k not in SECTIONS or not isinstance(v, dict):
                raise ValueError(f"unknown config section [{k}]; expected one of {SECTIONS}")
            conf[k].update(v)
    for item in overrides:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ValueError(f"override {item!r} must look like section.key=value")
        key, value = item.split("=", 1)
        section, name = key.split(".", 1)
        if section not in SECTIONS:
            raise ValueError(f"unknown config section {section!r} in override {item!r}")
        conf[section][name] = parse_value(value)
    schema = {"model": ModelConfig, "train": TrainConfig, "planner": PlannerConfig}
    for section, cls in schema.items():
        allowed = {f.name for f in dataclasses.fields(cls)} | ({"preset"} if section == "model" else set())
        bad = set(conf[section]) - allowed
        if bad:
            raise ValueError(f"unknown [{section}] keys: {sorted(bad)}")
    if "preset" in conf["model"] and conf["model"]["preset"] not in PRESETS:
        raise ValueError(f"unknown preset {conf['model']['preset']!r}; choose from {sorted(PRESETS)}")
    return conf


def model_config(conf, default_preset: str | None = None):
    from .models.config import ModelConfig, preset

    m = dict(conf["model"])
    name = m.pop("preset", default_preset)
    return preset(name, **m) if name else ModelConfig(**m)


# ---------------------------------------------------------------- run records

def content_hash(path: Path) -> str:
    """Git-style hash: blob hash for files, tree hash over sorted entries for directories."""
    path = Path(path)
    if path.is_file():
        data = path.read_bytes()
        return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()
    entries = []
    for child in sorted(path.iterdir()):
        if child.name.startswith("."):
            continue
        entries.append(f"{child.name} {content_hash(child)}")
    body = "\n".join(entries).encode()
    return hashlib.sha1(b"tree %d\0" % len(body) + body).hexdigest()


class Output:
    """Output directory handling; with ``staged`` everything is written to a sibling temp dir and renamed at the end."""

    def __init__(self, path: Path, force: bool, staged: bool = True, allow_existing: bool = False):
        self.final = Path(path)
        if self.final.exists() and any(self.final.iterdir()) and not allow_existing:
            if not force:
                raise FileExistsError(f"output directory {self.final} is not empty (use --force)")
        self.force = force
        self.staged = staged
        self.final.parent.mkdir(parents=True, exist_ok=True)
        if staged:
            self.path = Path(tempfile.mkdtemp(prefix=f".{self.final.name}.", dir=self.final.parent))
        else:
            self.path = self.final
            self.path.mkdir(parents=True, exist_ok=True)

    def commit(self) -> Path:
        if self.staged:
            if self.final.exists():
                shutil.rmtree(self.final)
            os.replace(self.path, self.final)
        return self.final

    def abort(self) -> None:
        if self.staged and self.path.exists():
            shutil.rmtree(self.path, ignore_errors=True)


def write_run(out: Path, args, config: dict, inputs: dict[str, Path | None], started: float, extra=None) -> None:
    record = {
        "subcommand": args.command,
        "argv": sys.argv[1:],
        "version": __version__,
        "seed": args.seed,
        "config": config,
        "inputs": {k: {"path": str(v), "hash": content_hash(v)} for k, v in inputs.items() if v is not None},
        "started": time.strftime("%Y-%m-%dT%H:%M:%S", time.localtime(started)),
        "duration_s": round(time.time() - started, 3),
        **(extra or {}),
    }
    (out / "run.json").write_text(json.dumps(record, indent=2, sort_keys=True, default=str))


def default_out(args, name: str) -> Path:
    return Path(args.out) if args.out else Path("runs") / name


# ---------------------------------------------------------------- subcommands

def cmd_gen_data(args) -> int:
    from .datasets import add_noise, demo_push2d, gen_sbm, write_dataset
    from .datasets.base import Dataset, Episode
    from .training import prepare_frames

    started = time.time()
    out = Output(Path(args.out) if args.out else cache_root() / f"{args.kind}-seed{args.seed}", args.force)
    try:
        if args.kind == "sbm":
            length = args.length or 40
            size = args.size or 32
            parts = _parallel(lambda s, n: gen_sbm(n, length, H=size, W=size, seed=args.seed, start_index=s),
                              args.episodes, args.workers)
        else:
            length = args.length or 31
            size = args.size or 64

            def make(s, n):
                ds = demo_push2d(n, seed=args.seed, T_total=length, start_index=s)
                if size != 64:
                    pooled = prepare_frames(ds, size)
                    ds = Dataset(ds.name, [Episode(f, e.true_keyframes, e.actions, e.states, e.meta)
                                           for e, f in zip(ds.episodes, pooled)], {**ds.params, "size": size, "rendered_size": 64})
                return ds

            parts = _parallel(make, args.episodes, args.workers)
        params = dict(parts[0].params)
        if "discarded" in params:
            params["discarded"] = sum(p.params.get("discarded", 0) for p in parts)
        ds = Dataset(parts[0].name, [e for p in parts for e in p.episodes], params)
        if args.noise:
            ds = add_noise(ds, args.noise, seed=args.seed)
        write_dataset(ds, out.path)
        gaps = [b - a for e in ds for a, b in zip(e.true_keyframes, e.true_keyframes[1:])]
        stats = {"episodes": len(ds), "T_total": ds.T_total, "frame_shape": list(ds.frame_shape),
                 "keyframes_per_episode": float(np.mean([len(e.true_keyframes) for e in ds])),
                 "mean_gap": float(np.mean(gaps)) if gaps else None}
        write_run(out.path, args, {"kind": args.kind, "episodes": args.episodes, "length": length, "size": size,
                                   "noise": args.noise}, {}, started, {"stats": stats})
        final = out.commit()
    except BaseException:
        out.abort()
        raise
    print(json.dumps({"out": str(final), **stats}))
    return 0


def _parallel(fn, total: int, workers: int):
    chunk = max(1, math.ceil(total / max(workers, 1)))
    spans = [(s, min(chunk, total - s)) for s in range(0, total, chunk)]
    if workers <= 1 or len(spans) == 1:
        return [fn(s, n) for s, n in spans]
    from concurrent.futures import ThreadPoolExecutor

    with ThreadPoolExecutor(workers) as pool:
        return list(pool.map(lambda sn: fn(*sn), spans))


def _train_config(conf, args, stage: int):
    from .training import TrainConfig

    t = dict(conf["train"])
    t["stage"] = stage
    t.setdefault("seed", args.seed)
    if args.iterations is not None:
        t["iterations"] = args.iterations
    return TrainConfig.from_dict(t)


def _log_progress(every: int):
    def cb(trainer, row):
        if row["iteration"] % every == 0:
            keys = [k for k in row if k not in ("iteration", "wall_time")]
            print(f"[{trainer.kind}] it {row['iteration']} " + " ".join(f"{k}={row[k]:.4g}" for k in keys), flush=True)
    return cb


def _run_trainer(trainer, args):
    trainer.run(callback=_log_progress(args.print_every))
    return trainer


def cmd_pretrain(args) -> int:
    args.stage = "1"
    return cmd_train(args)


def cmd_train(args) -> int:
    from .datasets import read_dataset
    from .training import (Trainer, build_model, keyframer_from_inpainter, prepare_frames)

    started = time.time()
    conf = load_config(args.config, args.set)
    data = resolve_input(args.data)
    out = Output(default_out(args, "train"), args.force, staged=False, allow_existing=True)
    stages = {"1": [1], "2": [2], "both": [1, 2]}[args.stage] if args.kind == "keyin" else [2]
    if args.kind == "keyin" and 2 in stages and 1 not in stages and not args.inpainter and not args.resume:
        raise UsageError("--stage 2 needs --inpainter <stage-1 checkpoint>")
    if args.resume:
        from .checkpoint import read_checkpoint

        kind = read_checkpoint(resolve_input(args.resume))[0].get("kind")
        stages = [1] if kind == "inpainter" else [2]
    dataset = read_dataset(data)
    inputs = {"data": data}
    results = {}
    for stage in stages:
        tcfg = _train_config(conf, args, stage)
        sub = out.path / ({1: "stage1", 2: "stage2"}[stage] if args.kind == "keyin" else "dense")
        ckpt = sub / "checkpoint.zip"
        if not args.resume and sub.exists() and any(sub.iterdir()):
            if not args.force:
                raise FileExistsError(f"{sub} is not empty (use --force or --resume)")
            shutil.rmtree(sub)
        if args.resume:
            resume = resolve_input(args.resume)
            frames = prepare_frames(dataset, _ckpt_image_size(resume))
            trainer = Trainer.resume(resume, frames, sub, iterations=args.iterations)
        elif args.kind == "dense":
            mcfg = model_config(conf, args.preset)
            frames = prepare_frames(dataset, mcfg.image_size)
            trainer = Trainer(build_model("dense", mcfg, tcfg.seed), "dense", tcfg, frames, sub)
        elif stage == 1:
            mcfg = model_config(conf, args.preset)
            frames = prepare_frames(dataset, mcfg.image_size)
            trainer = Trainer(build_model("inpainter", mcfg, tcfg.seed), "inpainter", tcfg, frames, sub)
        else:
            inp = resolve_input(args.inpainter) if args.inpainter else out.path / "stage1" / "checkpoint.zip"
            inputs["inpainter"] = inp
            mcfg = model_config(conf, args.preset) if (conf["model"] or args.preset) else None
            size = (mcfg.image_size if mcfg else _ckpt_image_size(inp))
            trainer = keyframer_from_inpainter(inp, tcfg, prepare_frames(dataset, size), mcfg, sub)
        _run_trainer(trainer, args)
        results[sub.name] = {"checkpoint": str(ckpt), **trainer.log.summary()}
        args.resume = None
    write_run(out.path, args, {"model": trainer.mcfg.to_dict(), "train": trainer.cfg.to_dict(), "kind": args.kind},
              inputs, started, {"results": results})
    print(json.dumps({"out": str(out.path), "checkpoints": [r["checkpoint"] for r in results.values()]}))
    return 0


def _ckpt_image_size(path) -> int:
    from .checkpoint import read_checkpoint

    info, _, _ = read_checkpoint(path)
    return int(info["model_config"]["image_size"])


def _check_finite(rows):
    for r in rows:
        for k, v in r.items():
            if isinstance(v, float) and not math.isfinite(v):
                raise FloatingPointError(f"metric {k} of {r.get('method', r.get('variant'))} is not finite")


def cmd_eval_keyframes(args) -> int:
    from .datasets import read_dataset
    from .eval import discovery_table, plot_discovery, write_rows
    from .training import load_model

    started = time.time()
    conf = load_config(args.config, args.set)
    keyin = dense = None
    inputs = {"data": resolve_input(args.data)}
    if args.model:
        inputs["model"] = resolve_input(args.model)
        keyin, _ = load_model(inputs["model"])
    if args.dense:
        inputs["dense"] = resolve_input(args.dense)
        dense, _ = load_model(inputs["dense"])
    ref = keyin or dense
    if ref is None and not (args.N and args.T is not None and args.C is not None):
        raise UsageError("give --model/--dense, or --N, --T and --C for baseline-only evaluation")
    N = args.N or ref.cfg.N
    T = args.T or ref.cfg.T
    C = args.C or ref.cfg.C
    test = read_dataset(inputs["data"])
    train = None
    if args.train_data:
        inputs["train_data"] = resolve_input(args.train_data)
        train = read_dataset(inputs["train_data"])
    out = Output(default_out(args, "eval-keyframes"), args.force)
    try:
        reports, extras = discovery_table(test, train, N, T, C, keyin, dense, seed=args.seed, tol=args.tol)
        rows = [r.row() for r in reports]
        _check_finite(rows)
        write_rows(rows, out.path, "discovery", {"tol": args.tol, "N": N, "T": T, "C": C, "seed": args.seed,
                                                  "static_placement": extras.get("static_placement"),
                                                  "per_episode": {r.method: r.per_episode for r in reports}})
        plots = [] if args.no_plots else [str(p.name) for p in plot_discovery(extras, T, out.path)]
        write_run(out.path, args, {"N": N, "T": T, "C": C, "tol": args.tol, **conf}, inputs, started, {"plots": plots})
        final = out.commit()
    except BaseException:
        out.abort()
        raise
    print(json.dumps({"out": str(final), "rows": [{k: r[k] for k in ("method", "f1", "precision", "recall")} for r in rows]}))
    return 0


def cmd_eval_video(args) -> int:
    from .datasets import read_dataset
    from .eval import evaluate_video, write_rows
    from .training import load_model

    started = time.time()
    inputs = {"data": resolve_input(args.data), "model": resolve_input(args.model)}
    model, _ = load_model(inputs["model"])
    test = read_dataset(inputs["data"])
    if args.episodes:
        test.episodes = test.episodes[: args.episodes]
    out = Output(default_out(args, "eval-video"), args.force)
    try:
        res = evaluate_video(model, test, samples=args.samples, seed=args.seed)
        _check_finite([res])
        write_rows([{"method": "keyin", **res}], out.path, "video")
        write_run(out.path, args, {"samples": args.samples}, inputs, started)
        final = out.commit()
    except BaseException:
        out.abort()
        raise
    print(json.dumps({"out": str(final), **res}))
    return 0


def cmd_plan(args) -> int:
    from .datasets import read_dataset
    from .planner import PlannerConfig, PlanningModels, evaluate_planning, plot_planning, write_planning
    from .training import load_model

    started = time.time()
    conf = load_config(args.config, args.set)
    pcfg = PlannerConfig(**conf["planner"])
    variants = [v.strip() for v in args.variants.split(",") if v.strip()]
    inputs = {"data": resolve_input(args.data)}
    models = PlanningModels()
    for name in ("keyin", "jumpy", "dense"):
        path = getattr(args, name if name != "keyin" else "model")
        if path:
            inputs[name] = resolve_input(path)
            setattr(models, name, load_model(inputs[name])[0])
    episodes = read_dataset(inputs["data"]).episodes
    if args.episodes:
        if args.episodes > len(episodes):
            raise ValueError(f"requested {args.episodes} episodes, dataset has {len(episodes)}")
        episodes = episodes[: args.episodes]
    out = Output(default_out(args, "plan"), args.force)
    try:
        rows, traces = evaluate_planning(episodes, variants, models, pcfg, seed=args.seed, workers=args.workers)
        _check_finite(rows)
        write_planning(rows, traces, out.path, pcfg, dump_traces=args.dump_traces)
        if not args.no_plots:
            plot_planning(rows, out.path / "planning_errors.png")
        write_run(out.path, args, {"planner": dataclasses.asdict(pcfg), "variants": variants}, inputs, started)
        final = out.commit()
    except BaseException:
        out.abort()
        raise
    print(json.dumps({"out": str(final), "seed": args.seed, "rows": rows}))
    return 0


def cmd_report(args) -> int:
    """Collect discovery/video/planning tables from run directories into one markdown summary."""
    started = time.time()
    runs = [resolve_input(r) for r in args.runs]
    out = Output(default_out(args, "report"), args.force)
    try:
        lines = ["# Results", ""]
        collected = {}
        for run in runs:
            for stem, cols in (("discovery", ("method", "f1", "precision", "recall", "min_d_true", "min_d_pred")),
                               ("planning", ("variant", "mean_error", "std_error", "success_rate", "episodes")),
                               ("video", None)):
                f = run / f"{stem}.json"
                if not f.exists():
                    continue
                rows = json.loads(f.read_text())["rows"]
                cols = cols or tuple(rows[0])
                collected[f"{run.name}/{stem}"] = rows
                lines += [f"## {run.name}: {stem}", "", "| " + " | ".join(cols) + " |", "|" + "---|" * len(cols)]
                for r in rows:
                    lines.append("| " + " | ".join(_fmt(r.get(c)) for c in cols) + " |")
                lines.append("")
        if not collected:
            raise FileNotFoundError("no discovery.json, planning.json or video.json in the given runs")
        (out.path / "report.md").write_text("\n".join(lines))
        (out.path / "report.json").write_text(json.dumps(collected, indent=2))
        write_run(out.path, args, {}, {f"run{i}": r for i, r in enumerate(runs)}, started)
        final = out.commit()
    except BaseException:
        out.abort()
        raise
    print(json.dumps({"out": str(final), "tables": sorted(collected)}))
    return 0


def _fmt(v):
    if isinstance(v, float):
        return f"{v:.3f}"
    return "" if v is None else str(v)


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    g = common.add_argument_group("global options")
    g.add_argument("--config", help="TOML file with [model], [train], [planner] sections")
    g.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE", help="config override")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", help="output directory")
    g.add_argument("--workers", type=int, default=1)
    g.add_argument("--force", action="store_true", help="replace a non-empty output directory")

    p = _Parser(prog="keyin", description="Keyframe discovery and keyframe-based planning.")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("gen-data", parents=[common], help="generate a dataset")
    s.add_argument("kind", choices=["sbm", "push"])
    s.add_argument("--episodes", type=int, default=1000)
    s.add_argument("--length", type=int, help="frames per episode")
    s.add_argument("--size", type=int, help="frame size in pixels")
    s.add_argument("--noise", type=float, default=0.0, help="std of additive Gaussian pixel noise")
    s.set_defaults(func=cmd_gen_data)

    for name, func in (("pretrain", cmd_pretrain), ("train", cmd_train)):
        s = sub.add_parser(name, parents=[common], help="train the inpainter (stage 1)" if name == "pretrain"
                           else "train models (stage 1, stage 2, both, or the dense predictor)")
        s.add_argument("--data", required=True)
        s.add_argument("--preset", help="model preset name")
        s.add_argument("--iterations", type=int)
        s.add_argument("--resume", help="checkpoint to resume from")
        s.add_argument("--print-every", type=int, default=500)
        if name == "train":
            s.add_argument("--stage", choices=["1", "2", "both"], default="both")
            s.add_argument("--inpainter", help="stage-1 checkpoint for stage 2")
            s.add_argument("--kind", choices=["keyin", "dense"], default="keyin")
        else:
            s.set_defaults(kind="keyin", inpainter=None)
        s.set_defaults(func=func)

    s = sub.add_parser("eval-keyframes", parents=[common], help="keyframe discovery metrics and baselines")
    s.add_argument("--data", required=True, help="test dataset")
    s.add_argument("--train-data", help="training dataset (fits the static baseline)")
    s.add_argument("--model", help="keyframe model checkpoint")
    s.add_argument("--dense", help="dense predictor checkpoint (surprise baseline)")
    s.add_argument("--tol", type=int, default=1)
    s.add_argument("--N", type=int)
    s.add_argument("--T", type=int)
    s.add_argument("--C", type=int)
    s.add_argument("--no-plots", action="store_true")
    s.set_defaults(func=cmd_eval_keyframes)

    s = sub.add_parser("eval-video", parents=[common], help="PSNR/SSIM of generated sequences")
    s.add_argument("--data", required=True)
    s.add_argument("--model", required=True)
    s.add_argument("--samples", type=int, default=5)
    s.add_argument("--episodes", type=int)
    s.set_defaults(func=cmd_eval_video)

    s = sub.add_parser("plan", parents=[common], help="planning evaluation on the pushing surrogate")
    s.add_argument("--data", required=True, help="push dataset whose episodes define start states and goals")
    s.add_argument("--variants", default="flat,keyin,random")
    s.add_argument("--episodes", type=int)
    s.add_argument("--model", help="keyframe model checkpoint")
    s.add_argument("--jumpy", help="fixed-offset model checkpoint")
    s.add_argument("--dense", help="dense predictor checkpoint")
    s.add_argument("--dump-traces", action="store_true")
    s.add_argument("--no-plots", action="store_true")
    s.set_defaults(func=cmd_plan)

    s = sub.add_parser("report", parents=[common], help="merge result tables into a markdown report")
    s.add_argument("runs", nargs="+")
    s.set_defaults(func=cmd_report)
    return p


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"error: usage: {exc}", file=sys.stderr)
        return 2
    except KeyboardInterrupt:
        print("error: interrupted", file=sys.stderr)
        return 130
    except Exception as exc:  # noqa: BLE001 - one-line report for every failure
        msg = " ".join(str(exc).split())
        print(f"error: {type(exc).__name__}: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
