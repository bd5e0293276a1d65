"""Command-line entry point: ``memmlp {synth,train-prior,train,eval,infer,bench}``.

Every command runs single-threaded with all randomness derived from
``--seed``. Errors print one ``memmlp: error: ...`` line to stderr and exit
with a code specific to the error class (see ``EXIT_CODES``).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from . import config as config_mod
from . import data, plotting, runtime
from . import diffcore as dc
from . import kinematics as kin
from . import metrics
from .errors import (
    CheckpointError,
    ClipFormatError,
    ConfigError,
    DegenerateRotationError,
    FrozenError,
    InvalidInputError,
    MemMLPError,
    OptimizerAbort,
    RangeError,
    ShapeError,
)
from .ik import ik_refine
from .model import MemMLP, Trainer, load_model, save_model
from .prior import VQVAE, load_prior, save_prior, train_vqvae

log = logging.getLogger("memmlp")

EXIT_OK = 0
EXIT_USAGE = 2  # argparse's own code for bad flags
# most specific class first; the first isinstance match wins
EXIT_CODES = (
    (FileNotFoundError, 3),
    (ConfigError, 4),
    (ShapeError, 5),
    (ClipFormatError, 6),
    (CheckpointError, 7),
    (InvalidInputError, 8),
    (DegenerateRotationError, 8),
    (RangeError, 9),
    (FrozenError, 10),
    (OptimizerAbort, 11),
    (MemMLPError, 1),
    (ValueError, 1),
)
CLIP_SUFFIXES = (".json", ".mclp")
SMOOTH = 50  # steps averaged for the initial/final loss summary


def exit_code_for(exc: BaseException) -> int:
    for cls, code in EXIT_CODES:
        if isinstance(exc, cls):
            return code
    return 1


# --------------------------------------------------------------------------
# helpers


def _existing(path) -> Path:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such file: {path}")
    return path


def clip_paths(inputs) -> list[Path]:
    """Expand files and directories (sorted ``*.json``/``*.mclp``) into clip paths."""
    out = []
    for item in inputs:
        p = _existing(item)
        if p.is_dir():
            found = sorted(q for q in p.iterdir() if q.suffix in CLIP_SUFFIXES)
            if not found:
                raise FileNotFoundError(f"no clips (*.json, *.mclp) in {p}")
            out.extend(found)
        else:
            out.append(p)
    return out


def load_clips(inputs) -> list[data.MotionClip]:
    clips = []
    for p in clip_paths(inputs):
        clip = data.load_clip(p)
        clip.name = p.stem
        clips.append(clip)
    return clips


def _sidecar(path: Path, suffix: str) -> Path:
    return path.with_name(path.stem + suffix)


def _load_pair(model_path, prior_path) -> tuple[MemMLP, VQVAE | None]:
    model = load_model(_existing(model_path))
    prior = None
    if model.uses_memory:
        if prior_path is None:
            raise ConfigError("this model has memory blocks; pass --prior")
        prior = load_prior(_existing(prior_path))
        _check_pair(model, prior)
    return model, prior


def _check_pair(model: MemMLP, prior: VQVAE) -> None:
    for key in ("T", "d_zs", "K"):
        a, b = getattr(model.cfg, key), getattr(prior.cfg, key)
        if a != b:
            raise ShapeError(f"prior {key}={b} does not match model {key}={a}")


def _write_loss(path: Path, total, lr, extra_cols=None) -> None:
    header = ["step", "loss", "lr"] + [name for name, _ in (extra_cols or [])]
    rows = ["\t".join(header)]
    for i, (v, r) in enumerate(zip(total, lr)):
        cols = [str(i + 1), f"{v:.8g}", f"{r:.8g}"]
        cols += ["" if col[i] is None else f"{col[i]:.8g}" for _, col in (extra_cols or [])]
        rows.append("\t".join(cols))
    path.write_text("\n".join(rows) + "\n")


# --------------------------------------------------------------------------
# commands


def cmd_synth(args, cfg: config_mod.RunConfig) -> int:
    s = cfg.synth
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i in range(s.count):
        seed = cfg.seed + i
        clip = data.synth_generate(s.kind, seed, s.duration, s.fps)
        path = out / f"{s.kind}_{seed:04d}.{s.format}"
        data.save_clip(clip, path)
        print(f"{path}\t{len(clip)} frames")
    return EXIT_OK


def cmd_train_prior(args, cfg: config_mod.RunConfig) -> int:
    clips = load_clips(args.data)
    ds = data.make_dataset(clips, cfg.prior.T, cfg.run.stride)
    if len(ds) == 0:
        raise RangeError(f"no training windows of length {cfg.prior.T} in the given clips")
    prior, hist = train_vqvae(ds, cfg.prior)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_prior(prior, out)
    loss = [f"{i + 1}\t{v:.8g}" for i, v in enumerate(hist.epoch_loss)]
    _sidecar(out, ".loss.tsv").write_text("epoch\tloss\n" + "\n".join(loss) + "\n")
    plotting.plot_loss(hist.epoch_loss, _sidecar(out, ".loss.png"), title="prior loss per epoch")
    used = int((prior.usage > 0).sum())
    print(f"windows\t{len(ds)}")
    print(f"initial_loss\t{hist.epoch_loss[0]:.6f}")
    print(f"final_loss\t{hist.epoch_loss[-1]:.6f}")
    print(f"codes_used\t{used}/{cfg.prior.K}")
    return EXIT_OK


def cmd_train(args, cfg: config_mod.RunConfig) -> int:
    model = MemMLP(cfg.model)
    prior = None
    if model.uses_memory:
        if args.prior is None:
            raise ConfigError("a model with memory blocks needs --prior")
        prior = load_prior(_existing(args.prior))
        _check_pair(model, prior)
    clips = load_clips(args.data)
    ds = data.make_dataset(clips, cfg.model.T, cfg.run.stride)
    if len(ds) == 0:
        raise RangeError(f"no training windows of length {cfg.model.T} in the given clips")
    trainer = Trainer(model, prior, ds, cfg.train)
    torch.manual_seed(cfg.seed)
    hist = trainer.run()
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_model(model, out)
    parts = list(zip(*hist.parts)) if hist.parts else []
    names = ("theta", "rot_vel", "pos", "pos_vel")
    _write_loss(_sidecar(out, ".loss.tsv"), hist.total, hist.lr, list(zip(names, parts)))
    plotting.plot_loss(hist.total, _sidecar(out, ".loss.png"), lr=hist.lr)
    k = min(SMOOTH, len(hist.total))
    print(f"windows\t{len(ds)}")
    print(f"params\t{model.param_count()}")
    print(f"initial_loss\t{float(np.mean(hist.total[:k])):.6f}")
    print(f"final_loss\t{float(np.mean(hist.total[-k:])):.6f}")
    return EXIT_OK


def _weighted_mean(reports: list[dict], weights: list[int]) -> dict:
    w = np.asarray(weights, dtype=np.float64)
    return {k: float(np.dot([r[k] for r in reports], w) / w.sum()) for k in reports[0]}


def evaluate_clips(model: MemMLP, prior, clips, use_ik: bool, ik_cfg, seed: int, threads: int = 1):
    """Per-clip metric dicts for each pathway plus the aligned trajectories.

    Pathways: ``rot`` (rotation branch, FK from the ground-truth root),
    ``pos`` (position branch output, when present) and ``ik`` (rotation
    branch refined toward the position branch). Frames before the first
    full window are excluded.
    """
    skel = kin.default_skeleton()
    T = model.cfg.T
    per_clip, frames, traj = {}, [], None
    for clip in clips:
        stream = data.sparse_frames(clip, skel)
        if len(stream) - T < 4:
            raise RangeError(f"clip {clip.name} has {len(clip)} frames; eval needs at least {T + 5}")
        off = runtime.sliding_window_infer(model, prior, stream, skel, seed=seed)
        gt = clip.global_pose(skel)
        sl = slice(T, None)
        gt_rot, gt_pos = gt.rot[1:][sl], gt.pos[1:][sl]
        preds = {"rot": metrics.PredictedMotion(off.rot[sl])}
        if model.pos_branch is not None:
            preds["pos"] = metrics.PredictedMotion(off.rot[sl], off.pos[sl])
        if use_ik:
            refined = ik_refine(kin.matrix_to_sixd(off.rot[sl]), off.pos[sl], skel, ik_cfg, threads=threads)
            preds["ik"] = metrics.PredictedMotion(kin.sixd_to_matrix(refined))
        per_clip[clip.name] = {
            name: metrics.evaluate(p, gt_rot, gt_pos, clip.fps, skel).to_dict() for name, p in preds.items()
        }
        frames.append(len(gt_pos))
        if traj is None:
            pos = {name: (p.pos if p.pos is not None else kin.positions_from_global(skel, p.global_rot, gt_pos[:, 0]))
                   for name, p in preds.items()}
            traj = (gt_pos, pos, clip.fps)
    pathways = list(next(iter(per_clip.values())))
    mean = {name: _weighted_mean([r[name] for r in per_clip.values()], frames) for name in pathways}
    return per_clip, mean, sum(frames), traj


def format_table(reports: dict) -> str:
    """Tab-delimited table: one row per metric, one column per pathway."""
    names = list(reports)
    keys = list(next(iter(reports.values())))
    lines = ["metric\t" + "\t".join(names)]
    lines += [k + "\t" + "\t".join(f"{reports[n][k]:.6f}" for n in names) for k in keys]
    return "\n".join(lines)


def cmd_eval(args, cfg: config_mod.RunConfig) -> int:
    model, prior = _load_pair(args.model, args.prior)
    if args.ik and model.pos_branch is None:
        raise ConfigError("--ik needs a model with a position branch (multi_head = true)")
    clips = load_clips(args.data)
    per_clip, mean, n, traj = evaluate_clips(model, prior, clips, args.ik, cfg.ik, cfg.seed,
                                             config_mod.env_threads())
    table = format_table(mean)
    print(f"# frames\t{n}")
    print(table)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        doc = {"frames": n, "mean": mean, "clips": per_clip}
        (out / "metrics.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
        (out / "metrics.tsv").write_text(table + "\n")
        plotting.plot_region_errors(mean, out / "regions.png")
        skel = kin.default_skeleton()
        gt_pos, pos, fps = traj
        joints = {"left hand": skel.tracked["left_hand"], "left foot": skel.names.index("left_foot")}
        plotting.plot_trajectories(gt_pos, pos, joints, fps, out / "trajectory.png")
    return EXIT_OK


def cmd_infer(args, cfg: config_mod.RunConfig) -> int:
    model, prior = _load_pair(args.model, args.prior)
    skel = kin.default_skeleton()
    clip = data.load_clip(_existing(args.clip))
    stream = data.sparse_frames(clip, skel)
    off = runtime.sliding_window_infer(model, prior, stream, skel, seed=cfg.seed)
    local = kin.global_to_local(skel, off.rot)
    out_clip = data.MotionClip(clip.fps, kin.matrix_to_axis_angle(local), off.pos[:, 0],
                               name=Path(args.out).stem, names=skel.names)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    data.save_clip(out_clip, out)
    print(f"frames\t{len(out_clip)}")
    print(f"valid\t{int(off.valid.sum())}")
    print(f"written\t{out}")
    return EXIT_OK


def cmd_bench(args, cfg: config_mod.RunConfig) -> int:
    b = cfg.bench
    if args.model:
        model, prior = _load_pair(args.model, args.prior)
    else:
        model = MemMLP(cfg.model)
        prior = VQVAE(cfg.prior).freeze() if model.uses_memory else None
    report, times = runtime.bench(model, prior, n_frames=b.frames, warmup=b.warmup, seed=cfg.seed,
                                  threads=b.threads)
    gmacs = runtime.flops_count(model.cfg, prior.cfg if prior is not None else None) / 1e9
    print(report.to_text())
    print(f"gmacs  {gmacs:.4f}")
    print(f"params  {model.param_count()}")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        doc = json.loads(report.to_json())
        doc.update(gmacs=gmacs, params=model.param_count())
        (out / "bench.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
        (out / "bench.txt").write_text(report.to_text() + "\n")
        lines = ["frame\tms"] + [f"{i}\t{t:.6f}" for i, t in enumerate(times)]
        (out / "latency.tsv").write_text("\n".join(lines) + "\n")
        plotting.plot_latency(times, out / "latency.png", report.median_ms)
    return EXIT_OK


# --------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML run configuration")
    common.add_argument("--seed", type=int, help="seed for every random draw (overrides [run] seed)")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    p = argparse.ArgumentParser(prog="memmlp", description="Full-body motion from head and hand tracking.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="write synthetic motion clips")
    s.add_argument("--kind", choices=data.SYNTH_KINDS)
    s.add_argument("--duration", type=float, help="seconds per clip")
    s.add_argument("--fps", type=float)
    s.add_argument("--count", type=int, help="number of clips (seeds seed..seed+count-1)")
    s.add_argument("--format", choices=("json", "mclp"))
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train-prior", parents=[common], help="train the VQ-VAE motion prior")
    s.add_argument("--data", nargs="+", required=True, help="clip files or directories")
    s.add_argument("--epochs", type=int)
    s.add_argument("--batch-size", type=int)
    s.add_argument("--out", required=True, help="prior checkpoint path")
    s.set_defaults(func=cmd_train_prior)

    s = sub.add_parser("train", parents=[common], help="train Mem-MLP")
    s.add_argument("--data", nargs="+", required=True, help="clip files or directories")
    s.add_argument("--prior", help="frozen prior checkpoint (required with memory blocks)")
    s.add_argument("--steps", type=int)
    s.add_argument("--batch-size", type=int)
    s.add_argument("--out", required=True, help="model checkpoint path")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", parents=[common], help="report metrics on clips")
    s.add_argument("--model", required=True)
    s.add_argument("--prior")
    s.add_argument("--data", nargs="+", required=True, help="clip files or directories")
    s.add_argument("--ik", action="store_true", help="also refine rotations toward the position branch")
    s.add_argument("--out", help="directory for metrics.json/tsv and figures")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("infer", parents=[common], help="stream a clip's sensors through the model")
    s.add_argument("--model", required=True)
    s.add_argument("--prior")
    s.add_argument("--clip", required=True, help="input clip (its head and hand sensors are used)")
    s.add_argument("--out", required=True, help="predicted clip path (.json or .mclp)")
    s.set_defaults(func=cmd_infer)

    s = sub.add_parser("bench", parents=[common], help="per-frame streaming latency")
    s.add_argument("--model", help="model checkpoint; defaults to an untrained [model] config")
    s.add_argument("--prior")
    s.add_argument("--frames", type=int)
    s.add_argument("--warmup", type=int)
    s.add_argument("--threads", type=int)
    s.add_argument("--out", help="directory for bench.json/txt and the latency histogram")
    s.set_defaults(func=cmd_bench)
    return p


def resolve_config(args) -> config_mod.RunConfig:
    cfg = config_mod.with_seed(config_mod.load_config(args.config), args.seed)
    if args.command == "synth":
        cfg = config_mod.with_overrides(cfg, "synth", kind=args.kind, duration=args.duration, fps=args.fps,
                                        count=args.count, format=args.format)
    elif args.command == "train-prior":
        cfg = config_mod.with_overrides(cfg, "prior", epochs=args.epochs, batch_size=args.batch_size)
    elif args.command == "train":
        cfg = config_mod.with_overrides(cfg, "train", steps=args.steps, batch_size=args.batch_size)
    elif args.command == "bench":
        cfg = config_mod.with_overrides(cfg, "bench", frames=args.frames, warmup=args.warmup,
                                        threads=args.threads)
    return cfg


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(None if argv is None else [str(a) for a in argv])
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = resolve_config(args)
        torch.manual_seed(cfg.seed)
        with dc.deterministic(1):
            return args.func(args, cfg)
    except (MemMLPError, FileNotFoundError, ValueError) as exc:
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"memmlp: error: {msg}", file=sys.stderr)
        return exit_code_for(exc)


if __name__ == "__main__":
    sys.exit(main())
