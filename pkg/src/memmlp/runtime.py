"""Autoregressive inference (streaming and offline), FLOPs accounting, benchmarking."""

from __future__ import annotations

import json
import statistics
import time
from collections import deque
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from . import diffcore as dc
from . import kinematics as kin
from .data import SPARSE_DIM, TARGET_DIM, sparse_frames, synth_generate
from .errors import DegenerateRotationError, ShapeError
from .model import MemMLP, MemMLPConfig, pack_theta
from .prior import PriorConfig, VQVAE


@dataclass
class FrameOutput:
    rot: np.ndarray  # (22, 3, 3) global rotations
    pos: np.ndarray  # (22, 3) global positions
    valid: bool  # False for cold-start placeholders
    fault: bool = False


@dataclass
class WindowOutput:
    rot6d: np.ndarray  # (T, 22, 6)
    pos: np.ndarray  # (T, 22, 3)
    theta: torch.Tensor  # (T, 198), fed back to the memory blocks


def _head_anchored_fk(skel: kin.Skeleton, global_rot: np.ndarray, head_pos: np.ndarray) -> np.ndarray:
    """Positions from global rotations, translated so the head sits at ``head_pos``."""
    pos = kin.positions_from_global(skel, global_rot, np.zeros(global_rot.shape[:-3] + (3,)))
    head = skel.tracked["head"]
    return pos + (head_pos - pos[..., head, :])[..., None, :]


def _head_positions(x: np.ndarray) -> np.ndarray:
    return x[..., 0:3]  # head is the first tracked sensor


def blend_for(model: MemMLP, gen: torch.Generator | None):
    """Inference-time blend: constant by default, or seeded uniform draws."""
    cfg = model.cfg
    if cfg.infer_blend == "sampled":
        return model.sample_blend((), gen)
    return model.constant_blend(cfg.blend_value)


@torch.no_grad()
def infer_window(model: MemMLP, prior: VQVAE | None, x: np.ndarray, x_prev: np.ndarray,
                 theta_prev: torch.Tensor | None, blend: dict | None, skel: kin.Skeleton) -> WindowOutput:
    """One model evaluation on a ``(T, 54)`` window."""
    model.eval()
    xt = torch.from_numpy(np.ascontiguousarray(x, dtype=np.float32))
    feats = None
    if model.uses_memory:
        xp = torch.from_numpy(np.ascontiguousarray(x_prev, dtype=np.float32))
        th = theta_prev if theta_prev is not None else torch.zeros(model.cfg.T, TARGET_DIM)
        _, e = prior.code(xp, th)
        feats = model.memory_features(xp, th, e, blend)
    pred = model.predict(model.backbone(xt, feats))
    rot6d = pred.rot6d.double().numpy()
    if pred.pos is not None:
        pos_t = pred.pos
        pos = pos_t.double().numpy()
    else:
        try:
            R = kin.sixd_to_matrix(rot6d)
        except DegenerateRotationError:
            R = np.broadcast_to(np.eye(3), rot6d.shape[:-1] + (3, 3))
        pos = _head_anchored_fk(skel, R, _head_positions(x).astype(np.float64))
        pos_t = torch.from_numpy(pos.astype(np.float32))
    return WindowOutput(rot6d, pos, pack_theta(pred.rot6d, pos_t))


@dataclass
class OfflineResult:
    rot: np.ndarray  # (N, 22, 3, 3)
    pos: np.ndarray  # (N, 22, 3)
    valid: np.ndarray  # (N,) bool
    rot6d: np.ndarray  # (N, 22, 6) raw rotation-branch output


# --------------------------------------------------------------------------
# streaming


@dataclass
class StreamState:
    T: int
    buffer: deque = field(default_factory=deque)
    prev_theta: torch.Tensor | None = None
    frames_seen: int = 0
    seed: int = 0
    gen: torch.Generator | None = None
    last_good: FrameOutput | None = None
    faults: int = 0

    def __post_init__(self):
        self.buffer = deque(self.buffer, maxlen=self.T + 1)
        if self.gen is None:
            self.gen = torch.Generator().manual_seed(self.seed)


def new_stream(model: MemMLP, seed: int = 0) -> StreamState:
    return StreamState(T=model.cfg.T, seed=seed)


def _placeholder(skel: kin.Skeleton, frame: np.ndarray) -> FrameOutput:
    rest = kin.rest_pose(skel)
    pos = rest.pos + (_head_positions(frame) - rest.pos[skel.tracked["head"]])
    return FrameOutput(rest.rot, pos, valid=False)


def _emit(skel: kin.Skeleton, out: WindowOutput) -> FrameOutput:
    R = kin.sixd_to_matrix(out.rot6d[-1])
    return FrameOutput(R, out.pos[-1].copy(), valid=True)


def stream_step(state: StreamState, frame, model: MemMLP, prior: VQVAE | None,
                skel: kin.Skeleton | None = None) -> FrameOutput:
    """Consume one 54-wide sparse frame and emit one full-body frame.

    Until ``T + 1`` frames are buffered (the current and previous windows),
    a rest pose placed under the head sensor is emitted. The first model run
    feeds a zero tensor to the memory blocks in place of a previous prediction.
    """
    skel = skel or kin.default_skeleton()
    frame = np.asarray(frame, dtype=np.float64)
    if frame.shape != (SPARSE_DIM,):
        raise ShapeError(f"sparse frame must have {SPARSE_DIM} values, got {frame.shape}")
    state.buffer.append(frame)
    state.frames_seen += 1
    if len(state.buffer) <= state.T:
        return _placeholder(skel, frame)
    buf = np.stack(state.buffer)
    blend = blend_for(model, state.gen) if model.uses_memory else None
    out = infer_window(model, prior, buf[1:], buf[:-1], state.prev_theta, blend, skel)
    try:
        if not (np.all(np.isfinite(out.rot6d)) and np.all(np.isfinite(out.pos))):
            raise DegenerateRotationError("non-finite model output")
        result = _emit(skel, out)
    except DegenerateRotationError:
        state.faults += 1
        last = state.last_good or _placeholder(skel, frame)
        return FrameOutput(last.rot, last.pos, valid=last.valid, fault=True)
    state.prev_theta = out.theta
    state.last_good = result
    return result


def sliding_window_infer(model: MemMLP, prior: VQVAE | None, stream: np.ndarray,
                         skel: kin.Skeleton | None = None, seed: int = 0):
    """Offline pass over an ``(N, 54)`` sparse stream.

    Same per-frame semantics as repeated :func:`stream_step`; also keeps the
    raw 6D rotation-branch output of each emitted frame (IK starts from it).
    """
    skel = skel or kin.default_skeleton()
    stream = np.asarray(stream, dtype=np.float64)
    T = model.cfg.T
    n = len(stream)
    rest = kin.rest_pose(skel)
    head = skel.tracked["head"]
    rot = np.empty((n, skel.joint_count, 3, 3))
    pos = np.empty((n, skel.joint_count, 3))
    valid = np.zeros(n, dtype=bool)
    raw6d = np.zeros((n, skel.joint_count, 6))
    gen = torch.Generator().manual_seed(seed)
    prev_theta = None
    last = None
    for t in range(n):
        if t < T:
            rot[t] = rest.rot
            pos[t] = rest.pos + (stream[t, 0:3] - rest.pos[head])
            continue
        blend = blend_for(model, gen) if model.uses_memory else None
        out = infer_window(model, prior, stream[t - T + 1:t + 1], stream[t - T:t], prev_theta, blend, skel)
        raw6d[t] = out.rot6d[-1]
        ok = np.all(np.isfinite(out.rot6d)) and np.all(np.isfinite(out.pos))
        try:
            R = kin.sixd_to_matrix(out.rot6d[-1]) if ok else None
        except DegenerateRotationError:
            R = None
        if R is None:
            if last is None:
                rot[t] = rest.rot
                pos[t] = rest.pos + (stream[t, 0:3] - rest.pos[head])
            else:
                rot[t], pos[t], valid[t] = rot[last], pos[last], valid[last]
            continue
        rot[t], pos[t], valid[t] = R, out.pos[-1], True
        prev_theta = out.theta
        last = t
    return OfflineResult(rot, pos, valid, raw6d)


# --------------------------------------------------------------------------
# FLOPs


def flops_count(cfg: MemMLPConfig, prior_cfg: PriorConfig | None = None) -> int:
    """Multiply-adds of one window inference, including the prior encoder when used."""
    T, d, k = cfg.T, cfg.d, cfg.conv_kernel
    block = T * k * d * d + T * d * d
    total = T * SPARSE_DIM * d + cfg.L * block
    for _ in cfg.memory_layers:
        total += T * SPARSE_DIM * d + T * TARGET_DIM * d + cfg.d_zs * d + T * 2 * d * d
    total += cfg.predictor_depth * block + T * d * 6 * kin.NUM_JOINTS
    if cfg.multi_head:
        total += cfg.predictor_depth * block + T * d * 3 * kin.NUM_JOINTS
    if cfg.memory_layers:
        p = prior_cfg or PriorConfig(T=cfg.T, d_zs=cfg.d_zs, K=cfg.K)
        h = p.hidden
        total += T * (SPARSE_DIM + TARGET_DIM) * h + p.L_enc * T * h * h + h * p.d_zs + p.K * p.d_zs
    return total


def counted_macs(model: MemMLP, prior: VQVAE | None) -> dc.MacCounter:
    """Run one window inference with every primitive op counted."""
    T = model.cfg.T
    x = np.zeros((T, SPARSE_DIM))
    blend = model.constant_blend(0.5) if model.uses_memory else None
    with dc.MacCounter() as counter:
        infer_window(model, prior, x, x, None, blend, kin.default_skeleton())
    return counter


# --------------------------------------------------------------------------
# benchmarking


@dataclass
class BenchReport:
    mean_ms: float
    median_ms: float
    p99_ms: float
    fps: float
    frames: int
    warmup: int
    threads: int
    config: dict

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    def to_text(self) -> str:
        rows = [("mean_ms", self.mean_ms), ("median_ms", self.median_ms), ("p99_ms", self.p99_ms),
                ("fps", self.fps), ("frames", self.frames), ("warmup", self.warmup), ("threads", self.threads)]
        width = max(len(k) for k, _ in rows)
        return "\n".join(f"{k:<{width}}  {v:.4f}" if isinstance(v, float) else f"{k:<{width}}  {v}"
                         for k, v in rows)


def bench(model: MemMLP, prior: VQVAE | None, n_frames: int = 500, warmup: int = 50, seed: int = 0,
          threads: int = 1) -> tuple[BenchReport, np.ndarray]:
    """Per-frame latency of :func:`stream_step` after warmup; returns the report and raw times (ms)."""
    if n_frames < 1:
        raise ValueError("n_frames must be >= 1")
    T = model.cfg.T
    total = T + warmup + n_frames + 1
    clip = synth_generate("walk", seed, duration_s=total / 60.0, fps=60.0)
    stream = sparse_frames(clip)
    skel = kin.default_skeleton()
    times = []
    with dc.deterministic(threads):
        state = new_stream(model, seed)
        for i, frame in enumerate(stream):
            t0 = time.perf_counter()
            stream_step(state, frame, model, prior, skel)
            dt = (time.perf_counter() - t0) * 1000.0
            if i >= T + warmup:
                times.append(dt)
            if len(times) == n_frames:
                break
    arr = np.array(times)
    mean = float(arr.mean())
    report = BenchReport(
        mean_ms=mean,
        median_ms=float(statistics.median(times)),
        p99_ms=float(np.percentile(arr, 99)),
        fps=1000.0 / mean,
        frames=len(times),
        warmup=warmup,
        threads=threads,
        config=asdict(model.cfg),
    )
    return report, arr
