"""Motion clips, synthetic motion, and sparse-input / full-body window extraction.

Per-frame layouts:

* sparse frame (54): for head, left hand, right hand in that order,
  ``[position (3), global 6D rotation (6), linear velocity (3), 6D angular velocity (6)]``
* target frame (198): for each of the 22 joints in skeleton order,
  ``[global 6D rotation (6), global position (3)]``

Window helpers take an exclusive end index ``t``: the window covers frames
``t - T .. t - 1`` and frame ``t - T - 1`` must exist for the velocities.
"""

from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kinematics as kin
from .errors import ClipFormatError, RangeError

log = logging.getLogger(__name__)

SPARSE_DIM = 54
TARGET_DIM = 198
PER_SENSOR = 18
DEFAULT_FPS = 60.0
STAND_HEIGHT = 0.94  # pelvis height above the floor for the default skeleton

_BIN_MAGIC = b"MCLP"
_BIN_VERSION = 1


@dataclass
class MotionClip:
    fps: float
    rots: np.ndarray  # (N, 22, 3) local axis-angle
    root: np.ndarray  # (N, 3) meters
    name: str = "clip"
    names: tuple[str, ...] = ()

    def __post_init__(self):
        self.rots = np.asarray(self.rots, dtype=np.float64)
        self.root = np.asarray(self.root, dtype=np.float64)
        n = self.rots.shape[0]
        if self.rots.ndim != 3 or self.rots.shape[1:] != (kin.NUM_JOINTS, 3):
            raise ClipFormatError(f"rotations must be (N, {kin.NUM_JOINTS}, 3), got {self.rots.shape}")
        if self.root.shape != (n, 3):
            raise ClipFormatError(f"root must be ({n}, 3), got {self.root.shape}")
        if n < 2:
            raise ClipFormatError("a clip needs at least 2 frames")
        if not (math.isfinite(self.fps) and self.fps > 0):
            raise ClipFormatError(f"fps must be positive, got {self.fps}")
        if not (np.all(np.isfinite(self.rots)) and np.all(np.isfinite(self.root))):
            raise ClipFormatError("clip contains non-finite values")

    def __len__(self) -> int:
        return self.rots.shape[0]

    def local_matrices(self) -> np.ndarray:
        return kin.axis_angle_to_matrix(self.rots)

    def global_pose(self, skel: kin.Skeleton | None = None) -> kin.GlobalPose:
        skel = skel or kin.default_skeleton()
        return kin.forward_kinematics(skel, self.local_matrices(), self.root)

    def reversed(self) -> "MotionClip":
        return MotionClip(self.fps, self.rots[::-1].copy(), self.root[::-1].copy(), self.name + "_rev", self.names)


# --------------------------------------------------------------------------
# file formats


def save_clip(clip: MotionClip, path: str | Path) -> None:
    """Write JSON (``.json``) or the packed binary format (``.mclp``)."""
    path = Path(path)
    if path.suffix == ".mclp":
        path.write_bytes(_pack_binary(clip))
        return
    names = list(clip.names) or list(kin.default_skeleton().names)
    doc = {
        "fps": float(clip.fps),
        "names": names,
        "frames": [
            {"root": clip.root[i].tolist(), "rots": clip.rots[i].tolist()} for i in range(len(clip))
        ],
    }
    path.write_text(json.dumps(doc, separators=(",", ":")) + "\n")


def load_clip(path: str | Path) -> MotionClip:
    path = Path(path)
    try:
        if path.suffix == ".mclp":
            return _unpack_binary(path.read_bytes(), path.stem)
        doc = json.loads(path.read_text())
    except FileNotFoundError:
        raise
    except ClipFormatError:
        raise
    except (ValueError, struct.error, OSError) as exc:
        raise ClipFormatError(f"{path}: cannot parse clip ({exc})") from exc
    try:
        fps = float(doc["fps"])
        frames = doc["frames"]
        rots = np.array([f["rots"] for f in frames], dtype=np.float64)
        root = np.array([f["root"] for f in frames], dtype=np.float64)
    except (KeyError, TypeError, ValueError) as exc:
        raise ClipFormatError(f"{path}: malformed clip document ({exc})") from exc
    if rots.ndim != 3 or rots.shape[1:] != (kin.NUM_JOINTS, 3):
        raise ClipFormatError(f"{path}: shape mismatch, rotations are {rots.shape}, expected (N, 22, 3)")
    if not (np.all(np.isfinite(rots)) and np.all(np.isfinite(root))):
        raise ClipFormatError(f"{path}: non-finite value in clip")
    try:
        return MotionClip(fps, rots, root, name=path.stem, names=tuple(doc.get("names", ())))
    except ClipFormatError as exc:
        raise ClipFormatError(f"{path}: {exc}") from exc


def _pack_binary(clip: MotionClip) -> bytes:
    # magic, version u32, fps f32, frame count u32, then per frame root(3) + rots(66) f32
    header = _BIN_MAGIC + struct.pack("<IfI", _BIN_VERSION, clip.fps, len(clip))
    body = np.concatenate([clip.root, clip.rots.reshape(len(clip), -1)], axis=1)
    return header + body.astype("<f4").tobytes()


def _unpack_binary(buf: bytes, name: str) -> MotionClip:
    if buf[:4] != _BIN_MAGIC:
        raise ClipFormatError("bad magic in binary clip")
    version, fps, n = struct.unpack_from("<IfI", buf, 4)
    if version != _BIN_VERSION:
        raise ClipFormatError(f"unsupported binary clip version {version}")
    width = 3 + 3 * kin.NUM_JOINTS
    data = np.frombuffer(buf, dtype="<f4", offset=16)
    if data.size != n * width:
        raise ClipFormatError(f"shape mismatch: expected {n}x{width} values, found {data.size}")
    data = data.reshape(n, width).astype(np.float64)
    if not np.all(np.isfinite(data)):
        raise ClipFormatError("non-finite value in clip")
    return MotionClip(float(fps), data[:, 3:].reshape(n, kin.NUM_JOINTS, 3), data[:, :3], name=name)


# --------------------------------------------------------------------------
# synthetic motion

SYNTH_KINDS = ("walk", "sway", "squat", "still")


def synth_generate(kind: str, seed: int, duration_s: float, fps: float = DEFAULT_FPS) -> MotionClip:
    """Deterministic procedural motion for the default skeleton.

    Every joint rotation stays within 60 degrees of rest.
    """
    if kind not in SYNTH_KINDS:
        raise ValueError(f"unknown synthetic kind {kind!r}; choose from {SYNTH_KINDS}")
    if duration_s <= 0:
        raise ValueError("duration must be positive")
    n = max(2, int(round(duration_s * fps)))
    t = np.arange(n) / fps
    rng = np.random.default_rng(seed)
    skel = kin.default_skeleton()
    R = np.broadcast_to(np.eye(3), (n, kin.NUM_JOINTS, 3, 3)).copy()
    root = np.zeros((n, 3))
    root[:, 1] = STAND_HEIGHT
    J = {name: i for i, name in enumerate(skel.names)}

    def rx(a):
        return kin.axis_angle_to_matrix(np.stack([a, 0 * a, 0 * a], -1))

    def ry(a):
        return kin.axis_angle_to_matrix(np.stack([0 * a, a, 0 * a], -1))

    def rz(a):
        return kin.axis_angle_to_matrix(np.stack([0 * a, 0 * a, a], -1))

    if kind == "still":
        pass
    elif kind == "walk":
        f = rng.uniform(0.8, 1.2)
        phase = rng.uniform(0, 2 * np.pi)
        speed = rng.uniform(0.9, 1.3)
        hip_amp = rng.uniform(0.35, 0.5)
        knee_amp = rng.uniform(0.5, 0.8)
        arm_amp = rng.uniform(0.15, 0.3)
        w = 2 * np.pi * f * t + phase
        R[:, J["left_hip"]] = rx(-hip_amp * np.sin(w))
        R[:, J["right_hip"]] = rx(hip_amp * np.sin(w))
        R[:, J["left_knee"]] = rx(knee_amp * 0.5 * (1 - np.cos(w)))
        R[:, J["right_knee"]] = rx(knee_amp * 0.5 * (1 + np.cos(w)))
        R[:, J["left_ankle"]] = rx(-0.15 * np.sin(w))
        R[:, J["right_ankle"]] = rx(0.15 * np.sin(w))
        R[:, J["spine1"]] = ry(0.06 * np.sin(w))
        R[:, J["spine3"]] = ry(-0.04 * np.sin(w))
        R[:, J["head"]] = rx(0.05 * np.sin(2 * w))
        R[:, J["left_shoulder"]] = rx(arm_amp * np.sin(w)) @ rz(np.full(n, -0.85))
        R[:, J["right_shoulder"]] = rx(-arm_amp * np.sin(w)) @ rz(np.full(n, 0.85))
        R[:, J["left_elbow"]] = ry(0.25 + 0.1 * np.sin(w))
        R[:, J["right_elbow"]] = ry(-0.25 + 0.1 * np.sin(w))
        R[:, J["pelvis"]] = ry(0.05 * np.sin(w))
        root[:, 1] += 0.02 * np.cos(2 * w)
        root[:, 2] = speed * t
    elif kind == "sway":
        f = rng.uniform(0.3, 0.6)
        phase = rng.uniform(0, 2 * np.pi)
        amp = rng.uniform(0.1, 0.2)
        w = 2 * np.pi * f * t + phase
        for j in ("spine1", "spine2", "spine3"):
            R[:, J[j]] = rz(amp * np.sin(w))
        R[:, J["left_shoulder"]] = rz(-0.7 + 0.3 * np.sin(w + 0.5))
        R[:, J["right_shoulder"]] = rz(0.7 + 0.3 * np.sin(w + 0.5))
        R[:, J["left_elbow"]] = ry(0.3 + 0.2 * np.sin(w))
        R[:, J["right_elbow"]] = ry(-0.3 - 0.2 * np.sin(w))
        R[:, J["head"]] = rz(-0.5 * amp * np.sin(w))
        root[:, 0] = 0.05 * np.sin(w)
    elif kind == "squat":
        f = rng.uniform(0.25, 0.45)
        phase = rng.uniform(0, 2 * np.pi)
        depth = rng.uniform(0.6, 0.9)
        s = 0.5 * (1 - np.cos(2 * np.pi * f * t + phase))
        for side in ("left", "right"):
            R[:, J[f"{side}_hip"]] = rx(-depth * s)
            R[:, J[f"{side}_knee"]] = rx(1.1 * depth * s)
            R[:, J[f"{side}_ankle"]] = rx(-0.3 * depth * s)
        R[:, J["spine1"]] = rx(0.4 * depth * s)
        R[:, J["left_shoulder"]] = ry(-0.9 * s) @ rz(np.full(n, -0.3))
        R[:, J["right_shoulder"]] = ry(0.9 * s) @ rz(np.full(n, 0.3))
        # keep the lowest joint at its standing height so the feet stay planted
        rest_low = kin.rest_pose(skel).pos[:, 1].min()
        low = kin.forward_kinematics(skel, R, np.zeros((n, 3))).pos[..., 1].min(axis=1)
        root[:, 1] += rest_low - low

    rots = kin.matrix_to_axis_angle(R)
    return MotionClip(fps, rots, root, name=f"{kind}_{seed}", names=skel.names)


# --------------------------------------------------------------------------
# features


@dataclass
class ClipFeatures:
    """Per-frame sparse and target rows for a whole clip.

    ``sparse[k]`` is valid for ``k >= 1`` (row 0 is zeros: no previous frame).
    """

    sparse: np.ndarray  # (N, 54)
    target: np.ndarray  # (N, 198)
    fps: float


def clip_features(clip: MotionClip, skel: kin.Skeleton | None = None) -> ClipFeatures:
    skel = skel or kin.default_skeleton()
    pose = clip.global_pose(skel)
    n = len(clip)
    tracked = list(skel.tracked_indices)
    p = pose.pos[:, tracked]  # (N, 3, 3)
    Rg = pose.rot[:, tracked]  # (N, 3, 3, 3)
    sparse = np.zeros((n, 3, PER_SENSOR))
    sparse[:, :, 0:3] = p
    sparse[:, :, 3:9] = kin.matrix_to_sixd(Rg)
    sparse[1:, :, 9:12] = (p[1:] - p[:-1]) * clip.fps
    delta = kin.relative_rotation(Rg[:-1], Rg[1:])
    sparse[1:, :, 12:18] = (kin.matrix_to_sixd(delta) - kin.SIXD_IDENTITY) * clip.fps
    target = np.concatenate([kin.matrix_to_sixd(pose.rot), pose.pos], axis=-1)
    return ClipFeatures(sparse.reshape(n, SPARSE_DIM), target.reshape(n, TARGET_DIM), clip.fps)


def sparse_frames(clip: MotionClip, skel: kin.Skeleton | None = None) -> np.ndarray:
    """Sparse features for frames ``1..N-1`` as an ``(N-1, 54)`` stream."""
    return clip_features(clip, skel).sparse[1:]


def _check_window(n: int, t: int, T: int) -> None:
    if T < 1 or t - T < 1 or t > n:
        raise RangeError(f"window end {t} with length {T} out of range for {n} frames")


def extract_sparse(clip: MotionClip, t: int, T: int, skel: kin.Skeleton | None = None,
                   features: ClipFeatures | None = None) -> np.ndarray:
    """``(T, 54)`` sparse window over frames ``t-T .. t-1``."""
    _check_window(len(clip), t, T)
    feats = features or clip_features(clip, skel)
    return feats.sparse[t - T:t].copy()


def extract_targets(clip: MotionClip, t: int, T: int, skel: kin.Skeleton | None = None,
                    features: ClipFeatures | None = None) -> np.ndarray:
    """``(T, 198)`` full-body window over frames ``t-T .. t-1``."""
    _check_window(len(clip), t, T)
    feats = features or clip_features(clip, skel)
    return feats.target[t - T:t].copy()


# --------------------------------------------------------------------------
# datasets


@dataclass
class WindowSample:
    x_window: np.ndarray  # (T, 54)
    target_window: np.ndarray  # (T, 198)
    x_prev: np.ndarray  # (T, 54), shifted back one frame
    target_prev: np.ndarray  # (T, 198)
    clip_id: int
    end_frame: int  # last frame index covered by x_window


@dataclass
class WindowDataset:
    samples: list[WindowSample] = field(default_factory=list)
    skipped: int = 0
    T: int = 0

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    def __getitem__(self, i):
        return self.samples[i]


def make_dataset(clips, T: int, stride: int = 1, skel: kin.Skeleton | None = None) -> WindowDataset:
    """Enumerate (window, previous window) pairs that stay inside each clip."""
    if T < 2 or stride < 1:
        raise ValueError("need T >= 2 and stride >= 1")
    ds = WindowDataset(T=T)
    for cid, clip in enumerate(clips):
        n = len(clip)
        if n < T + 2:
            ds.skipped += 1
            continue
        feats = clip_features(clip, skel)
        for end in range(T + 2, n + 1, stride):
            ds.samples.append(
                WindowSample(
                    x_window=feats.sparse[end - T:end],
                    target_window=feats.target[end - T:end],
                    x_prev=feats.sparse[end - T - 1:end - 1],
                    target_prev=feats.target[end - T - 1:end - 1],
                    clip_id=cid,
                    end_frame=end - 1,
                )
            )
    if ds.skipped:
        log.warning("skipped %d clip(s) shorter than %d frames", ds.skipped, T + 2)
    return ds


def stack_batch(samples) -> dict[str, np.ndarray]:
    return {
        "x": np.stack([s.x_window for s in samples]),
        "target": np.stack([s.target_window for s in samples]),
        "x_prev": np.stack([s.x_prev for s in samples]),
        "target_prev": np.stack([s.target_prev for s in samples]),
    }
