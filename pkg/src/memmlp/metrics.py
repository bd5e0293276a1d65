"""Evaluation metrics between predicted and ground-truth motion.

Positions are taken in meters and reported in centimeters. Jitter is
reported in units of 10^2 m/s^3, the scale used by published tables.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from . import kinematics as kin
from .errors import InvalidInputError, ShapeError


@dataclass
class MetricsReport:
    mpjre: float  # degrees
    mpjpe: float  # cm
    mpjve: float  # cm/s
    hand_pe: float
    upper_pe: float
    lower_pe: float
    root_pe: float
    jitter: float  # 10^2 m/s^3

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_text(self) -> str:
        return "\n".join(f"{k}\t{v:.6f}" for k, v in self.to_dict().items())


def _same_shape(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch {a.shape} vs {b.shape}")
    return a, b


def _check_rotations(R: np.ndarray) -> None:
    eye = np.swapaxes(R, -1, -2) @ R
    if not np.all(np.isfinite(R)) or np.max(np.abs(eye - np.eye(3)), initial=0.0) > 1e-4:
        raise InvalidInputError("mpjre needs valid rotation matrices")
    if np.min(np.linalg.det(R), initial=1.0) < 0.999:
        raise InvalidInputError("mpjre needs proper rotations (det = +1)")


def mpjre(pred_rot, gt_rot) -> float:
    """Mean geodesic angle in degrees; inputs are ``(..., 3, 3)`` matrices."""
    p, g = _same_shape(pred_rot, gt_rot)
    _check_rotations(p)
    _check_rotations(g)
    return float(np.degrees(kin.geodesic_angle(p, g)).mean())


def mpjpe(pred_pos, gt_pos) -> float:
    p, g = _same_shape(pred_pos, gt_pos)
    return float(np.linalg.norm(p - g, axis=-1).mean() * 100.0)


def region_pe(pred_pos, gt_pos, joints) -> float:
    p, g = _same_shape(pred_pos, gt_pos)
    return mpjpe(p[..., list(joints), :], g[..., list(joints), :])


def mpjve(pred_pos, gt_pos, fps: float) -> float:
    """Mean velocity error in cm/s for ``(N, J, 3)`` trajectories."""
    p, g = _same_shape(pred_pos, gt_pos)
    if p.shape[0] < 2:
        raise ShapeError("mpjve needs at least 2 frames")
    dv = np.diff(p, axis=0) - np.diff(g, axis=0)
    return float(np.linalg.norm(dv, axis=-1).mean() * fps * 100.0)


def jitter(pos, fps: float) -> float:
    """Mean norm of the third finite difference times fps^3, divided by 100."""
    p = np.asarray(pos, dtype=np.float64)
    if p.shape[0] < 4:
        raise ShapeError("jitter needs at least 4 frames")
    jerk = p[3:] - 3 * p[2:-1] + 3 * p[1:-2] - p[:-3]
    return float(np.linalg.norm(jerk, axis=-1).mean() * fps**3 / 100.0)


@dataclass
class PredictedMotion:
    """Predicted global rotations and (optionally) positions per frame.

    Without positions, :func:`evaluate` derives them by forward kinematics
    from the ground-truth root translation.
    """

    global_rot: np.ndarray  # (N, 22, 3, 3)
    pos: np.ndarray | None = None  # (N, 22, 3)


def evaluate(pred: PredictedMotion, gt_global_rot, gt_pos, fps: float,
             skel: kin.Skeleton | None = None) -> MetricsReport:
    """All metrics over aligned sequences.

    Rotation error uses local (parent-relative) rotations, recovered from the
    global ones through the skeleton hierarchy.
    """
    skel = skel or kin.default_skeleton()
    gt_global_rot = np.asarray(gt_global_rot, dtype=np.float64)
    gt_pos = np.asarray(gt_pos, dtype=np.float64)
    R = np.asarray(pred.global_rot, dtype=np.float64)
    if R.shape[0] != gt_pos.shape[0] or gt_global_rot.shape[0] != gt_pos.shape[0]:
        raise ShapeError(f"misaligned lengths: pred {R.shape[0]} vs gt {gt_pos.shape[0]}")
    pos = pred.pos
    if pos is None:
        pos = kin.positions_from_global(skel, R, gt_pos[:, 0])
    pos = np.asarray(pos, dtype=np.float64)
    lower, upper = list(skel.lower), list(skel.upper)
    return MetricsReport(
        mpjre=mpjre(kin.global_to_local(skel, R), kin.global_to_local(skel, gt_global_rot)),
        mpjpe=mpjpe(pos, gt_pos),
        mpjve=mpjve(pos, gt_pos, fps),
        hand_pe=region_pe(pos, gt_pos, skel.hands),
        upper_pe=region_pe(pos, gt_pos, upper),
        lower_pe=region_pe(pos, gt_pos, lower),
        root_pe=region_pe(pos, gt_pos, [0]),
        jitter=jitter(pos, fps),
    )
