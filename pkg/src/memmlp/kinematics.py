"""Rotation representations, the skeleton, and forward kinematics.

Rotation matrices use the column convention: ``R @ v`` rotates ``v``. The 6D
representation is the first two columns of ``R`` stacked as
``(R[:, 0], R[:, 1])``. All numpy functions broadcast over leading axes; the
``*_t`` variants are the torch equivalents used wherever gradients are needed.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np
import torch

from .errors import DegenerateRotationError, InvalidInputError, ShapeError

NUM_JOINTS = 22
SIXD_IDENTITY = np.array([1.0, 0.0, 0.0, 0.0, 1.0, 0.0])

_DEGENERATE_NORM = 1e-8


# --------------------------------------------------------------------------
# skeleton


@dataclass(frozen=True, eq=False)
class Skeleton:
    parents: tuple[int, ...]
    offsets: np.ndarray  # (J, 3) meters
    lower: tuple[int, ...] = ()
    upper: tuple[int, ...] = ()
    names: tuple[str, ...] = ()
    tracked: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        offsets = np.asarray(self.offsets, dtype=np.float64)
        object.__setattr__(self, "offsets", offsets)
        n = len(self.parents)
        if offsets.shape != (n, 3):
            raise ShapeError(f"offsets must be ({n}, 3), got {offsets.shape}")
        if not np.all(np.isfinite(offsets)):
            raise InvalidInputError("skeleton offsets must be finite")
        if n < 1 or self.parents[0] >= 0:
            raise ShapeError("joint 0 must be the root (negative parent)")
        for i, p in enumerate(self.parents[1:], start=1):
            if not 0 <= p < n or p == i:
                raise ShapeError(f"joint {i} has invalid parent {p}")
        object.__setattr__(self, "_order", _topological_order(self.parents))
        if self.lower or self.upper:
            lo, up = set(self.lower), set(self.upper)
            if lo & up or lo | up != set(range(1, n)):
                raise ShapeError("upper/lower sets must partition joints 1..J-1")

    @property
    def joint_count(self) -> int:
        return len(self.parents)

    @property
    def order(self) -> tuple[int, ...]:
        """Joint indices with every parent ahead of its children."""
        return self._order

    @property
    def tracked_indices(self) -> tuple[int, int, int]:
        t = self.tracked
        return (t["head"], t["left_hand"], t["right_hand"])

    @property
    def hands(self) -> tuple[int, int]:
        return (self.tracked["left_hand"], self.tracked["right_hand"])

    def to_dict(self) -> dict:
        return {
            "names": list(self.names),
            "parents": list(self.parents),
            "offsets": self.offsets.tolist(),
            "lower": list(self.lower),
            "upper": list(self.upper),
            "tracked": dict(self.tracked),
        }


def _topological_order(parents) -> tuple[int, ...]:
    n = len(parents)
    children = [[] for _ in range(n)]
    for i, p in enumerate(parents[1:], start=1):
        children[p].append(i)
    order, stack = [], [0]
    while stack:
        j = stack.pop()
        order.append(j)
        stack.extend(reversed(children[j]))
    if len(order) != n:
        raise ShapeError("parent indices do not form a tree rooted at joint 0")
    return tuple(order)


def load_skeleton(path: str | Path | None = None) -> Skeleton:
    """Load a skeleton JSON file; ``None`` loads the bundled 22-joint default."""
    if path is None:
        text = resources.files("memmlp").joinpath("skeleton.json").read_text()
    else:
        text = Path(path).read_text()
    doc = json.loads(text)
    for key in ("parents", "offsets", "lower", "upper", "names"):
        if key not in doc:
            raise ShapeError(f"skeleton file missing field {key!r}")
    if len(doc["parents"]) != NUM_JOINTS or len(doc["names"]) != NUM_JOINTS:
        raise ShapeError(f"skeleton file must describe {NUM_JOINTS} joints")
    names = tuple(doc["names"])
    tracked = doc.get("tracked") or {
        "head": names.index("head"),
        "left_hand": names.index("left_wrist"),
        "right_hand": names.index("right_wrist"),
    }
    return Skeleton(
        parents=tuple(int(p) for p in doc["parents"]),
        offsets=np.asarray(doc["offsets"], dtype=np.float64),
        lower=tuple(doc["lower"]),
        upper=tuple(doc["upper"]),
        names=names,
        tracked={k: int(v) for k, v in tracked.items()},
    )


_DEFAULT: Skeleton | None = None


def default_skeleton() -> Skeleton:
    global _DEFAULT
    if _DEFAULT is None:
        _DEFAULT = load_skeleton()
    return _DEFAULT


# --------------------------------------------------------------------------
# rotation conversions (numpy)


def _check_finite(x: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(x)):
        raise InvalidInputError(f"{what} contains non-finite values")


def _skew(v: np.ndarray) -> np.ndarray:
    z = np.zeros(v.shape[:-1])
    x, y, w = v[..., 0], v[..., 1], v[..., 2]
    return np.stack(
        [
            np.stack([z, -w, y], -1),
            np.stack([w, z, -x], -1),
            np.stack([-y, x, z], -1),
        ],
        -2,
    )


def axis_angle_to_matrix(a) -> np.ndarray:
    """Rodrigues' formula. ``a`` is ``(..., 3)`` with angle = norm."""
    a = np.asarray(a, dtype=np.float64)
    if a.shape[-1] != 3:
        raise ShapeError(f"axis-angle must end in 3, got {a.shape}")
    _check_finite(a, "axis-angle")
    theta = np.linalg.norm(a, axis=-1)[..., None, None]
    K = _skew(a)
    # sin(t)/t and (1-cos(t))/t^2 with series fallback near zero
    small = theta < 1e-6
    t = np.where(small, 1.0, theta)
    s = np.where(small, 1.0 - theta**2 / 6.0, np.sin(t) / t)
    c = np.where(small, 0.5 - theta**2 / 24.0, (1.0 - np.cos(t)) / t**2)
    return np.eye(3) + s * K + c * (K @ K)


def canonicalize_axis_angle(a) -> np.ndarray:
    """Map an axis-angle to the same rotation with angle in [0, pi].

    At exactly pi the axis sign is chosen so its first nonzero component is
    positive.
    """
    a = np.asarray(a, dtype=np.float64)
    theta = np.linalg.norm(a, axis=-1, keepdims=True)
    axis = np.divide(a, theta, out=np.zeros_like(a), where=theta > 0)
    t = np.mod(theta, 2 * np.pi)
    flip = t > np.pi
    t = np.where(flip, 2 * np.pi - t, t)
    axis = np.where(flip, -axis, axis)
    at_pi = np.isclose(t, np.pi, rtol=0.0, atol=1e-12)[..., 0]
    if np.any(at_pi):
        axis[at_pi] = _positive_first(axis[at_pi])
    return axis * t


def _positive_first(axis: np.ndarray) -> np.ndarray:
    """Flip rows so the first component with |x| > 1e-12 is positive."""
    axis = np.array(axis, dtype=np.float64)
    flat = axis.reshape(-1, 3)
    for row in flat:
        nz = np.flatnonzero(np.abs(row) > 1e-12)
        if nz.size and row[nz[0]] < 0:
            row *= -1.0
    return flat.reshape(axis.shape)


def matrix_to_axis_angle(R) -> np.ndarray:
    R = np.asarray(R, dtype=np.float64)
    if R.shape[-2:] != (3, 3):
        raise ShapeError(f"rotation matrix must end in (3, 3), got {R.shape}")
    w = np.stack(
        [R[..., 2, 1] - R[..., 1, 2], R[..., 0, 2] - R[..., 2, 0], R[..., 1, 0] - R[..., 0, 1]],
        -1,
    )  # = 2 sin(theta) * axis
    sin2 = np.linalg.norm(w, axis=-1)
    cos2 = np.trace(R, axis1=-2, axis2=-1) - 1.0
    theta = np.arctan2(sin2, cos2)

    out = np.empty(R.shape[:-2] + (3,))
    near_zero = theta < 1e-6
    near_pi = theta > np.pi - 1e-3
    regular = ~(near_zero | near_pi)

    out[near_zero] = 0.5 * w[near_zero]
    if np.any(regular):
        out[regular] = w[regular] / sin2[regular][..., None] * theta[regular][..., None]
    if np.any(near_pi):
        Rp, wp, tp = R[near_pi], w[near_pi], theta[near_pi]
        sym = 0.5 * (Rp + np.swapaxes(Rp, -1, -2))
        cos_t = np.cos(tp)[..., None, None]
        aat = (sym - cos_t * np.eye(3)) / (1.0 - cos_t)
        idx = np.argmax(np.diagonal(aat, axis1=-2, axis2=-1), axis=-1)
        col = np.take_along_axis(aat, idx[..., None, None].repeat(3, -1), axis=-2)[..., 0, :]
        axis = col / np.linalg.norm(col, axis=-1, keepdims=True)
        dot = np.einsum("...i,...i->...", axis, wp)
        exact = np.abs(dot) < 1e-12
        axis = np.where((dot < 0)[..., None], -axis, axis)
        if np.any(exact):
            axis[exact] = _positive_first(axis[exact])
        out[near_pi] = axis * tp[..., None]
    return out


def matrix_to_sixd(R) -> np.ndarray:
    R = np.asarray(R, dtype=np.float64)
    return np.concatenate([R[..., :, 0], R[..., :, 1]], axis=-1)


def sixd_to_matrix(s) -> np.ndarray:
    """Gram-Schmidt reconstruction; raises on zero or collinear columns."""
    s = np.asarray(s, dtype=np.float64)
    if s.shape[-1] != 6:
        raise ShapeError(f"6D rotation must end in 6, got {s.shape}")
    _check_finite(s, "6D rotation")
    a1, a2 = s[..., :3], s[..., 3:]
    n1 = np.linalg.norm(a1, axis=-1, keepdims=True)
    if np.any(n1 < _DEGENERATE_NORM):
        raise DegenerateRotationError("first 6D column has zero length")
    b1 = a1 / n1
    u2 = a2 - np.sum(b1 * a2, axis=-1, keepdims=True) * b1
    n2 = np.linalg.norm(u2, axis=-1, keepdims=True)
    scale = np.maximum(np.linalg.norm(a2, axis=-1, keepdims=True), 1.0)
    if np.any(n2 < _DEGENERATE_NORM * scale):
        raise DegenerateRotationError("6D columns are collinear")
    b2 = u2 / n2
    b3 = np.cross(b1, b2)
    return np.stack([b1, b2, b3], axis=-1)


def relative_rotation(a, b) -> np.ndarray:
    """``a^T b``: the rotation taking frame ``a`` to frame ``b``."""
    return np.swapaxes(np.asarray(a), -1, -2) @ np.asarray(b)


def rot_x(angle: float) -> np.ndarray:
    return axis_angle_to_matrix(np.array([angle, 0.0, 0.0]))


def rot_y(angle: float) -> np.ndarray:
    return axis_angle_to_matrix(np.array([0.0, angle, 0.0]))


def rot_z(angle: float) -> np.ndarray:
    return axis_angle_to_matrix(np.array([0.0, 0.0, angle]))


def random_rotations(rng: np.random.Generator, n: int) -> np.ndarray:
    """Uniformly distributed rotations via random unit quaternions."""
    q = rng.standard_normal((n, 4))
    q /= np.linalg.norm(q, axis=-1, keepdims=True)
    w, x, y, z = q.T
    return np.stack(
        [
            np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)], -1),
            np.stack([2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)], -1),
            np.stack([2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)], -1),
        ],
        -2,
    )


def geodesic_angle(a, b) -> np.ndarray:
    """Angle in radians of ``a^T b``."""
    # atan2-based magnitude stays accurate near 0 where arccos of the trace loses half the digits
    return np.linalg.norm(matrix_to_axis_angle(relative_rotation(a, b)), axis=-1)


# --------------------------------------------------------------------------
# forward kinematics (numpy)


@dataclass
class GlobalPose:
    rot: np.ndarray  # (..., J, 3, 3)
    pos: np.ndarray  # (..., J, 3)


def forward_kinematics(skel: Skeleton, local_rot, root_pos) -> GlobalPose:
    local_rot = np.asarray(local_rot, dtype=np.float64)
    root_pos = np.asarray(root_pos, dtype=np.float64)
    J = skel.joint_count
    if local_rot.shape[-3:] != (J, 3, 3):
        raise ShapeError(f"local rotations must end in ({J}, 3, 3), got {local_rot.shape}")
    rot = np.empty_like(local_rot)
    for i in skel.order:
        p = skel.parents[i]
        rot[..., i, :, :] = local_rot[..., i, :, :] if p < 0 else rot[..., p, :, :] @ local_rot[..., i, :, :]
    return GlobalPose(rot=rot, pos=positions_from_global(skel, rot, root_pos))


def positions_from_global(skel: Skeleton, global_rot, root_pos) -> np.ndarray:
    global_rot = np.asarray(global_rot, dtype=np.float64)
    root_pos = np.asarray(root_pos, dtype=np.float64)
    pos = np.empty(global_rot.shape[:-2] + (3,))
    pos[..., 0, :] = root_pos
    for i in skel.order[1:]:
        p = skel.parents[i]
        pos[..., i, :] = pos[..., p, :] + global_rot[..., p, :, :] @ skel.offsets[i]
    return pos


def global_to_local(skel: Skeleton, global_rot) -> np.ndarray:
    global_rot = np.asarray(global_rot, dtype=np.float64)
    local = np.empty_like(global_rot)
    local[..., 0, :, :] = global_rot[..., 0, :, :]
    for i in range(1, skel.joint_count):
        local[..., i, :, :] = relative_rotation(
            global_rot[..., skel.parents[i], :, :], global_rot[..., i, :, :]
        )
    return local


def rest_pose(skel: Skeleton, root_pos=(0.0, 0.0, 0.0)) -> GlobalPose:
    eye = np.broadcast_to(np.eye(3), (skel.joint_count, 3, 3)).copy()
    return forward_kinematics(skel, eye, np.asarray(root_pos, dtype=np.float64))


# --------------------------------------------------------------------------
# torch variants (differentiable)


def sixd_to_matrix_t(s: torch.Tensor) -> torch.Tensor:
    """Differentiable Gram-Schmidt; no degeneracy check (callers guard)."""
    a1, a2 = s[..., :3], s[..., 3:]
    b1 = a1 / torch.linalg.vector_norm(a1, dim=-1, keepdim=True)
    u2 = a2 - (b1 * a2).sum(-1, keepdim=True) * b1
    b2 = u2 / torch.linalg.vector_norm(u2, dim=-1, keepdim=True)
    b3 = torch.linalg.cross(b1, b2, dim=-1)
    return torch.stack([b1, b2, b3], dim=-1)


def matrix_to_sixd_t(R: torch.Tensor) -> torch.Tensor:
    return torch.cat([R[..., :, 0], R[..., :, 1]], dim=-1)


def forward_kinematics_t(skel: Skeleton, local_rot: torch.Tensor, root_pos: torch.Tensor):
    """Returns ``(global_rot, pos)`` as torch tensors."""
    offsets = torch.as_tensor(skel.offsets, dtype=local_rot.dtype, device=local_rot.device)
    rots: list[torch.Tensor | None] = [None] * skel.joint_count
    pos: list[torch.Tensor | None] = [None] * skel.joint_count
    for i in skel.order:
        p = skel.parents[i]
        if p < 0:
            rots[i] = local_rot[..., i, :, :]
            pos[i] = root_pos
        else:
            rots[i] = rots[p] @ local_rot[..., i, :, :]
            pos[i] = pos[p] + (rots[p] @ offsets[i].unsqueeze(-1)).squeeze(-1)
    return torch.stack(rots, dim=-3), torch.stack(pos, dim=-2)
