"""L-BFGS with backtracking Armijo line search, and IK refinement on top of it."""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch

from . import kinematics as kin
from .errors import DegenerateRotationError, OptimizerAbort, ShapeError

log = logging.getLogger(__name__)

Objective = Callable[[np.ndarray], tuple[float, np.ndarray]]


@dataclass
class LbfgsConfig:
    memory: int = 10
    max_iters: int = 15
    c1: float = 1e-4
    shrink: float = 0.5
    max_backtracks: int = 40
    gtol: float = 1e-8

    def __post_init__(self):
        if self.memory < 1 or self.max_iters < 1:
            raise ValueError("memory and max_iters must be >= 1")


@dataclass
class LbfgsResult:
    x: np.ndarray
    f: float
    iters: int
    converged: bool
    n_evals: int


def _two_loop(g, S, Y, rho):
    q = g.copy()
    alpha = np.empty(len(S))
    for i in range(len(S) - 1, -1, -1):
        alpha[i] = rho[i] * S[i].dot(q)
        q -= alpha[i] * Y[i]
    gamma = S[-1].dot(Y[-1]) / Y[-1].dot(Y[-1])
    r = gamma * q
    for i in range(len(S)):
        beta = rho[i] * Y[i].dot(r)
        r += S[i] * (alpha[i] - beta)
    return -r


def lbfgs_minimize(fun: Objective, x0, cfg: LbfgsConfig | None = None) -> LbfgsResult:
    """Minimize ``fun`` (returning value and gradient) from ``x0``.

    Every accepted step satisfies the Armijo condition, so the objective never
    increases. Non-finite trial points are treated as failed trials; a
    non-finite value or gradient at an accepted point aborts.
    """
    cfg = cfg or LbfgsConfig()
    x = np.array(x0, dtype=np.float64)
    f, g = fun(x)
    n_evals = 1
    if not np.isfinite(f) or not np.all(np.isfinite(g)):
        raise OptimizerAbort(f"non-finite objective at start (f={f})")
    S: list[np.ndarray] = []
    Y: list[np.ndarray] = []
    rho: list[float] = []
    iters = 0
    while iters < cfg.max_iters:
        if np.max(np.abs(g), initial=0.0) <= cfg.gtol:
            return LbfgsResult(x, f, iters, True, n_evals)
        if S:
            d = _two_loop(g, S, Y, rho)
            step = 1.0
        else:
            d = -g
            step = min(1.0, 1.0 / np.linalg.norm(g))
        slope = g.dot(d)
        if slope >= 0:  # lost descent: restart from steepest descent
            S.clear(), Y.clear(), rho.clear()
            d, slope = -g, -g.dot(g)
            step = min(1.0, 1.0 / np.linalg.norm(g))
        for _ in range(cfg.max_backtracks):
            x_new = x + step * d
            f_new, g_new = fun(x_new)
            n_evals += 1
            if np.isfinite(f_new) and f_new <= f + cfg.c1 * step * slope:
                break
            step *= cfg.shrink
        else:
            log.debug("line search failed after %d backtracks", cfg.max_backtracks)
            return LbfgsResult(x, f, iters, False, n_evals)
        if not np.all(np.isfinite(g_new)):
            raise OptimizerAbort("non-finite gradient at accepted point")
        s, y = x_new - x, g_new - g
        sy = s.dot(y)
        if sy > 1e-12 * max(1.0, y.dot(y)):
            S.append(s), Y.append(y), rho.append(1.0 / sy)
            if len(S) > cfg.memory:
                S.pop(0), Y.pop(0), rho.pop(0)
        x, f, g = x_new, f_new, g_new
        iters += 1
    converged = np.max(np.abs(g), initial=0.0) <= cfg.gtol
    return LbfgsResult(x, f, iters, bool(converged), n_evals)


# --------------------------------------------------------------------------
# inverse kinematics


def ik_objective(skel: kin.Skeleton, target_rel: np.ndarray) -> Objective:
    """Sum of squared root-relative position errors over local 6D rotations."""
    target = torch.as_tensor(target_rel, dtype=torch.float64)
    root = torch.zeros(3, dtype=torch.float64)
    J = skel.joint_count

    def fun(x: np.ndarray):
        xt = torch.tensor(x, dtype=torch.float64, requires_grad=True)
        local = kin.sixd_to_matrix_t(xt.reshape(J, 6))
        _, pos = kin.forward_kinematics_t(skel, local, root)
        f = ((pos - target) ** 2).sum()
        f.backward()
        return f.item(), xt.grad.numpy().copy()

    return fun


@dataclass
class IkFrameResult:
    rot6d: np.ndarray  # (22, 6) global
    f_init: float
    f_final: float
    iters: int
    fallback: bool


def ik_refine_frame(rot6d_init, target_pos, skel: kin.Skeleton, cfg: LbfgsConfig) -> IkFrameResult:
    R0 = kin.sixd_to_matrix(rot6d_init)
    x0 = kin.matrix_to_sixd(kin.global_to_local(skel, R0)).reshape(-1)
    target_rel = np.asarray(target_pos, dtype=np.float64) - np.asarray(target_pos)[0]
    fun = ik_objective(skel, target_rel)
    f0, _ = fun(x0)
    try:
        res = lbfgs_minimize(fun, x0, cfg)
        local = kin.sixd_to_matrix(res.x.reshape(-1, 6))
    except (OptimizerAbort, DegenerateRotationError) as exc:
        log.warning("IK frame fell back to its initial rotations: %s", exc)
        return IkFrameResult(np.asarray(rot6d_init, dtype=np.float64), f0, f0, 0, True)
    glob = kin.forward_kinematics(skel, local, np.zeros(3)).rot
    return IkFrameResult(kin.matrix_to_sixd(glob), f0, res.f, res.iters, False)


def ik_refine(rot_init, target_pos, skel: kin.Skeleton | None = None, cfg: LbfgsConfig | None = None,
              threads: int = 1) -> np.ndarray:
    """Refine ``(N, 22, 6)`` global 6D rotations toward ``(N, 22, 3)`` target positions.

    Each frame is solved independently over local 6D rotations with the root
    pinned at the target root, so only the body configuration is fitted.
    Returns refined global 6D rotations.
    """
    skel = skel or kin.default_skeleton()
    cfg = cfg or LbfgsConfig()
    rot_init = np.asarray(rot_init, dtype=np.float64)
    target_pos = np.asarray(target_pos, dtype=np.float64)
    J = skel.joint_count
    if rot_init.shape[1:] != (J, 6) or target_pos.shape != rot_init.shape[:1] + (J, 3):
        raise ShapeError(f"ik_refine expects (N,{J},6) rotations and (N,{J},3) targets")

    def solve(i):
        return ik_refine_frame(rot_init[i], target_pos[i], skel, cfg)

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            results = list(pool.map(solve, range(len(rot_init))))
    else:
        results = [solve(i) for i in range(len(rot_init))]
    return np.stack([r.rot6d for r in results])
