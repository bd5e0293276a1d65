import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from memmlp import data, metrics
from memmlp import kinematics as kin
from memmlp.errors import InvalidInputError, ShapeError

finite = st.floats(-10, 10, allow_nan=False, allow_infinity=False)


def _traj(n, coeffs, fps=60.0):
    """(n, 1, 3) trajectory along x: sum_k coeffs[k] * t^k with t in frames."""
    t = np.arange(n, dtype=np.float64)
    x = sum(c * t**k for k, c in enumerate(coeffs))
    out = np.zeros((n, 1, 3))
    out[:, 0, 0] = x
    return out


def test_mpjre_examples(rng):
    R = kin.random_rotations(rng, 22)[None]
    assert metrics.mpjre(R, R) == pytest.approx(0, abs=1e-9)
    P = R.copy()
    P[0, 5] = R[0, 5] @ kin.rot_z(np.radians(10))
    assert metrics.mpjre(P, R) == pytest.approx(10 / 22, abs=1e-9)
    assert metrics.mpjre(P, R) == pytest.approx(metrics.mpjre(R, P), abs=1e-12)


def test_mpjre_rejects_invalid():
    with pytest.raises(InvalidInputError):
        metrics.mpjre(np.ones((1, 3, 3)), np.eye(3)[None])
    with pytest.raises(InvalidInputError):
        metrics.mpjre(np.diag([1.0, 1.0, -1.0])[None], np.eye(3)[None])
    with pytest.raises(ShapeError):
        metrics.mpjre(np.eye(3)[None], np.stack([np.eye(3)] * 2))


def test_mpjpe_and_regions(skel, rng):
    gt = rng.normal(size=(5, 22, 3))
    assert metrics.mpjpe(gt, gt) == 0
    assert metrics.mpjpe(gt + [0.01, 0, 0], gt) == pytest.approx(1.0)
    pred = gt.copy()
    pred[:, list(skel.upper)] += [0.05, 0, 0]
    assert metrics.region_pe(pred, gt, skel.lower) == 0
    assert metrics.region_pe(pred, gt, skel.upper) == pytest.approx(5.0)


def test_mpjve_examples(rng):
    gt = rng.normal(size=(10, 22, 3))
    assert metrics.mpjve(gt + 0.3, gt, 60) == pytest.approx(0, abs=1e-10)
    static = np.zeros((10, 22, 3))
    drift = _traj(10, [0, 0.01]).repeat(22, axis=1)
    assert abs(metrics.mpjve(drift, static, 60) - 60.0) < 1e-9
    with pytest.raises(ShapeError):
        metrics.mpjve(gt[:1], gt[:1], 60)


def test_jitter_analytic():
    fps = 60.0
    assert metrics.jitter(_traj(20, [1.0, 0.3]), fps) == pytest.approx(0, abs=1e-6)
    assert metrics.jitter(_traj(20, [0.0, 0.0, 0.5 * 0.002]), fps) == pytest.approx(0, abs=1e-6)
    c = 1e-4
    assert abs(metrics.jitter(_traj(20, [0, 0, 0, c]), fps) - 6 * c * fps**3 / 100) < 1e-9
    with pytest.raises(ShapeError):
        metrics.jitter(np.zeros((3, 22, 3)), fps)


def test_evaluate_composition(skel):
    clip = data.synth_generate("walk", 4, 1.0)
    gt = clip.global_pose(skel)
    zero = metrics.evaluate(metrics.PredictedMotion(gt.rot, gt.pos), gt.rot, gt.pos, clip.fps, skel)
    # jitter measures the prediction itself, so it equals the ground truth's own jitter
    assert zero.jitter == pytest.approx(metrics.jitter(gt.pos, clip.fps))
    assert all(abs(v) < 1e-9 for k, v in zero.to_dict().items() if k != "jitter")
    other = data.synth_generate("walk", 5, 1.0).global_pose(skel)
    rep = metrics.evaluate(metrics.PredictedMotion(other.rot), gt.rot, gt.pos, clip.fps, skel)
    pos = kin.positions_from_global(skel, other.rot, gt.pos[:, 0])
    assert rep.mpjpe == pytest.approx(metrics.mpjpe(pos, gt.pos))
    assert rep.jitter == pytest.approx(metrics.jitter(pos, clip.fps))
    assert rep.lower_pe == pytest.approx(metrics.region_pe(pos, gt.pos, skel.lower))
    assert rep.root_pe == pytest.approx(0, abs=1e-12)  # FK uses the ground-truth root
    assert rep.mpjre == pytest.approx(metrics.mpjre(kin.global_to_local(skel, other.rot),
                                                    kin.global_to_local(skel, gt.rot)))
    assert all(np.isfinite(v) and v >= 0 for v in rep.to_dict().values())
    text = rep.to_text().splitlines()
    assert text[0].startswith("mpjre\t") and len(text) == 8
    with pytest.raises(ShapeError):
        metrics.evaluate(metrics.PredictedMotion(other.rot[:-1]), gt.rot, gt.pos, clip.fps, skel)


# --------------------------------------------------------------------------
# properties


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (6, 4, 3), elements=finite), arrays(np.float64, (6, 4, 3), elements=finite))
def test_position_metrics_non_negative_and_zero_on_equal(a, b):
    for fn in (metrics.mpjpe, lambda p, g: metrics.mpjve(p, g, 60.0)):
        assert fn(a, b) >= 0
        assert fn(a, a) == 0
    assert metrics.jitter(a, 60.0) >= 0


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (5, 4, 3), elements=finite), arrays(np.float64, (5, 4, 3), elements=finite),
       st.integers(0, 2**32 - 1))
def test_mpjpe_rigid_invariance(a, b, seed):
    rng = np.random.default_rng(seed)
    Q = kin.random_rotations(rng, 1)[0]
    shift = rng.normal(size=3)
    assert metrics.mpjpe(a @ Q.T + shift, b @ Q.T + shift) == pytest.approx(metrics.mpjpe(a, b), rel=1e-9, abs=1e-9)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (8, 3, 3), elements=finite), arrays(np.float64, (3, 3, 3), elements=finite))
def test_jitter_invariant_to_quadratic(p, coeffs):
    t = np.arange(8, dtype=np.float64)[:, None, None]
    q = p + coeffs[0] + coeffs[1] * t + coeffs[2] * t**2
    assert metrics.jitter(q, 60.0) == pytest.approx(metrics.jitter(p, 60.0), rel=1e-6, abs=1e-3)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_mpjre_zero_iff_equal(seed):
    rng = np.random.default_rng(seed)
    R = kin.random_rotations(rng, 6).reshape(2, 3, 3, 3)
    assert metrics.mpjre(R, R) < 1e-9
    S = R.copy()
    S[1, 2] = S[1, 2] @ kin.rot_x(0.01)
    # 0.01 rad on one of six joints
    assert metrics.mpjre(S, R) == pytest.approx(np.degrees(0.01) / 6, rel=1e-6)
