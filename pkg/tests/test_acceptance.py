"""Acceptance criteria, one test each, with a PASS/FAIL line per criterion.

The lines are printed as each test runs (visible with ``-s``) and repeated in
the terminal summary. Run ``pytest tests/test_acceptance.py -m "not slow"`` to
skip the training smoke run (criterion 7, a few minutes on one core).
"""

import time
from contextlib import contextmanager

import numpy as np
import pytest
import torch

from conftest import check_grads
from memmlp import cli, data, metrics, runtime
from memmlp import diffcore as dc
from memmlp import kinematics as kin
from memmlp.ik import LbfgsConfig, ik_refine_frame, lbfgs_minimize
from memmlp.model import MANUAL_WEIGHTS, MemMLP, MemMLPConfig, TrainConfig, Trainer, compute_losses, total_loss
from memmlp.prior import PriorConfig, VQVAE, quantize, train_vqvae

RESULTS: list[str] = []


def record(label: str, title: str, ok: bool, detail: str, seconds: float) -> None:
    line = f"{'PASS' if ok else 'FAIL'}  [{label:>3}] {title}: {detail} ({seconds:.2f} s)"
    RESULTS.append(line)
    print(line)
    assert ok, line


@contextmanager
def timer():
    box = {}
    t0 = time.perf_counter()
    yield box
    box["s"] = time.perf_counter() - t0


# --------------------------------------------------------------------------
# 1. rotations


def test_c01_rotation_suite():
    rng = np.random.default_rng(1)
    with timer() as t:
        R = kin.random_rotations(rng, 1000)
        aa = kin.matrix_to_axis_angle(R)
        err_aa = np.abs(kin.axis_angle_to_matrix(aa) - R).max()
        err_6d = np.abs(kin.sixd_to_matrix(kin.matrix_to_sixd(R)) - R).max()
        err_aa_vec = np.abs(kin.matrix_to_axis_angle(kin.axis_angle_to_matrix(aa)) - aa).max()
        s = rng.normal(size=(1000, 6)) * rng.uniform(0.1, 10, size=(1000, 1))
        G = kin.sixd_to_matrix(s)
        orth = np.abs(np.swapaxes(G, 1, 2) @ G - np.eye(3)).max()
        det = np.abs(np.linalg.det(G) - 1).max()
    worst = max(err_aa, err_6d, err_aa_vec, orth, det)
    record("1", "rotation round trips and Gram-Schmidt", worst < 1e-6 and t["s"] < 1.0,
           f"max error {worst:.1e} < 1e-6, runtime < 1 s", t["s"])


# --------------------------------------------------------------------------
# 2. gradients


def _t64(a, grad=False):
    return torch.tensor(np.asarray(a, dtype=np.float64), requires_grad=grad)


def test_c02_gradient_suite():
    rng = np.random.default_rng(2)
    worst = {}
    with timer() as t:
        for _ in range(20):
            x, W, b = _t64(rng.normal(size=(3, 4)), True), _t64(rng.normal(size=(4, 5)), True), _t64(rng.normal(size=5), True)
            w = _t64(rng.normal(size=(3, 5)))
            worst["linear"] = max(worst.get("linear", 0), check_grads(lambda: (dc.linear(x, W, b) * w).sum(), [x, W, b]))
            x = _t64(rng.normal(size=(5, 3)), True)
            K, kb = _t64(rng.normal(size=(3, 3, 3)), True), _t64(rng.normal(size=3), True)
            w = _t64(rng.normal(size=(5, 3)))
            worst["conv1d"] = max(worst.get("conv1d", 0),
                                  check_grads(lambda: (dc.conv1d_temporal(x, K, kb) * w).sum(), [x, K, kb]))
            x = _t64(rng.normal(size=(2, 6)), True)
            g, be = _t64(rng.normal(size=6), True), _t64(rng.normal(size=6), True)
            w = _t64(rng.normal(size=(2, 6)))
            worst["layernorm"] = max(worst.get("layernorm", 0),
                                     check_grads(lambda: (dc.layernorm(x, g, be) * w).sum(), [x, g, be]))
            x = _t64(rng.normal(size=6) * 3, True)
            w = _t64(rng.normal(size=6))
            worst["silu"] = max(worst.get("silu", 0), check_grads(lambda: (dc.silu(x) * w).sum(), [x]))

        cfg = MemMLPConfig(T=4, d=8, L=2, memory_layers=(2,), K=4, d_zs=6)
        model = MemMLP(cfg).double()
        with torch.no_grad():
            model.log_vars.copy_(torch.tensor(rng.normal(size=4) * 0.3))
        x, xp = _t64(rng.normal(size=(2, 4, 54)), True), _t64(rng.normal(size=(2, 4, 54)))
        th, e = _t64(rng.normal(size=(2, 4, 198))), _t64(rng.normal(size=(2, 6)))
        target = _t64(rng.normal(size=(2, 4, 198)))
        blend = {k: v.double() for k, v in model.sample_blend((2,), torch.Generator().manual_seed(0)).items()}
        lower = list(kin.default_skeleton().lower)

        def f():
            return compute_losses(model, model(x, xp, th, e, blend), target, lower)[0]

        worst["mem-mlp"] = check_grads(f, list(model.parameters()) + [x], rng=rng, max_entries=8)
    top = max(worst.values())
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    record("2", "finite-difference gradients at f64", top < 1e-3 and t["s"] < 30,
           f"max rel. error {top:.1e} < 1e-3 ({detail})", t["s"])


# --------------------------------------------------------------------------
# 3. forward kinematics


def _brute_chain(offsets, local, root):
    M = np.eye(4)
    M[:3, :3], M[:3, 3] = local[0], root
    out = [M[:3, 3].copy()]
    for i in range(1, len(offsets)):
        step = np.eye(4)
        step[:3, :3], step[:3, 3] = local[i], offsets[i]
        M = M @ step
        out.append(M[:3, 3].copy())
    return np.array(out)


def test_c03_fk_oracle():
    rng = np.random.default_rng(3)
    with timer() as t:
        chain_err = 0.0
        for n in range(1, 6):
            for _ in range(20):
                offsets = np.vstack([np.zeros(3), rng.normal(size=(n - 1, 3)) * 0.3])
                sk = kin.Skeleton(parents=tuple([-1] + list(range(n - 1))), offsets=offsets)
                local, root = kin.random_rotations(rng, n), rng.normal(size=3)
                pos = kin.forward_kinematics(sk, local, root).pos
                chain_err = max(chain_err, np.abs(pos - _brute_chain(offsets, local, root)).max())
        skel = kin.default_skeleton()
        eq_err = 0.0
        for _ in range(100):
            local, root, Q = kin.random_rotations(rng, 22), rng.normal(size=3), kin.random_rotations(rng, 1)[0]
            p = kin.forward_kinematics(skel, local, root).pos
            lq = local.copy()
            lq[0] = Q @ local[0]
            pq = kin.forward_kinematics(skel, lq, Q @ root).pos
            eq_err = max(eq_err, np.abs(pq - p @ Q.T).max())
    record("3", "FK vs matrix-chain products and rigid equivariance", chain_err < 1e-9 and eq_err < 1e-9,
           f"chain error {chain_err:.1e}, equivariance error {eq_err:.1e} (< 1e-9, 100 poses)", t["s"])


# --------------------------------------------------------------------------
# 4. quantization


def test_c04_quantization_oracle():
    rng = np.random.default_rng(4)
    with timer() as t:
        cb = rng.normal(size=(64, 16))
        z = rng.normal(size=(1000, 16))
        idx, e = quantize(torch.from_numpy(z), torch.from_numpy(cb))
        brute = np.array([min(range(64), key=lambda j: float(np.sum((zi - cb[j]) ** 2))) for zi in z])
        match = int((idx.numpy() == brute).sum())
        vectors_ok = np.array_equal(e.numpy(), cb[brute])
        # duplicated rows 0 and 2: the lowest index wins
        tie = torch.tensor([[1.0, 0.0], [-1.0, 0.0], [1.0, 0.0]])
        tie_ok = quantize(torch.tensor([1.0, 0.0]), tie)[0].item() == 0
        tie_ok &= quantize(torch.tensor([0.0, 0.0]), tie)[0].item() == 0
    record("4", "nearest-codebook selection vs brute force", match == 1000 and vectors_ok and tie_ok,
           f"{match}/1000 latents match, tie-break lowest index {'ok' if tie_ok else 'broken'}", t["s"])


# --------------------------------------------------------------------------
# 5. blend endpoints


def test_c05_blend_endpoints():
    rng = np.random.default_rng(5)
    with timer() as t:
        cfg = MemMLPConfig(T=4, d=8, L=4, memory_layers=(2, 4), K=4, d_zs=6)
        model = MemMLP(cfg).double()
        x, xp = _t64(rng.normal(size=(4, 54))), _t64(rng.normal(size=(4, 54)))
        th, th2 = _t64(rng.normal(size=(4, 198))), _t64(rng.normal(size=(4, 198)))
        e, e2 = _t64(rng.normal(size=6)), _t64(rng.normal(size=6))
        ones, zeros = model.constant_blend(1.0), model.constant_blend(0.0)

        def diff(a, b):
            return max((a.rot6d - b.rot6d).abs().max().item(), (a.pos - b.pos).abs().max().item())

        d_code = diff(model(x, xp, th, e, ones), model(x, xp, th, e2, ones))
        d_theta = diff(model(x, xp, th, e, zeros), model(x, xp, th2, e, zeros))
        half = model.constant_blend(0.5)
        d_mid = diff(model(x, xp, th, e, half), model(x, xp, th2, e2, half))
    ok = d_code == 0 and d_theta == 0 and d_mid > 0
    record("5", "blend endpoints", ok,
           f"m=1 vs code change {d_code:g}, m=0 vs previous-motion change {d_theta:g}, m=0.5 sensitive {d_mid:.1e}",
           t["s"])


# --------------------------------------------------------------------------
# 6. metric analytics


def _line(n, coeffs):
    t = np.arange(n, dtype=np.float64)
    out = np.zeros((n, 1, 3))
    out[:, 0, 0] = sum(c * t**k for k, c in enumerate(coeffs))
    return out


def test_c06_metric_analytics():
    fps, c = 60.0, 1e-4
    with timer() as t:
        j_lin = metrics.jitter(_line(30, [0.2, 0.01]), fps)
        j_quad = metrics.jitter(_line(30, [0.2, 0.01, 0.003]), fps)
        j_cub = metrics.jitter(_line(30, [0, 0, 0, c]), fps)
        cub_err = abs(j_cub - 6 * c * fps**3 / 100)
        drift = _line(30, [0, 0.01]).repeat(22, axis=1)
        v_err = abs(metrics.mpjve(drift, np.zeros_like(drift), fps) - 60.0)
    ok = j_lin < 1e-6 and j_quad < 1e-6 and cub_err < 1e-9 and v_err < 1e-9
    record("6", "metric analytics", ok,
           f"linear {j_lin:.1e}, quadratic {j_quad:.1e}, cubic error {cub_err:.1e}, drift MPJVE error {v_err:.1e}",
           t["s"])


# --------------------------------------------------------------------------
# 7. training smoke (slow)

SMOKE_D = 64  # hidden width for the smoke run; other settings are the defaults
SMOKE_STEPS = 2000
SMOKE_BATCH = 16


def _train_jitter(model, prior, ds, clips):
    trainer = Trainer(model, prior, ds, TrainConfig(steps=SMOKE_STEPS, batch_size=SMOKE_BATCH, log_every=0))
    hist = trainer.run()
    T = model.cfg.T
    jit = []
    for clip in clips:
        out = runtime.sliding_window_infer(model, prior, data.sparse_frames(clip))
        gt = clip.global_pose()
        rep = metrics.evaluate(metrics.PredictedMotion(out.rot[T:]), gt.rot[1:][T:], gt.pos[1:][T:], clip.fps)
        jit.append(rep.jitter)
    return hist, float(np.mean(jit))


@pytest.fixture(scope="module")
def smoke():
    torch.set_num_threads(1)
    t0 = time.perf_counter()
    clips = [data.synth_generate("walk", s, 6.0) for s in range(4)]
    ds = data.make_dataset(clips, 41, 1)
    prior, _ = train_vqvae(ds, PriorConfig(T=41, hidden=128, epochs=5, batch_size=32))
    full = MemMLP(MemMLPConfig(d=SMOKE_D))
    ablated = MemMLP(MemMLPConfig(d=SMOKE_D, memory_layers=(), multi_head=False))
    h_full, j_full = _train_jitter(full, prior, ds, clips)
    _, j_abl = _train_jitter(ablated, None, ds, clips)
    gt_jit = float(np.mean([metrics.jitter(c.global_pose().pos[1:][41:], c.fps) for c in clips]))
    return {"hist": h_full, "j_full": j_full, "j_abl": j_abl, "j_gt": gt_jit, "s": time.perf_counter() - t0}


@pytest.mark.slow
def test_c07a_training_loss_halves(smoke):
    total = smoke["hist"].total
    first, last = float(np.mean(total[:50])), float(np.mean(total[-50:]))
    record("7a", "training smoke: loss falls below half", last < 0.5 * first and smoke["s"] < 1200,
           f"smoothed loss {first:.3f} -> {last:.3f} (ratio {last / first:.3f} < 0.5)", smoke["s"])


@pytest.mark.slow
def test_c07b_memory_and_heads_reduce_jitter(smoke):
    ok = smoke["j_full"] <= smoke["j_abl"]
    record("7b", "training smoke: full model jitter <= ablated", ok,
           f"full {smoke['j_full']:.4f} vs ablated {smoke['j_abl']:.4f} (ground truth {smoke['j_gt']:.4f})",
           smoke["s"])


# --------------------------------------------------------------------------
# 8. loss weighting


def test_c08_loss_weighting():
    rng = np.random.default_rng(8)
    with timer() as t:
        errs_h, errs_m = [], []
        for _ in range(100):
            vals = rng.uniform(0, 10, size=4)
            losses = [torch.tensor(v, dtype=torch.float64) for v in vals]
            s0 = torch.zeros(4, dtype=torch.float64)
            errs_h.append(abs(total_loss(losses, s0).item() - float(np.sum(vals))))
            manual = total_loss(losses, s0, mode="manual").item()
            errs_m.append(abs(manual - sum(w * v for w, v in zip((1.0, 30.0, 0.5, 0.1), vals))))
    ok = max(errs_h) < 1e-12 and max(errs_m) < 1e-12 and MANUAL_WEIGHTS == (1.0, 30.0, 0.5, 0.1)
    record("8", "homoscedastic s=0 equals plain sum; manual weights", ok,
           f"max errors {max(errs_h):.1e} and {max(errs_m):.1e} (< 1e-12), weights {MANUAL_WEIGHTS}", t["s"])


# --------------------------------------------------------------------------
# 9. L-BFGS and IK


def test_c09_lbfgs_and_ik():
    with timer() as t:
        res = lbfgs_minimize(lambda x: (float(x @ x), 2 * x), [3.0, 4.0])
        q_ok = res.iters <= 3 and np.abs(res.x).max() <= 1e-8
        skel = kin.default_skeleton()
        rng = np.random.default_rng(99)
        errs, iters = [], []
        for _ in range(10):
            local = kin.axis_angle_to_matrix(rng.normal(size=(22, 3)) * 0.4)
            root = np.array([0.1, 0.9, -0.2])
            pose = kin.forward_kinematics(skel, local, root)
            axes = rng.normal(size=(22, 3))
            axes /= np.linalg.norm(axes, axis=1, keepdims=True)
            noisy = local @ kin.axis_angle_to_matrix(axes * np.radians(5))
            init = kin.matrix_to_sixd(kin.forward_kinematics(skel, noisy, root).rot)
            r = ik_refine_frame(init, pose.pos, skel, LbfgsConfig(max_iters=15))
            iters.append(r.iters)
            pos = kin.positions_from_global(skel, kin.sixd_to_matrix(r.rot6d), root)
            errs.append(np.linalg.norm(pos - pose.pos, axis=-1).mean() * 100)
    ok = q_ok and np.mean(errs) < 1.0 and max(iters) <= 15
    record("9", "L-BFGS quadratic and IK recovery", ok,
           f"quadratic {res.iters} iters to {np.abs(res.x).max():.1e}; IK mean error {np.mean(errs):.3f} cm "
           f"in <= {max(iters)} iters", t["s"])


# --------------------------------------------------------------------------
# 10. streaming equals offline


def test_c10_streaming_equals_offline():
    with timer() as t:
        cfg = MemMLPConfig(T=8, d=16, L=2, memory_layers=(2,), K=4, d_zs=8)
        model, prior = MemMLP(cfg), VQVAE(PriorConfig(T=8, hidden=16, d_zs=8, K=4)).freeze()
        skel = kin.default_skeleton()
        stream = data.sparse_frames(data.synth_generate("walk", 3, 1.0))
        st = runtime.new_stream(model)
        outs = [runtime.stream_step(st, f, model, prior, skel) for f in stream]
        off = runtime.sliding_window_infer(model, prior, stream, skel)
        same = (np.array_equal(np.stack([o.rot for o in outs]), off.rot)
                and np.array_equal(np.stack([o.pos for o in outs]), off.pos))
        rest = kin.rest_pose(skel)
        first = outs[0]
        cold = (np.array_equal(first.rot, rest.rot)
                and np.allclose(np.swapaxes(first.rot, -1, -2) @ first.rot, np.eye(3), atol=1e-12)
                and np.allclose(first.pos - first.pos[15], rest.pos - rest.pos[15], atol=1e-12))
    record("10", "streaming equals offline; cold-start rest pose", same and cold,
           f"{len(stream)} frames bit-identical: {same}; rest-pose placeholder: {cold}", t["s"])


# --------------------------------------------------------------------------
# 11. FLOPs


def test_c11_flops_counter():
    with timer() as t:
        tiny = MemMLPConfig(T=2, d=4, L=1, memory_layers=())
        block = 2 * 3 * 4 * 4 + 2 * 4 * 4
        hand = 2 * 54 * 4 + block + (2 * block + 2 * 4 * 132) + (2 * block + 2 * 4 * 66)
        exact = runtime.flops_count(tiny) == hand == runtime.counted_macs(MemMLP(tiny), None).total
        cfg = MemMLPConfig(T=3, d=4, L=2, memory_layers=(2,), K=4, d_zs=5)
        pc = PriorConfig(T=3, hidden=6, d_zs=5, K=4, L_enc=2)
        exact &= runtime.flops_count(cfg, pc) == runtime.counted_macs(MemMLP(cfg), VQVAE(pc).freeze()).total
        g = runtime.flops_count(MemMLPConfig()) / 1e9
    ok = exact and 0.5 <= g / 0.25 <= 2.0
    record("11", "FLOPs counter", ok,
           f"tiny configs exact: {exact}; default {g:.4f} GMACs vs reference 0.25 G (ratio {g / 0.25:.2f})", t["s"])


# --------------------------------------------------------------------------
# 12. CLI determinism

SMALL = """
[model]
T = 8
d = 16
L = 2
memory_layers = [2]
K = 4
d_zs = 8
[prior]
hidden = 16
epochs = 2
batch_size = 32
[train]
steps = 40
batch_size = 16
log_every = 0
"""


def test_c12_cli_determinism(tmp_path):
    with timer() as t:
        cfg = tmp_path / "small.toml"
        cfg.write_text(SMALL)
        clips = tmp_path / "clips"
        assert cli.main(["synth", "--count", "2", "--duration", "1", "--out", clips]) == 0
        assert cli.main(["train-prior", "--config", cfg, "--data", clips, "--out", tmp_path / "prior.mmwt"]) == 0
        same = {}
        for run in ("a", "b"):
            d = tmp_path / run
            assert cli.main(["train", "--config", cfg, "--data", clips, "--prior", tmp_path / "prior.mmwt",
                             "--seed", 11, "--out", d / "model.mmwt"]) == 0
            assert cli.main(["eval", "--model", d / "model.mmwt", "--prior", tmp_path / "prior.mmwt",
                             "--data", clips, "--seed", 11, "--out", d / "eval"]) == 0
            assert cli.main(["infer", "--model", d / "model.mmwt", "--prior", tmp_path / "prior.mmwt",
                             "--clip", clips / "walk_0000.json", "--seed", 11, "--out", d / "pred.json"]) == 0
        for name, rel in (("train", "model.mmwt"), ("eval", "eval/metrics.json"), ("infer", "pred.json")):
            same[name] = (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()
    record("12", "train/eval/infer bit-identical across runs", all(same.values()),
           ", ".join(f"{k} {'identical' if v else 'DIFFERENT'}" for k, v in same.items()), t["s"])
