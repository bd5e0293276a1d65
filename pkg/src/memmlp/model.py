"""Mem-MLP: residual MLP backbone with memory blocks and a two-branch predictor."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from . import diffcore as dc
from .data import SPARSE_DIM, TARGET_DIM, WindowDataset, stack_batch
from .errors import CheckpointError, ConfigError, FrozenError, ShapeError
from .kinematics import NUM_JOINTS, default_skeleton
from .prior import VQVAE

log = logging.getLogger(__name__)

ROT_DIM = NUM_JOINTS * 6
POS_DIM = NUM_JOINTS * 3
LOSS_NAMES = ("theta", "rot_vel", "pos", "pos_vel")
MANUAL_WEIGHTS = (1.0, 30.0, 0.5, 0.1)


@dataclass
class MemMLPConfig:
    T: int = 41
    d: int = 256
    L: int = 8
    conv_kernel: int = 3
    memory_layers: tuple[int, ...] = (2, 4, 6, 8)
    predictor_depth: int = 2
    multi_head: bool = True
    K: int = 64
    d_zs: int = 256
    weighting: str = "homoscedastic"  # or "manual"
    infer_blend: str = "fixed"  # or "sampled"
    blend_value: float = 0.5
    seed: int = 0

    def __post_init__(self):
        self.memory_layers = tuple(sorted(int(l) for l in self.memory_layers))
        if self.T < 2:
            raise ConfigError("T must be at least 2")
        if self.d < 1 or self.L < 0 or self.predictor_depth < 0:
            raise ConfigError("d must be >= 1, L and predictor_depth >= 0")
        if self.conv_kernel % 2 == 0:
            raise ConfigError("conv_kernel must be odd")
        if not set(self.memory_layers) <= set(range(1, self.L + 1)):
            raise ConfigError(f"memory_layers {self.memory_layers} not within 1..{self.L}")
        if self.weighting not in ("homoscedastic", "manual"):
            raise ConfigError(f"unknown weighting {self.weighting!r}")
        if self.infer_blend not in ("fixed", "sampled"):
            raise ConfigError(f"unknown infer_blend {self.infer_blend!r}")

    @classmethod
    def from_dict(cls, d: dict) -> "MemMLPConfig":
        return cls(**d)


@dataclass
class Prediction:
    rot6d: torch.Tensor  # (..., T, 22, 6)
    pos: torch.Tensor | None  # (..., T, 22, 3); None without a position branch


# --------------------------------------------------------------------------
# layers


class MLPBlock(nn.Module):
    """conv1d -> layernorm -> SiLU -> linear, added back onto the input."""

    def __init__(self, d: int, k: int = 3, gen=None):
        super().__init__()
        self.conv = dc.TemporalConv(d, k, gen)
        self.norm = dc.LayerNorm(d)
        self.linear = dc.Linear(d, d, gen)

    def forward(self, h):
        return h + self.linear(dc.silu(self.norm(self.conv(h))))


class Projection(nn.Module):
    def __init__(self, d_in: int, d: int, gen=None):
        super().__init__()
        self.linear = dc.Linear(d_in, d, gen)
        self.norm = dc.LayerNorm(d)

    def forward(self, x):
        return dc.silu(self.norm(self.linear(x)))


class MemoryBlock(nn.Module):
    def __init__(self, d: int, d_zs: int, gen=None):
        super().__init__()
        self.proj_x = Projection(SPARSE_DIM, d, gen)
        self.proj_theta = Projection(TARGET_DIM, d, gen)
        self.proj_e = Projection(d_zs, d, gen)

    def forward(self, x_prev, theta_prev, e, m):
        """``m`` broadcasts against ``(..., T, d)``; returns the memory feature."""
        z_x = self.proj_x(x_prev)
        z_theta = self.proj_theta(theta_prev)
        z_e = self.proj_e(e).unsqueeze(-2)  # one code vector for the whole window
        z_m = m * z_theta + (1 - m) * z_e
        return z_x + z_m


class Branch(nn.Module):
    def __init__(self, d: int, depth: int, k: int, d_out: int, gen=None):
        super().__init__()
        self.blocks = nn.ModuleList(MLPBlock(d, k, gen) for _ in range(depth))
        self.out = dc.Linear(d, d_out, gen)

    def forward(self, h):
        for blk in self.blocks:
            h = blk(h)
        return self.out(h)


class MemMLP(nn.Module):
    def __init__(self, cfg: MemMLPConfig):
        super().__init__()
        self.cfg = cfg
        gen = torch.Generator().manual_seed(cfg.seed)
        d, k = cfg.d, cfg.conv_kernel
        self.input_proj = dc.Linear(SPARSE_DIM, d, gen)
        self.blocks = nn.ModuleList(MLPBlock(d, k, gen) for _ in range(cfg.L))
        self.memory = nn.ModuleDict({str(l): MemoryBlock(d, cfg.d_zs, gen) for l in cfg.memory_layers})
        self.fusion = nn.ModuleDict({str(l): dc.Linear(2 * d, d, gen) for l in cfg.memory_layers})
        self.rot_branch = Branch(d, cfg.predictor_depth, k, ROT_DIM, gen)
        self.pos_branch = Branch(d, cfg.predictor_depth, k, POS_DIM, gen) if cfg.multi_head else None
        self.log_vars = nn.Parameter(torch.zeros(len(LOSS_NAMES)))

    @property
    def uses_memory(self) -> bool:
        return bool(self.cfg.memory_layers)

    def memory_features(self, x_prev, theta_prev, e, blend):
        """Memory feature per configured layer. ``blend`` maps layer -> m."""
        return {
            l: self.memory[str(l)](x_prev, theta_prev, e, blend[l]) for l in self.cfg.memory_layers
        }

    def backbone(self, x, memory_feats: dict | None = None):
        memory_feats = memory_feats or {}
        h = self.input_proj(x)
        for l, blk in enumerate(self.blocks, start=1):
            h = blk(h)
            if l in self.cfg.memory_layers:
                if l not in memory_feats:
                    raise ShapeError(f"missing memory feature for layer {l}")
                h = self.fusion[str(l)](torch.cat([h, memory_feats[l]], dim=-1))
        return h

    def predict(self, h) -> Prediction:
        lead = h.shape[:-1]
        rot = self.rot_branch(h).reshape(*lead, NUM_JOINTS, 6)
        pos = None
        if self.pos_branch is not None:
            pos = self.pos_branch(h).reshape(*lead, NUM_JOINTS, 3)
        return Prediction(rot, pos)

    def forward(self, x, x_prev=None, theta_prev=None, e=None, blend=None) -> Prediction:
        feats = None
        if self.uses_memory:
            feats = self.memory_features(x_prev, theta_prev, e, blend)
        return self.predict(self.backbone(x, feats))

    def sample_blend(self, batch_shape, gen: torch.Generator) -> dict:
        """Training-time m ~ U[0, 1] drawn elementwise over ``(..., T, d)`` per layer."""
        shape = (*batch_shape, self.cfg.T, self.cfg.d)
        dtype = self.input_proj.weight.dtype
        return {l: torch.rand(shape, generator=gen, dtype=torch.float64).to(dtype) for l in self.cfg.memory_layers}

    def constant_blend(self, value: float) -> dict:
        dtype = self.input_proj.weight.dtype
        return {l: torch.tensor(value, dtype=dtype) for l in self.cfg.memory_layers}

    def param_count(self) -> int:
        return sum(p.numel() for p in self.parameters())


def pack_theta(rot6d: torch.Tensor, pos: torch.Tensor) -> torch.Tensor:
    """Interleave ``(..., 22, 6)`` rotations and ``(..., 22, 3)`` positions into ``(..., 198)``."""
    return torch.cat([rot6d, pos], dim=-1).reshape(*rot6d.shape[:-2], TARGET_DIM)


def unpack_theta(theta: torch.Tensor):
    j = theta.reshape(*theta.shape[:-1], NUM_JOINTS, 9)
    return j[..., :6], j[..., 6:]


# --------------------------------------------------------------------------
# losses (batch-averaged; per-window normalisation as in the definitions)


def loss_theta(pred: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    """``(1/T) sum_t sum_i |theta - theta_hat|_1`` for ``(..., T, 22, 6)`` inputs."""
    T = pred.shape[-3]
    return ((pred - gt).abs().sum(dim=(-1, -2, -3)) / T).mean()


def _velocity_l1(pred, gt, joints=None):
    T = pred.shape[-3]
    if T < 2:
        raise ShapeError("velocity losses need at least 2 frames")
    if joints is not None:
        pred, gt = pred[..., list(joints), :], gt[..., list(joints), :]
    dp = pred[..., 1:, :, :] - pred[..., :-1, :, :]
    dg = gt[..., 1:, :, :] - gt[..., :-1, :, :]
    return ((dg - dp).abs().sum(dim=(-1, -2, -3)) / (T - 1)).mean()


def loss_rot_velocity(pred: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    return _velocity_l1(pred, gt)


def loss_position(pred: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    T = pred.shape[-3]
    return ((pred - gt).abs().sum(dim=(-1, -2, -3)) / T).mean()


def loss_pos_velocity(pred: torch.Tensor, gt: torch.Tensor, lower_set) -> torch.Tensor:
    return _velocity_l1(pred, gt, lower_set)


def total_loss(losses, s: torch.Tensor, mode: str = "homoscedastic", weights=MANUAL_WEIGHTS):
    """Combine the task losses.

    Homoscedastic: ``sum_i exp(-s_i) L_i + s_i`` with trainable ``s``.
    Manual: ``sum_i lambda_i L_i``. ``None`` entries (absent tasks) are skipped.
    """
    out = 0.0
    for i, L in enumerate(losses):
        if L is None:
            continue
        if mode == "homoscedastic":
            out = out + torch.exp(-s[i]) * L + s[i]
        elif mode == "manual":
            out = out + weights[i] * L
        else:
            raise ConfigError(f"unknown weighting {mode!r}")
    return out


def compute_losses(model: MemMLP, pred: Prediction, target: torch.Tensor, lower_set):
    gt_rot, gt_pos = unpack_theta(target)
    parts = [loss_theta(pred.rot6d, gt_rot), loss_rot_velocity(pred.rot6d, gt_rot), None, None]
    if pred.pos is not None:
        parts[2] = loss_position(pred.pos, gt_pos)
        parts[3] = loss_pos_velocity(pred.pos, gt_pos, lower_set)
    total = total_loss(parts, model.log_vars, model.cfg.weighting)
    return total, parts


# --------------------------------------------------------------------------
# training


@dataclass
class TrainConfig:
    steps: int = 300_000
    batch_size: int = 256
    lr0: float = 3e-4
    lr1: float = 1e-5
    drop_frac: float = 0.75
    weight_decay: float = dc.WEIGHT_DECAY
    seed: int = 0
    log_every: int = 100


@dataclass
class TrainHistory:
    total: list[float] = field(default_factory=list)
    parts: list[tuple] = field(default_factory=list)
    lr: list[float] = field(default_factory=list)


def _t(a) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(a, dtype=np.float32))


class Trainer:
    """Holds the optimizer and data for repeated :meth:`train_step` calls."""

    def __init__(self, model: MemMLP, prior: VQVAE | None, dataset: WindowDataset, cfg: TrainConfig,
                 skel=None):
        if model.uses_memory:
            if prior is None:
                raise ConfigError("a model with memory blocks needs a prior")
            if not prior.frozen:
                raise FrozenError("the prior must be frozen before Mem-MLP training")
            if prior.cfg.d_zs != model.cfg.d_zs:
                raise ShapeError("prior latent width does not match the model")
        if len(dataset) == 0:
            raise ValueError("empty dataset")
        if dataset.T != model.cfg.T:
            raise ShapeError(f"dataset window {dataset.T} != model window {model.cfg.T}")
        self.model, self.prior, self.cfg = model, prior, cfg
        self.lower = list((skel or default_skeleton()).lower)
        b = stack_batch(dataset.samples)
        self.x, self.target = _t(b["x"]), _t(b["target"])
        self.x_prev, self.target_prev = _t(b["x_prev"]), _t(b["target_prev"])
        self.codes = None
        if model.uses_memory:
            # the prior is frozen and sees ground truth, so each sample's code is fixed
            with torch.no_grad():
                _, self.codes = prior.code(self.x_prev, self.target_prev)
        self.opt = dc.make_adamw(model.parameters(), lr=cfg.lr0, weight_decay=cfg.weight_decay)
        self.rng = np.random.default_rng(cfg.seed)
        self.gen = torch.Generator().manual_seed(cfg.seed)
        self.step_no = 0
        self._perm = np.empty(0, dtype=np.int64)
        self._cursor = 0

    def _next_indices(self) -> torch.Tensor:
        n, bs = len(self.x), self.cfg.batch_size
        out = []
        while len(out) < min(bs, n):
            if self._cursor >= len(self._perm):
                self._perm = self.rng.permutation(n)
                self._cursor = 0
            take = min(bs - len(out), len(self._perm) - self._cursor)
            out.extend(self._perm[self._cursor:self._cursor + take])
            self._cursor += take
        return torch.as_tensor(np.array(out, dtype=np.int64))

    def lr(self) -> float:
        drop = int(self.cfg.drop_frac * self.cfg.steps)
        return dc.lr_schedule(self.step_no, self.cfg.steps, drop, self.cfg.lr0, self.cfg.lr1)

    def train_step(self, idx: torch.Tensor | None = None):
        idx = self._next_indices() if idx is None else idx
        model = self.model
        model.train()
        if model.uses_memory:
            blend = model.sample_blend((len(idx),), self.gen)
            pred = model(self.x[idx], self.x_prev[idx], self.target_prev[idx], self.codes[idx], blend)
        else:
            pred = model(self.x[idx])
        total, parts = compute_losses(model, pred, self.target[idx], self.lower)
        self.opt.zero_grad(set_to_none=True)
        dc.backward(total)
        lr = self.lr()
        dc.adamw_step(self.opt, lr)
        self.step_no += 1
        return total.item(), tuple(None if p is None else p.item() for p in parts), lr

    def run(self, steps: int | None = None, history: TrainHistory | None = None) -> TrainHistory:
        hist = history or TrainHistory()
        steps = self.cfg.steps if steps is None else steps
        for _ in range(steps):
            total, parts, lr = self.train_step()
            hist.total.append(total)
            hist.parts.append(parts)
            hist.lr.append(lr)
            if self.cfg.log_every and self.step_no % self.cfg.log_every == 0:
                log.info("step %d loss %.5f lr %.2e", self.step_no, total, lr)
        return hist


def train(model: MemMLP, prior: VQVAE | None, dataset: WindowDataset, cfg: TrainConfig, skel=None) -> TrainHistory:
    return Trainer(model, prior, dataset, cfg, skel).run()


# --------------------------------------------------------------------------
# checkpoints


def save_model(model: MemMLP, path: str | Path) -> None:
    dc.save_checkpoint(path, model.state_dict(), {"kind": "memmlp", "config": asdict(model.cfg)})


def load_model(path: str | Path, expect: MemMLPConfig | None = None) -> MemMLP:
    header, tensors = dc.load_checkpoint(path)
    if header.get("kind") != "memmlp":
        raise CheckpointError(f"{path}: not a Mem-MLP checkpoint (kind={header.get('kind')!r})")
    cfg = MemMLPConfig.from_dict(header["config"])
    if expect is not None and asdict(expect) != asdict(cfg):
        raise CheckpointError(f"{path}: checkpoint config does not match the requested config")
    model = MemMLP(cfg)
    dc.load_into(model, tensors)
    model.eval()
    return model
