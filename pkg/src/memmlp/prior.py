"""VQ-VAE motion prior: encoder, codebook quantization, decoder, training.

The encoder maps a window of sparse features and full-body motion to a single
latent. Mem-MLP only ever uses the trained prior frozen: encode, then snap
to the nearest codebook entry.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from . import diffcore as dc
from .data import SPARSE_DIM, TARGET_DIM, WindowDataset, stack_batch
from .errors import CheckpointError, FrozenError, ShapeError

log = logging.getLogger(__name__)


@dataclass
class PriorConfig:
    T: int = 41
    hidden: int = 512
    d_zs: int = 256
    K: int = 64
    L_enc: int = 4
    L_dec: int = 1
    beta_commit: float = 0.25
    epochs: int = 100
    batch_size: int = 256
    lr: float = 1e-4
    milestones: tuple[int, ...] = (20, 50, 70)
    gamma: float = 0.2
    betas: tuple[float, float] = (0.9, 0.99)
    weight_decay: float = 1e-4
    seed: int = 0

    @classmethod
    def from_dict(cls, d: dict) -> "PriorConfig":
        d = dict(d)
        for key in ("milestones", "betas"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


class VQBlock(nn.Module):
    """layernorm -> linear -> SiLU"""

    def __init__(self, d: int, gen=None):
        super().__init__()
        self.norm = dc.LayerNorm(d)
        self.linear = dc.Linear(d, d, gen)

    def forward(self, h):
        return dc.silu(self.linear(self.norm(h)))


class VQVAE(nn.Module):
    def __init__(self, cfg: PriorConfig):
        super().__init__()
        self.cfg = cfg
        gen = torch.Generator().manual_seed(cfg.seed)
        h = cfg.hidden
        self.enc_in = dc.Linear(SPARSE_DIM + TARGET_DIM, h, gen)
        self.enc_blocks = nn.ModuleList(VQBlock(h, gen) for _ in range(cfg.L_enc))
        self.enc_out = dc.Linear(h, cfg.d_zs, gen)
        self.dec_in = dc.Linear(cfg.d_zs, h, gen)
        self.dec_blocks = nn.ModuleList(VQBlock(h, gen) for _ in range(cfg.L_dec))
        self.dec_out = dc.Linear(h, cfg.T * TARGET_DIM, gen)
        init = (torch.rand((cfg.K, cfg.d_zs), generator=gen, dtype=torch.float64) * 2 - 1) / cfg.K
        self.codebook = nn.Parameter(init.float())
        self.frozen = False
        self.usage = np.zeros(cfg.K, dtype=np.int64)

    # -- freezing ----------------------------------------------------------

    def freeze(self) -> "VQVAE":
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()
        self.frozen = True
        return self

    def trainable_parameters(self):
        if self.frozen:
            raise FrozenError("prior is frozen; its parameters cannot be optimized")
        return list(self.parameters())

    # -- forward pieces ----------------------------------------------------

    def encode(self, x_prev: torch.Tensor, theta_prev: torch.Tensor) -> torch.Tensor:
        """``(..., T, 54)`` and ``(..., T, 198)`` -> ``(..., d_zs)``."""
        if x_prev.shape[-1] != SPARSE_DIM or theta_prev.shape[-1] != TARGET_DIM:
            raise ShapeError(f"encode expects (T,{SPARSE_DIM}) and (T,{TARGET_DIM}) windows")
        if x_prev.shape[:-1] != theta_prev.shape[:-1]:
            raise ShapeError("encode: window lengths differ")
        h = self.enc_in(torch.cat([x_prev, theta_prev], dim=-1))
        for blk in self.enc_blocks:
            h = blk(h)
        return self.enc_out(h.mean(dim=-2))

    def decode(self, e: torch.Tensor) -> torch.Tensor:
        h = self.dec_in(e)
        for blk in self.dec_blocks:
            h = blk(h)
        out = self.dec_out(h)
        return out.reshape(*e.shape[:-1], self.cfg.T, TARGET_DIM)

    def code(self, x_prev: torch.Tensor, theta_prev: torch.Tensor):
        """Encode and quantize: returns ``(index, e_k)``."""
        return quantize(self.encode(x_prev, theta_prev), self.codebook)

    def forward(self, x_prev, theta_prev):
        z = self.encode(x_prev, theta_prev)
        idx, e = quantize(z, self.codebook)
        z_q = z + (e - z).detach()  # straight-through
        return self.decode(z_q), z, e, idx


def quantize(z: torch.Tensor, codebook: torch.Tensor):
    """Nearest codebook row by Euclidean distance; ties go to the lowest index."""
    if codebook.shape[0] < 1:
        raise ShapeError("empty codebook")
    if z.shape[-1] != codebook.shape[1]:
        raise ShapeError(f"latent width {z.shape[-1]} != codebook width {codebook.shape[1]}")
    dc.count_macs("quantize", int(np.prod(z.shape[:-1])) * codebook.shape[0] * codebook.shape[1])
    d2 = ((z.unsqueeze(-2) - codebook) ** 2).sum(-1)
    idx = torch.argmin(d2, dim=-1)
    return idx, codebook[idx]


def rotation_l1(pred: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    """Per-window ``sum |rot - rot_hat| / T`` on the 6D slots of 198-wide frames, batch-averaged."""
    T = pred.shape[-2]
    pr = pred.reshape(*pred.shape[:-1], 22, 9)[..., :6]
    gr = gt.reshape(*gt.shape[:-1], 22, 9)[..., :6]
    per = (pr - gr).abs().sum(dim=(-1, -2, -3)) / T
    return per.mean()


def vqvae_loss(recon: torch.Tensor, gt: torch.Tensor, z: torch.Tensor, e: torch.Tensor,
               beta_commit: float = 0.25) -> torch.Tensor:
    codebook_term = ((z.detach() - e) ** 2).sum(-1).mean()
    commit_term = ((z - e.detach()) ** 2).sum(-1).mean()
    return rotation_l1(recon, gt) + codebook_term + beta_commit * commit_term


def _to_t(a: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(a, dtype=np.float32))


@dataclass
class PriorHistory:
    epoch_loss: list[float] = field(default_factory=list)


def train_vqvae(dataset: WindowDataset, cfg: PriorConfig, prior: VQVAE | None = None):
    """Train on the dataset windows and return ``(frozen prior, history)``."""
    if len(dataset) == 0:
        raise ValueError("cannot train the prior on an empty dataset")
    if dataset.T != cfg.T:
        raise ShapeError(f"dataset window {dataset.T} != prior window {cfg.T}")
    prior = prior or VQVAE(cfg)
    opt = torch.optim.Adam(prior.trainable_parameters(), lr=cfg.lr, betas=cfg.betas,
                           weight_decay=cfg.weight_decay)
    sched = torch.optim.lr_scheduler.MultiStepLR(opt, milestones=list(cfg.milestones), gamma=cfg.gamma)
    rng = np.random.default_rng(cfg.seed)
    batch = stack_batch(dataset.samples)
    x, tgt = _to_t(batch["x"]), _to_t(batch["target"])
    hist = PriorHistory()
    prior.train()
    for epoch in range(cfg.epochs):
        perm = rng.permutation(len(dataset))
        total, count = 0.0, 0
        for start in range(0, len(perm), cfg.batch_size):
            idx = torch.from_numpy(perm[start:start + cfg.batch_size])
            recon, z, e, _ = prior(x[idx], tgt[idx])
            loss = vqvae_loss(recon, tgt[idx], z, e, cfg.beta_commit)
            opt.zero_grad(set_to_none=True)
            dc.backward(loss)
            opt.step()
            total += loss.item() * len(idx)
            count += len(idx)
        sched.step()
        hist.epoch_loss.append(total / count)
        log.info("prior epoch %d loss %.5f", epoch + 1, hist.epoch_loss[-1])
    with torch.no_grad():
        idx, _ = prior.code(x, tgt)
    prior.usage = np.bincount(idx.numpy(), minlength=cfg.K)
    log.info("codebook entries used: %d / %d", int((prior.usage > 0).sum()), cfg.K)
    return prior.freeze(), hist


def save_prior(prior: VQVAE, path: str | Path) -> None:
    header = {"kind": "vqvae", "config": asdict(prior.cfg), "frozen": prior.frozen}
    dc.save_checkpoint(path, prior.state_dict(), header)
    lines = [f"{k}\t{int(c)}" for k, c in enumerate(prior.usage)]
    Path(str(path) + ".usage.txt").write_text("code\tcount\n" + "\n".join(lines) + "\n")


def load_prior(path: str | Path) -> VQVAE:
    header, tensors = dc.load_checkpoint(path)
    if header.get("kind") != "vqvae":
        raise CheckpointError(f"{path}: not a prior checkpoint (kind={header.get('kind')!r})")
    prior = VQVAE(PriorConfig.from_dict(header["config"]))
    dc.load_into(prior, tensors)
    usage = Path(str(path) + ".usage.txt")
    if usage.exists():
        rows = usage.read_text().split("\n")[1:]
        prior.usage = np.array([int(r.split("\t")[1]) for r in rows if r], dtype=np.int64)
    return prior.freeze()
