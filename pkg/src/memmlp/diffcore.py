"""Differentiable building blocks on top of torch autograd.

The four layer primitives are written as plain functions so every
multiply-add goes through one place (see :class:`MacCounter`). Modules hold
parameters and call the functions; gradients come from torch's tape.

Checkpoint byte layout (all little-endian)::

    b"MMWT"               4 bytes magic
    version               u32 (currently 1)
    header_len            u32
    header                header_len bytes of UTF-8 JSON (kind, config, ...)
    n_records             u32
    n_records x record:
        id_len            u16
        id                id_len bytes UTF-8 (parameter path, e.g. "blocks.0.linear.weight")
        ndim              u8
        dims              ndim x u32
        data              prod(dims) x f32, row-major
"""

from __future__ import annotations

import contextlib
import json
import math
import struct
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import CheckpointError, ShapeError

LN_EPS = 1e-5
CKPT_MAGIC = b"MMWT"
CKPT_VERSION = 1

# AdamW defaults for Mem-MLP training
ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8
WEIGHT_DECAY = 1e-4


# --------------------------------------------------------------------------
# MAC accounting


class MacCounter:
    """Counts multiply-adds of linear/conv/distance ops executed inside ``with``."""

    _active: list["MacCounter"] = []

    def __init__(self):
        self.total = 0
        self.by_op: dict[str, int] = {}

    def add(self, op: str, n: int) -> None:
        self.total += n
        self.by_op[op] = self.by_op.get(op, 0) + n

    def __enter__(self):
        MacCounter._active.append(self)
        return self

    def __exit__(self, *exc):
        MacCounter._active.remove(self)
        return False


def count_macs(op: str, n: int) -> None:
    for c in MacCounter._active:
        c.add(op, int(n))


def _rows(x: torch.Tensor) -> int:
    return int(np.prod(x.shape[:-1])) if x.dim() > 1 else 1


# --------------------------------------------------------------------------
# primitives


def linear(x: torch.Tensor, W: torch.Tensor, b: torch.Tensor | None = None) -> torch.Tensor:
    """``x @ W + b`` over the last axis; ``W`` is ``(d_in, d_out)``."""
    if x.shape[-1] != W.shape[0]:
        raise ShapeError(f"linear: input width {x.shape[-1]} != weight rows {W.shape[0]}")
    count_macs("linear", _rows(x) * W.shape[0] * W.shape[1])
    y = x @ W
    return y if b is None else y + b


def conv1d_temporal(x: torch.Tensor, kernel: torch.Tensor, bias: torch.Tensor | None = None) -> torch.Tensor:
    """Length-preserving convolution along the time axis.

    ``x`` is ``(..., T, d_in)``, ``kernel`` is ``(k, d_in, d_out)`` with odd
    ``k``, zero padding ``(k-1)/2``. Convolution, not correlation: an impulse
    at time ``s`` yields ``kernel[j]`` at time ``s - (k-1)/2 + j``.
    """
    k, d_in, d_out = kernel.shape
    if k % 2 == 0:
        raise ShapeError("conv kernel width must be odd")
    if x.shape[-1] != d_in:
        raise ShapeError(f"conv: input width {x.shape[-1]} != kernel input {d_in}")
    lead = x.shape[:-2]
    T = x.shape[-2]
    count_macs("conv", _rows(x) * k * d_in * d_out)
    xs = x.reshape(-1, T, d_in).transpose(1, 2)
    w = kernel.flip(0).permute(2, 1, 0)  # (d_out, d_in, k) cross-correlation weights
    y = F.conv1d(xs, w, bias, padding=(k - 1) // 2)
    return y.transpose(1, 2).reshape(*lead, T, d_out)


def layernorm(x: torch.Tensor, gamma: torch.Tensor, beta: torch.Tensor, eps: float = LN_EPS) -> torch.Tensor:
    mean = x.mean(-1, keepdim=True)
    var = ((x - mean) ** 2).mean(-1, keepdim=True)
    return (x - mean) / torch.sqrt(var + eps) * gamma + beta


def silu(x: torch.Tensor) -> torch.Tensor:
    return x * torch.sigmoid(x)


def backward(loss: torch.Tensor, retain_graph: bool = False) -> None:
    """Accumulate d(loss)/d(param) into every reachable parameter's ``.grad``."""
    if loss.numel() != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {tuple(loss.shape)}")
    loss.reshape(()).backward(retain_graph=retain_graph)


def zero_grad(params) -> None:
    for p in params:
        p.grad = None


# --------------------------------------------------------------------------
# modules


def _uniform(shape, fan_in: int, gen: torch.Generator | None) -> torch.Tensor:
    bound = 1.0 / math.sqrt(fan_in)
    return (torch.rand(shape, generator=gen, dtype=torch.float64) * 2 - 1).mul_(bound).float()


class Linear(nn.Module):
    def __init__(self, d_in: int, d_out: int, gen: torch.Generator | None = None):
        super().__init__()
        self.weight = nn.Parameter(_uniform((d_in, d_out), d_in, gen))
        self.bias = nn.Parameter(torch.zeros(d_out))

    def forward(self, x):
        return linear(x, self.weight, self.bias)


class TemporalConv(nn.Module):
    def __init__(self, d: int, k: int = 3, gen: torch.Generator | None = None):
        super().__init__()
        self.weight = nn.Parameter(_uniform((k, d, d), k * d, gen))
        self.bias = nn.Parameter(torch.zeros(d))

    def forward(self, x):
        return conv1d_temporal(x, self.weight, self.bias)


class LayerNorm(nn.Module):
    def __init__(self, d: int):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(d))
        self.bias = nn.Parameter(torch.zeros(d))

    def forward(self, x):
        return layernorm(x, self.weight, self.bias)


class SiLU(nn.Module):
    def forward(self, x):
        return silu(x)


# --------------------------------------------------------------------------
# optimisation


def make_adamw(params, lr: float = 3e-4, betas=ADAM_BETAS, eps: float = ADAM_EPS,
               weight_decay: float = WEIGHT_DECAY) -> torch.optim.AdamW:
    return torch.optim.AdamW(list(params), lr=lr, betas=betas, eps=eps, weight_decay=weight_decay)


def adamw_step(opt: torch.optim.Optimizer, lr: float) -> None:
    """One decoupled-decay Adam update at learning rate ``lr``."""
    for group in opt.param_groups:
        group["lr"] = lr
    opt.step()


def lr_schedule(step: int, total: int = 300_000, drop_at: int = 225_000,
                lr0: float = 3e-4, lr1: float = 1e-5) -> float:
    if step < 0:
        raise ValueError("step must be non-negative")
    return lr0 if step < drop_at else lr1


# --------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path: str | Path, tensors: dict[str, torch.Tensor], header: dict) -> None:
    parts = [CKPT_MAGIC, struct.pack("<I", CKPT_VERSION)]
    hdr = json.dumps(header, sort_keys=True).encode()
    parts += [struct.pack("<I", len(hdr)), hdr, struct.pack("<I", len(tensors))]
    for name, t in tensors.items():
        arr = t.detach().cpu().numpy().astype("<f4")
        key = name.encode()
        parts += [struct.pack("<H", len(key)), key, struct.pack("<B", arr.ndim)]
        parts += [struct.pack(f"<{arr.ndim}I", *arr.shape), arr.tobytes()]
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path: str | Path) -> tuple[dict, dict[str, torch.Tensor]]:
    buf = Path(path).read_bytes()
    if buf[:4] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {buf[:4]!r}")
    try:
        (version,) = struct.unpack_from("<I", buf, 4)
        if version != CKPT_VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
        (hlen,) = struct.unpack_from("<I", buf, 8)
        header = json.loads(buf[12:12 + hlen].decode())
        off = 12 + hlen
        (n,) = struct.unpack_from("<I", buf, off)
        off += 4
        tensors = {}
        for _ in range(n):
            (klen,) = struct.unpack_from("<H", buf, off)
            off += 2
            key = buf[off:off + klen].decode()
            off += klen
            (ndim,) = struct.unpack_from("<B", buf, off)
            off += 1
            shape = struct.unpack_from(f"<{ndim}I", buf, off)
            off += 4 * ndim
            count = int(np.prod(shape)) if ndim else 1
            arr = np.frombuffer(buf, dtype="<f4", count=count, offset=off).reshape(shape)
            off += 4 * count
            tensors[key] = torch.from_numpy(arr.astype(np.float32))
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"{path}: truncated or corrupt checkpoint ({exc})") from exc
    if off != len(buf):
        raise CheckpointError(f"{path}: {len(buf) - off} trailing bytes")
    return header, tensors


def load_into(module: nn.Module, tensors: dict[str, torch.Tensor], prefix: str = "") -> None:
    """Copy checkpoint tensors into ``module``; names and shapes must match."""
    own = {k: v for k, v in module.state_dict().items()}
    want = {k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)}
    if set(own) != set(want):
        missing = sorted(set(own) - set(want))[:3]
        extra = sorted(set(want) - set(own))[:3]
        raise CheckpointError(f"checkpoint does not match model (missing {missing}, unexpected {extra})")
    for k, v in own.items():
        if tuple(v.shape) != tuple(want[k].shape):
            raise CheckpointError(f"shape mismatch for {k}: {tuple(want[k].shape)} vs {tuple(v.shape)}")
    with torch.no_grad():
        for k, v in own.items():
            v.copy_(want[k].to(v.dtype))


@contextlib.contextmanager
def deterministic(threads: int = 1):
    """Pin torch to a fixed thread count for bit-reproducible runs."""
    old = torch.get_num_threads()
    torch.set_num_threads(threads)
    try:
        yield
    finally:
        torch.set_num_threads(old)
