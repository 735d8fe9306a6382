"""Invertible network mapping 4x16x16 bond channels to a 1024-dim latent.

Four stages, each a parameter-free 2x2 space-to-depth step followed by
additive coupling blocks::

    4x16x16 -> 16x8x8 -> 64x4x4 -> 256x2x2 -> 1024x1x1

The first 128 latent coordinates are trained against the spectrum code,
the remaining 896 are free.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from . import numeric as nc
from .numeric import Parameter, RngStream, ShapeError, Tensor

INPUT_SHAPE = (4, 16, 16)
LATENT_DIM = 1024
Y_DIM = 128
Z_DIM = LATENT_DIM - Y_DIM
N_STAGES = 4


# --------------------------------------------------------------------------
# space-to-depth


def _space_to_depth(a: np.ndarray) -> np.ndarray:
    n, c, h, w = a.shape
    a = a.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 3, 5, 2, 4)
    return np.ascontiguousarray(a).reshape(n, 4 * c, h // 2, w // 2)


def _depth_to_space(a: np.ndarray) -> np.ndarray:
    n, c4, h, w = a.shape
    c = c4 // 4
    a = a.reshape(n, c, 2, 2, h, w).transpose(0, 1, 4, 2, 5, 3)
    return np.ascontiguousarray(a).reshape(n, c, 2 * h, 2 * w)


def _batched(x) -> tuple[Tensor, bool]:
    x = x if isinstance(x, Tensor) else Tensor(x)
    if x.ndim == 3:
        return nc.reshape(x, (1, *x.shape)), True
    if x.ndim != 4:
        raise ShapeError(f"expected [C,H,W] or [N,C,H,W], got {x.shape}")
    return x, False


def _unbatch(x: Tensor, was_unbatched: bool) -> Tensor:
    return nc.reshape(x, x.shape[1:]) if was_unbatched else x


def psi_forward(x) -> Tensor:
    """Move each 2x2 block of each channel into 4 consecutive channels.

    Channel ``c`` becomes channels ``4c..4c+3`` holding the top-left,
    top-right, bottom-left and bottom-right cells.
    """
    x, single = _batched(x)
    if x.shape[2] % 2 or x.shape[3] % 2:
        raise ShapeError(f"psi needs even spatial extents, got {x.shape[2:]}")
    out = nc.record(_space_to_depth(x.data), (x,), lambda g: (_depth_to_space(g),), "psi")
    return _unbatch(out, single)


def psi_inverse(x) -> Tensor:
    x, single = _batched(x)
    if x.shape[1] % 4:
        raise ShapeError(f"psi inverse needs channels divisible by 4, got {x.shape[1]}")
    out = nc.record(_depth_to_space(x.data), (x,), lambda g: (_space_to_depth(g),), "psi_inverse")
    return _unbatch(out, single)


# --------------------------------------------------------------------------
# coupling


@dataclass
class CouplingBlock:
    """Residual ``F = conv3x3 -> relu -> conv3x3`` acting on half the channels."""

    w1: Parameter
    b1: Parameter
    w2: Parameter
    b2: Parameter

    @property
    def half(self) -> int:
        return self.w1.shape[1]

    def residual(self, v: Tensor) -> Tensor:
        return nc.conv2d(nc.relu(nc.conv2d(v, self.w1, self.b1)), self.w2, self.b2)

    def parameters(self) -> dict[str, Parameter]:
        return {"conv1.weight": self.w1, "conv1.bias": self.b1, "conv2.weight": self.w2, "conv2.bias": self.b2}

    @classmethod
    def create(
        cls,
        half: int,
        hidden: int,
        rng: RngStream,
        dtype=np.float32,
        zero_init_residual: bool = True,
        gain: float = 1.0,
    ) -> "CouplingBlock":
        std1 = gain * np.sqrt(2.0 / (half * 9))
        w1 = rng.normal((hidden, half, 3, 3)) * std1
        if zero_init_residual:
            w2 = np.zeros((half, hidden, 3, 3))
        else:
            w2 = rng.normal((half, hidden, 3, 3)) * gain * np.sqrt(1.0 / (hidden * 9))
        return cls(
            Parameter(w1, dtype=dtype),
            Parameter(np.zeros(hidden), dtype=dtype),
            Parameter(w2, dtype=dtype),
            Parameter(np.zeros(half), dtype=dtype),
        )


def _check_coupling_input(x: Tensor, block: CouplingBlock) -> int:
    c = x.shape[1]
    if c % 2:
        raise ShapeError(f"coupling needs an even channel count, got {c}")
    if c // 2 != block.half:
        raise ShapeError(f"coupling block expects {2 * block.half} channels, got {c}")
    return c // 2


def coupling_forward(x, block: CouplingBlock) -> Tensor:
    """``(x1, x2) -> (x2, x1 + F(x2))``."""
    x, single = _batched(x)
    k = _check_coupling_input(x, block)
    x1 = nc.channel_slice(x, 0, k)
    x2 = nc.channel_slice(x, k, 2 * k)
    out = nc.concat([x2, nc.add(x1, block.residual(x2))], axis=1)
    return _unbatch(out, single)


def coupling_inverse(y, block: CouplingBlock) -> Tensor:
    """``(y1, y2) -> (y2 - F(y1), y1)``."""
    y, single = _batched(y)
    k = _check_coupling_input(y, block)
    y1 = nc.channel_slice(y, 0, k)
    y2 = nc.channel_slice(y, k, 2 * k)
    out = nc.concat([nc.sub(y2, block.residual(y1)), y1], axis=1)
    return _unbatch(out, single)


# --------------------------------------------------------------------------
# whole network


class InvertibleNet:
    """Stacked psi + coupling stages; exact inverse by construction."""

    def __init__(
        self,
        blocks_per_stage: int = 2,
        seed: int = 0,
        dtype=np.float32,
        zero_init_residual: bool = True,
        gain: float = 1.0,
        hidden_ratio: float = 1.0,
    ):
        if blocks_per_stage < 1:
            raise ValueError("blocks_per_stage must be >= 1")
        self.blocks_per_stage = blocks_per_stage
        self.dtype = np.dtype(dtype)
        root = RngStream(seed)
        self.stages: list[list[CouplingBlock]] = []
        channels = INPUT_SHAPE[0]
        for s in range(N_STAGES):
            channels *= 4
            half = channels // 2
            hidden = max(1, int(round(half * hidden_ratio)))
            self.stages.append(
                [
                    CouplingBlock.create(half, hidden, root.substream(s, b), dtype, zero_init_residual, gain)
                    for b in range(blocks_per_stage)
                ]
            )

    # parameters -----------------------------------------------------------

    def named_parameters(self) -> dict[str, Parameter]:
        out = {}
        for s, blocks in enumerate(self.stages):
            for b, block in enumerate(blocks):
                for name, p in block.parameters().items():
                    out[f"stage{s}.block{b}.{name}"] = p
        return out

    def parameters(self) -> list[Parameter]:
        return list(self.named_parameters().values())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.named_parameters().items()}

    def load_state_dict(self, arrays: dict[str, np.ndarray]) -> None:
        from .checkpoint import CheckpointError

        params = self.named_parameters()
        missing = sorted(set(params) - set(arrays))
        extra = sorted(set(arrays) - set(params))
        if missing:
            raise CheckpointError(f"checkpoint lacks array {missing[0]!r}")
        if extra:
            raise CheckpointError(f"checkpoint has unexpected array {extra[0]!r}")
        for name, p in params.items():
            a = np.asarray(arrays[name])
            if a.shape != p.shape:
                raise CheckpointError(f"array {name!r} has shape {a.shape}, network expects {p.shape}")
        for name, p in params.items():
            p.data = np.array(arrays[name], dtype=self.dtype)
            p.zero_grad()
            p.m = np.zeros_like(p.data)
            p.v = np.zeros_like(p.data)
            p.step = 0

    @classmethod
    def from_state_dict(cls, arrays: dict[str, np.ndarray], dtype=np.float32) -> "InvertibleNet":
        """Build a network whose depth and widths match ``arrays``."""
        from .checkpoint import CheckpointError

        blocks = {int(m.group(1)) for k in arrays if (m := re.match(r"stage0\.block(\d+)\.", k))}
        if not blocks:
            raise CheckpointError("checkpoint contains no stage0 coupling blocks")
        key = "stage0.block0.conv1.weight"
        if key not in arrays:
            raise CheckpointError(f"checkpoint lacks array {key!r}")
        hidden_ratio = arrays[key].shape[0] / arrays[key].shape[1]
        net = cls(blocks_per_stage=max(blocks) + 1, dtype=dtype, hidden_ratio=hidden_ratio)
        net.load_state_dict(arrays)
        return net

    def astype(self, dtype) -> "InvertibleNet":
        other = InvertibleNet.__new__(InvertibleNet)
        other.blocks_per_stage = self.blocks_per_stage
        other.dtype = np.dtype(dtype)
        other.stages = [
            [CouplingBlock(*(Parameter(p.data, dtype=dtype) for p in blk.parameters().values())) for blk in blocks]
            for blocks in self.stages
        ]
        return other

    # maps -----------------------------------------------------------------

    def forward(self, x) -> Tensor:
        return net_forward(x, self)

    def inverse(self, latent) -> Tensor:
        return net_inverse(latent, self)

    __call__ = forward

    def blocks(self) -> Iterator[CouplingBlock]:
        for blocks in self.stages:
            yield from blocks


def _as_input(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def net_forward(x, net: InvertibleNet) -> Tensor:
    """Map ``[4,16,16]`` (or ``[N,4,16,16]``) to ``[1024]`` (or ``[N,1024]``)."""
    x = _as_input(x, net.dtype)
    if x.shape[-3:] != INPUT_SHAPE or x.ndim not in (3, 4):
        raise ShapeError(f"network input must be {INPUT_SHAPE} or [N, *{INPUT_SHAPE}], got {x.shape}")
    h, single = _batched(x)
    for blocks in net.stages:
        h = psi_forward(h)
        for block in blocks:
            h = coupling_forward(h, block)
    n = h.shape[0]
    out = nc.reshape(h, (n, LATENT_DIM))
    return nc.reshape(out, (LATENT_DIM,)) if single else out


def net_inverse(latent, net: InvertibleNet) -> Tensor:
    """Exact algebraic inverse of :func:`net_forward`."""
    latent = _as_input(latent, net.dtype)
    if latent.shape[-1] != LATENT_DIM or latent.ndim not in (1, 2):
        raise ShapeError(f"latent must have length {LATENT_DIM}, got shape {latent.shape}")
    single = latent.ndim == 1
    n = 1 if single else latent.shape[0]
    h = nc.reshape(latent, (n, LATENT_DIM, 1, 1))
    for blocks in reversed(net.stages):
        for block in reversed(blocks):
            h = coupling_inverse(h, block)
        h = psi_inverse(h)
    return nc.reshape(h, INPUT_SHAPE) if single else h


# --------------------------------------------------------------------------
# latent split


@dataclass
class LatentSplit:
    y_latent: np.ndarray | Tensor
    z_free: np.ndarray | Tensor


def split_latent(latent) -> LatentSplit:
    """First 128 coordinates are the spectrum part, the remaining 896 are free."""
    if isinstance(latent, Tensor):
        axis = latent.ndim - 1
        return LatentSplit(
            nc.channel_slice(latent, 0, Y_DIM, axis=axis),
            nc.channel_slice(latent, Y_DIM, LATENT_DIM, axis=axis),
        )
    latent = np.asarray(latent)
    if latent.shape[-1] != LATENT_DIM:
        raise ShapeError(f"latent must have length {LATENT_DIM}, got {latent.shape[-1]}")
    return LatentSplit(latent[..., :Y_DIM].copy(), latent[..., Y_DIM:].copy())


def merge_latent(split: LatentSplit):
    y, z = split.y_latent, split.z_free
    if isinstance(y, Tensor) or isinstance(z, Tensor):
        y = y if isinstance(y, Tensor) else Tensor(y)
        z = z if isinstance(z, Tensor) else Tensor(np.asarray(z, dtype=y.dtype))
        return nc.concat([y, z], axis=y.ndim - 1)
    y, z = np.asarray(y), np.asarray(z)
    return np.concatenate([y, z.astype(np.result_type(y, z), copy=False)], axis=-1)


def sample_zfree(rng: RngStream, n: int, dtype=np.float64) -> np.ndarray:
    """``n`` i.i.d. standard-normal draws of the free latent part."""
    return rng.normal((n, Z_DIM), dtype=dtype)
