"""Training objective: spectrum-code BCE plus penalties on inverted structures."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import numeric as nc
from .chemdata import FORBIDDEN_MASK, N_CODE
from .invnet import InvertibleNet, LatentSplit, merge_latent, sample_zfree, split_latent
from .numeric import RngStream, ShapeError, Tensor

SMEAR_KERNEL = (0.25, 0.5, 1.0, 0.5, 0.25)
POS_WEIGHT = 4.0
TERMS = ("y", "range", "sparse", "forbidden", "zfree")


@dataclass(frozen=True)
class LossWeights:
    w_y: float = 1.0
    w_range: float = 1.0
    w_sparse: float = 0.1
    w_forbidden: float = 0.1
    w_zfree: float = 0.0

    def __post_init__(self):
        for name, value in asdict(self).items():
            if not np.isfinite(value) or value < 0:
                raise ValueError(f"loss weight {name} must be finite and >= 0, got {value}")

    def as_tuple(self) -> tuple[float, ...]:
        return (self.w_y, self.w_range, self.w_sparse, self.w_forbidden, self.w_zfree)


@dataclass
class LossBreakdown:
    total: float
    y: float
    range: float
    sparse: float
    forbidden: float
    zfree: float
    weights: LossWeights = field(default_factory=LossWeights)
    tensor: Tensor | None = field(default=None, repr=False, compare=False)

    @property
    def loss_y(self) -> float:
        return self.y

    @property
    def loss_x(self) -> float:
        """Weighted inverse-direction part (range and both sparsity terms)."""
        w = self.weights
        return w.w_range * self.range + w.w_sparse * self.sparse + w.w_forbidden * self.forbidden


def smear_target(code: np.ndarray) -> np.ndarray:
    """Spread each set bit to its neighbours with weights 0.5 (d=1) and 0.25 (d=2)."""
    code = np.asarray(code, dtype=np.float64)
    out = code * SMEAR_KERNEL[2]
    n = code.shape[-1]
    for d, k in zip((-2, -1, 1, 2), (SMEAR_KERNEL[0], SMEAR_KERNEL[1], SMEAR_KERNEL[3], SMEAR_KERNEL[4])):
        shifted = np.zeros_like(code)
        # shifted[i] = code[i + d]
        if d > 0:
            shifted[..., : n - d] = code[..., d:]
        else:
            shifted[..., -d:] = code[..., : n + d]
        out = np.maximum(out, shifted * k)
    return out


def distance_aware_bce(pred, target, pos_weight: float = POS_WEIGHT) -> Tensor:
    """Mean weighted BCE of ``sigmoid(pred)`` against the smeared target code.

    A near miss (one or two bits off) costs less than a far miss; beyond two
    bits every miss costs the same.
    """
    pred = pred if isinstance(pred, Tensor) else Tensor(pred)
    target = np.asarray(target)
    if pred.shape[-1] != N_CODE or target.shape != pred.shape:
        raise ShapeError(f"distance_aware_bce: pred {pred.shape} and target {target.shape} must both end in {N_CODE}")
    return nc.mean(nc.bce_with_logits(pred, smear_target(target), pos_weight))


def range_penalty(x_hat) -> Tensor:
    return nc.mean(nc.square(nc.clamp01_violation(x_hat)))


def sparsity_penalty(x_hat) -> Tensor:
    return nc.mean(nc.absolute(x_hat))


def forbidden_region_penalty(x_hat) -> Tensor:
    """Mean square of activations in cells no bond can occupy (below the diagonal)."""
    x_hat = x_hat if isinstance(x_hat, Tensor) else Tensor(x_hat)
    if x_hat.shape[-3:] != FORBIDDEN_MASK.shape:
        raise ShapeError(f"forbidden_region_penalty needs [..., 4, 16, 16], got {x_hat.shape}")
    return nc.mean(nc.square(nc.take_mask(x_hat, FORBIDDEN_MASK)))


def zfree_moment_penalty(z) -> Tensor:
    """``mean(z)**2 + (std(z) - 1)**2`` per sample, averaged over the batch."""
    z = z if isinstance(z, Tensor) else Tensor(z)
    if z.ndim == 1:
        z = nc.reshape(z, (1, z.shape[0]))
    return nc.mean(nc.moment_penalty(z))


def total_loss(batch, model: InvertibleNet, weights: LossWeights, rng: RngStream, pos_weight: float = POS_WEIGHT) -> LossBreakdown:
    """Weighted five-term objective on a batch ``(x [N,4,16,16], codes [N,128])``.

    The inverse-direction terms are evaluated on structures reconstructed
    from the binary target code and a fresh prior draw of the free latent.
    """
    x, codes = batch
    x = np.asarray(x, dtype=model.dtype)
    codes = np.asarray(codes)
    if x.ndim != 4 or x.shape[0] == 0:
        raise ShapeError(f"total_loss needs a non-empty batch [N,4,16,16], got {x.shape}")
    n = x.shape[0]

    latent = model.forward(x)
    parts = split_latent(latent)
    loss_y = distance_aware_bce(parts.y_latent, codes, pos_weight)

    z_prior = sample_zfree(rng, n, dtype=model.dtype)
    x_hat = model.inverse(merge_latent(LatentSplit(Tensor(codes.astype(model.dtype)), Tensor(z_prior))))
    terms = [
        loss_y,
        range_penalty(x_hat),
        sparsity_penalty(x_hat),
        forbidden_region_penalty(x_hat),
        zfree_moment_penalty(parts.z_free),
    ]
    total = None
    for w, t in zip(weights.as_tuple(), terms):
        contrib = nc.scale(t, w)
        total = contrib if total is None else nc.add(total, contrib)
    values = [float(t.data) for t in terms]
    return LossBreakdown(float(total.data), *values, weights=weights, tensor=total)
