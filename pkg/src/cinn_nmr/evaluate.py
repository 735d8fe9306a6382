"""Metrics: code F1, invertibility, free-latent statistics, perturbation
sensitivity of the inverse map, and count correlations of generated structures."""

from __future__ import annotations

import hashlib
import io
from dataclasses import asdict, dataclass, fields
from typing import Sequence

import numpy as np

from .chemdata import N_CODE
from .invnet import InvertibleNet, LatentSplit, Y_DIM, Z_DIM, merge_latent, sample_zfree, split_latent
from .numeric import RngStream, no_grad

AROMATIC_CHANNEL = 3


class MetricError(ValueError):
    """A metric is undefined for the supplied data."""


@dataclass(frozen=True)
class PerturbationConfig:
    epsilon: float = 0.1
    n_noise: int = 8
    n_prior: int = 8
    seed: int = 0

    def __post_init__(self):
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")
        if self.n_noise < 1 or self.n_prior < 1:
            raise ValueError("draw counts must be >= 1")

    @property
    def dim(self) -> int:
        return Z_DIM


# --------------------------------------------------------------------------
# F1


def _sigmoid(v):
    return 1.0 / (1.0 + np.exp(-np.clip(v, -500, 500)))


def binarize_logits(logits: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """Strict ``sigmoid(logit) > threshold``; a logit of exactly 0 maps to 0."""
    return (_sigmoid(np.asarray(logits, dtype=np.float64)) > threshold).astype(np.uint8)


def f1_bits(pred, target, threshold: float = 0.5, from_logits: bool = True) -> float:
    """Micro-averaged F1 over every bit of every sample."""
    pred = np.asarray(pred)
    target = np.asarray(target)
    if pred.shape != target.shape:
        raise ValueError(f"prediction shape {pred.shape} != target shape {target.shape}")
    p = binarize_logits(pred, threshold) if from_logits else (pred > threshold)
    t = target != 0
    p = p != 0
    tp = int(np.sum(p & t))
    fp = int(np.sum(p & ~t))
    fn = int(np.sum(~p & t))
    denom = 2 * tp + fp + fn
    return 0.0 if denom == 0 else 2 * tp / denom


# --------------------------------------------------------------------------
# invertibility and latent statistics


def _forward(net: InvertibleNet, x: np.ndarray) -> np.ndarray:
    with no_grad():
        return net.forward(np.asarray(x, dtype=net.dtype)).data


def _inverse(net: InvertibleNet, latent: np.ndarray) -> np.ndarray:
    with no_grad():
        return net.inverse(np.asarray(latent, dtype=net.dtype)).data


def reconstruction_error(net: InvertibleNet, x: np.ndarray) -> tuple[float, float]:
    """(mean of per-row mean abs error, global max abs error) of inverse(forward(x))."""
    x = np.asarray(x, dtype=net.dtype)
    err = np.abs(_inverse(net, _forward(net, x)) - x).reshape(len(x), -1)
    return float(err.mean(axis=1).mean()), float(err.max())


def zfree_stats(net: InvertibleNet, x: np.ndarray) -> tuple[float, float, float, float]:
    """(mean, std) over samples of the per-sample z mean, then of the per-sample z std."""
    if len(x) < 2:
        raise MetricError("zfree_stats needs at least 2 rows")
    z = split_latent(_forward(net, x)).z_free.astype(np.float64)
    means = z.mean(axis=1)
    stds = z.std(axis=1)
    return float(means.mean()), float(means.std()), float(stds.mean()), float(stds.std())


# --------------------------------------------------------------------------
# perturbation sensitivity


def _l1_rows(a: np.ndarray) -> np.ndarray:
    return np.abs(a.astype(np.float64)).reshape(len(a), -1).sum(axis=1)


def row_keys(x: np.ndarray, codes: np.ndarray | None = None) -> list[int]:
    """Content hash per row, so each row's random draws do not depend on its position."""
    keys = []
    for i in range(len(x)):
        h = hashlib.blake2b(np.ascontiguousarray(x[i], dtype=np.float32).tobytes(), digest_size=8)
        if codes is not None:
            h.update(np.ascontiguousarray(codes[i], dtype=np.uint8).tobytes())
        keys.append(int.from_bytes(h.digest(), "little"))
    return keys


def _noise(cfg: PerturbationConfig, tag: int, keys: Sequence[int], draw: tuple[int, ...], dtype) -> np.ndarray:
    root = RngStream(cfg.seed)
    return np.stack([root.substream(tag, k, *draw).normal(Z_DIM, dtype=dtype) for k in keys])


def cd_local_draws(net: InvertibleNet, x: np.ndarray, cfg: PerturbationConfig) -> np.ndarray:
    """Per (row, draw) l1 change of the reconstruction when z_i gets eps * xi noise."""
    x = np.asarray(x, dtype=net.dtype)
    parts = split_latent(_forward(net, x))
    base = _inverse(net, merge_latent(parts))
    rows = row_keys(x)
    out = np.empty((len(x), cfg.n_noise))
    for k in range(cfg.n_noise):
        xi = _noise(cfg, 1, rows, (k,), net.dtype)
        z = (parts.z_free + net.dtype.type(cfg.epsilon) * xi).astype(net.dtype)
        moved = _inverse(net, merge_latent(LatentSplit(parts.y_latent, z)))
        out[:, k] = _l1_rows(moved - base)
    return out


def cd_prior_draws(net: InvertibleNet, x: np.ndarray, cfg: PerturbationConfig) -> np.ndarray:
    """Per (row, prior draw, noise draw) l1 change around a prior sample of z."""
    x = np.asarray(x, dtype=net.dtype)
    y = split_latent(_forward(net, x)).y_latent
    rows = row_keys(x)
    out = np.empty((len(x), cfg.n_prior, cfg.n_noise))
    for j in range(cfg.n_prior):
        z = _noise(cfg, 2, rows, (j,), net.dtype)
        base = _inverse(net, merge_latent(LatentSplit(y, z)))
        for k in range(cfg.n_noise):
            xi = _noise(cfg, 3, rows, (j, k), net.dtype)
            moved_z = (z + net.dtype.type(cfg.epsilon) * xi).astype(net.dtype)
            moved = _inverse(net, merge_latent(LatentSplit(y, moved_z)))
            out[:, j, k] = _l1_rows(moved - base)
    return out


def cd_local(net: InvertibleNet, x: np.ndarray, cfg: PerturbationConfig) -> float:
    return float(cd_local_draws(net, x, cfg).mean())


def cd_prior(net: InvertibleNet, x: np.ndarray, cfg: PerturbationConfig) -> float:
    return float(cd_prior_draws(net, x, cfg).mean())


def reconstruction_magnitude(net: InvertibleNet, x: np.ndarray) -> float:
    """Mean l1 mass of inverse(forward(x)) over rows."""
    return float(_l1_rows(_inverse(net, _forward(net, x))).mean())


def rcd(cd_value: float, net: InvertibleNet, x: np.ndarray) -> float:
    denom = reconstruction_magnitude(net, x)
    if denom <= 0:
        raise MetricError("rCD undefined: reconstructions have zero l1 mass")
    return cd_value / denom


# --------------------------------------------------------------------------
# count correlations


def count_ones(x: np.ndarray, channel: int | None = None, threshold: float = 0.5) -> np.ndarray:
    x = np.asarray(x)
    if channel is not None:
        x = x[:, channel]
    return (x > threshold).reshape(len(x), -1).sum(axis=1)


def pearson(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    da, db = a - a.mean(), b - b.mean()
    va, vb = float(np.dot(da, da)), float(np.dot(db, db))
    if va == 0 or vb == 0:
        side = "real" if va == 0 else "reconstructed"
        raise MetricError(f"correlation undefined: {side} counts have zero variance")
    return float(np.dot(da, db) / np.sqrt(va * vb))


def generate_structures(net: InvertibleNet, codes: np.ndarray, rng: RngStream, keys: Sequence[int] | None = None) -> np.ndarray:
    """Invert ``(code, z ~ prior)`` for each code.

    With ``keys`` each row draws z from its own substream, otherwise one
    batch draw is taken from ``rng``.
    """
    codes = np.asarray(codes, dtype=net.dtype)
    if keys is None:
        z = sample_zfree(rng, len(codes), dtype=net.dtype)
    else:
        z = np.concatenate([sample_zfree(rng.substream(k), 1, dtype=net.dtype) for k in keys]) if len(keys) else np.zeros((0, Z_DIM), net.dtype)
    return _inverse(net, merge_latent(LatentSplit(codes, z)))


def count_correlation(
    x: np.ndarray, codes: np.ndarray, net: InvertibleNet, rng: RngStream, channel: int | None = None
) -> float:
    """Pearson r between 1-counts of real inputs and of structures generated from their codes."""
    if len(x) < 3:
        raise MetricError("count_correlation needs at least 3 rows")
    recon = generate_structures(net, codes, rng, keys=row_keys(x, codes))
    return pearson(count_ones(x, channel), count_ones(recon, channel))


# --------------------------------------------------------------------------
# reports


@dataclass
class MetricReport:
    f1: float
    recon_mean: float
    recon_max: float
    zfree_mean_of_means: float
    zfree_std_of_means: float
    zfree_mean_of_stds: float
    zfree_std_of_stds: float
    cd_local: float
    cd_prior: float
    rcd_local: float
    rcd_prior: float
    corr_total: float
    corr_aromatic: float

    def to_text(self) -> str:
        return "".join(f"{k}={v:.6g}\n" for k, v in asdict(self).items())

    def to_csv(self) -> str:
        names = [f.name for f in fields(self)]
        return ",".join(names) + "\n" + ",".join(f"{getattr(self, n):.6g}" for n in names) + "\n"


def _safe_correlation(*args, **kwargs) -> float:
    try:
        return count_correlation(*args, **kwargs)
    except MetricError:
        return float("nan")


def evaluate_all(net: InvertibleNet, x: np.ndarray, codes: np.ndarray, cfg: PerturbationConfig) -> MetricReport:
    """Full metric suite on one set of rows (normally the validation split).

    A count correlation with zero variance on one side is reported as nan.
    """
    logits = _forward(net, x)[:, :Y_DIM]
    recon_mean, recon_max = reconstruction_error(net, x)
    zs = zfree_stats(net, x)
    local = cd_local(net, x, cfg)
    prior = cd_prior(net, x, cfg)
    root = RngStream(cfg.seed)
    return MetricReport(
        f1=f1_bits(logits, codes),
        recon_mean=recon_mean,
        recon_max=recon_max,
        zfree_mean_of_means=zs[0],
        zfree_std_of_means=zs[1],
        zfree_mean_of_stds=zs[2],
        zfree_std_of_stds=zs[3],
        cd_local=local,
        cd_prior=prior,
        rcd_local=rcd(local, net, x),
        rcd_prior=rcd(prior, net, x),
        corr_total=_safe_correlation(x, codes, net, root.substream(7)),
        corr_aromatic=_safe_correlation(x, codes, net, root.substream(7), channel=AROMATIC_CHANNEL),
    )


def positions(bits: np.ndarray) -> str:
    return ", ".join(str(i) for i in np.flatnonzero(bits))


def code_report(net: InvertibleNet, x: np.ndarray, codes: np.ndarray, ids: Sequence[int], k: int) -> str:
    """Aligned table of set-bit positions in the real and predicted 128-bit codes."""
    if k > len(x):
        raise ValueError(f"k={k} exceeds the {len(x)} available rows")
    pred = binarize_logits(_forward(net, x[:k])[:, :N_CODE]) if k else np.zeros((0, N_CODE))
    table = [("molecule ID", "Real", "Predicted")]
    table += [(str(ids[i]), positions(codes[i]), positions(pred[i])) for i in range(k)]
    widths = [max(len(r[c]) for r in table) for c in range(3)]
    buf = io.StringIO()
    for r in table:
        buf.write("  ".join(cell.ljust(w) for cell, w in zip(r, widths)).rstrip() + "\n")
    return buf.getvalue()
