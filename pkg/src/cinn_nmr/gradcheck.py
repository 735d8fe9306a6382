"""Finite-difference verification of every differentiable primitive.

Each check builds ``sum(op(inputs) * R)`` for a fixed random ``R`` in
double precision and compares analytic gradients with central differences
(step 1e-3). Inputs to piecewise-linear primitives are drawn away from the
kinks, where central differences are not a valid oracle.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import invnet
from . import loss as losses
from . import numeric as nc
from .chemdata import synth_dataset, rows_to_arrays
from .numeric import Parameter, RngStream, Tensor

TOLERANCE = 1e-4
STEP = 1e-3


def _away_from(values: np.ndarray, kinks: tuple[float, ...], gap: float = 0.05) -> np.ndarray:
    out = values.copy()
    for k in kinks:
        close = np.abs(out - k) < gap
        out[close] = k + np.where(out[close] >= k, gap, -gap)
    return out


def _weighted_sum(out: Tensor, weights: np.ndarray) -> Tensor:
    return nc.sum_all(nc.mul(out, Tensor(weights.reshape(out.shape))))


def _check(make_inputs, op: Callable[..., Tensor], rng: np.random.Generator, max_coords: int | None = None) -> float:
    inputs = [Parameter(a, dtype=np.float64) for a in make_inputs(rng)]
    with nc.no_grad():
        shape = op(*inputs).shape
    weights = rng.standard_normal(shape)
    return nc.finite_difference_check(
        lambda: _weighted_sum(op(*inputs), weights), inputs, step=STEP, max_coords=max_coords, rng=rng
    )


def _primitive_checks(rng: np.random.Generator) -> dict[str, float]:
    std = rng.standard_normal
    mask = rng.random((3, 4)) < 0.5
    mask[0, 0] = True
    bce_target = losses.smear_target(rng.random((4, 8)) < 0.2)
    checks: dict[str, tuple] = {
        "conv2d": (lambda r: [std((2, 4, 4)), std((3, 2, 3, 3)), std(3)], nc.conv2d),
        "conv2d_1x1": (lambda r: [std((2, 4, 1, 1)), std((3, 4, 3, 3)), std(3)], nc.conv2d),
        "relu": (lambda r: [_away_from(std(20), (0.0,))], nc.relu),
        "sigmoid": (lambda r: [3 * std(20)], nc.sigmoid),
        "add": (lambda r: [std(10), std(10)], nc.add),
        "sub": (lambda r: [std(10), std(10)], nc.sub),
        "mul": (lambda r: [std(10), std(10)], nc.mul),
        "scale": (lambda r: [std(10)], lambda a: nc.scale(a, -1.7)),
        "abs": (lambda r: [_away_from(std(20), (0.0,))], nc.absolute),
        "square": (lambda r: [std(10)], nc.square),
        "clamp01_violation": (lambda r: [_away_from(1.5 * std(30) + 0.5, (0.0, 1.0))], nc.clamp01_violation),
        "reshape": (lambda r: [std((2, 3, 4))], lambda a: nc.reshape(a, (6, 4))),
        "concat": (lambda r: [std((2, 3)), std((2, 2))], lambda a, b: nc.concat([a, b], axis=1)),
        "channel_slice": (lambda r: [std((2, 6, 2))], lambda a: nc.channel_slice(a, 1, 4)),
        "take_mask": (lambda r: [std((2, 3, 4))], lambda a: nc.take_mask(a, mask)),
        "mean": (lambda r: [std((3, 5))], lambda a: nc.mean(a, axis=1)),
        "sum": (lambda r: [std((3, 5))], lambda a: nc.reshape(nc.sum_all(a), (1,))),
        "bce_with_logits": (
            lambda r: [3 * std((4, 8))],
            lambda a: nc.bce_with_logits(a, bce_target, 4.0),
        ),
        "moment_penalty": (lambda r: [0.7 * std((3, 16)) + 0.2], nc.moment_penalty),
        "psi": (lambda r: [std((2, 3, 4, 4))], invnet.psi_forward),
        "psi_inverse": (lambda r: [std((2, 8, 2, 2))], invnet.psi_inverse),
    }
    return {name: _check(make, op, rng) for name, (make, op) in checks.items()}


def _jitter_biases(params: dict[str, Parameter], rng: np.random.Generator) -> None:
    # zero biases on sparse binary input put pre-activations exactly on the relu kink
    for name, p in params.items():
        if name.endswith("bias"):
            p.data[...] = 0.1 * rng.standard_normal(p.shape)


def _block_checks(rng: np.random.Generator) -> dict[str, float]:
    results = {}
    block = invnet.CouplingBlock.create(4, 4, RngStream(int(rng.integers(2**31))), np.float64, zero_init_residual=False)
    _jitter_biases(block.parameters(), rng)
    params = list(block.parameters().values())
    for name, fn in (("coupling_forward", invnet.coupling_forward), ("coupling_inverse", invnet.coupling_inverse)):
        x = Parameter(rng.standard_normal((2, 8, 4, 4)))
        weights = rng.standard_normal((2, 8, 4, 4))
        results[name] = nc.finite_difference_check(
            lambda: _weighted_sum(fn(x, block), weights), [x, *params], step=STEP, max_coords=40, rng=rng
        )
    return results


def _network_checks(seed: int, rng: np.random.Generator, max_coords: int) -> dict[str, float]:
    net = invnet.InvertibleNet(blocks_per_stage=1, seed=seed, dtype=np.float64, zero_init_residual=False, gain=0.5)
    _jitter_biases(net.named_parameters(), rng)
    params = net.parameters()
    rows = synth_dataset(2, seed)
    x, codes = rows_to_arrays(rows)
    x = x.astype(np.float64)
    results = {}

    w_lat = rng.standard_normal((2, invnet.LATENT_DIM))
    results["net_forward"] = nc.finite_difference_check(
        lambda: _weighted_sum(net.forward(x), w_lat), params, step=STEP, max_coords=max_coords, rng=rng
    )
    latent = rng.standard_normal((2, invnet.LATENT_DIM))
    w_x = rng.standard_normal((2, 4, 16, 16))
    results["net_inverse"] = nc.finite_difference_check(
        lambda: _weighted_sum(net.inverse(latent), w_x), params, step=STEP, max_coords=max_coords, rng=rng
    )

    y_logits = Parameter(2 * rng.standard_normal((2, 128)))
    results["distance_aware_bce"] = nc.finite_difference_check(
        lambda: losses.distance_aware_bce(y_logits, codes), [y_logits], step=STEP, rng=rng
    )

    weights = losses.LossWeights(1.0, 1.0, 0.1, 0.1, 0.1)

    def objective():
        return losses.total_loss((x, codes), net, weights, RngStream(seed)).tensor

    results["total_loss"] = nc.finite_difference_check(objective, params, step=STEP, max_coords=max_coords, rng=rng)
    return results


def run_gradchecks(seed: int = 0, max_coords: int = 6) -> dict[str, float]:
    """Worst relative error per component; all should be <= ``TOLERANCE``."""
    rng = np.random.default_rng(seed)
    results = _primitive_checks(rng)
    results.update(_block_checks(rng))
    results.update(_network_checks(seed, rng, max_coords))
    return results


def format_table(results: dict[str, float]) -> str:
    width = max(len(k) for k in results)
    lines = [f"{name.ljust(width)}  {err:.3e}  {'ok' if err <= TOLERANCE else 'FAIL'}" for name, err in results.items()]
    return "\n".join(lines) + "\n"
