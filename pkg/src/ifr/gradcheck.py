"""Validation harness for the implicit gradients.

Two independent oracles check ifr_backward on randomly drawn contractive
blocks: central finite differences through a tightly-converged forward
solve, and reverse accumulation through a long explicit unroll. Errors are
reported as guarded relative errors: |a - b| / max(|a|, |b|, floor), with
the floor tied to the overall gradient magnitude so leaves whose true
gradient is structurally zero (for example conv biases swallowed by the
following group norm) do not produce 0/0 noise.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .blocks import (
    SHORTCUT_CONV,
    DoubleResidualParams,
    init_double_residual,
    unrolled_shared_vjp,
)
from .implicit import ifr_backward, ifr_forward
from .rng import CounterRng
from .solver import SolverConfig

FD_TOLERANCE = 1e-4
UNROLL_TOLERANCE = 1e-3

# relative-error floor as a fraction of the largest gradient coordinate
_FLOOR_FRACTION = 1e-6


def guarded_max_rel_error(
    approx: dict[str, np.ndarray], reference: dict[str, np.ndarray]
) -> float:
    """Max over coordinates of |a - r| / max(|a|, |r|, floor)."""
    scale = 0.0
    for name in reference:
        scale = max(scale, float(np.abs(reference[name]).max(initial=0.0)))
        scale = max(scale, float(np.abs(approx[name]).max(initial=0.0)))
    floor = max(_FLOOR_FRACTION * scale, 1e-300)
    worst = 0.0
    for name in reference:
        a, r = approx[name], reference[name]
        denom = np.maximum(np.maximum(np.abs(a), np.abs(r)), floor)
        worst = max(worst, float((np.abs(a - r) / denom).max(initial=0.0)))
    return worst


def contractive_block(
    seed: int,
    channels: int = 8,
    weight_norm: bool = True,
) -> DoubleResidualParams:
    """A randomly initialized block whose map h -> F(h; x) contracts.

    The final group-norm scale and the 1x1-conv shortcut gain are drawn
    small enough that the block Jacobian stays well inside the unit disc.
    """
    rng = CounterRng(seed)
    gn2_scale = 0.1 + 0.15 * rng.uniform()
    shortcut_gain = 0.2 + 0.2 * rng.uniform()
    return init_double_residual(
        rng.split(1),
        channels,
        channels,
        shortcut_mode=SHORTCUT_CONV,
        weight_norm=weight_norm,
        gn2_scale_init=gn2_scale,
        shortcut_gain_init=shortcut_gain,
    )


def _leaf_dict(grads) -> dict[str, np.ndarray]:
    return {name: arr for name, arr in grads.leaf_items()}


@dataclass
class GradCheckResult:
    fd_rel_error: float
    unroll_rel_error: float


def check_block_gradients(
    p: DoubleResidualParams,
    x: np.ndarray,
    upstream: np.ndarray,
    solver_cfg: SolverConfig,
    fd_eps: float = 1e-5,
    fd_coords_per_leaf: int = 3,
    unroll_steps: int = 200,
    coord_seed: int = 0,
    break_vjp: bool = False,
) -> GradCheckResult:
    """Compare ifr_backward against both oracles for the loss <upstream, H*>.

    Finite differences are evaluated on a deterministic random subset of
    coordinates per leaf (full sweeps are quadratic in parameter count);
    the unroll comparison covers every coordinate. break_vjp is a negative
    control that corrupts the implicit gradients before comparison.
    """
    rec = ifr_forward(p, x, solver_cfg)
    back = ifr_backward(rec, upstream, solver_cfg)
    implicit_grads = _leaf_dict(back.d_params)
    implicit_grads["input"] = back.d_x
    if break_vjp:
        implicit_grads = {k: v * 1.5 + 0.1 for k, v in implicit_grads.items()}

    tight = SolverConfig(max_iters=80, rel_tol=1e-13)

    def solved_loss() -> float:
        return float(np.sum(upstream * ifr_forward(p, x, tight).equilibrium))

    coord_rng = CounterRng(coord_seed)
    leaves = dict(p.leaf_items())
    leaves["input"] = x
    fd_sub: dict[str, np.ndarray] = {}
    implicit_sub: dict[str, np.ndarray] = {}
    for name, arr in leaves.items():
        flat = arr.reshape(-1)
        n = min(fd_coords_per_leaf, flat.size)
        picks = sorted(
            set(int(i) for i in np.atleast_1d(coord_rng.integers(0, flat.size, (n,))))
        )
        fd_vals, an_vals = [], []
        gflat = implicit_grads[name].reshape(-1)
        for i in picks:
            orig = flat[i]
            flat[i] = orig + fd_eps
            up = solved_loss()
            flat[i] = orig - fd_eps
            down = solved_loss()
            flat[i] = orig
            fd_vals.append((up - down) / (2.0 * fd_eps))
            an_vals.append(float(gflat[i]))
        fd_sub[name] = np.array(fd_vals)
        implicit_sub[name] = np.array(an_vals)
    fd_err = guarded_max_rel_error(implicit_sub, fd_sub)

    dx_unroll, grads_unroll = unrolled_shared_vjp(p, x, unroll_steps, upstream)
    reference = _leaf_dict(grads_unroll)
    reference["input"] = dx_unroll
    unroll_err = guarded_max_rel_error(implicit_grads, reference)
    return GradCheckResult(fd_rel_error=fd_err, unroll_rel_error=unroll_err)


def run_grad_check(
    trials: int,
    channels: int = 8,
    spatial: int = 6,
    budget: int = 15,
    seed: int = 0,
    break_vjp: bool = False,
) -> GradCheckResult:
    """Worst-case errors over `trials` random contractive blocks."""
    if trials < 1:
        raise ValueError("trials must be >= 1")
    solver_cfg = SolverConfig(max_iters=budget, rel_tol=1e-10)
    worst_fd = worst_unroll = 0.0
    for t in range(trials):
        block_seed = 1_000 * (seed + 1) + t
        p = contractive_block(block_seed, channels)
        data_rng = CounterRng(block_seed).split(2)
        x = data_rng.normal((channels, spatial, spatial))
        upstream = data_rng.normal((channels, spatial, spatial))
        result = check_block_gradients(
            p, x, upstream, solver_cfg, coord_seed=block_seed, break_vjp=break_vjp
        )
        worst_fd = max(worst_fd, result.fd_rel_error)
        worst_unroll = max(worst_unroll, result.unroll_rel_error)
    return GradCheckResult(fd_rel_error=worst_fd, unroll_rel_error=worst_unroll)
