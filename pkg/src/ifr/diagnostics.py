"""Convergence analysis of the weight-tied refinement iteration.

Three probes: the long-unroll norm-difference trace, a power-iteration
estimate of the spectral radius of dF/dh (via central-difference
Jacobian-vector products), and the gap between the solver equilibrium and a
long explicit unroll.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .blocks import (
    DivergenceError,
    DoubleResidualParams,
    block_apply_factory,
    double_residual_forward,
)
from .implicit import ifr_forward
from .rng import CounterRng
from .solver import SolverConfig

_GROWTH_GUARD = 1e6


@dataclass
class ConvergenceReport:
    norm_diff_trace: list[float]
    spectral_radius_estimates: list[float]
    implicit_gap: float
    steps: int
    diverged: bool = False
    note: str = ""


def unroll_convergence(
    p: DoubleResidualParams,
    x: np.ndarray,
    steps: int,
    probe_steps: Sequence[int] = (),
    probes: int = 3,
    power_iters: int = 60,
    seed: int = 0,
) -> ConvergenceReport:
    """Iterate h <- F(h; x) for `steps`, recording step-size norms.

    Optionally estimates the spectral radius of dF/dh at the iterates whose
    indices appear in probe_steps. The trace is truncated with an annotation
    if an iterate goes non-finite or the step size outgrows its start by a
    large factor.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    probe_set = set(int(s) for s in probe_steps)
    apply = block_apply_factory(p, x)
    h = np.zeros_like(x)
    trace: list[float] = []
    radius_estimates: list[float] = []
    diverged = False
    note = ""
    for i in range(steps):
        if i in probe_set:
            radius_estimates.append(
                spectral_radius(p, x, h, probes=probes, power_iters=power_iters, seed=seed + i)
            )
        h_next = apply(h)
        if not np.isfinite(h_next.sum()):
            diverged = True
            note = f"non-finite iterate at step {i}"
            break
        diff = float(np.linalg.norm(h_next - h))
        trace.append(diff)
        h = h_next
        if trace[0] > 0 and diff > _GROWTH_GUARD * trace[0]:
            diverged = True
            note = f"step size grew {_GROWTH_GUARD:.0e}-fold by step {i}"
            break
    return ConvergenceReport(
        norm_diff_trace=trace,
        spectral_radius_estimates=radius_estimates,
        implicit_gap=float("nan"),
        steps=len(trace),
        diverged=diverged,
        note=note,
    )


def estimate_spectral_radius(
    apply_jacobian: Callable[[np.ndarray], np.ndarray],
    shape: tuple[int, ...],
    probes: int = 4,
    power_iters: int = 60,
    seed: int = 0,
    ratio_window: int = 12,
) -> float:
    """Dominant |eigenvalue| of a linear operator by power iteration.

    Growth ratios |J v_k| are averaged geometrically over a trailing window
    so complex-conjugate dominant pairs (whose ratios oscillate) still give
    the modulus. Returns the max over independent probe vectors.
    """
    if probes < 1 or power_iters < 2:
        raise ValueError("need probes >= 1 and power_iters >= 2")
    rng = CounterRng(seed)
    best = 0.0
    for probe in range(probes):
        v = rng.split(probe).normal(shape)
        norm = np.linalg.norm(v)
        ratios: list[float] = []
        attempts = 0
        k = 0
        while k < power_iters:
            if norm < 1e-300:
                # collapsed onto the null space: re-probe from a fresh vector
                attempts += 1
                if attempts > 8:
                    break
                v = rng.split(1009 * (probe + 1) + attempts).normal(shape)
                norm = np.linalg.norm(v)
                ratios = []
                continue
            v = v / norm
            w = apply_jacobian(v)
            norm = float(np.linalg.norm(w))
            ratios.append(norm)
            v = w
            k += 1
        if not ratios:
            continue
        tail = ratios[-min(ratio_window, len(ratios)) :]
        positive = [r for r in tail if r > 0]
        if not positive:
            continue
        est = float(np.exp(np.mean(np.log(positive))))
        best = max(best, est)
    return best


def block_jacobian_apply(
    p: DoubleResidualParams, x: np.ndarray, h: np.ndarray, eps_scale: float = 1e-5
) -> Callable[[np.ndarray], np.ndarray]:
    """Central-difference JVP of h -> F(h; x) at the point (h, x)."""
    base_scale = float(np.linalg.norm(h)) + 1.0

    def apply(v: np.ndarray) -> np.ndarray:
        vnorm = float(np.linalg.norm(v))
        if vnorm == 0.0:
            return np.zeros_like(v)
        eps = eps_scale * base_scale
        unit = v / vnorm
        up = double_residual_forward(p, h + eps * unit, x)
        down = double_residual_forward(p, h - eps * unit, x)
        return (up - down) * (vnorm / (2.0 * eps))

    return apply


def spectral_radius(
    p: DoubleResidualParams,
    x: np.ndarray,
    h: np.ndarray,
    probes: int = 4,
    power_iters: int = 60,
    seed: int = 0,
) -> float:
    """Spectral radius estimate of dF/dh at (h, x)."""
    if h.shape != x.shape:
        raise ValueError(f"h shape {h.shape} != x shape {x.shape}")
    return estimate_spectral_radius(
        block_jacobian_apply(p, x, h), h.shape, probes=probes, power_iters=power_iters, seed=seed
    )


def implicit_gap(
    p: DoubleResidualParams, x: np.ndarray, cfg: SolverConfig, steps: int
) -> float:
    """Max-abs difference between the solver equilibrium and a `steps` unroll."""
    rec = ifr_forward(p, x, cfg)
    apply = block_apply_factory(p, x)
    h = np.zeros_like(x)
    for i in range(steps):
        h = apply(h)
        if not np.isfinite(h.sum()):
            raise DivergenceError(f"unroll non-finite at step {i}", step=i)
    return float(np.max(np.abs(rec.equilibrium - h)))
