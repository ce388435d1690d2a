"""Loss, SGD-with-momentum schedule, and the strategy-comparison training loop.

The loop is single threaded and bit-deterministic for a fixed seed: batch
order comes from a counter-based stream, parameter initialization from split
substreams, and all arithmetic is float64. The implicit strategy trains
through ifr_forward / ifr_backward; the explicit and unrolled strategies
backpropagate through their finite computation graphs.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import blocks
from .blocks import EXPLICIT, IMPLICIT, UNROLLED, HeadConfig, HeadGrads, HeadParams
from .data import Sample
from .implicit import ifr_backward, ifr_forward
from .ops import ShapeError, floor_direction_norms
from .rng import CounterRng
from .solver import SolverConfig

_INIT_TAG = 11
_BATCH_TAG = 23

GRAD_CLIP_NORM = 10.0


class TrainingAbortedError(RuntimeError):
    """Persistent solver divergence made further training pointless."""


@dataclass
class TrainConfig:
    base_lr: float = 0.01
    momentum: float = 0.9
    total_iters: int = 9_000
    decay_points: tuple[int, ...] = (6_000, 8_000)
    decay_factor: float = 0.1
    warmup_iters: int = 100
    batch_size: int = 16
    seed: int = 0

    def __post_init__(self):
        self.decay_points = tuple(int(p) for p in self.decay_points)
        if self.total_iters < 0 or self.warmup_iters < 0 or self.batch_size < 1:
            raise ValueError("total_iters/warmup_iters must be >= 0, batch_size >= 1")
        if any(b <= a for a, b in zip(self.decay_points, self.decay_points[1:])):
            raise ValueError("decay_points must be strictly increasing")
        if self.decay_points:
            if self.decay_points[-1] >= self.total_iters:
                raise ValueError("decay_points must lie before total_iters")
            if self.warmup_iters >= self.decay_points[0]:
                raise ValueError("warmup must end before the first decay point")


@dataclass
class TrainState:
    params: HeadParams
    momentum: dict[str, np.ndarray]
    momentum_coef: float
    iteration: int = 0
    loss_history: list[float] = field(default_factory=list)
    solver_health: list[float] = field(default_factory=list)
    skipped_steps: int = 0
    head_cfg: Optional[HeadConfig] = None
    solver_cfg: Optional[SolverConfig] = None


@dataclass
class EvalMetrics:
    mean_iou: float
    pixel_accuracy: float
    mean_loss: float


# ---------------------------------------------------------------------------
# loss and schedule


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def bce_mask_loss(logits: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean per-pixel binary cross-entropy with logits; returns (loss, dLogits)."""
    if logits.shape != target.shape:
        raise ShapeError(f"logits shape {logits.shape} != target shape {target.shape}")
    if not np.all((target == 0.0) | (target == 1.0)):
        raise ValueError("target entries must be exactly 0 or 1")
    n = logits.size
    # log(1 + e^z) - z t, computed as max(z,0) - z t + log1p(e^-|z|)
    per_pixel = np.maximum(logits, 0.0) - logits * target + np.log1p(np.exp(-np.abs(logits)))
    loss = float(per_pixel.sum() / n)
    grad = (_sigmoid(logits) - target) / n
    return loss, grad


def lr_at(cfg: TrainConfig, iteration: int) -> float:
    """Linear warmup from 0.1x base, then x decay_factor at each decay point."""
    if iteration < 0 or iteration >= cfg.total_iters:
        raise ValueError(f"iteration {iteration} outside [0, {cfg.total_iters})")
    if cfg.warmup_iters > 0 and iteration < cfg.warmup_iters:
        lr = cfg.base_lr * (0.1 + 0.9 * iteration / cfg.warmup_iters)
    else:
        lr = cfg.base_lr
    for point in cfg.decay_points:
        if iteration >= point:
            lr *= cfg.decay_factor
    return lr


# ---------------------------------------------------------------------------
# SGD


def apply_sgd(
    param_items: list[tuple[str, np.ndarray]],
    grad_items: list[tuple[str, np.ndarray]],
    buffers: dict[str, np.ndarray],
    momentum_coef: float,
    lr: float,
) -> None:
    """In-place classical momentum update: buf = m*buf + g; p -= lr*buf."""
    for (name, param), (gname, grad) in zip(param_items, grad_items):
        if name != gname or param.shape != grad.shape:
            raise ShapeError(f"gradient leaf {gname!r} does not match parameter {name!r}")
        buf = buffers.get(name)
        if buf is None:
            buf = buffers[name] = np.zeros_like(param)
        buf *= momentum_coef
        buf += grad
        param -= lr * buf


def grads_finite(grads) -> bool:
    return all(np.all(np.isfinite(arr)) for _, arr in grads.leaf_items())


def clip_global_norm(grads, max_norm: float) -> float:
    total = 0.0
    for _, arr in grads.leaf_items():
        total += float(np.sum(arr * arr))
    norm = float(np.sqrt(total))
    if norm > max_norm:
        factor = max_norm / norm
        for _, arr in grads.leaf_items():
            arr *= factor
    return norm


def sgd_step(state: TrainState, grads: HeadGrads, lr: float) -> TrainState:
    """One momentum-SGD update; skips (and counts) non-finite gradients."""
    if not grads_finite(grads):
        state.skipped_steps += 1
        return state
    apply_sgd(
        list(state.params.leaf_items()),
        list(grads.leaf_items()),
        state.momentum,
        state.momentum_coef,
        lr,
    )
    for stage in state.params.stages:
        floor_direction_norms(stage.w1.direction)
        floor_direction_norms(stage.w2.direction)
        if stage.shortcut is not None:
            floor_direction_norms(stage.shortcut.direction)
    floor_direction_norms(state.params.predictor.deconv.direction)
    floor_direction_norms(state.params.predictor.proj.direction)
    if state.head_cfg is not None:
        apply_stability_caps(state.params, state.head_cfg)
    return state


def apply_stability_caps(params: HeadParams, cfg: HeadConfig) -> None:
    """Clamp the contraction-controlling magnitudes configured on the head."""
    from .ops import effective_kernel

    for stage in params.stages:
        if cfg.gn2_scale_cap is not None:
            np.clip(stage.gn2.scale, -cfg.gn2_scale_cap, cfg.gn2_scale_cap,
                    out=stage.gn2.scale)
        if cfg.shortcut_gain_cap is not None and stage.shortcut is not None:
            cap = cfg.shortcut_gain_cap
            c = stage.shortcut.out_channels
            matrix = effective_kernel(stage.shortcut).reshape(c, c)
            top_sv = float(np.linalg.svd(matrix, compute_uv=False)[0])
            if top_sv > cap:
                factor = cap / top_sv
                if stage.shortcut.weight_norm_enabled:
                    stage.shortcut.gain *= factor
                else:
                    stage.shortcut.direction *= factor


# ---------------------------------------------------------------------------
# head dispatch


def solver_config_for(head_cfg: HeadConfig, base: Optional[SolverConfig]) -> SolverConfig:
    """Solver settings for a head; the implicit budget comes from the head config."""
    cfg = base if base is not None else SolverConfig()
    if head_cfg.strategy == IMPLICIT:
        if head_cfg.depth_or_budget < 1:
            raise ValueError("implicit strategy needs a solver budget >= 1")
        cfg = replace(cfg, max_iters=head_cfg.depth_or_budget)
    return cfg


def _refine_forward(params: HeadParams, cfg: HeadConfig, solver_cfg: SolverConfig, x):
    """Returns (refined, ctx, converged, diverged)."""
    if cfg.strategy == EXPLICIT:
        h, tapes = blocks.stacked_head_tapes(params.stages, x)
        return (x.copy() if not params.stages else h), tapes, True, False
    if cfg.strategy == UNROLLED:
        h, tapes = blocks.unrolled_shared_tapes(params.stages[0], x, cfg.depth_or_budget)
        return h, tapes, True, False
    rec = ifr_forward(params.stages[0], x, solver_cfg)
    diverged = bool(rec.forward_result.note)
    return rec.equilibrium, rec, rec.forward_result.converged, diverged


def _refine_vjp(params: HeadParams, cfg: HeadConfig, solver_cfg: SolverConfig, ctx, x, d_h):
    if cfg.strategy == EXPLICIT:
        dx, stage_grads = blocks.stacked_head_vjp(params.stages, x, d_h, tapes=ctx)
        return stage_grads, dx
    if cfg.strategy == UNROLLED:
        dx, grads = blocks.unrolled_shared_vjp(
            params.stages[0], x, cfg.depth_or_budget, d_h, tapes=ctx
        )
        return [grads], dx
    result = ifr_backward(ctx, d_h, solver_cfg)
    return [result.d_params], result.d_x


def sample_loss_and_grads(
    params: HeadParams, cfg: HeadConfig, solver_cfg: SolverConfig, sample: Sample
) -> tuple[float, HeadGrads, bool, bool]:
    """Forward + backward for one sample: (loss, grads, converged, diverged)."""
    h, ctx, converged, diverged = _refine_forward(params, cfg, solver_cfg, sample.feature)
    logits = blocks.mask_predictor_forward(params.predictor, h)
    loss, d_logits = bce_mask_loss(logits, sample.mask)
    d_h, pred_grads = blocks.mask_predictor_vjp(params.predictor, h, d_logits)
    stage_grads, _ = _refine_vjp(params, cfg, solver_cfg, ctx, sample.feature, d_h)
    return loss, HeadGrads(stage_grads, pred_grads), converged, diverged


def init_train_state(
    head_cfg: HeadConfig, train_cfg: TrainConfig, solver_cfg: Optional[SolverConfig] = None
) -> TrainState:
    rng = CounterRng(train_cfg.seed).split(_INIT_TAG)
    params = blocks.init_head(rng, head_cfg)
    return TrainState(
        params=params,
        momentum={},
        momentum_coef=train_cfg.momentum,
        head_cfg=head_cfg,
        solver_cfg=solver_config_for(head_cfg, solver_cfg),
    )


# ---------------------------------------------------------------------------
# evaluation


def evaluate(state: TrainState, dataset: list[Sample]) -> EvalMetrics:
    """Mean mask IoU at threshold 0.5 (logits > 0), pixel accuracy, mean loss."""
    if not dataset:
        raise ValueError("cannot evaluate on an empty dataset")
    if state.head_cfg is None or state.solver_cfg is None:
        raise ValueError("train state carries no head/solver configuration")
    iou_total = acc_total = loss_total = 0.0
    for sample in dataset:
        h, _, _, _ = _refine_forward(state.params, state.head_cfg, state.solver_cfg, sample.feature)
        logits = blocks.mask_predictor_forward(state.params.predictor, h)
        loss, _ = bce_mask_loss(logits, sample.mask)
        loss_total += loss
        pred = logits > 0.0
        truth = sample.mask > 0.5
        inter = float(np.sum(pred & truth))
        union = float(np.sum(pred | truth))
        iou_total += 1.0 if union == 0 else inter / union
        acc_total += float(np.mean(pred == truth))
    n = len(dataset)
    return EvalMetrics(iou_total / n, acc_total / n, loss_total / n)


# ---------------------------------------------------------------------------
# training loop


def train(
    head_cfg: HeadConfig,
    train_cfg: TrainConfig,
    dataset: list[Sample],
    solver_cfg: Optional[SolverConfig] = None,
    holdout_fraction: float = 0.2,
    log_every: int = 100,
) -> tuple[TrainState, list[dict]]:
    """Run the full schedule; returns final state and periodic metric rows.

    The dataset tail (holdout_fraction of it) is held out for IoU logging.
    Aborts if more than half the forward solves in a logging window diverge.
    """
    if not dataset:
        raise ValueError("dataset must be non-empty")
    n_holdout = max(1, int(round(len(dataset) * holdout_fraction)))
    n_train = len(dataset) - n_holdout
    if n_train < 1 and train_cfg.total_iters > 0:
        raise ValueError("dataset too small to split into train and holdout")
    train_set, holdout_set = dataset[:n_train], dataset[n_train:]

    state = init_train_state(head_cfg, train_cfg, solver_cfg)
    solver = state.solver_cfg
    batch_rng = CounterRng(train_cfg.seed).split(_BATCH_TAG)

    metrics: list[dict] = []
    window_losses: list[float] = []
    window_converged = 0
    window_diverged = 0
    window_solves = 0

    for it in range(train_cfg.total_iters):
        lr = lr_at(train_cfg, it)
        idx = batch_rng.integers(0, n_train, (train_cfg.batch_size,))
        total_grads: Optional[HeadGrads] = None
        batch_loss = 0.0
        for j in np.atleast_1d(idx):
            loss, grads, converged, diverged = sample_loss_and_grads(
                state.params, head_cfg, solver, train_set[int(j)]
            )
            batch_loss += loss
            window_solves += 1
            window_converged += int(converged)
            window_diverged += int(diverged)
            if total_grads is None:
                total_grads = grads
            else:
                total_grads.iadd(grads)
        assert total_grads is not None
        batch_loss /= train_cfg.batch_size
        for _, arr in total_grads.leaf_items():
            arr /= train_cfg.batch_size
        clip_global_norm(total_grads, GRAD_CLIP_NORM)
        sgd_step(state, total_grads, lr)
        state.iteration = it + 1
        state.loss_history.append(batch_loss)
        window_losses.append(batch_loss)

        if (it + 1) % log_every == 0 or it + 1 == train_cfg.total_iters:
            held = evaluate(state, holdout_set)
            frac = window_converged / max(window_solves, 1)
            state.solver_health.append(frac)
            metrics.append(
                {
                    "iter": it + 1,
                    "lr": lr,
                    "loss": float(np.mean(window_losses)),
                    "held_out_iou": held.mean_iou,
                    "solver_converged_frac": frac,
                }
            )
            if window_solves and window_diverged / window_solves > 0.5:
                raise TrainingAbortedError(
                    f"{window_diverged}/{window_solves} forward solves diverged "
                    f"in the window ending at iteration {it + 1}"
                )
            window_losses = []
            window_converged = window_diverged = window_solves = 0

    return state, metrics
