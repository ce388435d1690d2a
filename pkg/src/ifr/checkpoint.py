"""Head checkpoints on top of the tensor container format.

A checkpoint stores every parameter leaf under "param/<name>" plus the
head configuration as scalar tensors under "config/<field>", so a trained
head can be rebuilt without any sidecar file.
"""

from __future__ import annotations

import numpy as np

from .blocks import (
    SHORTCUT_CONV,
    SHORTCUT_IDENTITY,
    STRATEGIES,
    HeadConfig,
    HeadParams,
    init_head,
)
from .data import EntryMismatchError, load_container, save_container
from .rng import CounterRng

_SHORTCUT_MODES = (SHORTCUT_IDENTITY, SHORTCUT_CONV)


def _config_tensors(cfg: HeadConfig) -> dict[str, np.ndarray]:
    return {
        "config/strategy": np.array([STRATEGIES.index(cfg.strategy)], dtype=np.float64),
        "config/depth_or_budget": np.array([cfg.depth_or_budget], dtype=np.float64),
        "config/channels": np.array([cfg.channels], dtype=np.float64),
        "config/channel_multiplier": np.array([cfg.channel_multiplier], dtype=np.float64),
        "config/double_residual": np.array([float(cfg.double_residual)]),
        "config/predictor_classes": np.array([cfg.predictor_classes], dtype=np.float64),
        "config/shortcut_mode": np.array(
            [_SHORTCUT_MODES.index(cfg.shortcut_mode)], dtype=np.float64
        ),
        "config/weight_norm": np.array([float(cfg.weight_norm)]),
        "config/gn2_scale_init": np.array([cfg.gn2_scale_init]),
        "config/shortcut_gain_init": np.array([cfg.shortcut_gain_init]),
    }


def save_checkpoint(path, cfg: HeadConfig, params: HeadParams) -> None:
    tensors = _config_tensors(cfg)
    for name, arr in params.leaf_items():
        tensors[f"param/{name}"] = arr
    save_container(path, tensors)


def load_checkpoint(path) -> tuple[HeadConfig, HeadParams]:
    tensors = load_container(path)

    def scalar(name: str) -> float:
        if name not in tensors:
            raise EntryMismatchError(f"checkpoint missing {name!r}")
        return float(tensors[name].reshape(-1)[0])

    cfg = HeadConfig(
        strategy=STRATEGIES[int(scalar("config/strategy"))],
        depth_or_budget=int(scalar("config/depth_or_budget")),
        channels=int(scalar("config/channels")),
        channel_multiplier=scalar("config/channel_multiplier"),
        double_residual=bool(scalar("config/double_residual")),
        predictor_classes=int(scalar("config/predictor_classes")),
        shortcut_mode=_SHORTCUT_MODES[int(scalar("config/shortcut_mode"))],
        weight_norm=bool(scalar("config/weight_norm")),
        gn2_scale_init=scalar("config/gn2_scale_init"),
        shortcut_gain_init=scalar("config/shortcut_gain_init"),
    )
    params = init_head(CounterRng(0), cfg)
    for name, arr in params.leaf_items():
        key = f"param/{name}"
        if key not in tensors:
            raise EntryMismatchError(f"checkpoint missing parameter leaf {key!r}")
        stored = tensors[key]
        if stored.shape != arr.shape:
            raise EntryMismatchError(
                f"checkpoint leaf {key!r} has shape {stored.shape}, expected {arr.shape}"
            )
        arr[...] = stored
    return cfg, params
