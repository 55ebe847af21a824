"""Gradient-based input perturbations under an l-infinity ball: FGSM and PGD.

Attacks are generated under the model's current effective weights; a config
flag switches the gradient to the AWP-perturbed weights instead. Synthetic
inputs are unbounded reals, so the valid-range clip defaults to +-infinity.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .errors import InputError, NumericError


@dataclass(frozen=True)
class AttackConfig:
    epsilon: float
    step: float
    iters: int = 1
    clip_min: float = -math.inf
    clip_max: float = math.inf
    random_start: bool = False
    under_awp: bool = False  # take gradients on the AWP-perturbed model

    def __post_init__(self):
        if self.epsilon < 0:
            raise InputError("epsilon must be nonnegative")
        if self.step <= 0:
            raise InputError("step must be positive")
        if self.iters < 1:
            raise InputError("iters must be at least 1")


def project_linf(x_adv: np.ndarray, x_ref: np.ndarray, epsilon: float,
                 clip_min: float = -math.inf, clip_max: float = math.inf) -> np.ndarray:
    """Clamp elementwise into [x_ref - eps, x_ref + eps] intersected with the
    valid input range."""
    out = np.clip(x_adv, x_ref - epsilon, x_ref + epsilon)
    return np.clip(out, clip_min, clip_max)


def pgd(model, x: np.ndarray, y: np.ndarray, cfg: AttackConfig,
        rng: np.random.Generator | None = None) -> np.ndarray:
    """Iterated sign-gradient ascent projected onto the epsilon ball.

    With iters=1 and step=epsilon this is exactly FGSM. Random start is off
    unless requested (and then needs a generator).
    """
    x = np.asarray(x, dtype=np.float64)
    x_adv = x.copy()
    if cfg.random_start and cfg.epsilon > 0:
        if rng is None:
            raise InputError("random start needs a generator")
        x_adv = project_linf(
            x_adv + rng.uniform(-cfg.epsilon, cfg.epsilon, size=x.shape),
            x, cfg.epsilon, cfg.clip_min, cfg.clip_max,
        )
    for _ in range(cfg.iters):
        _, grad = model.loss_and_input_grad(x_adv, y, include_awp=cfg.under_awp)
        if not np.isfinite(grad).all():
            raise NumericError("non-finite input gradient during attack")
        x_adv = project_linf(
            x_adv + cfg.step * np.sign(grad),
            x, cfg.epsilon, cfg.clip_min, cfg.clip_max,
        )
    return x_adv


def fgsm(model, x: np.ndarray, y: np.ndarray, cfg: AttackConfig) -> np.ndarray:
    """Single sign-gradient step of size epsilon (shares the PGD kernel, so
    it is bit-identical to one-step PGD at step=epsilon)."""
    one_step = replace(cfg, iters=1, step=max(cfg.epsilon, np.finfo(float).tiny), random_start=False)
    return pgd(model, x, y, one_step)
