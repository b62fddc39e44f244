"""Conditional flow matching on a straight data-to-noise path.

Convention: ``t = 0`` is data, ``t = 1`` is noise, and the regression target
is the constant path velocity ``noise - data``. Sampling therefore runs the
learned field backwards in time; :func:`reverse_field` builds the forward
field consumed by :func:`euler_integrate`.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Callable

import numpy as np

DEFAULT_STEPS = 25


class FlowError(ValueError):
    pass


@dataclass
class FlowSample:
    data: Any
    noise: Any
    t: float

    def __post_init__(self):
        if tuple(self.data.shape) != tuple(self.noise.shape):
            raise FlowError(f"shape mismatch {tuple(self.data.shape)} vs {tuple(self.noise.shape)}")
        if not 0.0 <= float(self.t) <= 1.0:
            raise FlowError("t must lie in [0, 1]")


@dataclass
class LossWeights:
    beta: float = 1.0

    def __post_init__(self):
        if not self.beta >= 0:
            raise FlowError("beta must be nonnegative")


def interpolate_path(sample: FlowSample):
    """Returns ``(x_t, target_velocity)``. Endpoints are returned unmixed so
    they match data/noise exactly."""
    t = sample.t
    if t == 0:
        x_t = sample.data * 1
    elif t == 1:
        x_t = sample.noise * 1
    else:
        x_t = (1 - t) * sample.data + t * sample.noise
    return x_t, sample.noise - sample.data


def cfm_loss(pred_v, target_v):
    """Mean squared error over all elements (numpy or torch)."""
    if tuple(pred_v.shape) != tuple(target_v.shape):
        raise FlowError(f"shape mismatch {tuple(pred_v.shape)} vs {tuple(target_v.shape)}")
    return ((pred_v - target_v) ** 2).mean()


def joint_loss(loss_2d, loss_3d, w: LossWeights):
    return loss_2d + w.beta * loss_3d


VelocityField = Callable[[Any, float, Any], Any]


def _all_finite(v) -> bool:
    if isinstance(v, (tuple, list)):
        return all(_all_finite(x) for x in v)
    try:
        import torch

        if isinstance(v, torch.Tensor):
            return bool(torch.isfinite(v).all())
    except ImportError:  # pragma: no cover
        pass
    return bool(np.all(np.isfinite(v)))


def _axpy(x, h, v):
    if isinstance(x, (tuple, list)):
        return type(x)(_axpy(a, h, b) for a, b in zip(x, v))
    return x + h * v


def euler_integrate(field: VelocityField, x_init, steps: int, conditioning=None):
    """Forward Euler over ``t in [0, 1]``: ``x += field(x, k/steps) / steps``.

    ``x_init`` may be an array/tensor or a tuple of them (joint state).
    """
    if steps < 1:
        raise FlowError("steps must be >= 1")
    x = x_init
    h = 1.0 / steps
    for k in range(steps):
        v = field(x, k / steps, conditioning)
        if not _all_finite(v):
            raise FlowError(f"non-finite velocity at step {k} (t={k / steps:.4f})")
        x = _axpy(x, h, v)
    return x


def reverse_field(learned: VelocityField) -> VelocityField:
    """Field that transports noise (s=0) to data (s=1) for a velocity learned
    on the data-to-noise path."""

    def field(x, s, cond):
        v = learned(x, 1.0 - s, cond)
        if isinstance(v, (tuple, list)):
            return type(v)(-a for a in v)
        return -v

    return field
