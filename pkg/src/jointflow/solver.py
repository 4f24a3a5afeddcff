"""Fixed-step Euler integration of the joint (image, label) ODE.

Integrating t: 0 -> 1 generates an image from noise; integrating t: 1 -> 0
carries a noise label state back to a predicted class code.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .errors import InvalidArgument, NumericFailure


@dataclass(frozen=True)
class IntegrationSpec:
    t_start: float
    t_end: float
    steps: int = 25
    freeze_image: bool = False

    def __post_init__(self):
        if int(self.steps) != self.steps or self.steps < 1:
            raise InvalidArgument(f"steps must be a positive integer, got {self.steps}")
        for name in ("t_start", "t_end"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise InvalidArgument(f"{name} must lie in [0, 1], got {v}")
        if self.t_start == self.t_end:
            raise InvalidArgument("t_start and t_end must differ")

    @property
    def step_size(self) -> float:
        return (self.t_end - self.t_start) / self.steps


def generation_spec(steps=25) -> IntegrationSpec:
    return IntegrationSpec(0.0, 1.0, steps)


def classification_spec(steps=25, freeze_image=False) -> IntegrationSpec:
    return IntegrationSpec(1.0, 0.0, steps, freeze_image)


def _time_batch(t, like):
    return torch.full((like.shape[0],), float(t), dtype=like.dtype, device=like.device)


def _check_finite(x, y, step):
    if not (torch.isfinite(x).all() and torch.isfinite(y).all()):
        raise NumericFailure(f"non-finite state at step {step}", step=step)


def euler_step(field, x, y, t, h):
    """One explicit Euler step of size ``h`` (negative for reverse time)."""
    if h == 0:
        raise InvalidArgument("step size must be non-zero")
    _check_finite(x, y, 0)
    vx, vy = field(x, y, _time_batch(t, x))
    x_new, y_new = x + h * vx, y + h * vy
    _check_finite(x_new, y_new, 1)
    return x_new, y_new, t + h


def integrate(field, x_init, y_init, spec: IntegrationSpec, return_trajectory=False):
    """Apply ``spec.steps`` uniform Euler steps from t_start to t_end.

    With ``freeze_image`` the image state is re-pinned to ``x_init`` after
    every step, so the field is always evaluated on the clean image. Returns
    ``(x, y)`` or ``(x, y, trajectory)`` where the trajectory lists the
    ``(t, x, y)`` states including the start.
    """
    h = spec.step_size
    x, y = x_init, y_init
    _check_finite(x, y, 0)
    traj = [(spec.t_start, x, y)] if return_trajectory else None
    for i in range(spec.steps):
        t = spec.t_start + i * h
        vx, vy = field(x, y, _time_batch(t, x))
        x = x + h * vx
        y = y + h * vy
        if spec.freeze_image:
            x = x_init
        try:
            _check_finite(x, y, i + 1)
        except NumericFailure as err:
            raise NumericFailure(f"non-finite state after Euler step {i + 1} (t={t + h:.4f})", step=i + 1) from err
        if traj is not None:
            traj.append((spec.t_start + (i + 1) * h, x, y))
    if traj is not None:
        return x, y, traj
    return x, y
