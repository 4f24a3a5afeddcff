"""Straight interpolation paths for the joint (image, label) flow.

The image runs from Gaussian noise at t=0 to data at t=1, the label runs the
other way: clean code at t=0, Gaussian noise at t=1. Both targets are the
constant displacement along the straight line.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .errors import InvalidArgument
from .palette import label_batch


@dataclass
class FlowBatch:
    x0: torch.Tensor
    x1: torch.Tensor
    y0: torch.Tensor
    y1: torch.Tensor
    t: torch.Tensor
    xt: torch.Tensor
    yt: torch.Tensor
    ux: torch.Tensor
    uy: torch.Tensor


def _expand_time(t, like):
    t = torch.as_tensor(t, dtype=like.dtype, device=like.device)
    if t.ndim == 0:
        return t
    return t.reshape(-1, *([1] * (like.ndim - 1)))


def interpolate(a, b, t):
    """(1 - t) * a + t * b; ``t`` may be a scalar or one value per sample."""
    if a.shape != b.shape:
        raise InvalidArgument(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    if isinstance(a, np.ndarray):
        t = np.asarray(t, dtype=a.dtype)
        if t.ndim:
            t = t.reshape(-1, *([1] * (a.ndim - 1)))
        return (1 - t) * a + t * b
    t = _expand_time(t, a)
    return (1 - t) * a + t * b


# "mixed" law: this share of the batch is drawn from U(LATE_START, 1)
LATE_FRACTION = 0.5
LATE_START = 0.9


def draw_times(rng, n, law="uniform"):
    """Per-sample training times.

    ``mixed`` puts extra mass near t = 1, the only region where the label
    state carries no class information and the image must supply it.
    """
    if law == "uniform":
        return rng.uniform(0.0, 1.0, size=n)
    if law == "mixed":
        t = rng.uniform(0.0, 1.0, size=n)
        late = rng.uniform(size=n) < LATE_FRACTION
        t[late] = rng.uniform(LATE_START, 1.0, size=int(late.sum()))
        return t
    if law == "logit_normal":
        return 1.0 / (1.0 + np.exp(-rng.standard_normal(n)))
    raise InvalidArgument(f"unknown time law {law!r}")


def draw_label_noise(rng, shape, law="gaussian"):
    """Noise endpoint of the label flow; both laws have zero mean, unit variance."""
    if law == "gaussian":
        return rng.standard_normal(size=shape)
    if law == "uniform":
        return rng.uniform(-np.sqrt(3.0), np.sqrt(3.0), size=shape)
    raise InvalidArgument(f"unknown label noise law {law!r}")


def sample_training_batch(images, class_indices, palette, beta, rng, t=None, *, label_encoder=None,
                          label_size=None, time_law="uniform", label_noise="gaussian"):
    """Draw noise endpoints and times for a batch of (B, C, H, W) images.

    ``t`` can be forced (scalar or per-sample) for testing. For the latent
    variant ``label_encoder`` maps the (B, 3, *label_size) color masks into
    the latent space the flow runs in.
    """
    x1 = images
    n, _, h, w = x1.shape
    cls = np.asarray(class_indices)
    if cls.shape != (n,):
        raise InvalidArgument(f"expected {n} class indices, got shape {cls.shape}")

    if t is None:
        t = draw_times(rng, n, time_law)
    t = torch.as_tensor(np.broadcast_to(np.asarray(t, dtype=np.float64), (n,)).copy(), dtype=x1.dtype)

    if label_encoder is None:
        y0 = label_batch(palette, cls, h, w, beta, rng, dtype=x1.dtype)
    else:
        mh, mw = label_size
        y0 = label_encoder(label_batch(palette, cls, mh, mw, beta, rng, dtype=x1.dtype))

    x0 = torch.as_tensor(rng.standard_normal(size=tuple(x1.shape)), dtype=x1.dtype)
    y1 = torch.as_tensor(draw_label_noise(rng, tuple(y0.shape), label_noise), dtype=x1.dtype)

    return FlowBatch(
        x0=x0,
        x1=x1,
        y0=y0,
        y1=y1,
        t=t,
        xt=interpolate(x0, x1, t),
        yt=interpolate(y0, y1, t),
        ux=x1 - x0,
        uy=y1 - y0,
    )


def flow_matching_loss(pred_vx, pred_vy, batch, lambda_y=1.0):
    """MSE on the image velocity plus ``lambda_y`` times MSE on the label velocity."""
    if pred_vx.shape != batch.ux.shape or pred_vy.shape != batch.uy.shape:
        raise InvalidArgument(
            f"prediction shapes {tuple(pred_vx.shape)}, {tuple(pred_vy.shape)} do not match "
            f"targets {tuple(batch.ux.shape)}, {tuple(batch.uy.shape)}"
        )
    if lambda_y <= 0:
        raise InvalidArgument(f"lambda_y must be > 0, got {lambda_y}")
    return F.mse_loss(pred_vx, batch.ux) + lambda_y * F.mse_loss(pred_vy, batch.uy)
