"""Class-conditional generation and uncertainty-aware classification."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from ..data import to_nchw, to_nhwc
from ..errors import InvalidArgument
from ..flow import draw_label_noise
from ..palette import check_class, decode_batch, label_batch
from ..seeding import substream
from ..solver import IntegrationSpec, integrate


@dataclass
class PredictionRecord:
    predicted_class: int
    decoded_mean_color: list
    uncertainty: float
    scores: list
    runs: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "predicted_class": self.predicted_class,
            "decoded_mean_color": self.decoded_mean_color,
            "uncertainty": self.uncertainty,
            "scores": self.scores,
            "runs": self.runs,
        }


def field_dtype(field):
    params = list(field.parameters()) if hasattr(field, "parameters") else []
    if params:
        return params[0].dtype
    return getattr(field, "dtype", torch.float64)


def _flow_shapes(ckpt):
    """(image-state shape, label-state shape) per sample in the space the flow runs in."""
    c, h, w = ckpt.image_shape
    if ckpt.latent:
        ae = ckpt.require_autoencoder()
        d = ae.config.downsample
        lat = (ae.config.latent_channels, h // d, w // d)
        return lat, lat
    return (c, h, w), (3, h, w)


def _eval(module):
    if hasattr(module, "eval"):
        module.eval()


@torch.no_grad()
def generate(ckpt, class_index, count, steps=25, rng=None, perturb_label=False, return_trajectory=False):
    """Sample ``count`` images of one class by integrating t: 0 -> 1.

    The label endpoint is the exact class code unless ``perturb_label``
    applies the training-time beta jitter. Returns N x H x W x C images
    clamped to [-1, 1].
    """
    check_class(ckpt.palette, class_index)
    if count < 1:
        raise InvalidArgument("count must be >= 1")
    if rng is None:
        rng = substream(ckpt.train_config.seed, "generate")
    field_ = ckpt.field
    _eval(field_)
    dtype = field_dtype(field_)
    ae = ckpt.require_autoencoder() if ckpt.latent else None
    x_shape, _ = _flow_shapes(ckpt)
    c, h, w = ckpt.image_shape
    beta = ckpt.train_config.beta if perturb_label else 0.0

    labels = np.full(count, int(class_index))
    y0 = label_batch(ckpt.palette, labels, h, w, beta, rng, dtype=dtype)
    if ae is not None:
        y0 = ae.encode(y0.to(torch.float32)).to(dtype)
    x0 = torch.as_tensor(rng.standard_normal((count, *x_shape)), dtype=dtype)
    out = integrate(field_, x0, y0, IntegrationSpec(0.0, 1.0, steps), return_trajectory=return_trajectory)
    x1 = out[0]
    if ae is not None:
        x1 = ae.decode(x1.to(torch.float32), channels=c)
    images = to_nhwc(x1.clamp(-1.0, 1.0).to(torch.float32).numpy())
    if return_trajectory:
        return images, out[2]
    return images


def _aggregate(classes, dists, scores, colors):
    """Fuse per-run results of one image: majority vote, mean distance."""
    votes = np.bincount(classes, minlength=scores.shape[1])
    tied = np.flatnonzero(votes == votes.max())
    if len(tied) > 1:
        mean_d = np.array([dists[classes == c].mean() for c in tied])
        # argmin picks the lowest index among equal mean distances
        winner = int(tied[np.argmin(mean_d)])
    else:
        winner = int(tied[0])
    runs = [
        {"class": int(k), "distance": float(d), "scores": [float(v) for v in s]}
        for k, d, s in zip(classes, dists, scores)
    ]
    return PredictionRecord(
        predicted_class=winner,
        decoded_mean_color=[float(v) for v in colors.mean(axis=0)],
        uncertainty=float(dists.mean()),
        scores=[float(v) for v in scores.mean(axis=0)],
        runs=runs,
    )


@torch.no_grad()
def classify_batch(ckpt, images, steps=25, runs=5, seed=0, batch_size=200, freeze_image=False, temperature=1.0):
    """Classify N x H x W x C images by reverse-time integration t: 1 -> 0.

    Run ``r`` draws its label noise from its own stream derived from
    ``(seed, r)``, so results do not depend on how many runs are requested.
    Returns one PredictionRecord per image.
    """
    if runs < 1:
        raise InvalidArgument("runs must be >= 1")
    images = np.asarray(images, dtype=np.float32)
    if images.ndim != 4:
        raise InvalidArgument(f"expected N x H x W x C images, got shape {images.shape}")
    if tuple(images.shape[1:]) != tuple(ckpt.image_shape[1:]) + (ckpt.image_shape[0],):
        raise InvalidArgument(f"images of shape {images.shape[1:]} do not match checkpoint {ckpt.image_shape}")
    field_ = ckpt.field
    _eval(field_)
    dtype = field_dtype(field_)
    ae = ckpt.require_autoencoder() if ckpt.latent else None
    _, y_shape = _flow_shapes(ckpt)
    spec = IntegrationSpec(1.0, 0.0, steps, freeze_image)
    law = ckpt.train_config.label_noise
    n, k = len(images), ckpt.palette.num_classes
    nchw = to_nchw(images)

    classes = np.empty((runs, n), dtype=np.int64)
    dists = np.empty((runs, n))
    scores = np.empty((runs, n, k))
    colors = np.empty((runs, n, 3))
    for r in range(runs):
        rng = substream(seed, "classify", r)
        for start in range(0, n, batch_size):
            x1 = torch.from_numpy(nchw[start:start + batch_size])
            if ae is not None:
                x1 = ae.encode(x1)
            x1 = x1.to(dtype)
            y1 = torch.as_tensor(draw_label_noise(rng, (len(x1), *y_shape), law), dtype=dtype)
            _, y0 = integrate(field_, x1, y1, spec)
            if ae is not None:
                y0 = ae.decode(y0.to(torch.float32), channels=3)
            sl = slice(start, start + len(x1))
            classes[r, sl], dists[r, sl], scores[r, sl], colors[r, sl] = decode_batch(ckpt.palette, y0, temperature)

    return [_aggregate(classes[:, i], dists[:, i], scores[:, i], colors[:, i]) for i in range(n)]


def classify(ckpt, image, steps=25, runs=5, seed=0, freeze_image=False, temperature=1.0):
    """Classify one H x W x C image; see :func:`classify_batch`."""
    return classify_batch(ckpt, np.asarray(image)[None], steps, runs, seed,
                          freeze_image=freeze_image, temperature=temperature)[0]
