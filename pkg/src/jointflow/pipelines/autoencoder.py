"""Small convolutional VAE providing the latent space for the latent flow."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from ..data import to_nchw
from ..errors import InvalidArgument, NumericFailure

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class AutoencoderConfig:
    in_channels: int = 3
    latent_channels: int = 4
    downsample: int = 4
    hidden_channels: int = 64
    kl_weight: float = 1e-4

    def __post_init__(self):
        if self.downsample < 1 or self.downsample & (self.downsample - 1):
            raise InvalidArgument(f"downsample must be a power of two, got {self.downsample}")

    def to_dict(self):
        return asdict(self)


class ConvVAE(nn.Module):
    """Encoder/decoder pair with a (latent_channels, H/d, W/d) latent grid.

    ``encode`` returns the posterior mean multiplied by ``scale`` so the
    latents have roughly unit variance; ``decode`` undoes the scaling.
    Grayscale images are replicated to RGB on the way in and averaged on the
    way out so one model serves both images and color masks.
    """

    def __init__(self, config: AutoencoderConfig = AutoencoderConfig()):
        super().__init__()
        self.config = cfg = config
        hid = cfg.hidden_channels
        n_down = int(math.log2(cfg.downsample))

        enc = [nn.Conv2d(3, hid, 3, padding=1), nn.SiLU()]
        for _ in range(n_down):
            enc += [nn.Conv2d(hid, hid, 4, stride=2, padding=1), nn.SiLU(), nn.Conv2d(hid, hid, 3, padding=1), nn.SiLU()]
        enc += [nn.Conv2d(hid, 2 * cfg.latent_channels, 1)]
        self.encoder = nn.Sequential(*enc)

        dec = [nn.Conv2d(cfg.latent_channels, hid, 3, padding=1), nn.SiLU()]
        for _ in range(n_down):
            dec += [nn.Upsample(scale_factor=2, mode="nearest"), nn.Conv2d(hid, hid, 3, padding=1), nn.SiLU(),
                    nn.Conv2d(hid, hid, 3, padding=1), nn.SiLU()]
        dec += [nn.Conv2d(hid, 3, 3, padding=1)]
        self.decoder = nn.Sequential(*dec)
        self.register_buffer("scale", torch.ones(()))

    def _rgb(self, x):
        if x.shape[1] == 1:
            return x.expand(-1, 3, -1, -1)
        return x

    def posterior(self, x):
        size = x.shape[-1]
        if size % self.config.downsample:
            raise InvalidArgument(f"image size {size} not divisible by {self.config.downsample}")
        mu, logvar = self.encoder(self._rgb(x)).chunk(2, dim=1)
        return mu, logvar.clamp(-20.0, 10.0)

    def encode(self, x):
        return self.posterior(x)[0] * self.scale

    def decode(self, z, channels=3):
        out = torch.tanh(self.decoder(z / self.scale))
        if channels == 1:
            return out.mean(dim=1, keepdim=True)
        return out

    def forward(self, x, noise):
        mu, logvar = self.posterior(x)
        z = mu + torch.exp(0.5 * logvar) * noise
        recon = torch.tanh(self.decoder(z))
        kl = -0.5 * torch.mean(1 + logvar - mu**2 - logvar.exp())
        return recon, kl


def _color_fields(rng, n, size):
    colors = rng.uniform(-1.0, 1.0, size=(n, 3, 1, 1))
    # palette codes live on the faces of the cube; uniform draws rarely get there
    snap = rng.random(size=colors.shape) < 0.5
    colors = np.where(snap, np.sign(colors), colors).astype(np.float32)
    return np.broadcast_to(colors, (n, 3, size, size)).copy()


def train_autoencoder(dataset, latent_channels=4, downsample=4, epochs=20, rng=None, batch_size=64,
                      learning_rate=1e-3, hidden_channels=64, kl_weight=1e-4, mask_fraction=0.25):
    """Fit a ConvVAE on dataset images plus random constant color fields.

    A ``mask_fraction`` share of every batch is replaced by constant color
    images so the decoder reproduces label masks anywhere in [-1, 1]^3.
    Each channel of a field color is snapped to +-1 with probability 1/2.
    Returns the trained model in eval mode with its latent scale set.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    images = to_nchw(dataset.images)
    if images.shape[1] == 1:
        images = np.repeat(images, 3, axis=1)
    n, _, size, _ = images.shape
    torch.manual_seed(int(rng.integers(2**31)))
    cfg = AutoencoderConfig(3, latent_channels, downsample, hidden_channels, kl_weight)
    model = ConvVAE(cfg)
    opt = torch.optim.Adam(model.parameters(), lr=learning_rate)
    total = epochs * math.ceil(n / batch_size)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=total)
    n_masks = int(round(mask_fraction * batch_size))
    model.train()
    for epoch in range(epochs):
        perm = rng.permutation(n)
        losses = []
        for start in range(0, n, batch_size):
            idx = perm[start:start + batch_size]
            batch = images[idx]
            k = min(n_masks, len(idx) - 1)
            if k > 0:
                batch = batch.copy()
                batch[:k] = _color_fields(rng, k, size)
            x = torch.from_numpy(batch)
            noise = torch.from_numpy(
                rng.standard_normal((len(idx), latent_channels, size // downsample, size // downsample)).astype(np.float32)
            )
            recon, kl = model(x, noise)
            loss = F.mse_loss(recon, x) + kl_weight * kl
            if not torch.isfinite(loss):
                raise NumericFailure(f"non-finite autoencoder loss at epoch {epoch}", step=epoch)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            sched.step()
            losses.append(loss.item())
        logger.info("vae epoch %d loss %.5f", epoch, float(np.mean(losses)))
    model.eval()
    with torch.no_grad():
        mus = torch.cat([model.posterior(torch.from_numpy(images[i:i + 256]))[0] for i in range(0, n, 256)])
        model.scale.fill_(1.0 / float(mus.std()))
    return model


@torch.no_grad()
def reconstruction_mse(model, dataset, batch_size=256):
    """Mean squared error of decode(encode(x)) on the [-1, 1] scale."""
    images = to_nchw(dataset.images)
    ch = images.shape[1]
    err, count = 0.0, 0
    for i in range(0, len(images), batch_size):
        x = torch.from_numpy(images[i:i + batch_size])
        rec = model.decode(model.encode(x), channels=ch)
        err += float(((rec - x) ** 2).sum())
        count += x.numel()
    return err / count
