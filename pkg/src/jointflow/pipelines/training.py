"""Training loop for the joint velocity field."""

from __future__ import annotations

import copy
import logging
import math

import numpy as np
import torch

from ..data import to_nchw
from ..errors import InvalidArgument, InvalidState, NumericFailure
from ..flow import flow_matching_loss, sample_training_batch
from ..model import VelocityNet, VelocityNetConfig, toy_config
from ..palette import build_palette
from ..seeding import rng_fingerprint, substream, torch_seed
from .checkpoint import Checkpoint
from .config import TrainConfig

logger = logging.getLogger(__name__)


def cosine_warmup_lr(epoch, max_lr, warmup, total):
    """Linear warmup from 0 to ``max_lr``, then cosine decay towards 0.

    ``epoch`` may be fractional so the schedule can be applied per step.
    """
    if not 0 < warmup < total:
        raise InvalidArgument(f"need 0 < warmup < total, got warmup={warmup}, total={total}")
    if not 0 <= epoch < total:
        raise InvalidArgument(f"epoch {epoch} outside [0, {total})")
    if epoch < warmup:
        return max_lr * epoch / warmup
    return max_lr * 0.5 * (1.0 + math.cos(math.pi * (epoch - warmup) / (total - warmup)))


@torch.no_grad()
def encode_images(autoencoder, images_nchw, batch_size=256):
    out = [autoencoder.encode(torch.from_numpy(images_nchw[i:i + batch_size])) for i in range(0, len(images_nchw), batch_size)]
    return torch.cat(out)


def _label_encoder(autoencoder):
    def encode(masks):
        with torch.no_grad():
            return autoencoder.encode(masks)

    return encode


def train(config: TrainConfig, dataset, palette=None, net_config: VelocityNetConfig | None = None,
          field=None, autoencoder=None, on_epoch=None) -> Checkpoint:
    """Fit the joint field on ``dataset`` and return a checkpoint.

    ``field`` overrides the network built from ``net_config`` (any
    ``nn.Module`` returning ``(v_x, v_y)``). ``on_epoch(epoch, mean_loss)``
    is called after every epoch. Per-epoch mean losses end up in
    ``checkpoint.loss_history`` and per-step losses in
    ``checkpoint.extra["step_losses"]``.
    """
    if palette is None:
        palette = build_palette(dataset.num_classes, config.palette_mode)
    if palette.num_classes != dataset.num_classes:
        raise InvalidArgument(f"palette has {palette.num_classes} classes, dataset {dataset.num_classes}")

    images = to_nchw(dataset.images)
    labels = dataset.labels
    image_shape = images.shape[1:]
    label_encoder = label_size = None
    if config.latent:
        if autoencoder is None:
            raise InvalidState("latent training requires a trained autoencoder")
        autoencoder.eval()
        x_data = encode_images(autoencoder, images)
        label_encoder = _label_encoder(autoencoder)
        label_size = tuple(images.shape[2:])
    else:
        x_data = torch.from_numpy(images)

    if net_config is None:
        net_config = toy_config(image_channels=x_data.shape[1], label_channels=4 if config.latent else 3)
    if field is None:
        torch.manual_seed(torch_seed(config.seed, "init"))
        field = VelocityNet(net_config)
    if net_config.image_channels != x_data.shape[1]:
        raise InvalidArgument(f"net expects {net_config.image_channels} image channels, data has {x_data.shape[1]}")

    shuffle_rng = substream(config.seed, "shuffle")
    noise_rng = substream(config.seed, "noise")
    params = [p for p in field.parameters() if p.requires_grad]
    opt = torch.optim.Adam(params, lr=config.learning_rate)

    n = len(labels)
    steps_per_epoch = math.ceil(n / config.batch_size)
    history, step_losses = [], []
    field.train()
    field.to(memory_format=torch.channels_last)

    def snapshot(epoch, state=None):
        net = copy.deepcopy(field)
        if state is not None:
            net.load_state_dict(state["field"])
        return Checkpoint(
            field=net.to(memory_format=torch.contiguous_format).eval(),
            net_config=net_config,
            palette=palette,
            train_config=config,
            autoencoder=autoencoder,
            optimizer_state=copy.deepcopy(opt.state_dict()) if state is None else state["opt"],
            epoch=epoch,
            loss_history=list(history),
            rng_fingerprint=rng_fingerprint(noise_rng),
            image_shape=tuple(image_shape),
        )

    for epoch in range(config.epochs):
        epoch_start = {"field": copy.deepcopy(field.state_dict()), "opt": copy.deepcopy(opt.state_dict())}
        perm = shuffle_rng.permutation(n)
        epoch_losses = []
        for i in range(steps_per_epoch):
            idx = perm[i * config.batch_size:(i + 1) * config.batch_size]
            lr = cosine_warmup_lr(epoch + i / steps_per_epoch, config.learning_rate, config.warmup_epochs, config.epochs)
            for group in opt.param_groups:
                group["lr"] = lr
            batch = sample_training_batch(
                x_data[idx], labels[idx], palette, config.beta, noise_rng,
                label_encoder=label_encoder, label_size=label_size,
                time_law=config.time_law, label_noise=config.label_noise,
            )
            vx, vy = field(
                batch.xt.contiguous(memory_format=torch.channels_last),
                batch.yt.contiguous(memory_format=torch.channels_last),
                batch.t,
            )
            loss = flow_matching_loss(vx, vy, batch, config.lambda_y)
            if not torch.isfinite(loss):
                raise NumericFailure(
                    f"non-finite loss at epoch {epoch}, step {i}",
                    step=epoch * steps_per_epoch + i,
                    checkpoint=snapshot(epoch, epoch_start),
                )
            opt.zero_grad(set_to_none=True)
            loss.backward()
            if config.grad_clip:
                torch.nn.utils.clip_grad_norm_(params, config.grad_clip)
            opt.step()
            epoch_losses.append(loss.item())
        history.append(float(np.mean(epoch_losses)))
        step_losses.extend(epoch_losses)
        logger.info("epoch %d/%d loss %.5f", epoch + 1, config.epochs, history[-1])
        if on_epoch is not None:
            on_epoch(epoch, history[-1])

    field.to(memory_format=torch.contiguous_format)
    field.eval()
    ckpt = snapshot(config.epochs)
    ckpt.field = field
    ckpt.extra["step_losses"] = step_losses
    return ckpt
