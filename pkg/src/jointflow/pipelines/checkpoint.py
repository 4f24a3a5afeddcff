"""Single-file checkpoint container.

Layout (a ``torch.save`` dict, loadable with ``weights_only=True``)::

    format_version  int
    meta            JSON string: net config + fingerprint, palette, train
                    config, data image shape, epoch, loss history, rng
                    fingerprint, autoencoder config (or null)
    params          state dict of the velocity net
    autoencoder     state dict of the VAE (latent checkpoints only)
    optimizer       optimizer state dict (optional)
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import torch

from ..errors import ConfigMismatch, FormatError, InvalidState
from ..model import VelocityNet, VelocityNetConfig
from ..palette import ClassPalette
from .autoencoder import AutoencoderConfig, ConvVAE
from .config import TrainConfig

FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    field: Any
    net_config: VelocityNetConfig
    palette: ClassPalette
    train_config: TrainConfig
    autoencoder: ConvVAE | None = None
    optimizer_state: dict | None = None
    epoch: int = 0
    loss_history: list = field(default_factory=list)
    rng_fingerprint: str = ""
    image_shape: tuple = ()
    extra: dict = field(default_factory=dict)

    @property
    def latent(self) -> bool:
        return self.train_config.latent

    def require_autoencoder(self):
        if self.latent and self.autoencoder is None:
            raise InvalidState("latent checkpoint has no autoencoder attached")
        return self.autoencoder


def _meta(ckpt: Checkpoint) -> dict:
    return {
        "net_config": ckpt.net_config.to_dict(),
        "net_fingerprint": ckpt.net_config.fingerprint(),
        "palette": ckpt.palette.to_dict(),
        "train_config": ckpt.train_config.to_dict(),
        "autoencoder_config": None if ckpt.autoencoder is None else ckpt.autoencoder.config.to_dict(),
        "epoch": ckpt.epoch,
        "loss_history": list(ckpt.loss_history),
        "rng_fingerprint": ckpt.rng_fingerprint,
        "image_shape": list(ckpt.image_shape),
        "extra": ckpt.extra,
    }


def save_checkpoint(ckpt: Checkpoint, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    blob = {
        "format_version": FORMAT_VERSION,
        "meta": json.dumps(_meta(ckpt), sort_keys=True),
        "params": ckpt.field.state_dict(),
    }
    if ckpt.autoencoder is not None:
        blob["autoencoder"] = ckpt.autoencoder.state_dict()
    if ckpt.optimizer_state is not None:
        blob["optimizer"] = ckpt.optimizer_state
    torch.save(blob, path)
    return path


def _diff_field(expected: dict, found: dict) -> str:
    for key in sorted(set(expected) | set(found)):
        if expected.get(key) != found.get(key):
            return key
    return "?"


def load_checkpoint(path, expected_net_config: VelocityNetConfig | None = None) -> Checkpoint:
    """Load a checkpoint, refusing version or net-config mismatches.

    The stored fingerprint must match the stored net config, and, when
    ``expected_net_config`` is given, the caller's config as well.
    """
    try:
        blob = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as err:  # torch raises a zoo of types for corrupt files
        raise FormatError(f"cannot read checkpoint {path}: {err}") from err
    if not isinstance(blob, dict) or "format_version" not in blob:
        raise FormatError(f"{path} is not a checkpoint container")
    if blob["format_version"] != FORMAT_VERSION:
        raise ConfigMismatch(
            f"checkpoint format_version {blob['format_version']} != supported {FORMAT_VERSION}",
            field="format_version",
        )
    meta = json.loads(blob["meta"])
    net_cfg = VelocityNetConfig.from_dict(meta["net_config"])
    if net_cfg.fingerprint() != meta["net_fingerprint"]:
        raise ConfigMismatch("stored net config does not match its fingerprint", field="net_fingerprint")
    if expected_net_config is not None and expected_net_config.fingerprint() != net_cfg.fingerprint():
        name = _diff_field(expected_net_config.to_dict(), net_cfg.to_dict())
        raise ConfigMismatch(
            f"net config mismatch on field '{name}': expected {expected_net_config.to_dict().get(name)!r}, "
            f"checkpoint has {net_cfg.to_dict().get(name)!r}",
            field=name,
        )

    net = VelocityNet(net_cfg)
    net.load_state_dict(blob["params"])
    net.eval()

    ae = None
    if meta["autoencoder_config"] is not None:
        ae = ConvVAE(AutoencoderConfig(**meta["autoencoder_config"]))
        ae.load_state_dict(blob["autoencoder"])
        ae.eval()

    return Checkpoint(
        field=net,
        net_config=net_cfg,
        palette=ClassPalette.from_dict(meta["palette"]),
        train_config=TrainConfig.from_dict(meta["train_config"]),
        autoencoder=ae,
        optimizer_state=blob.get("optimizer"),
        epoch=meta["epoch"],
        loss_history=meta["loss_history"],
        rng_fingerprint=meta["rng_fingerprint"],
        image_shape=tuple(meta["image_shape"]),
        extra=meta.get("extra", {}),
    )


def save_autoencoder(model: ConvVAE, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(
        {"format_version": FORMAT_VERSION, "config": json.dumps(model.config.to_dict()), "params": model.state_dict()},
        path,
    )
    return path


def load_autoencoder(path) -> ConvVAE:
    blob = torch.load(path, map_location="cpu", weights_only=True)
    if blob.get("format_version") != FORMAT_VERSION or "config" not in blob:
        raise FormatError(f"{path} is not an autoencoder container")
    model = ConvVAE(AutoencoderConfig(**json.loads(blob["config"])))
    model.load_state_dict(blob["params"])
    model.eval()
    return model
