"""Time-conditioned U-Net over the channel-concatenated (image, label) state."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import InvalidArgument


@dataclass(frozen=True)
class VelocityNetConfig:
    base_channels: int = 64
    depth_per_resolution: int = 2
    channel_multiples: tuple = (1, 2, 2, 2)
    attention_heads: int = 4
    head_channels: int = 64
    # downsampling factor at which self-attention is applied; 0 disables it
    attention_resolution: int = 2
    dropout: float = 0.0
    image_channels: int = 3
    label_channels: int = 3
    time_dim: int = 0  # 0 -> 4 * base_channels

    def __post_init__(self):
        object.__setattr__(self, "channel_multiples", tuple(int(m) for m in self.channel_multiples))
        if not 0.0 <= self.dropout < 1.0:
            raise InvalidArgument(f"dropout must be in [0, 1), got {self.dropout}")
        if self.base_channels % 8:
            raise InvalidArgument("base_channels must be a multiple of 8 (GroupNorm)")

    @property
    def in_channels(self) -> int:
        return self.image_channels + self.label_channels

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channel_multiples"] = list(self.channel_multiples)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "VelocityNetConfig":
        return cls(**d)

    def fingerprint(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def full_config(image_channels=3, latent=False) -> VelocityNetConfig:
    """Full-size settings (64 channels pixel-space, 128 in latent space)."""
    if latent:
        return VelocityNetConfig(base_channels=128, image_channels=4, label_channels=4)
    return VelocityNetConfig(base_channels=64, image_channels=image_channels, label_channels=3)


def toy_config(image_channels=3, label_channels=3, **overrides) -> VelocityNetConfig:
    """CPU-scale settings used by the desk-scale experiments."""
    kw = dict(
        base_channels=32,
        depth_per_resolution=1,
        channel_multiples=(1, 2),
        attention_resolution=0,
        image_channels=image_channels,
        label_channels=label_channels,
    )
    kw.update(overrides)
    return VelocityNetConfig(**kw)


def time_embedding(t, dim):
    """Sinusoidal features of t in [0, 1]: sin(t*w_k) then cos(t*w_k).

    The dim/2 frequencies are geometrically spaced from 1 to 1e4. ``t`` may be
    a scalar or a 1-D batch; the result has a trailing axis of size ``dim``.
    """
    if dim < 2 or dim % 2:
        raise InvalidArgument(f"embedding dim must be even and >= 2, got {dim}")
    t = torch.as_tensor(t)
    if not t.is_floating_point():
        t = t.to(torch.float32)
    half = dim // 2
    if half == 1:
        freqs = torch.ones(1, dtype=t.dtype, device=t.device)
    else:
        freqs = torch.exp(torch.arange(half, dtype=t.dtype, device=t.device) * (math.log(1e4) / (half - 1)))
    args = t[..., None] * freqs
    return torch.cat([torch.sin(args), torch.cos(args)], dim=-1)


def _groups(ch):
    return math.gcd(8, ch)


class ResBlock(nn.Module):
    def __init__(self, in_ch, out_ch, time_dim, dropout):
        super().__init__()
        self.norm1 = nn.GroupNorm(_groups(in_ch), in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        # scale and shift per channel
        self.time_proj = nn.Linear(time_dim, 2 * out_ch)
        self.norm2 = nn.GroupNorm(_groups(out_ch), out_ch)
        self.dropout = nn.Dropout(dropout)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x, temb):
        h = self.conv1(F.silu(self.norm1(x)))
        scale, shift = self.time_proj(F.silu(temb))[:, :, None, None].chunk(2, dim=1)
        h = self.norm2(h) * (1 + scale) + shift
        h = self.conv2(self.dropout(F.silu(h)))
        return h + self.skip(x)


class AttentionBlock(nn.Module):
    def __init__(self, ch, heads):
        super().__init__()
        if ch % heads:
            raise InvalidArgument(f"{ch} channels not divisible into {heads} heads")
        self.heads = heads
        self.norm = nn.GroupNorm(_groups(ch), ch)
        self.qkv = nn.Conv2d(ch, 3 * ch, 1)
        self.proj = nn.Conv2d(ch, ch, 1)

    def forward(self, x):
        b, c, h, w = x.shape
        qkv = self.qkv(self.norm(x)).reshape(b, 3, self.heads, c // self.heads, h * w)
        q, k, v = (qkv[:, i].transpose(-1, -2) for i in range(3))
        out = F.scaled_dot_product_attention(q, k, v)
        out = out.transpose(-1, -2).reshape(b, c, h, w)
        return x + self.proj(out)


class VelocityNet(nn.Module):
    """Joint velocity field v(x_t, y_t, t) -> (v_x, v_y).

    Image and label states are concatenated along channels, pass through one
    shared U-Net trunk and the output is split back by channel.
    """

    def __init__(self, config: VelocityNetConfig):
        super().__init__()
        self.config = cfg = config
        time_dim = cfg.time_dim or 4 * cfg.base_channels
        self.embed_dim = cfg.base_channels
        if self.embed_dim % 2:
            raise InvalidArgument("base_channels must be even")
        self.time_mlp = nn.Sequential(
            nn.Linear(self.embed_dim, time_dim),
            nn.SiLU(),
            nn.Linear(time_dim, time_dim),
        )

        chs = [cfg.base_channels * m for m in cfg.channel_multiples]
        self.in_conv = nn.Conv2d(cfg.in_channels, chs[0], 3, padding=1)

        def attn(level, ch):
            if cfg.attention_resolution and 2**level == cfg.attention_resolution:
                heads = ch // cfg.head_channels if cfg.head_channels > 0 else cfg.attention_heads
                return AttentionBlock(ch, max(1, heads))
            return nn.Identity()

        self.down = nn.ModuleList()
        skip_chs = []
        ch = chs[0]
        for level, out_ch in enumerate(chs):
            blocks = nn.ModuleList()
            attns = nn.ModuleList()
            for _ in range(cfg.depth_per_resolution):
                blocks.append(ResBlock(ch, out_ch, time_dim, cfg.dropout))
                attns.append(attn(level, out_ch))
                ch = out_ch
            skip_chs.append(ch)
            last = level == len(chs) - 1
            self.down.append(
                nn.ModuleDict(
                    {
                        "blocks": blocks,
                        "attns": attns,
                        "downsample": nn.Identity() if last else nn.Conv2d(ch, ch, 3, stride=2, padding=1),
                    }
                )
            )

        self.mid1 = ResBlock(ch, ch, time_dim, cfg.dropout)
        self.mid_attn = attn(len(chs) - 1, ch)
        self.mid2 = ResBlock(ch, ch, time_dim, cfg.dropout)

        self.up = nn.ModuleList()
        for level in reversed(range(len(chs))):
            out_ch = chs[level]
            blocks = nn.ModuleList()
            attns = nn.ModuleList()
            for i in range(cfg.depth_per_resolution):
                in_ch = ch + skip_chs[level] if i == 0 else ch
                blocks.append(ResBlock(in_ch, out_ch, time_dim, cfg.dropout))
                attns.append(attn(level, out_ch))
                ch = out_ch
            self.up.append(
                nn.ModuleDict(
                    {
                        "blocks": blocks,
                        "attns": attns,
                        "upsample": nn.Identity() if level == 0 else nn.Conv2d(ch, chs[level - 1], 3, padding=1),
                    }
                )
            )
            if level:
                ch = chs[level - 1]

        self.out_norm = nn.GroupNorm(_groups(ch), ch)
        self.out_conv = nn.Conv2d(ch, cfg.in_channels, 3, padding=1)
        nn.init.zeros_(self.out_conv.weight)
        nn.init.zeros_(self.out_conv.bias)

    def forward(self, x, y, t):
        cfg = self.config
        if x.ndim != 4 or y.ndim != 4:
            raise InvalidArgument("expected (B, C, H, W) image and label states")
        if x.shape[1] != cfg.image_channels or y.shape[1] != cfg.label_channels:
            raise InvalidArgument(
                f"channel mismatch: got image {x.shape[1]}, label {y.shape[1]}; "
                f"config expects {cfg.image_channels}, {cfg.label_channels}"
            )
        if x.shape[0] != y.shape[0] or x.shape[2:] != y.shape[2:]:
            raise InvalidArgument(f"image {tuple(x.shape)} and label {tuple(y.shape)} states disagree")
        t = torch.as_tensor(t, dtype=x.dtype, device=x.device)
        if t.ndim == 0:
            t = t.expand(x.shape[0])
        temb = self.time_mlp(time_embedding(t, self.embed_dim))

        h = self.in_conv(torch.cat([x, y], dim=1))
        skips = []
        for stage in self.down:
            for block, att in zip(stage["blocks"], stage["attns"]):
                h = att(block(h, temb))
            skips.append(h)
            h = stage["downsample"](h)

        h = self.mid2(self.mid_attn(self.mid1(h, temb)), temb)

        for stage in self.up:
            skip = skips.pop()
            if h.shape[2:] != skip.shape[2:]:
                h = F.interpolate(h, size=skip.shape[2:], mode="nearest")
            for i, (block, att) in enumerate(zip(stage["blocks"], stage["attns"])):
                if i == 0:
                    h = torch.cat([h, skip], dim=1)
                h = att(block(h, temb))
            h = stage["upsample"](h)

        out = self.out_conv(F.silu(self.out_norm(h)))
        return out[:, : cfg.image_channels], out[:, cfg.image_channels :]


def evaluate(field, x_t, y_t, t):
    """Evaluate any velocity field (module or plain callable) on a batch."""
    return field(x_t, y_t, t)


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())
