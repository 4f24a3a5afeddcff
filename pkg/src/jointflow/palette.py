"""Class-code palettes: label images in color space and nearest-code decoding.

Every class owns one color triple in [-1, 1]^3. A label image is that color
painted uniformly over the spatial grid (optionally jittered by a single
uniform draw per channel), and a predicted label image is decoded by taking
its spatial mean and picking the closest code.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import InvalidArgument, InvalidInput, PaletteExhausted

MODES = ("rgb", "grayscale")

CUBE_CORNERS = (
    (-1.0, -1.0, -1.0),
    (1.0, -1.0, -1.0),
    (-1.0, 1.0, -1.0),
    (-1.0, -1.0, 1.0),
    (1.0, 1.0, -1.0),
    (1.0, -1.0, 1.0),
    (-1.0, 1.0, 1.0),
    (1.0, 1.0, 1.0),
)

_GRID_LEVELS = (-1.0, -0.5, 0.0, 0.5, 1.0)
MAX_RGB_CLASSES = len(_GRID_LEVELS) ** 3


@dataclass(frozen=True)
class ClassPalette:
    mode: str
    codes: np.ndarray = field(repr=False)
    min_pairwise_distance: float = field(init=False)

    def __post_init__(self):
        codes = np.array(self.codes, dtype=np.float64).reshape(-1, 3)
        codes.setflags(write=False)
        object.__setattr__(self, "codes", codes)
        object.__setattr__(self, "min_pairwise_distance", _min_pairwise(codes))

    @property
    def num_classes(self) -> int:
        return len(self.codes)

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "num_classes": self.num_classes,
            "codes": [[float(v) for v in c] for c in self.codes],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ClassPalette":
        pal = cls(mode=d["mode"], codes=np.asarray(d["codes"], dtype=np.float64))
        if pal.num_classes != d["num_classes"]:
            raise InvalidInput("palette num_classes does not match code list")
        return pal

    def __eq__(self, other):
        if not isinstance(other, ClassPalette):
            return NotImplemented
        return self.mode == other.mode and np.array_equal(self.codes, other.codes)

    __hash__ = None


def _min_pairwise(codes: np.ndarray) -> float:
    if len(codes) < 2:
        return 0.0
    diff = codes[:, None, :] - codes[None, :, :]
    d = np.sqrt((diff**2).sum(-1))
    iu = np.triu_indices(len(codes), k=1)
    return float(d[iu].min())


def _farthest_point_codes(num_classes: int) -> np.ndarray:
    chosen = [np.array(c) for c in CUBE_CORNERS[:num_classes]]
    if num_classes <= len(CUBE_CORNERS):
        return np.stack(chosen)
    grid = np.array(list(itertools.product(_GRID_LEVELS, repeat=3)))
    taken = np.zeros(len(grid), dtype=bool)
    for c in chosen:
        taken |= np.all(grid == c, axis=1)
    sel = np.stack(chosen)
    while len(sel) < num_classes:
        d = np.sqrt(((grid[:, None, :] - sel[None, :, :]) ** 2).sum(-1)).min(axis=1)
        d[taken] = -1.0
        # argmax returns the first maximum, i.e. lowest grid index on ties
        best = int(np.argmax(d))
        taken[best] = True
        sel = np.vstack([sel, grid[best]])
    return sel


def build_palette(num_classes: int, mode: str = "rgb") -> ClassPalette:
    """Deterministically assign one color code per class.

    ``rgb`` uses the cube corners first and then greedy farthest-point picks
    on a 5x5x5 grid; ``grayscale`` spreads the classes on the diagonal
    ramp from black to white.
    """
    if mode not in MODES:
        raise InvalidArgument(f"unknown palette mode {mode!r}; expected one of {MODES}")
    if int(num_classes) != num_classes or num_classes < 2:
        raise InvalidArgument(f"num_classes must be an integer >= 2, got {num_classes}")
    num_classes = int(num_classes)
    if mode == "grayscale":
        levels = 2.0 * np.arange(num_classes) / (num_classes - 1) - 1.0
        codes = np.repeat(levels[:, None], 3, axis=1)
    else:
        if num_classes > MAX_RGB_CLASSES:
            raise PaletteExhausted(
                f"rgb palette supports at most {MAX_RGB_CLASSES} classes, got {num_classes}"
            )
        codes = _farthest_point_codes(num_classes)
    return ClassPalette(mode=mode, codes=codes)


def check_class(palette: ClassPalette, class_index) -> None:
    if isinstance(class_index, (int, np.integer)):
        if not 0 <= class_index < palette.num_classes:
            raise InvalidArgument(f"class index out of range [0, {palette.num_classes}): {class_index}")
        return
    idx = np.asarray(class_index)
    if np.any(idx < 0) or np.any(idx >= palette.num_classes):
        raise InvalidArgument(
            f"class index out of range [0, {palette.num_classes}): {class_index}"
        )


def encode_label(palette, class_index, height, width, beta, rng):
    """Spatially constant (height, width, 3) label image for one class.

    The color is ``codes[class_index] + u`` with one draw of
    ``u ~ U(-beta/2, beta/2)`` per channel.
    """
    check_class(palette, class_index)
    if beta < 0:
        raise InvalidArgument(f"beta must be >= 0, got {beta}")
    color = palette.codes[int(class_index)] + rng.uniform(-beta / 2, beta / 2, size=3)
    out = np.empty((height, width, 3))
    out[...] = color
    return out


def decode_prediction(palette, y0_image):
    """Nearest-code decoding of a predicted (H, W, 3) label image.

    Returns ``(class_index, distance, mean_color)``; the distance to the
    winning code is the uncertainty proxy.
    """
    flat = np.asarray(y0_image, dtype=np.float64).reshape(-1, 3)
    # shifted mean: exact for spatially constant images
    mean_color = flat[0] + (flat - flat[0]).sum(axis=0) / len(flat)
    if not all(math.isfinite(v) for v in mean_color):
        raise InvalidInput("predicted label image contains NaN or Inf")
    d = np.sqrt(((palette.codes - mean_color) ** 2).sum(axis=1))
    k = int(np.argmin(d))
    return k, float(d[k]), mean_color


def code_distances(palette, mean_colors):
    """(N, 3) mean colors -> (N, K) euclidean distances to every code."""
    mc = np.asarray(mean_colors, dtype=np.float64)
    return np.sqrt(((mc[:, None, :] - palette.codes[None, :, :]) ** 2).sum(-1))


def scores_from_distances(distances, temperature=1.0):
    if temperature <= 0:
        raise InvalidArgument(f"temperature must be > 0, got {temperature}")
    logits = -np.asarray(distances, dtype=np.float64) / temperature
    logits -= logits.max(axis=-1, keepdims=True)
    e = np.exp(logits)
    return e / e.sum(axis=-1, keepdims=True)


def class_scores(palette, y0_image, temperature=1.0):
    """Softmax of negative code distances; argmax agrees with decode_prediction."""
    if temperature <= 0:
        raise InvalidArgument(f"temperature must be > 0, got {temperature}")
    _, _, mean_color = decode_prediction(palette, y0_image)
    return scores_from_distances(code_distances(palette, mean_color[None])[0], temperature)


# Batched, channels-first helpers used by the training and inference loops.


def label_batch(palette, class_indices, height, width, beta, rng, dtype=torch.float32):
    """(B, 3, H, W) tensor of label images, one independent color draw per sample."""
    idx = np.asarray(class_indices, dtype=np.int64)
    check_class(palette, idx)
    if beta < 0:
        raise InvalidArgument(f"beta must be >= 0, got {beta}")
    colors = palette.codes[idx] + rng.uniform(-beta / 2, beta / 2, size=(len(idx), 3))
    t = torch.as_tensor(colors, dtype=dtype)[:, :, None, None]
    return t.expand(-1, -1, height, width).contiguous()


def decode_batch(palette, y0, temperature=1.0):
    """Decode a (B, 3, H, W) tensor; returns (classes, distances, scores, mean_colors)."""
    y = y0.detach().to(torch.float64)
    if not torch.isfinite(y).all():
        raise InvalidInput("predicted label batch contains NaN or Inf")
    ref = y[:, :, :1, :1]
    mean_colors = (ref + (y - ref).mean(dim=(2, 3), keepdim=True)).flatten(1).cpu().numpy()
    d = code_distances(palette, mean_colors)
    classes = d.argmin(axis=1)
    dist = d[np.arange(len(d)), classes]
    return classes, dist, scores_from_distances(d, temperature), mean_colors
