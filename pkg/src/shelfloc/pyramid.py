"""Multi-scale dense inference: downscale pyramid, per-level score masks, mean fusion."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .data_model import InvalidInputError, ScoreMask
from .fcn import ConfigurationError, FcnModel, forward_mask
from .imaging import resize


@dataclass(frozen=True)
class PyramidConfig:
    downscale: float = 1.5
    min_hw: tuple[int, int] = (64, 128)
    max_levels: int = 10
    interpolation: str = "bilinear"

    def __post_init__(self):
        object.__setattr__(self, "min_hw", tuple(int(v) for v in self.min_hw))
        if not self.downscale > 1:
            raise ConfigurationError(f"downscale factor must be > 1, got {self.downscale}")
        if self.max_levels < 1:
            raise ConfigurationError("max_levels must be >= 1")
        if self.interpolation not in ("bilinear", "nearest", "bicubic"):
            raise ConfigurationError(f"unsupported interpolation {self.interpolation!r}")

    @classmethod
    def for_model(cls, model: FcnModel, **kwargs) -> "PyramidConfig":
        return cls(min_hw=model.config.training_input_hw, **kwargs)

    def to_dict(self) -> dict:
        return asdict(self)


def level_sizes(hw: Sequence[int], config: PyramidConfig) -> list[tuple[int, int]]:
    H, W = int(hw[0]), int(hw[1])
    h0, w0 = config.min_hw
    if H < h0 or W < w0:
        raise InvalidInputError(f"image {H}x{W} smaller than minimum pyramid level {h0}x{w0}")
    sizes = []
    k = 0
    while len(sizes) < config.max_levels:
        f = config.downscale ** k
        h, w = int(np.floor(H / f)), int(np.floor(W / f))
        if h < h0 or w < w0:
            break
        sizes.append((h, w))
        k += 1
    return sizes


def build_pyramid(image: np.ndarray, config: PyramidConfig) -> list[np.ndarray]:
    """Level 0 is the original; level k is ``floor(size / factor**k)``, area-resampled."""
    return [image if k == 0 else resize(image, hw, "area") for k, hw in enumerate(level_sizes(image.shape[:2], config))]


def resize_mask(mask: ScoreMask, target_hw: Sequence[int], interpolation: str = "bilinear") -> np.ndarray:
    """Stretch the mask grid uniformly over ``target_hw``; returns a float32 ``(C, H, W)`` array."""
    t = torch.from_numpy(np.array(mask.values, dtype=np.float32))[None]
    kwargs = {} if interpolation == "nearest" else {"align_corners": False}
    out = F.interpolate(t, size=tuple(int(v) for v in target_hw), mode=interpolation, **kwargs)[0]
    return out.numpy()


def fuse_pyramid(masks: Sequence[ScoreMask], target_hw: Sequence[int], interpolation: str = "bilinear") -> ScoreMask:
    """Per-pixel, per-channel mean of the masks after resizing each to ``target_hw``."""
    if not masks:
        raise InvalidInputError("cannot fuse an empty list of masks")
    channels = {m.channels for m in masks}
    if len(channels) != 1:
        raise InvalidInputError(f"masks disagree on channel count: {sorted(channels)}")
    acc = np.zeros((masks[0].channels, int(target_hw[0]), int(target_hw[1])), dtype=np.float32)
    for m in masks:
        acc += resize_mask(m, target_hw, interpolation)
    acc /= len(masks)
    # bicubic can overshoot the input range
    return ScoreMask(np.clip(acc, 0.0, 1.0))


def pyramid_forward(model: FcnModel, image: np.ndarray, config: PyramidConfig) -> ScoreMask:
    levels = build_pyramid(image, config)
    masks = [forward_mask(model, level) for level in levels]
    return fuse_pyramid(masks, image.shape[:2], config.interpolation)


def single_scale_forward(model: FcnModel, image: np.ndarray, config: PyramidConfig) -> ScoreMask:
    return fuse_pyramid([forward_mask(model, image)], image.shape[:2], config.interpolation)
