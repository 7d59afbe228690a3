"""Encoder-decoder that turns noisy classifier score masks into cleaner per-pixel labels.

The network never sees shelf pixels. It is trained on the classifier's
pyramid output for synthetic shelves, against the synthetic index masks.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .checkpoint import load_checkpoint, save_checkpoint
from .data_model import InvalidInputError, ScoreMask
from .fcn import ConfigurationError, FcnModel
from .pyramid import PyramidConfig, pyramid_forward
from .synth import SyntheticSample
from .training import TrainingHistory, TrainingHyperparams, fit

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ConvAeConfig:
    in_channels: int
    out_channels: int | None = None
    filters: tuple[int, ...] = (16, 24, 32)
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "filters", tuple(int(f) for f in self.filters))
        if self.out_channels is None:
            object.__setattr__(self, "out_channels", self.in_channels)
        if self.in_channels < 1 or self.out_channels < 1:
            raise ConfigurationError("channel counts must be positive")
        if not self.filters or min(self.filters) < 1:
            raise ConfigurationError(f"filters must be a non-empty list of positive ints, got {self.filters}")

    @property
    def downscale(self) -> int:
        return 2 ** len(self.filters)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["filters"] = list(self.filters)
        return d


@dataclass
class RefineHyperparams(TrainingHyperparams):
    patience: int = 5
    batch_size: int = 8
    max_epochs: int = 100
    val_fraction: float = 0.2


class ConvAE(nn.Module):
    def __init__(self, config: ConvAeConfig):
        super().__init__()
        self.config = config
        enc, prev = [], config.in_channels
        for f in config.filters:
            enc += [nn.Conv2d(prev, f, 3, padding=1), nn.ReLU(inplace=True), nn.MaxPool2d(2, 2)]
            prev = f
        dec = []
        for f in reversed(config.filters):
            dec += [
                nn.Upsample(scale_factor=2, mode="bilinear", align_corners=False),
                nn.Conv2d(prev, f, 3, padding=1),
                nn.ReLU(inplace=True),
            ]
            prev = f
        self.encoder = nn.Sequential(*enc)
        self.decoder = nn.Sequential(*dec)
        self.project = nn.Conv2d(prev, config.out_channels, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.project(self.decoder(self.encoder(x)))

    def encoder_shapes(self, x: torch.Tensor) -> list[tuple[int, ...]]:
        shapes = []
        for layer in self.encoder:
            x = layer(x)
            if isinstance(layer, nn.MaxPool2d):
                shapes.append(tuple(x.shape[1:]))
        return shapes


def build_convae(config: ConvAeConfig) -> ConvAE:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(config.seed)
        model = ConvAE(config)
    return model.eval()


def downsample_mask(mask: ScoreMask, hw: Sequence[int]) -> np.ndarray:
    """Area-averaged ``(C, h, w)`` float32 array."""
    t = torch.from_numpy(np.array(mask.values, dtype=np.float32))[None]
    return F.interpolate(t, size=tuple(int(v) for v in hw), mode="area")[0].numpy()


def downsample_labels(gt: np.ndarray, hw: Sequence[int]) -> np.ndarray:
    """Nearest-neighbour sampling of an index mask at output pixel centres."""
    H, W = gt.shape
    h, w = int(hw[0]), int(hw[1])
    rows = np.minimum(((np.arange(h) + 0.5) * H / h).astype(np.int64), H - 1)
    cols = np.minimum(((np.arange(w) + 0.5) * W / w).astype(np.int64), W - 1)
    return gt[np.ix_(rows, cols)]


def check_working_resolution(hw: Sequence[int], downscale: int = 8) -> tuple[int, int]:
    hw = (int(hw[0]), int(hw[1]))
    if min(hw) < downscale or hw[0] % downscale or hw[1] % downscale:
        raise ConfigurationError(f"working resolution {hw} must be positive multiples of {downscale}")
    return hw


def default_working_resolution(canvas_hw: Sequence[int], downscale: int = 8) -> tuple[int, int]:
    """A quarter of the canvas, rounded up to a multiple of ``downscale``."""
    return tuple(int(-(-(v / 4) // downscale) * downscale) for v in canvas_hw)


def refine_inputs(
    fcn_model: FcnModel,
    samples: Sequence[SyntheticSample],
    working_resolution: Sequence[int],
    pyramid_config: PyramidConfig | None = None,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Classifier pyramid masks and index targets for each sample, at working resolution."""
    pyramid_config = pyramid_config or PyramidConfig.for_model(fcn_model)
    xs, ys = [], []
    for s in samples:
        mask = pyramid_forward(fcn_model, s.image, pyramid_config)
        xs.append(downsample_mask(mask, working_resolution))
        ys.append(downsample_labels(s.gt_mask, working_resolution).astype(np.int64))
    return torch.from_numpy(np.stack(xs)), torch.from_numpy(np.stack(ys))


def holdout_split(n: int, val_fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    if n < 2:
        raise InvalidInputError("need at least two synthetic samples to hold one out")
    n_val = min(max(1, round(n * val_fraction)), n - 1)
    order = np.random.default_rng(seed).permutation(n)
    return np.sort(order[n_val:]), np.sort(order[:n_val])


def fit_refine(
    convae: ConvAE, x: torch.Tensor, y: torch.Tensor, hp: RefineHyperparams
) -> tuple[ConvAE, TrainingHistory]:
    """Per-pixel cross-entropy on precomputed ``(n, C, h, w)`` inputs and ``(n, h, w)`` targets."""
    if x.shape[1] != convae.config.in_channels:
        raise InvalidInputError(f"inputs have {x.shape[1]} channels, model expects {convae.config.in_channels}")
    check_working_resolution(x.shape[-2:], convae.config.downscale)
    train_idx, val_idx = holdout_split(len(x), hp.val_fraction, hp.seed)
    xt, yt = x[train_idx], y[train_idx]
    xv, yv = x[val_idx], y[val_idx]

    def batches(gen):
        order = torch.randperm(len(xt), generator=gen)
        for start in range(0, len(order), hp.batch_size):
            idx = order[start:start + hp.batch_size]
            yield xt[idx], yt[idx]

    def evaluate():
        logits = convae(xv)
        return F.cross_entropy(logits, yv).item(), (logits.argmax(1) == yv).float().mean().item()

    history = fit(convae, batches, F.cross_entropy, evaluate, hp, monitor="loss")
    return convae, history


def train_refine(
    convae: ConvAE,
    fcn_model: FcnModel,
    synthetic_dataset: Sequence[SyntheticSample],
    hp: RefineHyperparams,
    working_resolution: Sequence[int],
    pyramid_config: PyramidConfig | None = None,
) -> tuple[ConvAE, TrainingHistory]:
    if not synthetic_dataset:
        raise InvalidInputError("synthetic dataset is empty")
    working_resolution = check_working_resolution(working_resolution, convae.config.downscale)
    if fcn_model.config.out_channels != convae.config.in_channels:
        raise ConfigurationError(
            f"classifier emits {fcn_model.config.out_channels} channels, ConvAE expects {convae.config.in_channels}"
        )
    if not fcn_model.config.include_background:
        raise ConfigurationError("refinement needs a background channel in the classifier output")
    fcn_model.eval()
    for p in fcn_model.parameters():
        p.requires_grad_(False)
    try:
        x, y = refine_inputs(fcn_model, synthetic_dataset, working_resolution, pyramid_config)
    finally:
        for p in fcn_model.parameters():
            p.requires_grad_(True)
    convae, history = fit_refine(convae, x, y, hp)
    convae.working_resolution = working_resolution
    return convae, history


@torch.no_grad()
def refine_mask(convae: ConvAE, mask: ScoreMask) -> ScoreMask:
    """Edge-pad to a multiple of the encoder downscale, refine, softmax, crop back."""
    if mask.channels != convae.config.in_channels:
        raise InvalidInputError(f"mask has {mask.channels} channels, ConvAE expects {convae.config.in_channels}")
    convae.eval()
    d = convae.config.downscale
    _, h, w = mask.shape
    ph, pw = -h % d, -w % d
    x = torch.from_numpy(np.array(mask.values, dtype=np.float32))[None]
    if ph or pw:
        # replicate padding needs at least one real pixel per padded side, which always holds
        x = F.pad(x, (0, pw, 0, ph), mode="replicate")
    probs = torch.softmax(convae(x), dim=1)[0, :, :h, :w]
    return ScoreMask(probs.numpy())


def refine_at_working_resolution(convae: ConvAE, mask: ScoreMask) -> ScoreMask:
    hw = getattr(convae, "working_resolution", None)
    if hw is None:
        return refine_mask(convae, mask)
    return refine_mask(convae, ScoreMask(downsample_mask(mask, hw)))


def save_convae(model: ConvAE, path, history: TrainingHistory | None = None):
    extra = {"working_resolution": list(getattr(model, "working_resolution", None) or [])}
    if history is not None:
        extra["history"] = history.to_dict()
    return save_checkpoint(path, "convae", model.config.to_dict(), model.state_dict(), None, extra)


def load_convae(path) -> ConvAE:
    header, state = load_checkpoint(path, kind="convae")
    cfg = dict(header["config"])
    cfg["filters"] = tuple(cfg["filters"])
    model = build_convae(ConvAeConfig(**cfg))
    model.load_state_dict(state)
    wr = header["extra"].get("working_resolution")
    model.working_resolution = tuple(wr) if wr else None
    return model.eval()
