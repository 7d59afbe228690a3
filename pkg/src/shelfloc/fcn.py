"""Fully convolutional instance classifier.

The network is a stack of 3x3 conv/ReLU and 2x2 max-pool stages followed by
a single unpadded convolution whose kernel exactly covers the backbone's
feature map at the training resolution, so a training-size crop yields a
``C x 1 x 1`` output and a larger image yields a dense score map.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .checkpoint import load_checkpoint, save_checkpoint
from .data_model import ClassCatalog, InvalidInputError, ScoreMask
from .imaging import letterbox
from .training import TrainingHistory, TrainingHyperparams, fit

VGG11_STAGES = (64, "M", 128, "M", 256, 256, "M", 512, 512, "M", 512, 512, "M")
TINY_STAGES = (16, "M", 32, "M", 32, "M")

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


class ConfigurationError(ValueError):
    pass


@dataclass(frozen=True)
class FcnConfig:
    num_classes: int
    include_background: bool = True
    final_kernel: tuple[int, int] = (2, 4)
    backbone: tuple = VGG11_STAGES
    use_pretrained_backbone: bool = False
    pretrained_path: str | None = None
    training_input_hw: tuple[int, int] | None = None
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "final_kernel", tuple(int(k) for k in self.final_kernel))
        object.__setattr__(self, "backbone", tuple(s if s == "M" else int(s) for s in self.backbone))
        if self.num_classes < 1:
            raise ConfigurationError("num_classes must be >= 1")
        if len(self.final_kernel) != 2 or min(self.final_kernel) < 1:
            raise ConfigurationError(f"final_kernel must be two positive ints, got {self.final_kernel}")
        if not any(s != "M" for s in self.backbone):
            raise ConfigurationError("backbone needs at least one conv stage")
        if self.use_pretrained_backbone and not self.pretrained_path:
            raise ConfigurationError("use_pretrained_backbone requires pretrained_path")
        if self.training_input_hw is not None:
            hw = tuple(int(v) for v in self.training_input_hw)
            object.__setattr__(self, "training_input_hw", hw)
            fh, fw = hw[0] // self.stride, hw[1] // self.stride
            kh, kw = self.final_kernel
            if fh < kh or fw < kw:
                raise ConfigurationError(
                    f"final kernel {self.final_kernel} larger than the {fh}x{fw} feature map "
                    f"of a {hw} input at stride {self.stride}"
                )
            if hw != self.derived_input_hw:
                raise ConfigurationError(
                    f"training input {hw} must equal kernel x stride = {self.derived_input_hw}"
                )
        else:
            object.__setattr__(self, "training_input_hw", self.derived_input_hw)

    @property
    def stride(self) -> int:
        return 2 ** sum(1 for s in self.backbone if s == "M")

    @property
    def derived_input_hw(self) -> tuple[int, int]:
        return (self.final_kernel[0] * self.stride, self.final_kernel[1] * self.stride)

    @property
    def out_channels(self) -> int:
        return self.num_classes + int(self.include_background)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["backbone"] = list(self.backbone)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "FcnConfig":
        d = dict(d)
        for key in ("final_kernel", "backbone", "training_input_hw"):
            if d.get(key) is not None:
                d[key] = tuple(d[key])
        return cls(**d)


class FcnModel(nn.Module):
    def __init__(self, config: FcnConfig, catalog: ClassCatalog | None = None):
        super().__init__()
        self.config = config
        self.catalog = catalog
        layers: list[nn.Module] = []
        in_ch = 3
        for stage in config.backbone:
            if stage == "M":
                layers.append(nn.MaxPool2d(2, 2))
            else:
                layers += [nn.Conv2d(in_ch, stage, 3, padding=1), nn.ReLU(inplace=True)]
                in_ch = stage
        self.features = nn.Sequential(*layers)
        self.head = nn.Conv2d(in_ch, config.out_channels, config.final_kernel)
        self.register_buffer("mean", torch.tensor(IMAGENET_MEAN).view(1, 3, 1, 1), persistent=False)
        self.register_buffer("std", torch.tensor(IMAGENET_STD).view(1, 3, 1, 1), persistent=False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """Logits ``(B, C, h, w)`` for images ``(B, 3, H, W)`` scaled to [0, 1]."""
        x = (x - self.mean.to(x.dtype)) / self.std.to(x.dtype)
        return self.head(self.features(x))


def _load_pretrained(model: FcnModel, path: str) -> None:
    state = torch.load(path, map_location="cpu", weights_only=True)
    src = [(k, v) for k, v in state.items() if k.startswith("features.")]
    dst = [(k, v) for k, v in model.features.state_dict().items()]
    if len(src) != len(dst) or any(a.shape != b.shape for (_, a), (_, b) in zip(src, dst)):
        raise ConfigurationError(f"{path}: pretrained features do not match the configured backbone")
    model.features.load_state_dict({k: v for (k, _), (_, v) in zip(dst, src)})


def build_fcn(config: FcnConfig, catalog: ClassCatalog | None = None) -> FcnModel:
    if catalog is not None and catalog.num_channels != config.out_channels:
        raise ConfigurationError(
            f"catalog has {catalog.num_channels} channels, config expects {config.out_channels}"
        )
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(config.seed)
        model = FcnModel(config, catalog)
    if config.use_pretrained_backbone:
        _load_pretrained(model, config.pretrained_path)
    return model.eval()


def output_shape_for(config: FcnConfig, input_hw: Sequence[int]) -> tuple[int, int]:
    H, W = int(input_hw[0]), int(input_hw[1])
    H0, W0 = config.training_input_hw
    if H < H0 or W < W0:
        raise InvalidInputError(f"input {H}x{W} smaller than training size {H0}x{W0}")
    S = config.stride
    kh, kw = config.final_kernel
    return (H // S - kh + 1, W // S - kw + 1)


def images_to_tensor(images: Sequence[np.ndarray]) -> torch.Tensor:
    arr = np.stack([np.asarray(im, dtype=np.uint8) for im in images])
    return torch.from_numpy(arr).permute(0, 3, 1, 2).float().div_(255.0)


def prepare_instance(image: np.ndarray, config: FcnConfig) -> np.ndarray:
    return letterbox(image, config.training_input_hw)


def _check_image(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise InvalidInputError(f"expected an HxWx3 image, got shape {image.shape}")
    return image


def _augment(x: torch.Tensor, hp: TrainingHyperparams, gen: torch.Generator) -> torch.Tensor:
    if hp.augment_flip:
        flip = torch.rand(x.shape[0], generator=gen) < 0.5
        x = torch.where(flip.view(-1, 1, 1, 1), x.flip(-1), x)
    if hp.augment_scale > 0:
        s = 1 + (torch.rand(x.shape[0], generator=gen) * 2 - 1) * hp.augment_scale
        theta = torch.zeros(x.shape[0], 2, 3)
        theta[:, 0, 0] = 1 / s
        theta[:, 1, 1] = 1 / s
        grid = F.affine_grid(theta, list(x.shape), align_corners=False)
        x = F.grid_sample(x, grid, align_corners=False, padding_mode="zeros")
    return x


def train_fcn(
    model: FcnModel,
    train_instances: Sequence,
    val_instances: Sequence,
    hp: TrainingHyperparams,
) -> tuple[FcnModel, TrainingHistory]:
    """Cross-entropy training on the single output site, early-stopped on validation accuracy."""
    if not train_instances or not val_instances:
        raise InvalidInputError("train and validation splits must both be non-empty")
    cfg = model.config
    for split, insts in (("train", train_instances), ("validation", val_instances)):
        bad = [i.class_id for i in insts if not 0 <= i.class_id < cfg.out_channels]
        if bad:
            raise InvalidInputError(f"{split} split has class ids outside the model: {sorted(set(bad))}")
    xt = images_to_tensor([prepare_instance(i.image, cfg) for i in train_instances])
    yt = torch.tensor([i.class_id for i in train_instances], dtype=torch.long)
    xv = images_to_tensor([prepare_instance(i.image, cfg) for i in val_instances])
    yv = torch.tensor([i.class_id for i in val_instances], dtype=torch.long)

    def loss_fn(logits, target):
        return F.cross_entropy(logits.flatten(1), target)

    def batches(gen):
        order = torch.randperm(len(yt), generator=gen)
        for start in range(0, len(order), hp.batch_size):
            idx = order[start:start + hp.batch_size]
            yield _augment(xt[idx], hp, gen), yt[idx]

    def evaluate():
        logits = torch.cat([model(xv[i:i + 256]) for i in range(0, len(yv), 256)]).flatten(1)
        loss = F.cross_entropy(logits, yv).item()
        acc = (logits.argmax(1) == yv).float().mean().item()
        return loss, acc

    history = fit(model, batches, loss_fn, evaluate, hp, monitor="accuracy")
    return model, history


@torch.no_grad()
def _probabilities(model: FcnModel, image: np.ndarray) -> np.ndarray:
    model.eval()
    logits = model(images_to_tensor([image]))[0]
    return torch.softmax(logits, dim=0).numpy()


def classify_instance(model: FcnModel, image: np.ndarray) -> tuple[int, np.ndarray]:
    image = _check_image(image)
    if image.shape[:2] != model.config.training_input_hw:
        raise InvalidInputError(
            f"image {image.shape[:2]} must be resized to {model.config.training_input_hw}"
        )
    probs = _probabilities(model, image)[:, 0, 0]
    return int(probs.argmax()), probs


def forward_mask(model: FcnModel, image: np.ndarray) -> ScoreMask:
    image = _check_image(image)
    output_shape_for(model.config, image.shape[:2])
    return ScoreMask(_probabilities(model, image))


@torch.no_grad()
def classify_batch(model: FcnModel, x: torch.Tensor, chunk: int = 512) -> torch.Tensor:
    """Softmax probabilities ``(B, C)`` for training-size crops ``(B, 3, H0, W0)`` in [0, 1]."""
    model.eval()
    outs = [torch.softmax(model(x[i:i + chunk]).flatten(1), dim=1) for i in range(0, x.shape[0], chunk)]
    return torch.cat(outs) if outs else torch.zeros(0, model.config.out_channels)


def save_fcn(model: FcnModel, path, history: TrainingHistory | None = None):
    extra = {"history": history.to_dict()} if history is not None else {}
    catalog = model.catalog.to_dict() if model.catalog is not None else None
    return save_checkpoint(path, "fcn", model.config.to_dict(), model.state_dict(), catalog, extra)


def load_fcn(path) -> FcnModel:
    header, state = load_checkpoint(path, kind="fcn")
    config = FcnConfig.from_dict(header["config"])
    # weights come from the file, never from a pretrained source
    config = FcnConfig.from_dict({**config.to_dict(), "use_pretrained_backbone": False})
    catalog = ClassCatalog.from_dict(header["catalog"]) if header.get("catalog") else None
    model = build_fcn(config, catalog)
    model.load_state_dict(state)
    return model.eval()
