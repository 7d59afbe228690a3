"""SGD loop with early stopping shared by the classifier and the refinement net."""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterable

import torch
from torch import nn

from .data_model import InvalidInputError

logger = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    def __init__(self, epoch: int, message: str):
        super().__init__(f"epoch {epoch}: {message}")
        self.epoch = epoch


@dataclass
class TrainingHyperparams:
    momentum: float = 0.9
    learning_rate: float = 1e-3
    weight_decay: float = 5e-4
    patience: int = 30
    batch_size: int = 32
    max_epochs: int = 300
    seed: int = 0
    augment_flip: bool = False
    augment_scale: float = 0.0
    # max global gradient L2 norm per step; 0 disables clipping
    grad_clip: float = 0.0

    def __post_init__(self):
        if self.patience < 1:
            raise InvalidInputError("patience must be >= 1")
        if not self.learning_rate > 0:
            raise InvalidInputError("learning rate must be positive")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise InvalidInputError("batch_size and max_epochs must be >= 1")
        if not 0 <= self.augment_scale < 1:
            raise InvalidInputError("augment_scale must be in [0, 1)")
        if self.grad_clip < 0:
            raise InvalidInputError("grad_clip must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainingHistory:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    val_accuracy: list[float] = field(default_factory=list)
    best_epoch: int = -1
    stop_reason: str = ""

    @property
    def epochs(self) -> int:
        return len(self.train_loss)

    def to_dict(self) -> dict:
        return asdict(self)


def make_optimizer(params, hp: TrainingHyperparams) -> torch.optim.SGD:
    return torch.optim.SGD(
        params, lr=hp.learning_rate, momentum=hp.momentum, weight_decay=hp.weight_decay
    )


def fit(
    model: nn.Module,
    batches: Callable[[torch.Generator], Iterable[tuple[torch.Tensor, torch.Tensor]]],
    loss_fn: Callable[[torch.Tensor, torch.Tensor], torch.Tensor],
    evaluate: Callable[[], tuple[float, float]],
    hp: TrainingHyperparams,
    monitor: str = "accuracy",
) -> TrainingHistory:
    """Train ``model`` in place and restore the parameters of the best validation epoch.

    ``batches(gen)`` yields ``(inputs, targets)`` for one epoch, shuffled with
    ``gen``. ``evaluate()`` returns ``(val_loss, val_accuracy)``. ``monitor``
    picks the early-stopping criterion: highest accuracy or lowest loss.
    """
    if monitor not in ("accuracy", "loss"):
        raise InvalidInputError(f"unknown monitor {monitor!r}")
    gen = torch.Generator().manual_seed(hp.seed)
    optimizer = make_optimizer(model.parameters(), hp)
    history = TrainingHistory()
    best_value = None
    best_key = None
    best_state = None
    for epoch in range(hp.max_epochs):
        model.train()
        total, seen = 0.0, 0
        for inputs, targets in batches(gen):
            optimizer.zero_grad()
            loss = loss_fn(model(inputs), targets)
            if not torch.isfinite(loss):
                raise TrainingError(epoch, f"non-finite training loss {loss.item()}")
            loss.backward()
            if hp.grad_clip:
                nn.utils.clip_grad_norm_(model.parameters(), hp.grad_clip)
            optimizer.step()
            total += loss.item() * inputs.shape[0]
            seen += inputs.shape[0]
        model.eval()
        with torch.no_grad():
            val_loss, val_acc = evaluate()
        if not math.isfinite(val_loss):
            raise TrainingError(epoch, f"non-finite validation loss {val_loss}")
        history.train_loss.append(total / max(seen, 1))
        history.val_loss.append(val_loss)
        history.val_accuracy.append(val_acc)
        value = val_acc if monitor == "accuracy" else -val_loss
        # patience counts strict improvements of the monitored value; among
        # epochs tied on it, the lowest validation loss is the one restored
        if best_value is None or value > best_value:
            best_value, last_improved = value, epoch
        key = (value, -val_loss)
        if best_key is None or key > best_key:
            best_key, history.best_epoch = key, epoch
            best_state = copy.deepcopy(model.state_dict())
        logger.info(
            "epoch %d train_loss %.4f val_loss %.4f val_acc %.4f",
            epoch, history.train_loss[-1], val_loss, val_acc,
        )
        if epoch - last_improved >= hp.patience:
            history.stop_reason = "early_stop"
            break
    else:
        history.stop_reason = "max_epochs"
    model.load_state_dict(best_state)
    model.eval()
    return history
