"""Mini-batch training loop with optional layer freezing."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autograd as ag
from .data import SampleRecord, augment, to_arrays
from .metrics import per_image_scores
from .optim import Adam, PlateauDecay
from .segnet import NLCEN, logits_to_mask, model_loss

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainSettings:
    epochs: int = 30
    batch_size: int = 8
    lr: float = 1e-3
    lr_floor: float = 1e-4
    lr_decay: float = 0.9
    patience: int = 3
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    augment: bool = False


@dataclass
class EpochLog:
    epoch: int
    loss: float
    dic: float
    lr: float


def is_nlce_param(name: str) -> bool:
    return name.startswith("nlce")


def set_frozen_mode(model: NLCEN, frozen: Callable[[str], bool]) -> None:
    """Train mode everywhere except top-level children whose names are frozen.

    Frozen children run in eval mode so their batch-norm statistics stay put.
    """
    model.train()
    for name, child in model.children():
        if frozen(name + "."):
            child.eval()


def train_model(
    model: NLCEN,
    records: list[SampleRecord],
    settings: TrainSettings,
    seed: int = 0,
    trainable: Callable[[str], bool] | None = None,
) -> list[EpochLog]:
    """Train in place on ``records``; returns one log entry per epoch.

    ``trainable`` selects parameters by name; everything else is frozen
    (neither updated nor allowed to update its batch-norm statistics).
    """
    if len(records) < 2:
        raise TrainingError(f"need at least 2 training records, got {len(records)}")
    named = list(model.named_parameters())
    params = [p for n, p in named if trainable is None or trainable(n)]
    if not params:
        raise TrainingError("no trainable parameters selected")
    opt = Adam(params, lr=settings.lr, betas=(settings.beta1, settings.beta2), weight_decay=settings.weight_decay)
    sched = PlateauDecay(opt, settings.lr_decay, settings.patience, settings.lr_floor)
    if trainable is None:
        model.train()
    else:
        set_frozen_mode(model, lambda n: not trainable(n))
    base_images, base_masks = to_arrays(records)
    logs = []
    n = len(records)
    for epoch in range(settings.epochs):
        rng = np.random.default_rng([seed, epoch])
        order = rng.permutation(n)
        if settings.augment:
            aug = [augment(records[i], [seed, epoch, int(i)]) for i in range(n)]
            images, masks = to_arrays(aug)
        else:
            images, masks = base_images, base_masks
        losses, dics = [], []
        for step, start in enumerate(range(0, n, settings.batch_size)):
            idx = order[start:start + settings.batch_size]
            if len(idx) < 2:  # batch norm needs more than one sample
                continue
            xb, mb = images[idx], masks[idx]
            loss, out = model_loss(model, xb, mb)
            value = loss.item()
            if not np.isfinite(value):
                raise TrainingError(f"non-finite loss at epoch {epoch} step {step}")
            opt.zero_grad()
            ag.backward(loss)
            opt.step()
            losses.append(value * len(idx))
            dics.append(per_image_scores(logits_to_mask(out.refined_logits), mb)[0])
        mean_loss = float(np.sum(losses) / sum(len(d) for d in dics))
        mean_dic = float(np.concatenate(dics).mean())
        logs.append(EpochLog(epoch, mean_loss, mean_dic, opt.lr))
        log.info("epoch %d loss %.4f dic %.4f lr %.2e", epoch, mean_loss, mean_dic, opt.lr)
        sched.step(mean_loss)
    model.eval()
    return logs
