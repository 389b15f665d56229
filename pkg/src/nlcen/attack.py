"""Targeted iterative FGSM against a segmentation model, and epsilon sweeps.

The target of every attack is the inverted ground truth.  Each step moves
the image against the sign of the gradient of the refined-prediction loss
towards that target, then clips to the L-inf ball of radius epsilon around
the original image and to the valid pixel range.  Images and epsilon are
in 0-255 pixel units.
"""
from __future__ import annotations

import contextlib
import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .metrics import per_image_scores
from .segnet import NLCEN, logits_to_mask, seg_loss

DEFAULT_INTENSITIES = (0.5, 1, 2, 4, 6, 8, 10, 12, 14, 16, 18, 20, 22, 24, 26, 28, 30, 32)


class AttackError(FloatingPointError):
    """Non-finite gradient during an attack."""

    def __init__(self, iteration: int):
        super().__init__(f"non-finite gradient at attack iteration {iteration}")
        self.iteration = iteration


@dataclass
class AttackConfig:
    epsilon: float
    alpha: float = 1.0
    pixel_range: tuple[float, float] = (0.0, 255.0)
    iterations: int | None = None  # None: use iteration_count(epsilon)

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")
        if not self.alpha > 0:
            raise ValueError(f"alpha must be positive, got {self.alpha}")
        lo, hi = self.pixel_range
        if not lo < hi:
            raise ValueError(f"bad pixel range {self.pixel_range}")

    @property
    def n_iterations(self) -> int:
        return self.iterations if self.iterations is not None else iteration_count(self.epsilon)


@dataclass
class AdversarialSample:
    original: np.ndarray
    perturbed: np.ndarray
    target: np.ndarray
    epsilon: float
    iterations_run: int
    trace: list[float] = field(default_factory=list)

    @property
    def linf(self) -> float:
        return float(np.max(np.abs(self.perturbed - self.original))) if self.original.size else 0.0


def target_mask(gt) -> np.ndarray:
    """The attack target: every pixel's label flipped."""
    gt = np.asarray(gt)
    if not np.all((gt == 0) | (gt == 1)):
        raise ValueError("target_mask: ground truth must be binary")
    return (1 - gt).astype(gt.dtype)


def iteration_count(epsilon: float) -> int:
    """``min(eps + 4, ceil(1.25 eps))`` rounded up, at least one."""
    if not epsilon > 0:
        raise ValueError(f"epsilon must be positive, got {epsilon}")
    return max(1, math.ceil(min(epsilon + 4, math.ceil(1.25 * epsilon))))


def fgsm_step(x_t: np.ndarray, grad: np.ndarray, original: np.ndarray, cfg: AttackConfig, iteration: int = 0) -> np.ndarray:
    """One signed descent step followed by the epsilon-ball and range clamps."""
    if x_t.shape != grad.shape or x_t.shape != original.shape:
        raise ValueError(f"fgsm_step: shapes differ {x_t.shape}, {grad.shape}, {original.shape}")
    if not np.all(np.isfinite(grad)):
        raise AttackError(iteration)
    x = x_t - cfg.alpha * np.sign(grad)
    x = np.clip(x, original - cfg.epsilon, original + cfg.epsilon)
    return np.clip(x, *cfg.pixel_range)


def _as_logits_fn(model) -> Callable[[Tensor], Tensor]:
    if isinstance(model, NLCEN):
        return lambda x: model(x).refined_logits
    return model


@contextlib.contextmanager
def eval_mode(model):
    """Temporarily switch a module to eval mode (no-op for plain callables)."""
    if not hasattr(model, "train"):
        yield model
        return
    was = model.training
    model.eval()
    try:
        yield model
    finally:
        model.train(was)


def target_gradient(model, x: np.ndarray, target: np.ndarray) -> tuple[np.ndarray, float]:
    """Gradient of the refined loss against ``target`` w.r.t. the pixels."""
    xt = Tensor(x, requires_grad=True)
    loss = seg_loss(_as_logits_fn(model)(xt), target)
    if not loss.requires_grad:
        return np.zeros_like(x), loss.item()
    (g,) = ag.grad(loss, [xt])
    return g, loss.item()


def generate_adversarial(model, x, gt, cfg: AttackConfig) -> AdversarialSample:
    """Run the targeted attack on a batch ``x`` (B, C, H, W) with masks ``gt`` (B, H, W).

    Modules are evaluated in eval mode; their parameters are only read.
    """
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 3
    if single:
        x, gt = x[None], np.asarray(gt)[None]
    target = target_mask(gt)
    adv = x.copy()
    trace = []
    n = cfg.n_iterations
    with eval_mode(model):
        for t in range(n):
            g, loss = target_gradient(model, adv, target)
            trace.append(loss)
            adv = fgsm_step(adv, g, x, cfg, iteration=t)
    if single:
        x, adv, target = x[0], adv[0], target[0]
    return AdversarialSample(x, adv, target, cfg.epsilon, n, trace)


@dataclass
class SweepRow:
    epsilon: float
    dic: float
    jsc: float
    n_images: int


def _predict(model, images: np.ndarray) -> np.ndarray:
    with ag.no_grad():
        return logits_to_mask(_as_logits_fn(model)(Tensor(images)))


def attack_scores(model, images, masks, epsilon: float, alpha: float = 1.0, batch_size: int = 25):
    """Per-image DIC/JSC after attacking at ``epsilon`` (0 means clean)."""
    dics, jscs = [], []
    with eval_mode(model):
        for i in range(0, len(images), batch_size):
            xb, mb = images[i:i + batch_size], masks[i:i + batch_size]
            if epsilon > 0:
                xb = generate_adversarial(model, xb, mb, AttackConfig(epsilon, alpha)).perturbed
            d, j = per_image_scores(_predict(model, xb), mb)
            dics.append(d)
            jscs.append(j)
    return np.concatenate(dics), np.concatenate(jscs)


def sweep(model, images, masks, intensities: Sequence[float] = DEFAULT_INTENSITIES, alpha: float = 1.0,
          batch_size: int = 25) -> list[SweepRow]:
    """Mean DIC/JSC for the clean set and after attacks at every intensity."""
    images = np.asarray(images, dtype=np.float64)
    if len(images) == 0:
        raise ValueError("sweep: empty dataset")
    rows = []
    for eps in [0.0, *intensities]:
        d, j = attack_scores(model, images, masks, float(eps), alpha, batch_size)
        rows.append(SweepRow(float(eps), float(d.mean()), float(j.mean()), len(images)))
    return rows


def write_sweep_csv(rows: Sequence[SweepRow], path) -> Path:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epsilon", "dic", "jsc", "n_images"])
        for r in rows:
            w.writerow([f"{r.epsilon:.6f}", f"{r.dic:.6f}", f"{r.jsc:.6f}", r.n_images])
    return path


def read_sweep_csv(path) -> list[SweepRow]:
    with Path(path).open(newline="", encoding="utf-8") as fh:
        return [SweepRow(float(r["epsilon"]), float(r["dic"]), float(r["jsc"]), int(r["n_images"]))
                for r in csv.DictReader(fh)]
