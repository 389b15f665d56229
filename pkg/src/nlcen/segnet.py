"""NLCE-enhanced feature-pyramid segmentation network and its losses.

Two phases:

* global: a four-stage residual backbone (strides 4/8/16/32), an encoder
  block on the last residual block of every stage, and a top-down feature
  pyramid whose levels each produce full-resolution 2-class logits;
* refinement: pyramid levels pass through 0/1/2/3 bottleneck blocks, are
  upsampled to the finest level, concatenated and turned into the final
  logits.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import ShapeError, Tensor
from .nlce import NLCE
from .nn import Conv2d, ConvBNReLU, Module

VARIANTS = ("full", "no-nlce", "no-nl", "no-ce")
LEVELS = (2, 3, 4, 5)
REFINE_DEPTH = {2: 0, 3: 1, 4: 2, 5: 3}
LOSS_LAMBDA = 0.25


@dataclass
class BackboneConfig:
    stage_channels: tuple[int, int, int, int] = (8, 16, 32, 64)
    blocks_per_stage: tuple[int, int, int, int] = (1, 1, 1, 1)
    input_hw: int = 64
    in_channels: int = 1
    zero_init_residual: bool = False

    def __post_init__(self):
        self.stage_channels = tuple(int(c) for c in self.stage_channels)
        self.blocks_per_stage = tuple(int(b) for b in self.blocks_per_stage)
        if len(self.stage_channels) != 4 or len(self.blocks_per_stage) != 4:
            raise ValueError("backbone needs exactly four stages")
        if min(self.blocks_per_stage) < 1:
            raise ValueError("every stage needs at least one residual block")
        if self.input_hw % 32:
            raise ValueError(f"input side {self.input_hw} is not divisible by 32")


@dataclass
class ModelConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    variant: str = "full"
    pyramid_width: int = 32
    codewords: int = 32
    embed: int | None = None
    seed: int = 0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")


@dataclass
class SegmentationOutput:
    level_logits: list[Tensor]
    refined_logits: Tensor
    stages: list[Tensor] | None = None
    enhanced: list[Tensor] | None = None
    pyramid: list[Tensor] | None = None


class ResidualBlock(Module):
    def __init__(self, rng, channels: int, zero_init: bool = False):
        super().__init__()
        self.conv1 = ConvBNReLU(rng, channels, channels, 3)
        self.conv2 = ConvBNReLU(rng, channels, channels, 3, relu=False)
        if zero_init:
            self.conv2.bn.weight.data[:] = 0.0

    def forward(self, x: Tensor) -> Tensor:
        return ag.relu(ag.add(self.conv2(self.conv1(x)), x))


class Stage(Module):
    def __init__(self, rng, in_ch: int, out_ch: int, blocks: int, zero_init: bool):
        super().__init__()
        self.down = ConvBNReLU(rng, in_ch, out_ch, 3, stride=2)
        self.blocks = [ResidualBlock(rng, out_ch, zero_init) for _ in range(blocks)]

    def forward(self, x: Tensor) -> Tensor:
        x = self.down(x)
        for b in self.blocks:
            x = b(x)
        return x


class Backbone(Module):
    """Stem at stride 2, then four stages each halving resolution."""

    def __init__(self, rng, cfg: BackboneConfig):
        super().__init__()
        self.cfg = cfg
        c = cfg.stage_channels
        self.stem = ConvBNReLU(rng, cfg.in_channels, c[0], 3, stride=2)
        prev = c[0]
        self.stages = []
        for ch, nb in zip(c, cfg.blocks_per_stage):
            self.stages.append(Stage(rng, prev, ch, nb, cfg.zero_init_residual))
            prev = ch

    def forward(self, x: Tensor) -> list[Tensor]:
        return backbone_forward(self, x)


def backbone_forward(backbone: Backbone, image: Tensor) -> list[Tensor]:
    """Stage maps C2..C5 at strides 4, 8, 16, 32."""
    if image.ndim != 4:
        raise ShapeError(f"backbone: expected (B, C, H, W) image, got {image.shape}")
    H, W = image.shape[-2:]
    if H % 32 or W % 32:
        raise ShapeError(f"backbone: input {H}x{W} is not divisible by 32")
    if image.shape[1] != backbone.cfg.in_channels:
        raise ShapeError(f"backbone: expected {backbone.cfg.in_channels} input channels, got {image.shape[1]}")
    x = backbone.stem(image)
    out = []
    for stage in backbone.stages:
        x = stage(x)
        out.append(x)
    return out


class Bottleneck(Module):
    """1x1 reduce to half width, 3x3, 1x1 restore, identity skip."""

    def __init__(self, rng, width: int):
        super().__init__()
        mid = max(1, width // 2)
        self.reduce = ConvBNReLU(rng, width, mid, 1)
        self.conv = ConvBNReLU(rng, mid, mid, 3)
        self.restore = ConvBNReLU(rng, mid, width, 1, relu=False)

    def forward(self, x: Tensor) -> Tensor:
        return ag.relu(ag.add(self.restore(self.conv(self.reduce(x))), x))


class Pyramid(Module):
    def __init__(self, rng, stage_channels, width: int):
        super().__init__()
        c2, c3, c4, c5 = stage_channels
        self.top = Conv2d(rng, c5, width, 1)
        self.lat4 = Conv2d(rng, c4, width, 1)
        self.lat3 = Conv2d(rng, c3, width, 1)
        self.lat2 = Conv2d(rng, c2, width, 1)

    def forward(self, enhanced: list[Tensor]) -> list[Tensor]:
        return build_pyramid(self, enhanced)


def build_pyramid(pyr: Pyramid, enhanced: list[Tensor]) -> list[Tensor]:
    """P5 = top(E5); P_i = lat_i(E_i) + up2(P_{i+1}).  Returns [P2, P3, P4, P5]."""
    e2, e3, e4, e5 = enhanced
    p = pyr.top(e5)
    out = [p]
    for lat, e in ((pyr.lat4, e4), (pyr.lat3, e3), (pyr.lat2, e2)):
        lateral = lat(e)
        up = ag.resize_bilinear(p, (2 * p.shape[2], 2 * p.shape[3]))
        if up.shape != lateral.shape:
            raise ShapeError(f"pyramid: upsampled {up.shape} does not match lateral {lateral.shape}")
        p = ag.add(lateral, up)
        out.append(p)
    return out[::-1]


def predict_level(head: Conv2d, p: Tensor, size: tuple[int, int]) -> Tensor:
    """3x3 conv to 2 classes, then bilinear resize to ``size``."""
    return ag.resize_bilinear(head(p), size)


class Refinement(Module):
    def __init__(self, rng, width: int):
        super().__init__()
        self.branch2 = []
        self.branch3 = [Bottleneck(rng, width)]
        self.branch4 = [Bottleneck(rng, width) for _ in range(2)]
        self.branch5 = [Bottleneck(rng, width) for _ in range(3)]
        self.head = Conv2d(rng, 4 * width, 2, 3)
        self.width = width

    def forward(self, pyramid: list[Tensor], size: tuple[int, int]) -> Tensor:
        return refine(self, pyramid, size)


def refine(r: Refinement, pyramid: list[Tensor], size: tuple[int, int]) -> Tensor:
    """Bottleneck each level (0/1/2/3 blocks), fuse at P2 resolution, predict."""
    target = pyramid[0].shape[-2:]
    fused = []
    for p, branch in zip(pyramid, (r.branch2, r.branch3, r.branch4, r.branch5)):
        for block in branch:
            p = block(p)
        fused.append(ag.resize_bilinear(p, target))
    cat = ag.concat(fused, axis=1)
    if cat.shape[1] != 4 * r.width:
        raise ShapeError(f"refine: concatenated {cat.shape[1]} channels, expected {4 * r.width}")
    return ag.resize_bilinear(r.head(cat), size)


class NLCEN(Module):
    """The full network for one of the four ablation variants."""

    def __init__(self, cfg: ModelConfig | None = None):
        super().__init__()
        cfg = cfg or ModelConfig()
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        bb = cfg.backbone
        self.backbone = Backbone(rng, bb)
        w = cfg.pyramid_width
        self.pyramid = Pyramid(rng, bb.stage_channels, w)
        self.heads = [Conv2d(rng, w, 2, 3) for _ in LEVELS]
        self.refinement = Refinement(rng, w)
        # encoder weights come from their own stream so that every variant
        # shares identical initial values for the layers they have in common
        nrng = np.random.default_rng([cfg.seed, 1])
        for level, ch in zip(LEVELS, bb.stage_channels):
            block = None
            if cfg.variant != "no-nlce":
                block = NLCE(
                    nrng, ch, embed=cfg.embed, codewords=cfg.codewords,
                    use_nonlocal=cfg.variant in ("full", "no-ce"),
                    use_context=cfg.variant in ("full", "no-nl"),
                )
            setattr(self, f"nlce{level}", block)

    @property
    def variant(self) -> str:
        return self.cfg.variant

    def nlce_blocks(self) -> list[NLCE | None]:
        return [getattr(self, f"nlce{level}") for level in LEVELS]

    def forward(self, image, keep_features: bool = False) -> SegmentationOutput:
        """``image`` is in pixel units (0-255), shape (B, C, H, W)."""
        image = image if isinstance(image, Tensor) else Tensor(image)
        x = normalize(image)
        size = image.shape[-2:]
        stages = backbone_forward(self.backbone, x)
        enhanced = [apply_nlce(c, blk) for c, blk in zip(stages, self.nlce_blocks())]
        pyr = build_pyramid(self.pyramid, enhanced)
        levels = [predict_level(h, p, size) for h, p in zip(self.heads, pyr)]
        refined = refine(self.refinement, pyr, size)
        out = SegmentationOutput(levels, refined)
        if keep_features:
            out.stages, out.enhanced, out.pyramid = stages, enhanced, pyr
        return out


def normalize(image: Tensor) -> Tensor:
    """Pixel units 0..255 to roughly [-1, 1]."""
    return ag.add(ag.scale(image, 1.0 / 127.5), -1.0)


def apply_nlce(c: Tensor, block: NLCE | None) -> Tensor:
    """E_i for one stage: identity without a block, else the block's forward."""
    if block is None:
        return c
    return block(c)


def _check_mask(mask: np.ndarray, logits: Tensor) -> np.ndarray:
    mask = np.asarray(mask)
    if mask.ndim == 2:
        mask = mask[None]
    if not np.all((mask == 0) | (mask == 1)):
        raise ValueError("seg_loss: mask values must be 0 or 1")
    if logits.ndim != 4 or logits.shape[1] != 2:
        raise ShapeError(f"seg_loss: expected (B, 2, H, W) logits, got {logits.shape}")
    if mask.shape != (logits.shape[0],) + logits.shape[2:]:
        raise ShapeError(f"seg_loss: mask {mask.shape} does not match logits {logits.shape}")
    return mask


def seg_loss(logits: Tensor, mask) -> Tensor:
    """Mean per-pixel negative log-likelihood of the true class."""
    mask = _check_mask(mask, logits)
    onehot = np.stack([1.0 - mask, mask.astype(np.float64)], axis=1)
    logp = ag.log_softmax(logits, axis=1)
    n = mask.size
    return ag.scale(ag.reduce_sum(ag.mul(logp, onehot)), -1.0 / n)


def total_loss(level_losses, refined_loss, lam: float = LOSS_LAMBDA):
    """``mean(level_losses) + lam * refined_loss`` for floats or tensors."""
    level_losses = list(level_losses)
    if len(level_losses) != 4:
        raise ValueError(f"expected 4 level losses, got {len(level_losses)}")
    if any(isinstance(v, Tensor) for v in level_losses + [refined_loss]):
        acc = level_losses[0]
        for v in level_losses[1:]:
            acc = ag.add(acc, v)
        return ag.add(ag.scale(acc, 0.25), ag.scale(refined_loss, lam))
    return 0.25 * sum(level_losses) + lam * refined_loss


def model_loss(model: NLCEN, images, masks) -> tuple[Tensor, SegmentationOutput]:
    out = model(images)
    levels = [seg_loss(lg, masks) for lg in out.level_logits]
    return total_loss(levels, seg_loss(out.refined_logits, masks)), out


def logits_to_mask(logits: Tensor | np.ndarray) -> np.ndarray:
    """Argmax over the two classes, ties to background."""
    d = logits.data if isinstance(logits, Tensor) else logits
    return (d[:, 1] > d[:, 0]).astype(np.uint8)


def predict(model: NLCEN, images: np.ndarray, batch_size: int = 25) -> np.ndarray:
    """Binary masks from the refined head, without recording a graph."""
    masks = []
    with ag.no_grad():
        for i in range(0, len(images), batch_size):
            masks.append(logits_to_mask(model(images[i:i + batch_size]).refined_logits))
    return np.concatenate(masks) if masks else np.zeros((0,) + images.shape[2:], np.uint8)
