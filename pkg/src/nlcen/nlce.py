"""Non-local context encoder.

A feature map is first enhanced by a non-local (all-pairs, softmax
weighted) response added back as a residual, then rescaled channel-wise
by a gate predicted from a codebook encoding of the enhanced features.

All functions take batched ``(B, C, H, W)`` tensors and treat each image
independently, except the batch norm inside the context encoder which
pools statistics over the batch (and over codewords) in training mode.
"""
from __future__ import annotations

import numpy as np

from . import autograd as ag
from .autograd import ShapeError, Tensor
from .nn import BatchNorm2d, Module, Parameter, kaiming


class NLCE(Module):
    """Learned weights of one encoder block.

    ``use_nonlocal`` / ``use_context`` switch off either half; the
    corresponding parameters are then not created at all, so a model's
    registry only lists the weights its forward pass actually uses.
    """

    def __init__(
        self,
        rng: np.random.Generator,
        channels: int,
        embed: int | None = None,
        codewords: int = 32,
        code_dim: int | None = None,
        use_nonlocal: bool = True,
        use_context: bool = True,
    ):
        super().__init__()
        if channels < 1:
            raise ValueError("channels must be >= 1")
        if codewords < 1:
            raise ValueError("codebook needs at least one codeword")
        self.channels = channels
        self.embed = embed or max(1, channels // 2)
        self.code_dim = code_dim or self.embed
        self.codewords = codewords
        self.use_nonlocal = use_nonlocal
        self.use_context = use_context
        C, Ce, Cc, K = channels, self.embed, self.code_dim, codewords
        if use_nonlocal:
            self.w_theta = Parameter(kaiming(rng, (Ce, C), C))
            self.w_phi = Parameter(kaiming(rng, (Ce, C), C))
            self.w_g = Parameter(kaiming(rng, (Ce, C), C))
            # zero so an untrained block starts as the residual identity
            self.w_z = Parameter(np.zeros((C, Ce)))
        if use_context:
            self.proj = Parameter(kaiming(rng, (Cc, C), C))
            bound = 1.0 / np.sqrt(K)
            self.codebook = Parameter(rng.uniform(-bound, bound, size=(K, Cc)))
            self.smoothing = Parameter(1.0 - rng.uniform(0.0, 1.0, size=K))
            self.bn = BatchNorm2d(Cc)
            self.w_gamma = Parameter(kaiming(rng, (C, Cc), Cc))

    def forward(self, x: Tensor) -> Tensor:
        return nlce_forward(x, self)


def _positions(x: Tensor) -> Tensor:
    """(B, C, H, W) -> (B, N, C)."""
    if x.ndim != 4:
        raise ShapeError(f"nlce: expected (B, C, H, W) input, got {x.shape}")
    B, C, H, W = x.shape
    return ag.transpose(ag.reshape(x, (B, C, H * W)), (0, 2, 1))


def _check_channels(x: Tensor, p: NLCE) -> None:
    if x.shape[1] != p.channels:
        raise ShapeError(f"nlce: input has {x.shape[1]} channels, block built for {p.channels}")


def pairwise_attention(x: Tensor, p: NLCE) -> Tensor:
    """Row-normalised affinities ``softmax_j(theta(x_i) . phi(x_j))``, shape (B, N, N)."""
    _check_channels(x, p)
    xs = _positions(x)
    theta = ag.matmul(xs, ag.transpose(p.w_theta, (1, 0)))
    phi = ag.matmul(xs, ag.transpose(p.w_phi, (1, 0)))
    logits = ag.matmul(theta, ag.transpose(phi, (0, 2, 1)))
    return ag.softmax(logits, axis=-1)


def non_local_response(x: Tensor, p: NLCE, attention: Tensor | None = None) -> Tensor:
    """``y_i = sum_j A_ij W_g x_j``, shape (B, N, C')."""
    if attention is None:
        attention = pairwise_attention(x, p)
    g = ag.matmul(_positions(x), ag.transpose(p.w_g, (1, 0)))
    return ag.matmul(attention, g)


def enhance(x: Tensor, y: Tensor, p: NLCE) -> Tensor:
    """``z_i = W_z y_i + x_i`` reshaped back to (B, C, H, W)."""
    B, C, H, W = x.shape
    wy = ag.matmul(y, ag.transpose(p.w_z, (1, 0)))  # (B, N, C)
    wy = ag.reshape(ag.transpose(wy, (0, 2, 1)), (B, C, H, W))
    return ag.add(wy, x)


def assignment_weights(zp: Tensor, p: NLCE) -> Tensor:
    """Soft assignment of each projected feature to the codewords, (B, N, K).

    Softmax over k of ``-s_k ||z'_i - d_k||^2``; rows sum to one.
    """
    d2 = ag.neg_sq_dist(zp, p.codebook)
    return ag.softmax(ag.mul(d2, p.smoothing), axis=-1)


def aggregate_residuals(fz: Tensor, p: NLCE) -> Tensor:
    """Per-codeword aggregated residuals ``e_k = sum_i a_ik (z'_i - d_k)``, (B, K, C'')."""
    _check_channels(fz, p)
    zp = ag.matmul(_positions(fz), ag.transpose(p.proj, (1, 0)))  # (B, N, C'')
    a = assignment_weights(zp, p)
    at = ag.transpose(a, (0, 2, 1))  # (B, K, N)
    weighted = ag.matmul(at, zp)  # sum_i a_ik z'_i
    mass = ag.reduce_sum(at, axis=-1, keepdims=True)  # sum_i a_ik
    return ag.sub(weighted, ag.mul(mass, p.codebook))


def encode_context(fz: Tensor, p: NLCE) -> Tensor:
    """Global context ``e = sum_k relu(bn(e_k))``, shape (B, C'')."""
    ek = aggregate_residuals(fz, p)
    B, K, Cc = ek.shape
    # batch norm over the C'' channels, statistics pooled over batch and codewords
    as_map = ag.reshape(ag.transpose(ek, (0, 2, 1)), (B, Cc, K, 1))
    act = ag.relu(p.bn(as_map))
    return ag.reshape(ag.reduce_sum(act, axis=(2, 3)), (B, Cc))


def channel_attention(e: Tensor, p: NLCE) -> Tensor:
    """``gamma = sigmoid(W_gamma e)``, shape (B, C)."""
    if e.shape[-1] != p.w_gamma.shape[1]:
        raise ShapeError(f"channel_attention: context width {e.shape[-1]} != {p.w_gamma.shape[1]}")
    return ag.sigmoid(ag.matmul(e, ag.transpose(p.w_gamma, (1, 0))))


def nlce_forward(x: Tensor, p: NLCE) -> Tensor:
    """Full block: ``F_z * gamma`` with the same shape as ``x``.

    Disabled halves are skipped: without the non-local path ``F_z = x``;
    without the context path the output is ``F_z`` itself.
    """
    _check_channels(x, p)
    fz = enhance(x, non_local_response(x, p), p) if p.use_nonlocal else x
    if not p.use_context:
        return fz
    gamma = channel_attention(encode_context(fz, p), p)
    B, C = gamma.shape
    return ag.mul(fz, ag.reshape(gamma, (B, C, 1, 1)))
