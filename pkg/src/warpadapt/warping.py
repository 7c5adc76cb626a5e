"""Differentiable warping along disparity and flow fields, and the feature
warping losses built on top of the network taps.

Coordinate conventions:
  - disparity is one positive channel; warping with sign=+1 samples the source
    at (x - d, y), which moves right-view content onto the left view. sign=-1
    samples at (x + d, y) and moves left-view content onto the right view.
  - flow is two channels (u rightward, v downward); warping with sign=+1
    samples at (x + u, y + v), which pulls frame t+1 back onto frame t.
Out-of-bounds taps read as zero and carry no gradient.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels as K
from .autograd import Tensor, concat
from .errors import ShapeError, UsageError


@dataclass
class WarpField:
    kind: str                   # "disparity" or "flow"
    values: Tensor              # (b, 1, h, w) pixels, or (b, 2, h, w)
    scale: int = 1              # denominator of the pyramid scale (1 = full)

    def __post_init__(self):
        channels = {"disparity": 1, "flow": 2}.get(self.kind)
        if channels is None:
            raise UsageError(f"unknown field kind {self.kind!r}")
        if self.values.shape[1] != channels:
            raise ShapeError(
                f"{self.kind} field needs {channels} channel(s), got {self.values.shape}")


def coord_grids(shape, dtype=np.float32):
    """Constant X and Y pixel-coordinate tensors for a (b, c, h, w) shape."""
    b, _, h, w = shape
    ys, xs = np.meshgrid(np.arange(h, dtype=dtype), np.arange(w, dtype=dtype),
                         indexing="ij")
    xt = Tensor(np.broadcast_to(xs, (b, 1, h, w)).copy())
    yt = Tensor(np.broadcast_to(ys, (b, 1, h, w)).copy())
    return xt, yt


def warp_by_disparity(src: Tensor, disp: WarpField, sign: int = 1) -> Tensor:
    """Bilinear sample of ``src`` at (x - sign * d, y)."""
    if disp.kind != "disparity":
        raise UsageError(f"expected a disparity field, got {disp.kind}")
    d = disp.values
    if d.shape[0] != src.shape[0] or d.shape[2:] != src.shape[2:]:
        raise ShapeError(f"field {d.shape} not aligned with source {src.shape}")
    xt, yt = coord_grids(src.shape, dtype=src.data.dtype)
    gx = xt + d * float(-sign)
    grid = concat([gx, yt], axis=1)
    return K.grid_sample(src, grid)


def warp_by_flow(src: Tensor, flow: WarpField, sign: int = 1) -> Tensor:
    """Bilinear sample of ``src`` at (x + sign * u, y + sign * v)."""
    if flow.kind != "flow":
        raise UsageError(f"expected a flow field, got {flow.kind}")
    f = flow.values
    if f.shape[0] != src.shape[0] or f.shape[2:] != src.shape[2:]:
        raise ShapeError(f"field {f.shape} not aligned with source {src.shape}")
    xt, yt = coord_grids(src.shape, dtype=src.data.dtype)
    scaled = f * float(sign)
    gx = xt + K.channel_slice(scaled, 0, 1)
    gy = yt + K.channel_slice(scaled, 1, 2)
    return K.grid_sample(src, concat([gx, gy], axis=1))


def warp(src: Tensor, field: WarpField, sign: int = 1) -> Tensor:
    if field.kind == "disparity":
        return warp_by_disparity(src, field, sign)
    return warp_by_flow(src, field, sign)


def resize_field(field: WarpField, target_hw: tuple) -> WarpField:
    """Bring a field to another pyramid level, rescaling its pixel values."""
    h, w = field.values.shape[2], field.values.shape[3]
    th, tw = target_hw
    values = field.values
    scale = field.scale
    while (h, w) != (th, tw):
        if h > th:
            if h % 2 or w % 2 or (h // 2) < th:
                raise ShapeError(f"cannot resize field {h}x{w} to {th}x{tw}")
            values = K.downsample2(values) * 0.5
            h, w, scale = h // 2, w // 2, scale * 2
        else:
            if h * 2 > th:
                raise ShapeError(f"cannot resize field {h}x{w} to {th}x{tw}")
            values = K.upsample2(values) * 2.0
            h, w, scale = h * 2, w * 2, max(1, scale // 2)
    return WarpField(field.kind, values, scale)


def _masked_l1(diff_abs: Tensor, mask: Tensor | None) -> Tensor:
    if mask is None:
        return diff_abs.mean()
    return (diff_abs * mask).mean() / (mask.mean() + 1e-8)


def multiscale_warp_loss(taps_src, taps_dst, field: WarpField, sign: int = 1,
                         mask: Tensor | None = None) -> Tensor:
    """Mean over taps of the L1 gap between warped source and target features.

    The field is given at full resolution and is resized (values rescaled) to
    each tap's level. An optional full-resolution mask gates the L1 map and the
    per-tap loss is renormalized by the mask mean.
    """
    if len(taps_src) != len(taps_dst):
        raise UsageError(f"{len(taps_src)} source taps vs {len(taps_dst)} target taps")
    if not taps_src:
        raise UsageError("empty tap lists")
    total = None
    for src, dst in zip(taps_src, taps_dst):
        if src.shape != dst.shape:
            raise ShapeError(f"tap shape mismatch {src.shape} vs {dst.shape}")
        hw = (src.shape[2], src.shape[3])
        level = resize_field(field, hw)
        level_mask = None
        if mask is not None:
            m = mask
            while (m.shape[2], m.shape[3]) != hw:
                m = K.downsample2(m)
            level_mask = m
        diff = K.absolute(warp(src, level, sign) - dst)
        term = _masked_l1(diff, level_mask)
        total = term if total is None else total + term
    return total * (1.0 / len(taps_src))


def stagewise_warp_loss(stages, target_field: WarpField, gamma: float = 0.9,
                        mask: Tensor | None = None, beta: float = 1.0) -> Tensor:
    """Smooth-L1 between each refinement stage and the target field.

    Stages run coarse to fine in native-scale pixel units; each is upsampled to
    the target's resolution with its values multiplied by the spatial ratio.
    Stage s of S carries weight gamma^(S-1-s), so the finest stage weighs 1.
    """
    if not stages:
        raise UsageError("empty stage list")
    if not 0.0 < gamma <= 1.0:
        raise UsageError(f"gamma must be in (0, 1], got {gamma}")
    tgt = target_field.values
    th, tw = tgt.shape[2], tgt.shape[3]
    n = len(stages)
    total = None
    for s, stage in enumerate(stages):
        if stage.shape[1] != tgt.shape[1]:
            raise ShapeError(f"stage has {stage.shape[1]} channels, target {tgt.shape[1]}")
        up = stage
        ratio = 1.0
        while (up.shape[2], up.shape[3]) != (th, tw):
            if up.shape[2] * 2 > th:
                raise ShapeError(f"stage {stage.shape} does not fit target {tgt.shape}")
            up = K.upsample2(up)
            ratio *= 2.0
        if ratio != 1.0:
            up = up * ratio
        term = _masked_l1(K.smooth_l1(up, tgt, beta=beta), mask)
        weighted = term * (gamma ** (n - 1 - s))
        total = weighted if total is None else total + weighted
    return total
