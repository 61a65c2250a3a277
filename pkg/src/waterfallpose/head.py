"""Heatmap decoder head, Gaussian training targets, masked loss, keypoint decode.

Heatmaps live at stride 4. Cell (r, c) corresponds to input pixel
(4c + 2, 4r + 2) (cell centers), and targets are unnormalized Gaussians
placed at the keypoint's position in that same cell-center coordinate frame,
so encoding then decoding is unbiased to within the quarter-offset grid.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Tuple

import numpy as np

from .autodiff import Tensor
from .errors import AnnotationError, ConfigurationError
from .evaluate import KeypointAnnotation
from .layers import init_conv
from .ops import conv2d, gelu, masked_mse

STRIDE = 4


@dataclass
class HeadParams:
    conv_w: Tensor
    conv_b: Tensor
    out_w: Tensor
    out_b: Tensor

    def tensors(self):
        return [self.conv_w, self.conv_b, self.out_w, self.out_b]


def init_head(in_channels: int, num_joints: int, rng: np.random.Generator,
              dtype=np.float64) -> HeadParams:
    conv_w, conv_b = init_conv(in_channels, in_channels, 3, rng, dtype)
    out_w, out_b = init_conv(num_joints, in_channels, 1, rng, dtype, std=0.001)
    return HeadParams(conv_w, conv_b, out_w, out_b)


def head_forward(f_maps: Tensor, params: HeadParams) -> Tensor:
    """3x3 conv + GELU + 1x1 conv to one regression map per joint."""
    y = gelu(conv2d(f_maps, params.conv_w, params.conv_b, stride=1, padding=1))
    return conv2d(y, params.out_w, params.out_b, stride=1, padding=0)


def gaussian_targets(ann: KeypointAnnotation, out_h: int, out_w: int,
                     sigma: float = 2.0, dtype=np.float64) -> Tuple[np.ndarray, np.ndarray]:
    """Per-joint Gaussian peak maps plus a visibility mask.

    Invisible joints produce all-zero maps and mask 0; a visible joint outside
    the image frame is an annotation error.
    """
    if sigma <= 0:
        raise ConfigurationError(f"gaussian_targets: sigma must be positive, got {sigma}")
    k = ann.keypoints.shape[0]
    maps = np.zeros((k, out_h, out_w), dtype=dtype)
    mask = np.zeros(k, dtype=dtype)
    cols = np.arange(out_w, dtype=np.float64)
    rows = np.arange(out_h, dtype=np.float64)
    for j in range(k):
        x, y, v = ann.keypoints[j]
        if v <= 0:
            continue
        if not (0 <= x < ann.width and 0 <= y < ann.height):
            raise AnnotationError(
                f"visible joint {j} at ({x}, {y}) outside {ann.width}x{ann.height} frame")
        cx = (x - STRIDE / 2.0) / STRIDE
        cy = (y - STRIDE / 2.0) / STRIDE
        g = np.exp(-((cols[None, :] - cx) ** 2 + (rows[:, None] - cy) ** 2)
                   / (2.0 * sigma * sigma))
        maps[j] = g.astype(dtype)
        mask[j] = 1.0
    return maps, mask


def mse_loss_visible(pred: Tensor, target: np.ndarray, mask: np.ndarray) -> Tensor:
    """Masked MSE over visible-joint maps; all-masked batches yield 0 with a warning."""
    if float(mask.sum()) == 0.0:
        warnings.warn("mse_loss_visible: no visible joints in batch, loss is 0",
                      RuntimeWarning, stacklevel=2)
    return masked_mse(pred, target, mask)


def _axis_offset(maps: np.ndarray, r: int, c: int, axis: int) -> float:
    h, w = maps.shape
    if axis == 0:
        lo = maps[r - 1, c] if r - 1 >= 0 else -np.inf
        hi = maps[r + 1, c] if r + 1 < h else -np.inf
    else:
        lo = maps[r, c - 1] if c - 1 >= 0 else -np.inf
        hi = maps[r, c + 1] if c + 1 < w else -np.inf
    if hi > lo:
        return 0.25
    if lo > hi:
        return -0.25
    return 0.0


def decode_keypoints(maps: np.ndarray) -> np.ndarray:
    """Argmax plus quarter-offset refinement per joint; returns [K, 3] (x, y, score).

    Ties break toward the smaller row, then smaller column; equal neighbors
    give zero offset. Cell coordinates map to input pixels at cell centers.
    """
    if maps.ndim != 3:
        raise ConfigurationError(f"decode_keypoints expects [K, H, W], got {maps.shape}")
    k, h, w = maps.shape
    out = np.zeros((k, 3), dtype=np.float64)
    for j in range(k):
        m = maps[j]
        flat = int(np.argmax(m))   # row-major argmax = smallest row, then column
        r, c = divmod(flat, w)
        dy = _axis_offset(m, r, c, axis=0)
        dx = _axis_offset(m, r, c, axis=1)
        out[j, 0] = (c + dx) * STRIDE + STRIDE / 2.0
        out[j, 1] = (r + dy) * STRIDE + STRIDE / 2.0
        out[j, 2] = m[r, c]
    return out
