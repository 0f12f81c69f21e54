"""Background scoring and fully connected CRF mean-field refinement."""
from __future__ import annotations

import functools
from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch

from .cam import CamStack


@dataclass
class ProbField:
    image_id: str
    class_ids: list      # starts with background id 0
    probs: np.ndarray    # (K+1, H, W)

    @property
    def shape(self):
        return self.probs.shape[1:]

    def check(self, tol: float = 1e-5) -> None:
        if self.probs.min() < 0:
            raise ValueError("negative probability")
        if np.abs(self.probs.sum(0) - 1).max() > tol:
            raise ValueError("probabilities do not sum to 1")

    def dense(self, num_classes: int) -> np.ndarray:
        """Scatter into a (num_classes+1, H, W) array, zeros for absent classes."""
        out = np.zeros((num_classes + 1,) + self.shape, dtype=self.probs.dtype)
        out[self.class_ids] = self.probs
        return out


@dataclass
class CrfParams:
    iterations: int = 10
    appearance_sxy: float = 40.0
    appearance_srgb: float = 13.0
    appearance_weight: float = 4.0
    smoothness_sxy: float = 3.0
    smoothness_weight: float = 3.0
    # appearance_sxy is quoted for 500 px images and rescaled by max(H, W) / 500
    reference_size: Optional[float] = 500.0
    unary_floor: float = 1e-8

    def __post_init__(self):
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if min(self.appearance_sxy, self.appearance_srgb, self.smoothness_sxy) <= 0:
            raise ValueError("kernel widths must be positive")
        if min(self.appearance_weight, self.smoothness_weight) < 0:
            raise ValueError("kernel weights must be non-negative")


def add_background(stack: CamStack, bg_power: float = 1.0) -> ProbField:
    if bg_power <= 0:
        raise ValueError("bg_power must be positive")
    h, w = stack.size
    maps = np.asarray(stack.maps, dtype=np.float64).reshape(-1, h, w)
    peak = maps.max(0) if len(maps) else np.zeros((h, w))
    bg = (1.0 - peak) ** bg_power
    scores = np.concatenate([bg[None], maps], axis=0)
    probs = scores / scores.sum(0, keepdims=True)
    return ProbField(stack.image_id, [0] + list(stack.class_ids), probs.astype(np.float32))


def _normalize(p):
    p = np.clip(np.asarray(p, dtype=np.float64), 0, None)
    return p / p.sum(0, keepdims=True)


@functools.lru_cache(maxsize=4)
def _position_kernels(h: int, w: int, sxy_app: float, sxy_smooth: float):
    # float32 only where the dense N x N matrices get large
    dtype = torch.float64 if h * w <= 1024 else torch.float32
    yy, xx = np.mgrid[0:h, 0:w]
    pos = torch.from_numpy(np.stack([yy.ravel(), xx.ravel()], 1).astype(np.float64))
    d2 = torch.cdist(pos, pos).pow_(2)
    # appearance kernel is kept as a log so colour terms fuse into one exp
    log_app = (-0.5 * d2 / sxy_app ** 2).to(dtype)
    smooth = torch.exp(-0.5 * d2 / sxy_smooth ** 2)
    smooth = smooth / smooth.sum(1, keepdim=True)
    # negligible weights would turn into float32 denormals, which are slow
    smooth[smooth < 1e-30] = 0.0
    return log_app, smooth.to(dtype)


def pairwise_matrix(image: np.ndarray, params: CrfParams) -> torch.Tensor:
    """Dense N x N message-passing matrix of the two Gaussian kernels.

    Each kernel is row-normalized (self term included) before weighting, so
    every row of the result sums to ``appearance_weight + smoothness_weight``.
    Colour differences are measured on the 0-255 scale.
    """
    h, w = image.shape[:2]
    scale = max(h, w) / params.reference_size if params.reference_size else 1.0
    log_app, smooth = _position_kernels(h, w, params.appearance_sxy * scale,
                                        params.smoothness_sxy)
    out = smooth * params.smoothness_weight
    if params.appearance_weight > 0:
        rgb = torch.from_numpy(image.reshape(-1, 3).astype(np.float64) * (255.0 / params.appearance_srgb))
        rgb = rgb.to(log_app.dtype)
        d2 = torch.cdist(rgb, rgb).pow_(2)
        # clamping keeps exp out of the (very slow) denormal range
        k = d2.mul_(-0.5).add_(log_app).clamp_(min=-60.0).exp_()
        k /= k.sum(1, keepdim=True)
        out = k.mul_(params.appearance_weight).add_(out)
    return out


def dense_crf(image: np.ndarray, field: ProbField, params: CrfParams = None,
              history: Optional[list] = None) -> ProbField:
    """Mean-field inference with Potts compatibility and unary ``-log(p)``.

    Update: ``Q_i(l) ∝ p_i(l) * exp(sum_j W_ij Q_j(l))``. When ``history`` is a
    list, the field after every iteration is appended to it.
    """
    params = params or CrfParams()
    probs = np.asarray(field.probs)
    if image.shape[:2] != probs.shape[1:]:
        raise ValueError(f"image {image.shape[:2]} and field {probs.shape[1:]} not aligned")
    L, h, w = probs.shape
    q = _normalize(probs).reshape(L, -1)
    if params.iterations == 0:
        out = q
    else:
        W = pairwise_matrix(image, params)
        unary = torch.from_numpy(np.log(np.maximum(q, params.unary_floor)))
        qt = torch.from_numpy(np.ascontiguousarray(q.T))   # (N, L)
        unary = unary.T.contiguous()
        for _ in range(params.iterations):
            msg = (W @ qt.to(W.dtype)).double()   # (N, L): sum_j W_ij Q_j(l)
            qt = torch.softmax(unary + msg, dim=1)
            if history is not None:
                history.append(qt.T.numpy().reshape(L, h, w).copy())
        out = qt.T.numpy()
    return ProbField(field.image_id, list(field.class_ids),
                     out.reshape(L, h, w).astype(np.float32))
