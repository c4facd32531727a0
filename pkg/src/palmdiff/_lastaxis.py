"""Reductions over a short trailing axis (the edge slots of a PALM row).

numpy and torch reduce a trailing axis of length 2..8 slowly because every
output element walks a tiny strided loop. Combining the slices instead keeps
every operation a flat elementwise pass. Accepts numpy arrays and tensors.
"""

import numpy as np
import torch


def lsum(a, keepdims: bool = True):
    out = a[..., 0]
    for j in range(1, a.shape[-1]):
        out = out + a[..., j]
    return out[..., None] if keepdims else out


def lmax(a, keepdims: bool = True):
    maximum = torch.maximum if isinstance(a, torch.Tensor) else np.maximum
    out = a[..., 0]
    for j in range(1, a.shape[-1]):
        out = maximum(out, a[..., j])
    return out[..., None] if keepdims else out


def lcumsum(a: np.ndarray) -> np.ndarray:
    out = np.empty_like(a)
    out[..., 0] = a[..., 0]
    for j in range(1, a.shape[-1]):
        out[..., j] = out[..., j - 1] + a[..., j]
    return out
