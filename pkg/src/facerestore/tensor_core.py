"""Differentiable primitives with explicit shape contracts.

Tensors are ``torch.Tensor`` objects and the reverse-mode tape is torch's
define-by-run autograd graph. This module adds the shape checks the rest of
the package relies on, a channel-axis layer norm, nearest-neighbour
resampling, and ``grad_check``: a central finite-difference oracle that does
not use autograd for its numerical side.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ContractError, DimensionError

DTYPE = torch.float64
LAYER_NORM_EPS = 1e-5


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.dim() < 2 or b.dim() < 2:
        raise DimensionError(f"matmul needs rank >= 2 operands, got {tuple(a.shape)} and {tuple(b.shape)}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(
            f"matmul inner extents differ: {tuple(a.shape)} x {tuple(b.shape)}"
        )
    try:
        torch.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except RuntimeError as exc:
        raise DimensionError(
            f"matmul batch extents not broadcastable: {tuple(a.shape)} x {tuple(b.shape)}"
        ) from exc
    return torch.matmul(a, b)


def _check_axis(x: torch.Tensor, axis: int) -> int:
    if not -x.dim() <= axis < x.dim():
        raise DimensionError(f"axis {axis} out of range for shape {tuple(x.shape)}")
    return axis % x.dim()


def softmax(x: torch.Tensor, axis: int = -1) -> torch.Tensor:
    axis = _check_axis(x, axis)
    shifted = x - x.amax(dim=axis, keepdim=True).detach()
    e = torch.exp(shifted)
    return e / e.sum(dim=axis, keepdim=True)


def layer_norm(
    x: torch.Tensor,
    gain: torch.Tensor | None = None,
    bias: torch.Tensor | None = None,
    eps: float = LAYER_NORM_EPS,
    axis: int = 1,
) -> torch.Tensor:
    """Normalize over ``axis`` only (channels for NCHW maps).

    ``gain`` and ``bias`` have length ``x.shape[axis]``.
    """
    axis = _check_axis(x, axis)
    mean = x.mean(dim=axis, keepdim=True)
    centered = x - mean
    var = (centered * centered).mean(dim=axis, keepdim=True)
    y = centered / torch.sqrt(var + eps)
    shape = [1] * x.dim()
    shape[axis] = x.shape[axis]
    if gain is not None:
        y = y * gain.reshape(shape)
    if bias is not None:
        y = y + bias.reshape(shape)
    return y


def conv2d(
    x: torch.Tensor,
    kernel: torch.Tensor,
    bias: torch.Tensor | None = None,
    stride: int = 1,
    padding: int = 0,
) -> torch.Tensor:
    """Zero-padded 2-D cross-correlation over NCHW input, OIHW kernel."""
    if x.dim() != 4 or kernel.dim() != 4:
        raise DimensionError(f"conv2d expects NCHW input and OIHW kernel, got {tuple(x.shape)}, {tuple(kernel.shape)}")
    if x.shape[1] != kernel.shape[1]:
        raise DimensionError(
            f"conv2d channel mismatch: input {tuple(x.shape)} vs kernel {tuple(kernel.shape)}"
        )
    ph, pw = x.shape[2] + 2 * padding, x.shape[3] + 2 * padding
    if kernel.shape[2] > ph or kernel.shape[3] > pw:
        raise DimensionError(
            f"conv2d kernel {tuple(kernel.shape[2:])} larger than padded input ({ph}, {pw})"
        )
    return F.conv2d(x, kernel, bias, stride=stride, padding=padding)


def resample_nearest(x: torch.Tensor, factor: int, direction: str = "up") -> torch.Tensor:
    """Nearest-neighbour scaling of the two trailing axes by an integer factor.

    Downsampling keeps the top-left sample of every ``factor x factor`` block.
    """
    if int(factor) != factor or factor < 1:
        raise ContractError(f"factor must be a positive integer, got {factor}")
    factor = int(factor)
    if factor == 1:
        return x
    if direction == "up":
        return x.repeat_interleave(factor, dim=-2).repeat_interleave(factor, dim=-1)
    if direction == "down":
        h, w = x.shape[-2:]
        if h % factor or w % factor:
            raise DimensionError(f"extent {(h, w)} not divisible by downsampling factor {factor}")
        return x[..., ::factor, ::factor]
    raise ContractError(f"direction must be 'up' or 'down', got {direction!r}")


def backward(loss: torch.Tensor) -> None:
    if loss.numel() != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {tuple(loss.shape)}")
    loss.reshape(()).backward()


def grad_check(
    f: Callable[..., torch.Tensor],
    inputs: torch.Tensor | Sequence[torch.Tensor],
    h: float = 1e-5,
    max_coords: int | None = None,
    seed: int = 0,
) -> float:
    """Max relative error between autograd and central differences.

    ``f(*inputs)`` must return a scalar. The error for one coordinate is
    ``|analytic - numeric| / max(1, |analytic|)``. Inputs are perturbed in
    place and restored, so module parameters can be passed directly. With
    ``max_coords`` only that many randomly chosen coordinates per input are
    probed.
    """
    if isinstance(inputs, torch.Tensor):
        inputs = [inputs]
    inputs = list(inputs)
    flags = [t.requires_grad for t in inputs]
    for t in inputs:
        t.requires_grad_(True)
        t.grad = None
    try:
        out = f(*inputs)
        if out.numel() != 1:
            raise ContractError("grad_check needs a scalar-valued function")
        analytic = torch.autograd.grad(out.reshape(()), inputs, allow_unused=True)
        rng = np.random.default_rng(seed)
        worst = 0.0
        with torch.no_grad():
            for t, g in zip(inputs, analytic):
                g = torch.zeros_like(t) if g is None else g
                flat = t.view(-1)
                gflat = g.reshape(-1)
                coords = range(flat.numel())
                if max_coords is not None and flat.numel() > max_coords:
                    coords = rng.choice(flat.numel(), size=max_coords, replace=False)
                for i in coords:
                    i = int(i)
                    orig = flat[i].item()
                    flat[i] = orig + h
                    fp = f(*inputs).item()
                    flat[i] = orig - h
                    fm = f(*inputs).item()
                    flat[i] = orig
                    numeric = (fp - fm) / (2.0 * h)
                    a = gflat[i].item()
                    err = abs(a - numeric) / max(1.0, abs(a))
                    if math.isnan(err):
                        return math.inf
                    worst = max(worst, err)
        return worst
    finally:
        for t, flag in zip(inputs, flags):
            t.requires_grad_(flag)
