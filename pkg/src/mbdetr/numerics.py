"""Numeric primitives shared by every trainable part of the package.

Arrays are ``torch.Tensor`` objects in float64; reverse-mode gradients come
from torch's recorded graph. The primitives here (``linear``, ``softmax``,
``bilinear_sample``) are written against plain tensor indexing so that their
semantics, in particular the zero-padding rule of the sampler, are fixed by
this module and not by a library kernel.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numba
import numpy as np
import torch

DTYPE = torch.float64


class NonFiniteError(FloatingPointError):
    """Raised when a NaN or Inf shows up in a computed array."""


def as_array(data, dtype: torch.dtype = DTYPE) -> torch.Tensor:
    """Build a float64 tensor from nested lists, numpy arrays or tensors."""
    if isinstance(data, torch.Tensor):
        return data.to(dtype)
    return torch.as_tensor(np.asarray(data, dtype=np.float64), dtype=dtype)


def check_finite(x: torch.Tensor, what: str = "array") -> torch.Tensor:
    if not bool(torch.isfinite(x).all()):
        raise NonFiniteError(f"{what} contains NaN or Inf")
    return x


def make_rng(seed) -> np.random.Generator:
    """Seeded numpy generator; ``seed`` may be an int or a sequence of ints."""
    return np.random.default_rng(seed)


def spawn(rng: np.random.Generator, n: int) -> list[np.random.Generator]:
    """Split ``rng`` into ``n`` independent child generators."""
    return [np.random.default_rng(s) for s in rng.bit_generator.seed_seq.spawn(n)]


def torch_generator(seed: int) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(int(seed))
    return g


def linear(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor | None = None) -> torch.Tensor:
    """``y = x @ weight + bias`` with ``weight`` laid out as ``[Din, Dout]``."""
    if x.shape[-1] != weight.shape[0]:
        raise ValueError(f"dimension mismatch: x has {x.shape[-1]} features, weight expects {weight.shape[0]}")
    if bias is not None and bias.shape[-1] != weight.shape[1]:
        raise ValueError(f"dimension mismatch: bias has {bias.shape[-1]} entries, weight produces {weight.shape[1]}")
    y = x @ weight
    return check_finite(y if bias is None else y + bias, "linear output")


def softmax(x: torch.Tensor, axis: int = -1) -> torch.Tensor:
    z = x - x.amax(dim=axis, keepdim=True).detach()
    e = torch.exp(z)
    return check_finite(e / e.sum(dim=axis, keepdim=True), "softmax output")


def log_softmax(x: torch.Tensor, axis: int = -1) -> torch.Tensor:
    z = x - x.amax(dim=axis, keepdim=True).detach()
    return z - torch.log(torch.exp(z).sum(dim=axis, keepdim=True))


_DX = torch.tensor([0, 1, 0, 1])
_DY = torch.tensor([0, 0, 1, 1])


def bilinear_corners(points: torch.Tensor, height: int, width: int) -> tuple[torch.Tensor, torch.Tensor]:
    """Flat indices and weights of the four pixels around each point.

    ``points [..., 2]`` holds ``(x, y)`` in pixel-index units: pixel
    ``(row i, col j)`` sits at ``x=j, y=i``. Returns ``idx [..., 4]`` (row-major,
    clamped into range) and ``weight [..., 4]``. Corners off the map get weight
    0, so a point with ``x <= -1``, ``x >= W``, ``y <= -1`` or ``y >= H``
    samples exactly 0. Weights are differentiable in ``points``.
    """
    base = torch.floor(points.detach())
    frac = points - base
    base = base.long()
    # corner order: (0,0), (1,0), (0,1), (1,1) as (dx, dy)
    xi = base[..., :1] + _DX
    yi = base[..., 1:] + _DY
    fx, fy = frac[..., :1], frac[..., 1:]
    wx = torch.cat([1.0 - fx, fx, 1.0 - fx, fx], dim=-1)
    wy = torch.cat([1.0 - fy, 1.0 - fy, fy, fy], dim=-1)
    inside = (xi >= 0) & (xi < width) & (yi >= 0) & (yi < height)
    idx = yi.clamp(0, height - 1) * width + xi.clamp(0, width - 1)
    return idx, wx * wy * inside.to(points.dtype)


@numba.njit(cache=True)
def _wg_forward(values, idx, weights, out):
    q_count, j_count = idx.shape
    c_count = values.shape[1]
    for q in range(q_count):
        for j in range(j_count):
            w = weights[q, j]
            if w != 0.0:
                r = idx[q, j]
                for c in range(c_count):
                    out[q, c] += w * values[r, c]


@numba.njit(cache=True)
def _wg_backward(values, idx, weights, grad_out, grad_values, grad_weights):
    q_count, j_count = idx.shape
    c_count = values.shape[1]
    for q in range(q_count):
        for j in range(j_count):
            r = idx[q, j]
            w = weights[q, j]
            acc = 0.0
            for c in range(c_count):
                g = grad_out[q, c]
                acc += g * values[r, c]
                grad_values[r, c] += w * g
            grad_weights[q, j] = acc


class _WeightedGather(torch.autograd.Function):
    @staticmethod
    def forward(ctx, values, idx, weights):
        v = values.detach().contiguous()
        w = weights.detach().contiguous()
        i = idx.contiguous()
        out = torch.zeros(i.shape[0], v.shape[1], dtype=v.dtype)
        _wg_forward(v.numpy(), i.numpy(), w.numpy(), out.numpy())
        ctx.save_for_backward(v, i, w)
        return out

    @staticmethod
    def backward(ctx, grad_out):
        v, i, w = ctx.saved_tensors
        grad_values = torch.zeros_like(v)
        grad_weights = torch.zeros_like(w)
        _wg_backward(v.numpy(), i.numpy(), w.numpy(), grad_out.detach().contiguous().numpy(),
                     grad_values.numpy(), grad_weights.numpy())
        return grad_values, None, grad_weights


def weighted_gather(values: torch.Tensor, idx: torch.Tensor, weights: torch.Tensor) -> torch.Tensor:
    """``out[q] = sum_j weights[q, j] * values[idx[q, j]]`` without materializing the gathered rows.

    values ``[R, C]``, idx ``[Q, J]`` (int64, in range), weights ``[Q, J]`` -> ``[Q, C]``.
    Rows of ``values`` not named in ``idx`` are never read.
    """
    if values.dtype != weights.dtype:
        raise TypeError("values and weights must share a dtype")
    return _WeightedGather.apply(values, idx.to(torch.int64), weights)


def sample_flat(values: torch.Tensor, height: int, width: int, points: torch.Tensor) -> torch.Tensor:
    """Bilinear lookup in row-major flattened maps.

    values: ``[N, H*W, C]``; points: ``[N, P, 2]`` as in ``bilinear_corners``.
    Returns ``[N, P, C]``. Only the four corner pixels of each point are read.
    """
    n, hw, c = values.shape
    p = points.shape[1]
    idx, w = bilinear_corners(points, height, width)
    idx = idx + (torch.arange(n) * hw).view(n, 1, 1)
    out = weighted_gather(values.reshape(n * hw, c), idx.reshape(n * p, 4), w.reshape(n * p, 4))
    return out.view(n, p, c)


def bilinear_sample(feat: torch.Tensor, points: torch.Tensor) -> torch.Tensor:
    """Sample ``feat [C, H, W]`` at ``points [P, 2]`` (``(x, y)`` pixels) -> ``[P, C]``."""
    c, h, w = feat.shape
    values = feat.reshape(c, h * w).transpose(0, 1).unsqueeze(0)
    return check_finite(sample_flat(values, h, w, points.unsqueeze(0))[0], "sampled features")


def grad_check(
    f: Callable,
    x: torch.Tensor | Sequence[torch.Tensor],
    eps: float = 1e-5,
) -> float:
    """Compare autograd against central differences.

    ``f`` is called with ``x`` (a tensor, or the sequence of tensors) and must
    return a scalar. Tensors in a sequence are perturbed in place, which lets
    module parameters be checked by passing ``model.parameters()`` and a
    closure that ignores its argument. Returns
    ``max |analytic - numeric| / max(1, |analytic|)`` over every coordinate.
    """
    if isinstance(x, torch.Tensor):
        arg = x.detach().clone().requires_grad_(True)
        leaves = [arg]
    else:
        leaves = [t if t.requires_grad else t.requires_grad_(True) for t in x]
        arg = leaves
    out = f(arg)
    if not isinstance(out, torch.Tensor) or out.numel() != 1:
        raise TypeError("grad_check needs a scalar-valued function")
    grads = torch.autograd.grad(out.reshape(()), leaves, allow_unused=True)

    worst = 0.0
    with torch.no_grad():
        for leaf, g in zip(leaves, grads):
            g = torch.zeros_like(leaf) if g is None else g
            flat = leaf.view(-1)
            gflat = g.reshape(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + eps
                fp = float(f(arg))
                flat[i] = orig - eps
                fm = float(f(arg))
                flat[i] = orig
                numeric = (fp - fm) / (2.0 * eps)
                analytic = gflat[i].item()
                err = abs(analytic - numeric) / max(1.0, abs(analytic))
                worst = max(worst, err)
    return worst
