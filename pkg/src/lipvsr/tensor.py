"""Numerical core: checked tensor ops, initialization and gradient checking.

Tensors are ``torch.Tensor``; autograd provides the reverse-mode graph.  The
functions here add the shape validation, numerically stable formulations and
finite-difference tooling the rest of the package relies on.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F


class DimensionError(ValueError):
    """Raised when operand extents are incompatible."""


def _triple(v) -> tuple[int, int, int]:
    if isinstance(v, int):
        return (v, v, v)
    v = tuple(int(a) for a in v)
    if len(v) != 3:
        raise DimensionError(f"expected 3 values, got {v}")
    return v


def conv_output_extent(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.dim() < 1 or b.dim() < 1 or a.shape[-1] != b.shape[-2 if b.dim() > 1 else 0]:
        raise DimensionError(f"matmul: cannot multiply {tuple(a.shape)} by {tuple(b.shape)}")
    return a @ b


def conv3d(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor | None = None,
           stride=1, padding=0) -> torch.Tensor:
    """Zero-padded 3-D cross-correlation.

    ``x`` is ``C×T×H×W`` or batched ``N×C×T×H×W``; ``weight`` is
    ``out×C×kt×kh×kw``.
    """
    stride, padding = _triple(stride), _triple(padding)
    unbatched = x.dim() == 4
    if unbatched:
        x = x.unsqueeze(0)
    if x.dim() != 5 or weight.dim() != 5:
        raise DimensionError(f"conv3d: bad ranks {tuple(x.shape)}, {tuple(weight.shape)}")
    if x.shape[1] != weight.shape[1]:
        raise DimensionError(f"conv3d: {x.shape[1]} input channels, kernel expects {weight.shape[1]}")
    for n, k, s, p in zip(x.shape[2:], weight.shape[2:], stride, padding):
        if s < 1 or p < 0 or conv_output_extent(n, k, s, p) < 1:
            raise DimensionError(f"conv3d: non-positive output extent for input {tuple(x.shape)}, "
                                 f"kernel {tuple(weight.shape[2:])}, stride {stride}, padding {padding}")
    y = F.conv3d(x, weight, bias, stride=stride, padding=padding)
    return y.squeeze(0) if unbatched else y


def conv2d(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor | None = None,
           stride: int = 1, padding: int = 0) -> torch.Tensor:
    """2-D cross-correlation on ``N×C×H×W``.

    When the output is a single position the kernel is cropped to the taps that
    overlap the input and applied as one matrix product (padding taps multiply
    zeros), which is much faster than the generic kernel on tiny inputs.
    """
    N, C, H, W = x.shape
    kh, kw = weight.shape[2:]
    Ho = conv_output_extent(H, kh, stride, padding)
    Wo = conv_output_extent(W, kw, stride, padding)
    if Ho < 1 or Wo < 1:
        raise DimensionError(f"conv2d: non-positive output extent for input {tuple(x.shape)}")
    if Ho == 1 and Wo == 1 and H <= kh - padding and W <= kw - padding:
        w = weight[:, :, padding:padding + H, padding:padding + W]
        y = x.reshape(N, -1) @ w.reshape(w.shape[0], -1).t()
        if bias is not None:
            y = y + bias
        return y.reshape(N, -1, 1, 1)
    return F.conv2d(x, weight, bias, stride=stride, padding=padding)


class Conv2d(nn.Conv2d):
    def forward(self, x):
        return conv2d(x, self.weight, self.bias, self.stride[0], self.padding[0])


def softmax(x: torch.Tensor, axis: int = -1) -> torch.Tensor:
    """Max-shifted softmax (torch's kernel subtracts the row maximum)."""
    return torch.softmax(x, dim=axis)


def log_softmax(x: torch.Tensor, axis: int = -1) -> torch.Tensor:
    return torch.log_softmax(x, dim=axis)


def layer_norm(x: torch.Tensor, weight: torch.Tensor | None = None,
               bias: torch.Tensor | None = None, eps: float = 1e-5) -> torch.Tensor:
    """Normalize the last axis with population variance, then apply the affine map."""
    if x.shape[-1] < 2:
        raise DimensionError("layer_norm needs at least 2 features")
    return F.layer_norm(x, x.shape[-1:], weight, bias, eps)


def swish(x: torch.Tensor) -> torch.Tensor:
    return F.silu(x)


class LayerNorm(nn.Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        super().__init__()
        self.eps = eps
        self.weight = nn.Parameter(torch.ones(dim))
        self.bias = nn.Parameter(torch.zeros(dim))

    def forward(self, x):
        return layer_norm(x, self.weight, self.bias, self.eps)


class Swish(nn.Module):
    def forward(self, x):
        return swish(x)


def fan_in(weight: torch.Tensor) -> int:
    if weight.dim() < 2:
        return weight.shape[0]
    return int(weight.shape[1] * math.prod(weight.shape[2:]))


@torch.no_grad()
def init_uniform_(module: nn.Module, generator: torch.Generator | None = None) -> nn.Module:
    """uniform(-sqrt(1/fan_in), +sqrt(1/fan_in)) for every affine/conv/embedding layer.

    Biases share the bound of their layer's weight.  Normalization layers are
    reset to unit scale and zero shift.
    """
    for m in module.modules():
        if isinstance(m, (nn.Linear, nn.Conv1d, nn.Conv2d, nn.Conv3d)):
            bound = math.sqrt(1.0 / fan_in(m.weight))
            m.weight.copy_(torch.empty_like(m.weight).uniform_(-bound, bound, generator=generator))
            if m.bias is not None:
                m.bias.copy_(torch.empty_like(m.bias).uniform_(-bound, bound, generator=generator))
        elif isinstance(m, nn.Embedding):
            # an embedding row is selected by a one-hot input: fan_in 1
            m.weight.copy_(torch.empty_like(m.weight).uniform_(-1.0, 1.0, generator=generator))
        elif isinstance(m, (nn.BatchNorm1d, nn.BatchNorm2d, nn.BatchNorm3d, LayerNorm)):
            if getattr(m, "weight", None) is not None:
                m.weight.fill_(1.0)
                m.bias.zero_()
    return module


def relative_error(a: torch.Tensor, b: torch.Tensor, floor: float = 1e-8) -> torch.Tensor:
    denom = torch.maximum(torch.maximum(a.abs(), b.abs()), torch.full_like(a, floor))
    return (a - b).abs() / denom


def grad_check(f: Callable[[torch.Tensor], torch.Tensor], x: torch.Tensor, eps: float = 1e-6,
               indices: Iterable[int] | None = None) -> float:
    """Max relative error between autodiff and central differences of scalar ``f`` at ``x``.

    The denominator is ``max(|analytic|, |numeric|, 1e-3 * max|gradient|)``, so
    coordinates whose true gradient is (structurally) zero are judged against
    the gradient's own scale instead of amplifying round-off.  ``indices``
    restricts the comparison to selected flat coordinates of ``x``.
    """
    x = x.detach().clone().to(torch.float64)
    xa = x.clone().requires_grad_(True)
    out = f(xa)
    if out.numel() != 1:
        raise DimensionError("grad_check needs a scalar-valued function")
    (g,) = torch.autograd.grad(out, xa, allow_unused=True)
    g = torch.zeros_like(x) if g is None else g.detach()
    floor = max(1e-8, 1e-3 * g.abs().max().item())
    flat = x.reshape(-1)
    idx = range(flat.numel()) if indices is None else list(indices)
    worst = 0.0
    with torch.no_grad():
        for i in idx:
            orig = flat[i].item()
            flat[i] = orig + eps
            fp = f(x).item()
            flat[i] = orig - eps
            fm = f(x).item()
            flat[i] = orig
            num = torch.tensor((fp - fm) / (2 * eps), dtype=torch.float64)
            err = relative_error(g.reshape(-1)[i], num, floor).item()
            worst = max(worst, err)
    return worst


def flat_parameters(module: nn.Module) -> tuple[torch.Tensor, list[tuple[str, torch.Size]]]:
    names = [(n, p.shape) for n, p in module.named_parameters() if p.requires_grad]
    params = dict(module.named_parameters())
    vec = torch.cat([params[n].detach().reshape(-1) for n, _ in names]).to(torch.float64)
    return vec, names


def unflatten(vec: torch.Tensor, layout: Sequence[tuple[str, torch.Size]]) -> dict[str, torch.Tensor]:
    out, offset = {}, 0
    for name, shape in layout:
        n = math.prod(shape)
        out[name] = vec[offset:offset + n].reshape(shape)
        offset += n
    return out


def module_grad_check(module: nn.Module, loss_fn: Callable[[nn.Module], torch.Tensor],
                      eps: float = 1e-6, max_coords: int | None = None, seed: int = 0) -> float:
    """Finite-difference check of ``loss_fn(module)`` w.r.t. all trainable parameters.

    With ``max_coords`` a seeded sample of coordinates is checked, always
    including the first coordinate of every parameter tensor.
    """
    vec, layout = flat_parameters(module)
    buffers = {k: b.clone() for k, b in module.named_buffers()}

    def f(v):
        return _call_loss(module, unflatten(v, layout), loss_fn)

    indices = None
    if max_coords is not None and max_coords < vec.numel():
        g = torch.Generator().manual_seed(seed)
        starts, offset = [], 0
        for _, shape in layout:
            starts.append(offset)
            offset += math.prod(shape)
        extra = torch.randperm(vec.numel(), generator=g)[:max(0, max_coords - len(starts))].tolist()
        indices = sorted(set(starts) | set(extra))
    try:
        return grad_check(f, vec, eps=eps, indices=indices)
    finally:
        with torch.no_grad():
            for k, b in module.named_buffers():
                b.copy_(buffers[k])


def _call_loss(module: nn.Module, params: dict[str, torch.Tensor], loss_fn) -> torch.Tensor:
    # swap parameters in place of the module's own for the duration of one call
    saved = {}
    for name, value in params.items():
        owner, attr = _owner(module, name)
        saved[name] = owner._parameters[attr]
        owner._parameters[attr] = value
    try:
        return loss_fn(module)
    finally:
        for name, p in saved.items():
            owner, attr = _owner(module, name)
            owner._parameters[attr] = p


def _owner(module: nn.Module, name: str) -> tuple[nn.Module, str]:
    *path, attr = name.split(".")
    for part in path:
        module = getattr(module, part)
    return module, attr


def reset_batchnorm_stats(module: nn.Module) -> None:
    for m in module.modules():
        if isinstance(m, nn.modules.batchnorm._BatchNorm):
            m.reset_running_stats()
