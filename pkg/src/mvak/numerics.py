"""Deterministic differentiable tensor core.

Tensors are torch CPU tensors: float64 in test / gradient-check mode, float32 in
training mode. Reverse-mode gradients come from torch's tape; the contract that
matters here is external and is pinned by :func:`grad_check` (central finite
differences) plus the brute-force oracles in the test suite. All randomness in the
package flows through :class:`Rng`, whose streams are platform-independent.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np
import torch

TRAIN_DTYPE = torch.float32
TEST_DTYPE = torch.float64


class ShapeError(ValueError):
    """Operand dimensions do not line up."""


class NumericError(ArithmeticError):
    """A non-finite value appeared where only finite values are allowed."""


class DomainError(ValueError):
    """Argument outside the operation's domain."""


class Rng:
    """Seeded random source with a platform-independent stream.

    Identical seeds produce identical draw sequences (PCG64). Torch never sees the
    seed directly; torch tensors are filled from numpy draws so determinism does not
    depend on torch's generator internals.
    """

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._gen = np.random.default_rng(self.seed)

    def child(self) -> "Rng":
        """Derive an independent deterministic substream."""
        return Rng(int(self._gen.integers(0, 2**63 - 1)))

    def child_seed(self) -> int:
        return int(self._gen.integers(0, 2**63 - 1))

    def uniform(self, low: float = 0.0, high: float = 1.0, size=None):
        return self._gen.uniform(low, high, size)

    def integers(self, low: int, high: int, size=None):
        return self._gen.integers(low, high, size)

    def normal(self, size=None, std: float = 1.0):
        return self._gen.normal(0.0, std, size)

    def choice(self, n: int, size: int, replace: bool = False):
        return self._gen.choice(n, size=size, replace=replace)

    def normal_tensor(self, shape: Sequence[int], dtype: torch.dtype = TRAIN_DTYPE) -> torch.Tensor:
        arr = self._gen.standard_normal(tuple(shape))
        return torch.from_numpy(arr).to(dtype)

    def uniform_tensor(self, shape: Sequence[int], low: float = 0.0, high: float = 1.0,
                       dtype: torch.dtype = TRAIN_DTYPE) -> torch.Tensor:
        arr = self._gen.uniform(low, high, tuple(shape))
        return torch.from_numpy(arr).to(dtype)

    def trunc_normal_tensor(self, shape: Sequence[int], std: float = 0.02,
                            dtype: torch.dtype = TRAIN_DTYPE) -> torch.Tensor:
        """Normal(0, std) resampled until within 2 std, elementwise."""
        arr = self._gen.normal(0.0, 1.0, tuple(shape))
        bad = np.abs(arr) > 2.0
        while bad.any():
            arr[bad] = self._gen.normal(0.0, 1.0, int(bad.sum()))
            bad = np.abs(arr) > 2.0
        return torch.from_numpy(arr * std).to(dtype)


def assert_finite(t: torch.Tensor, what: str = "tensor") -> None:
    if not torch.isfinite(t).all():
        raise NumericError(f"non-finite values in {what}")


def attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor, scale: float) -> torch.Tensor:
    """Scaled dot-product attention over the last two dims.

    q: [..., s_q, d], k: [..., s_k, d], v: [..., s_k, d_v]. Softmax is taken per
    query row; rows sum to 1 within 1e-6 by construction (max-subtracted softmax).
    """
    if scale <= 0:
        raise DomainError(f"attention scale must be positive, got {scale}")
    if q.shape[-1] != k.shape[-1]:
        raise ShapeError(f"q feature dim {q.shape[-1]} != k feature dim {k.shape[-1]}")
    if k.shape[-2] != v.shape[-2]:
        raise ShapeError(f"k rows {k.shape[-2]} != v rows {v.shape[-2]}")
    assert_finite(q, "attention query")
    assert_finite(k, "attention key")
    assert_finite(v, "attention value")
    logits = scale * (q @ k.transpose(-1, -2))
    weights = torch.softmax(logits, dim=-1)
    return weights @ v


def conv2d(x: torch.Tensor, kernel: torch.Tensor, stride: int = 1, pad: int = 0) -> torch.Tensor:
    """Cross-correlation of x [c_in,h,w] with kernel [c_out,c_in,kh,kw]."""
    if x.dim() != 3 or kernel.dim() != 4:
        raise ShapeError(f"conv2d expects x[c,h,w] and kernel[o,c,kh,kw], got {tuple(x.shape)}, {tuple(kernel.shape)}")
    if x.shape[0] != kernel.shape[1]:
        raise ShapeError(f"input channels {x.shape[0]} != kernel channels {kernel.shape[1]}")
    if pad < 0:
        raise DomainError("pad must be >= 0")
    c_in, h, w = x.shape
    kh, kw = kernel.shape[2], kernel.shape[3]
    for name, extent, ksz in (("height", h, kh), ("width", w, kw)):
        span = extent + 2 * pad - ksz
        if span < 0 or span % stride != 0:
            raise ShapeError(f"non-integral output {name}: ({extent} + 2*{pad} - {ksz}) / {stride}")
    assert_finite(x, "conv2d input")
    return torch.nn.functional.conv2d(x.unsqueeze(0), kernel, stride=stride, padding=pad).squeeze(0)


def group_norm(x: torch.Tensor, groups: int, gamma: torch.Tensor, beta: torch.Tensor,
               eps: float = 1e-5) -> torch.Tensor:
    """Per-group normalization of x [c,h,w] to zero mean / unit variance, then affine."""
    if x.dim() != 3:
        raise ShapeError(f"group_norm expects x[c,h,w], got {tuple(x.shape)}")
    c = x.shape[0]
    if c % groups != 0:
        raise ShapeError(f"channels {c} not divisible by groups {groups}")
    if eps <= 0:
        raise DomainError("eps must be positive")
    assert_finite(x, "group_norm input")
    return torch.nn.functional.group_norm(x.unsqueeze(0), groups, gamma, beta, eps).squeeze(0)


def grad_check(op: Callable[..., torch.Tensor], inputs: Sequence[torch.Tensor],
               eps: float = 1e-4) -> float:
    """Max scaled error between reverse-mode and central-difference gradients.

    `op` must reduce to a scalar. Inputs must be float64 leaf tensors; each element
    is perturbed by +-eps and the two-sided difference quotient is compared against
    the taped gradient. Error is |analytic - numeric| / max(1, |analytic|, |numeric|)
    so near-zero gradients are judged absolutely.
    """
    if not (1e-6 <= eps <= 1e-3):
        raise DomainError(f"eps {eps} outside [1e-6, 1e-3]")
    leaves = []
    for x in inputs:
        if x.dtype != torch.float64:
            raise DomainError("grad_check requires float64 inputs")
        leaves.append(x.detach().clone().requires_grad_(True))

    out = op(*leaves)
    if out.numel() != 1:
        raise ShapeError("grad_check op must be scalar-valued (sum-reduce it first)")
    if not torch.isfinite(out):
        raise NumericError("non-finite op output in grad_check")
    grads = torch.autograd.grad(out, leaves, allow_unused=True)

    plain = [leaf.detach().clone() for leaf in leaves]
    worst = 0.0
    with torch.no_grad():
        for idx, g in enumerate(grads):
            analytic = torch.zeros_like(leaves[idx]) if g is None else g
            flat = plain[idx].reshape(-1)
            ga = analytic.reshape(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + eps
                hi = op(*plain)
                flat[i] = orig - eps
                lo = op(*plain)
                flat[i] = orig
                if not (torch.isfinite(hi) and torch.isfinite(lo)):
                    raise NumericError("non-finite perturbation result in grad_check")
                numeric = (hi.item() - lo.item()) / (2.0 * eps)
                a = ga[i].item()
                err = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
                worst = max(worst, err)
    return worst


def sinusoidal_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    """Standard sin/cos timestep features: t [n] -> [n, dim]."""
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=t.dtype) / max(half - 1, 1))
    ang = t[:, None] * freqs[None, :]
    emb = torch.cat([torch.sin(ang), torch.cos(ang)], dim=1)
    if dim % 2 == 1:
        emb = torch.nn.functional.pad(emb, (0, 1))
    return emb
