"""Differentiable building blocks for the policy.

Tensors and reverse-mode gradients come from torch autograd (a dynamically
recorded tape per forward pass). This module adds the small layer zoo the
policy needs, a named parameter store with a portable binary encoding, an
Adam optimizer and masked categorical sampling.
"""
from __future__ import annotations

import math
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Dict, Iterator, Optional, Tuple

import numpy as np
import torch

from .errors import ConfigurationError, ContractViolation, IntegrityError, ShapeError

Tensor = torch.Tensor


def linear(x: Tensor, W: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """``x @ W + b`` over any number of leading dimensions."""
    if W.dim() != 2 or x.shape[-1] != W.shape[0]:
        raise ShapeError(f"linear: input shape {tuple(x.shape)} incompatible with weight {tuple(W.shape)}")
    if b is not None and b.shape != (W.shape[1],):
        raise ShapeError(f"linear: bias shape {tuple(b.shape)} does not match weight {tuple(W.shape)}")
    y = x @ W
    return y + b if b is not None else y


def relu(x: Tensor) -> Tensor:
    return torch.relu(x)


def softmax(logits: Tensor, dim: int = -1) -> Tensor:
    # max-subtraction keeps exp() finite for large logits; -inf entries map to 0
    m = logits.amax(dim=dim, keepdim=True).detach()
    m = torch.where(torch.isfinite(m), m, torch.zeros_like(m))
    e = torch.exp(logits - m)
    return e / e.sum(dim=dim, keepdim=True)


def log_softmax(logits: Tensor, dim: int = -1) -> Tensor:
    m = logits.amax(dim=dim, keepdim=True).detach()
    m = torch.where(torch.isfinite(m), m, torch.zeros_like(m))
    shifted = logits - m
    return shifted - torch.log(torch.exp(shifted).sum(dim=dim, keepdim=True))


def multi_head_attention(q: Tensor, k: Tensor, v: Tensor, heads: int,
                         mask: Optional[Tensor] = None, w_out: Optional[Tensor] = None) -> Tensor:
    """Scaled dot-product attention split over ``heads``.

    q: (..., Lq, D), k and v: (..., Lk, D); ``mask`` (..., Lq, Lk) is True
    where a key must be ignored. Heads are concatenated and, when ``w_out``
    is given, projected by it.
    """
    D = q.shape[-1]
    if D % heads:
        raise ConfigurationError(f"embedding dim {D} not divisible by {heads} heads")
    if k.shape[-1] != D or v.shape[-1] != D or k.shape[-2] != v.shape[-2]:
        raise ShapeError(f"attention shapes q{tuple(q.shape)} k{tuple(k.shape)} v{tuple(v.shape)} disagree")
    hd = D // heads

    def split(t):
        return t.reshape(*t.shape[:-1], heads, hd).transpose(-2, -3)  # (..., H, L, hd)

    qh, kh, vh = split(q), split(k), split(v)
    scores = qh @ kh.transpose(-1, -2) / math.sqrt(hd)  # (..., H, Lq, Lk)
    if mask is not None:
        if bool(mask.all(-1).any()):
            raise ContractViolation("attention: every key is masked for some query")
        scores = scores.masked_fill(mask.unsqueeze(-3), float("-inf"))
    out = softmax(scores, -1) @ vh  # (..., H, Lq, hd)
    out = out.transpose(-2, -3).reshape(*q.shape[:-1], D)
    return linear(out, w_out) if w_out is not None else out


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: Tensor, running_var: Tensor,
               training: bool, momentum: float = 0.1, eps: float = 1e-5,
               update_stats: bool = True) -> Tensor:
    """Per-channel normalization over every leading position of ``x``.

    Training mode normalizes with the biased batch variance and moves the
    running statistics (unbiased variance) by ``momentum``; eval mode uses
    the running statistics.
    """
    C = x.shape[-1]
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ShapeError(f"batch_norm: {C} channels but gamma {tuple(gamma.shape)}, beta {tuple(beta.shape)}")
    flat = x.reshape(-1, C)
    if training:
        n = flat.shape[0]
        if n < 2:
            raise ContractViolation("batch_norm: training mode needs more than one position per channel")
        mean = flat.mean(0)
        var = flat.var(0, unbiased=False)
        if update_stats:
            with torch.no_grad():
                running_mean.mul_(1 - momentum).add_(momentum * mean.detach())
                running_var.mul_(1 - momentum).add_(momentum * var.detach() * n / (n - 1))
    else:
        mean, var = running_mean, running_var
    y = (flat - mean) / torch.sqrt(var + eps) * gamma + beta
    return y.reshape(x.shape)


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(param) into ``.grad`` of every reachable parameter."""
    if loss.dim() != 0:
        raise ContractViolation(f"backward needs a scalar loss, got shape {tuple(loss.shape)}")
    loss.backward()


def categorical_sample(logits: Tensor, generator: Optional[torch.Generator] = None):
    """Draw one index per row; returns ``(index, log_prob, entropy)``."""
    finite = torch.isfinite(logits)
    if bool((~finite.any(-1)).any()):
        raise ContractViolation("categorical_sample: a row has no finite logit")
    logp = log_softmax(logits, -1)
    probs = logp.exp()
    flat = probs.detach().reshape(-1, probs.shape[-1])
    idx = torch.multinomial(flat, 1, generator=generator).reshape(probs.shape[:-1])
    return idx, torch.gather(logp, -1, idx[..., None])[..., 0], entropy(logp)


def entropy(logp: Tensor) -> Tensor:
    p = logp.exp()
    return -(p * torch.where(p > 0, logp, torch.zeros_like(logp))).sum(-1)


class ParamStore:
    """Ordered name -> tensor map of trainable weights plus non-trainable buffers."""

    MAGIC = b"PSTORE01"

    def __init__(self, dtype=torch.float32, seed: int = 0):
        self.dtype = dtype
        self.params: "OrderedDict[str, Tensor]" = OrderedDict()
        self.buffers: "OrderedDict[str, Tensor]" = OrderedDict()
        self._gen = torch.Generator().manual_seed(seed)

    def add(self, name: str, shape, fan_in: Optional[int] = None, fill: Optional[float] = None) -> Tensor:
        if name in self.params or name in self.buffers:
            raise ConfigurationError(f"duplicate parameter name {name!r}")
        if fill is not None:
            t = torch.full(tuple(shape), float(fill), dtype=self.dtype)
        else:
            bound = 1.0 / math.sqrt(fan_in if fan_in else shape[0])
            t = (torch.rand(tuple(shape), generator=self._gen, dtype=torch.float64) * 2 - 1) * bound
            t = t.to(self.dtype)
        t.requires_grad_(True)
        self.params[name] = t
        return t

    def add_buffer(self, name: str, value: Tensor) -> Tensor:
        if name in self.params or name in self.buffers:
            raise ConfigurationError(f"duplicate parameter name {name!r}")
        self.buffers[name] = value.to(self.dtype)
        return self.buffers[name]

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name] if name in self.params else self.buffers[name]

    def __iter__(self) -> Iterator[Tensor]:
        return iter(self.params.values())

    def __len__(self):
        return len(self.params)

    def named(self):
        return list(self.params.items())

    def num_parameters(self) -> int:
        return sum(p.numel() for p in self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def to(self, dtype) -> "ParamStore":
        with torch.no_grad():
            for name, p in self.params.items():
                self.params[name] = p.detach().to(dtype).requires_grad_(True)
            for name, b in self.buffers.items():
                self.buffers[name] = b.to(dtype)
        self.dtype = dtype
        return self

    # little-endian encoding: name, shape header, float64 payload
    def to_bytes(self) -> bytes:
        out = [self.MAGIC, struct.pack("<I", len(self.params) + len(self.buffers))]
        for kind, store in ((0, self.params), (1, self.buffers)):
            for name, t in store.items():
                raw = name.encode("utf-8")
                arr = t.detach().cpu().numpy().astype("<f8")
                out.append(struct.pack("<BH", kind, len(raw)) + raw)
                out.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
                out.append(arr.tobytes())
        return b"".join(out)

    @classmethod
    def from_bytes(cls, data: bytes, dtype=torch.float32) -> "ParamStore":
        store = cls(dtype=dtype)
        view = memoryview(data)
        pos = 0

        def take(n):
            nonlocal pos
            if pos + n > len(view):
                raise IntegrityError("parameter payload truncated")
            chunk = view[pos:pos + n]
            pos += n
            return chunk

        if bytes(take(8)) != cls.MAGIC:
            raise IntegrityError("parameter payload has a bad magic header")
        (count,) = struct.unpack("<I", take(4))
        for _ in range(count):
            kind, nlen = struct.unpack("<BH", take(3))
            name = bytes(take(nlen)).decode("utf-8")
            (ndim,) = struct.unpack("<B", take(1))
            shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
            size = int(np.prod(shape)) if ndim else 1
            arr = np.frombuffer(take(8 * size), dtype="<f8").reshape(shape)
            t = torch.from_numpy(arr.copy()).to(dtype)
            if kind == 0:
                store.params[name] = t.requires_grad_(True)
            else:
                store.buffers[name] = t
        if pos != len(view):
            raise IntegrityError(f"{len(view) - pos} trailing bytes after parameter payload")
        return store


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: Dict[str, Tensor] = field(default_factory=dict)
    v: Dict[str, Tensor] = field(default_factory=dict)


def optimizer_step(params: ParamStore, state: AdamState, lr: float) -> None:
    """One bias-corrected Adam update in place, then clear the gradients."""
    missing = [n for n, p in params.params.items() if p.grad is None]
    if missing:
        raise ContractViolation(f"optimizer_step: no gradient for {missing[:3]}{'...' if len(missing) > 3 else ''}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1 - b1 ** state.t
    c2 = 1 - b2 ** state.t
    with torch.no_grad():
        for name, p in params.params.items():
            g = p.grad
            m = state.m.get(name)
            if m is None:
                m = state.m[name] = torch.zeros_like(p)
                state.v[name] = torch.zeros_like(p)
            v = state.v[name]
            m.mul_(b1).add_(g, alpha=1 - b1)
            v.mul_(b2).addcmul_(g, g, value=1 - b2)
            p.sub_(lr * (m / c1) / (torch.sqrt(v / c2) + state.eps))
    params.zero_grad()


def clip_grad_norm(params: ParamStore, max_norm: float) -> float:
    grads = [p.grad for p in params if p.grad is not None]
    if not grads:
        return 0.0
    total = torch.sqrt(sum((g.double() ** 2).sum() for g in grads)).item()
    if total > max_norm:
        scale = max_norm / (total + 1e-6)
        for g in grads:
            g.mul_(scale)
    return total
