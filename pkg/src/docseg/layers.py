"""Shared transformer building blocks: attention, FFN, positional encodings."""

from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import Tensor, nn


class Attention(nn.Module):
    """Multi-head attention with an optional boolean keep-mask.

    keep_mask follows scaled_dot_product_attention semantics: True at
    (query, key) means the key participates. Rows that would mask out every
    key must be opened by the caller before the call.
    """

    def __init__(self, dim: int, num_heads: int):
        super().__init__()
        if dim % num_heads != 0:
            raise ValueError(f"dim {dim} not divisible by num_heads {num_heads}")
        self.dim = dim
        self.num_heads = num_heads
        self.q_proj = nn.Linear(dim, dim)
        self.k_proj = nn.Linear(dim, dim)
        self.v_proj = nn.Linear(dim, dim)
        self.out_proj = nn.Linear(dim, dim)
        for p in self.parameters():
            if p.dim() > 1:
                nn.init.xavier_uniform_(p)

    def _split(self, x: Tensor) -> Tensor:
        b, l, _ = x.shape
        return x.view(b, l, self.num_heads, self.dim // self.num_heads).transpose(1, 2)

    def forward(self, query: Tensor, key: Tensor, value: Tensor, keep_mask: Tensor | None = None) -> Tensor:
        q = self._split(self.q_proj(query))
        k = self._split(self.k_proj(key))
        v = self._split(self.v_proj(value))
        mask = None
        if keep_mask is not None:
            mask = keep_mask if keep_mask.dim() == 4 else keep_mask.unsqueeze(1)
        out = F.scaled_dot_product_attention(q, k, v, attn_mask=mask)
        b, _, l, _ = out.shape
        return self.out_proj(out.transpose(1, 2).reshape(b, l, self.dim))


class FeedForward(nn.Module):
    def __init__(self, dim: int, hidden_dim: int):
        super().__init__()
        self.linear1 = nn.Linear(dim, hidden_dim)
        self.linear2 = nn.Linear(hidden_dim, dim)

    def forward(self, x: Tensor) -> Tensor:
        return self.linear2(F.gelu(self.linear1(x)))


class SelfAttentionBlock(nn.Module):
    """Pre-norm residual self-attention; positions are added to q and k only."""

    def __init__(self, dim: int, num_heads: int):
        super().__init__()
        self.norm = nn.LayerNorm(dim)
        self.attn = Attention(dim, num_heads)

    def forward(self, x: Tensor, pos: Tensor | None = None, keep_mask: Tensor | None = None) -> Tensor:
        y = self.norm(x)
        qk = y if pos is None else y + pos
        return x + self.attn(qk, qk, y, keep_mask=keep_mask)


class CrossAttentionBlock(nn.Module):
    """Pre-norm residual cross-attention onto an unnormalized memory."""

    def __init__(self, dim: int, num_heads: int):
        super().__init__()
        self.norm = nn.LayerNorm(dim)
        self.attn = Attention(dim, num_heads)

    def forward(
        self,
        x: Tensor,
        memory: Tensor,
        query_pos: Tensor | None = None,
        memory_pos: Tensor | None = None,
        keep_mask: Tensor | None = None,
    ) -> Tensor:
        y = self.norm(x)
        q = y if query_pos is None else y + query_pos
        k = memory if memory_pos is None else memory + memory_pos
        return x + self.attn(q, k, memory, keep_mask=keep_mask)


class FeedForwardBlock(nn.Module):
    def __init__(self, dim: int, hidden_dim: int):
        super().__init__()
        self.norm = nn.LayerNorm(dim)
        self.ffn = FeedForward(dim, hidden_dim)

    def forward(self, x: Tensor) -> Tensor:
        return x + self.ffn(self.norm(x))


class MLP(nn.Module):
    """Plain multi-layer perceptron with ReLU between layers."""

    def __init__(self, in_dim: int, hidden_dim: int, out_dim: int, num_layers: int):
        super().__init__()
        dims = [in_dim] + [hidden_dim] * (num_layers - 1) + [out_dim]
        self.layers = nn.ModuleList(nn.Linear(a, b) for a, b in zip(dims[:-1], dims[1:]))

    def forward(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = F.relu(x)
        return x


def sincos_position_2d(h: int, w: int, dim: int, device=None, dtype=None) -> Tensor:
    """Fixed 2-D sine/cosine position table of shape (h*w, dim)."""
    if dim % 4 != 0:
        raise ValueError(f"position dim {dim} must be divisible by 4")
    dtype = dtype or torch.get_default_dtype()
    quarter = dim // 4
    omega = torch.arange(quarter, device=device, dtype=dtype) / quarter
    omega = 1.0 / (10000.0**omega)
    ys = torch.arange(h, device=device, dtype=dtype)
    xs = torch.arange(w, device=device, dtype=dtype)
    grid_y = ys[:, None].expand(h, w).reshape(-1)
    grid_x = xs[None, :].expand(h, w).reshape(-1)
    out_y = grid_y[:, None] * omega[None, :]
    out_x = grid_x[:, None] * omega[None, :]
    return torch.cat([out_x.sin(), out_x.cos(), out_y.sin(), out_y.cos()], dim=1)


def window_side(n: int, cap: int = 32) -> int:
    """Largest divisor of n not exceeding cap."""
    for d in range(min(n, cap), 0, -1):
        if n % d == 0:
            return d
    return 1


def partition_windows(x: Tensor, h: int, w: int, wh: int, ww: int) -> Tensor:
    """(B, h*w, C) -> (B * nwindows, wh*ww, C)."""
    b, _, c = x.shape
    x = x.view(b, h // wh, wh, w // ww, ww, c)
    x = x.permute(0, 1, 3, 2, 4, 5).reshape(-1, wh * ww, c)
    return x


def merge_windows(x: Tensor, b: int, h: int, w: int, wh: int, ww: int) -> Tensor:
    """Inverse of partition_windows."""
    c = x.shape[-1]
    x = x.view(b, h // wh, w // ww, wh, ww, c)
    x = x.permute(0, 1, 3, 2, 4, 5).reshape(b, h * w, c)
    return x


def inverse_sigmoid(x: Tensor, eps: float = 1e-4) -> Tensor:
    x = x.clamp(min=eps, max=1.0 - eps)
    return torch.log(x) - torch.log1p(-x)


def zero_module_(module: nn.Module) -> None:
    """Zero all parameters in place (used by residual-identity tests)."""
    with torch.no_grad():
        for p in module.parameters():
            p.zero_()
