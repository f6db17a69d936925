"""Mixed-Guided Attention.

The makeup token is first refreshed by self-attention over ``[text; makeup]``;
the latent then cross-attends separately to the text tokens, the refreshed
makeup token and the identity token, and the three results are mixed with
user weights ``Z = l_text * Z1 + l_makeup * Z2 + l_id * Z3``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn

STAGES = ("text", "makeup", "id")


@dataclass(frozen=True)
class GuidanceWeights:
    lambda_text: float = 1.0
    lambda_makeup: float = 1.0
    lambda_id: float = 1.0

    def __post_init__(self):
        for name in ("lambda_text", "lambda_makeup", "lambda_id"):
            v = float(getattr(self, name))
            if not math.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be finite and >= 0, got {v}")
            object.__setattr__(self, name, v)

    def scaled(self, k: float) -> GuidanceWeights:
        return GuidanceWeights(self.lambda_text * k, self.lambda_makeup * k, self.lambda_id * k)

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.lambda_text, self.lambda_makeup, self.lambda_id)


class Attention(nn.Module):
    """Multi-head attention, queries from ``x`` and keys/values from ``context``."""

    def __init__(self, query_dim: int, context_dim: int, heads: int = 4, head_dim: int = 16):
        super().__init__()
        inner = heads * head_dim
        self.heads, self.head_dim = heads, head_dim
        self.to_q = nn.Linear(query_dim, inner, bias=False)
        self.to_k = nn.Linear(context_dim, inner, bias=False)
        self.to_v = nn.Linear(context_dim, inner, bias=False)
        self.to_out = nn.Linear(inner, query_dim)

    def _split(self, x):
        b, n, _ = x.shape
        return x.view(b, n, self.heads, self.head_dim).transpose(1, 2)

    def forward(self, x: torch.Tensor, context: torch.Tensor, return_weights: bool = False):
        if context.shape[1] == 0:
            raise ValueError("attention over an empty token sequence")
        q, k, v = self._split(self.to_q(x)), self._split(self.to_k(context)), self._split(self.to_v(context))
        w = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(self.head_dim), dim=-1)
        out = (w @ v).transpose(1, 2).reshape(x.shape[0], x.shape[1], -1)
        out = self.to_out(out)
        return (out, w) if return_weights else out


class MixedGuidedAttention(nn.Module):
    def __init__(self, query_dim: int = 64, embed_dim: int = 64, heads: int = 4):
        super().__init__()
        if embed_dim % heads:
            raise ValueError(f"{heads} heads do not divide width {embed_dim}")
        hd = embed_dim // heads
        self.embed_dim = embed_dim
        self.self_attn = Attention(embed_dim, embed_dim, heads, hd)
        self.cross = nn.ModuleDict({s: Attention(query_dim, embed_dim, heads, hd) for s in STAGES})

    def self_update_makeup(self, c: torch.Tensor, f_m: torch.Tensor) -> torch.Tensor:
        """Row of self-attention over ``[c; f_m]`` at the makeup token's position.

        c: (B, L, D) with L >= 1, f_m: (B, D) -> (B, D).
        """
        if c.shape[1] < 1:
            raise ValueError("need at least one text token")
        if c.shape[-1] != self.embed_dim or f_m.shape[-1] != self.embed_dim:
            raise ValueError("token width mismatch")
        seq = torch.cat([c, f_m[:, None, :]], dim=1)
        return self.self_attn(seq[:, -1:], seq)[:, 0]

    def cross_attend(self, z: torch.Tensor, tokens: torch.Tensor, stage: str) -> torch.Tensor:
        """z: (B, N, Dq), tokens: (B, L, D) -> (B, N, Dq)."""
        if tokens.shape[-1] != self.embed_dim:
            raise ValueError("token width mismatch")
        return self.cross[stage](z, tokens)

    def forward(self, z, c, f_m, f_i, g: GuidanceWeights) -> torch.Tensor:
        # a zero-weighted branch is never evaluated, so its input cannot reach the output
        z1 = self.cross_attend(z, c, "text") if g.lambda_text else None
        if g.lambda_makeup:
            z2 = self.cross_attend(z, self.self_update_makeup(c, f_m)[:, None], "makeup")
        else:
            z2 = None
        z3 = self.cross_attend(z, f_i[:, None], "id") if g.lambda_id else None
        return fuse(z1, z2, z3, g, like=z)

    mga_block = forward


def fuse(z1, z2, z3, g: GuidanceWeights, like: torch.Tensor | None = None) -> torch.Tensor:
    """Weighted sum of the three branch outputs; branches with zero weight may be None."""
    parts = [(g.lambda_text, z1), (g.lambda_makeup, z2), (g.lambda_id, z3)]
    shapes = {tuple(z.shape) for _, z in parts if z is not None}
    if len(shapes) > 1:
        raise ValueError(f"branch shapes differ: {shapes}")
    ref = next((z for _, z in parts if z is not None), like)
    if ref is None:
        raise ValueError("fuse needs at least one tensor to infer the output shape")
    out = torch.zeros_like(ref)
    for lam, z in parts:
        if lam:
            if z is None:
                raise ValueError("non-zero weight on a missing branch")
            out = out + lam * z
    return out
