"""Image encoder, identity/makeup projection heads and the prompt embedder."""
from __future__ import annotations

import numpy as np
import torch
from torch import nn

from makeupdiff.manifest import PROMPTS

VOCAB = ("<pad>", "no", "makeup", "full", "eye", "lip", "face")
_WORD_INDEX = {w: k for k, w in enumerate(VOCAB)}


def init_weights(module: nn.Module, std: float = 0.02) -> None:
    """Truncated-normal weights, zero biases, unit norm gains."""
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.Linear)):
            nn.init.trunc_normal_(m.weight, std=std, a=-2 * std, b=2 * std)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.Embedding):
            nn.init.trunc_normal_(m.weight, std=std, a=-2 * std, b=2 * std)
        elif isinstance(m, (nn.GroupNorm, nn.LayerNorm)):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)


def tokenize(prompt: str) -> list[int]:
    if prompt not in PROMPTS:
        raise ValueError(f"prompt {prompt!r} not in vocabulary {PROMPTS}")
    return [_WORD_INDEX[w] for w in prompt.split()]


def coord_grid(size: int, dtype=torch.float32) -> torch.Tensor:
    c = (torch.arange(size, dtype=dtype) + 0.5) / size * 2 - 1
    v, u = torch.meshgrid(c, c, indexing="ij")
    return torch.stack([u, v])


class FeatureEncoder(nn.Module):
    """Shared encoder feeding both projection heads.

    The trunk is three stride-2 conv blocks followed by global average pooling.
    Two coordinate channels are appended to the input so pooled features can
    still see where things are.
    """

    def __init__(self, resolution: int = 64, feature_dim: int = 128, embed_dim: int = 64,
                 widths: tuple[int, int] = (32, 64), init_std: float = 0.02):
        super().__init__()
        self.resolution = resolution
        self.feature_dim = feature_dim
        self.embed_dim = embed_dim
        chans = (5, *widths, feature_dim)
        blocks = []
        for cin, cout in zip(chans[:-1], chans[1:]):
            blocks += [nn.Conv2d(cin, cout, 4, stride=2, padding=1), nn.GroupNorm(8, cout), nn.SiLU()]
        self.trunk = nn.Sequential(*blocks)
        self.identity_head = nn.Linear(feature_dim, embed_dim)
        self.makeup_head = nn.Linear(feature_dim, embed_dim)
        self.text_table = nn.Embedding(len(VOCAB), embed_dim)
        self.register_buffer("coords", coord_grid(resolution), persistent=False)
        init_weights(self, init_std)

    def encode_image(self, image: torch.Tensor) -> torch.Tensor:
        """(B, 3, H, W) images in [-1, 1] -> (B, feature_dim)."""
        if image.shape[-3:] != (3, self.resolution, self.resolution):
            raise ValueError(f"expected (3, {self.resolution}, {self.resolution}) images, got {tuple(image.shape)}")
        coords = self.coords.to(image.dtype).expand(image.shape[0], -1, -1, -1)
        h = self.trunk(torch.cat([image, coords], dim=1))
        return h.mean(dim=(2, 3))

    def project_identity(self, f: torch.Tensor) -> torch.Tensor:
        if f.shape[-1] != self.feature_dim:
            raise ValueError(f"feature dim {f.shape[-1]} != {self.feature_dim}")
        return self.identity_head(f)

    def project_makeup(self, f: torch.Tensor) -> torch.Tensor:
        if f.shape[-1] != self.feature_dim:
            raise ValueError(f"feature dim {f.shape[-1]} != {self.feature_dim}")
        return self.makeup_head(f)

    def embed_text(self, prompts: str | list[str]) -> torch.Tensor:
        """One prompt -> (L, D_e); a list of equal-length prompts -> (B, L, D_e)."""
        single = isinstance(prompts, str)
        ids = [tokenize(p) for p in ([prompts] if single else prompts)]
        if len({len(t) for t in ids}) != 1:
            raise ValueError("prompts in one batch must have the same token count")
        idx = torch.tensor(ids, device=self.text_table.weight.device)
        out = self.text_table(idx)
        return out[0] if single else out

    def forward(self, image: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Both embeddings from one encoder pass."""
        f = self.encode_image(image)
        return self.project_identity(f), self.project_makeup(f)


def cosine_similarity(a, b) -> np.ndarray | float:
    """Row-wise cosine similarity along the last axis; zero-norm inputs are an error."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape[-1] != b.shape[-1]:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    na = np.linalg.norm(a, axis=-1)
    nb = np.linalg.norm(b, axis=-1)
    if np.any(na == 0) or np.any(nb == 0):
        raise ValueError("cosine similarity of a zero-norm vector is undefined")
    out = np.clip(np.sum(a * b, axis=-1) / (na * nb), -1.0, 1.0)
    return float(out) if out.ndim == 0 else out
