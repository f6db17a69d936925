"""Noise schedule, latent transform, the conditional denoiser and DDIM sampling."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from makeupdiff.encoders import FeatureEncoder, init_weights
from makeupdiff.mga import GuidanceWeights, MixedGuidedAttention

PATCH = 8
LATENT_SCALE = 1.0


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    betas: np.ndarray
    alpha_bars: np.ndarray

    @property
    def T(self) -> int:
        return len(self.betas)

    def alpha_bar(self, t: int) -> float:
        # t = -1 is the clean endpoint reached by the last DDIM step
        return 1.0 if t < 0 else float(self.alpha_bars[t])


def make_schedule(T: int = 200, beta_start: float = 5e-4, beta_end: float = 0.1) -> NoiseSchedule:
    if T < 2:
        raise ValueError("T must be >= 2")
    if not 0 < beta_start <= beta_end < 1:
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    return NoiseSchedule(betas, np.cumprod(1.0 - betas))


def encode_latent(image: torch.Tensor) -> torch.Tensor:
    """(B, 3, H, W) -> (B, 3*64, H/8, W/8) by space-to-depth; lossless."""
    if image.ndim != 4 or image.shape[-1] % PATCH or image.shape[-2] % PATCH:
        raise ValueError(f"expected (B, C, H, W) with H, W divisible by {PATCH}, got {tuple(image.shape)}")
    return F.pixel_unshuffle(image, PATCH) * LATENT_SCALE


def decode_latent(z: torch.Tensor) -> torch.Tensor:
    if z.ndim != 4 or z.shape[1] % (PATCH * PATCH):
        raise ValueError(f"latent channels must be a multiple of {PATCH * PATCH}, got {tuple(z.shape)}")
    return F.pixel_shuffle(z / LATENT_SCALE, PATCH)


def _gather(values: np.ndarray, t: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    out = torch.as_tensor(values, dtype=like.dtype, device=like.device)[t]
    return out.view(-1, *([1] * (like.ndim - 1)))


def add_noise(z0: torch.Tensor, eps: torch.Tensor, t, s: NoiseSchedule) -> torch.Tensor:
    """z_t = sqrt(abar_t) z0 + sqrt(1 - abar_t) eps; ``t`` is an int or a (B,) index tensor."""
    t = torch.as_tensor(t, dtype=torch.long).reshape(-1)
    if (t < 0).any() or (t >= s.T).any():
        raise ValueError(f"timestep outside [0, {s.T})")
    a = _gather(s.alpha_bars, t, z0)
    return a.sqrt() * z0 + (1 - a).sqrt() * eps


def ddim_step(z_t: torch.Tensor, eps_hat: torch.Tensor, t: int, t_prev: int, s: NoiseSchedule) -> torch.Tensor:
    """Deterministic (eta = 0) DDIM update from ``t`` to ``t_prev``; ``t_prev = -1`` returns x0."""
    if t_prev >= t:
        raise ValueError(f"t_prev ({t_prev}) must be < t ({t})")
    a_t, a_prev = s.alpha_bar(t), s.alpha_bar(t_prev)
    x0 = (z_t - math.sqrt(1 - a_t) * eps_hat) / math.sqrt(a_t)
    return math.sqrt(a_prev) * x0 + math.sqrt(1 - a_prev) * eps_hat


def ddim_timesteps(start: int, steps: int) -> list[int]:
    """``steps`` evenly spaced timesteps from ``start`` down to 0."""
    if steps < 1 or steps > start + 1:
        raise ValueError(f"need 1 <= steps <= {start + 1}, got {steps}")
    ts = np.linspace(start, 0, steps).round().astype(int)
    return [int(t) for t in ts]


def patch_dct_basis(n: int = PATCH) -> torch.Tensor:
    """Orthonormal 2-D DCT-II on flattened n x n patches, as an (n*n, n*n) matrix."""
    k = np.arange(n)
    d = np.cos(np.pi * (2 * k[None, :] + 1) * k[:, None] / (2 * n)) * np.sqrt(2.0 / n)
    d[0] /= np.sqrt(2.0)
    return torch.as_tensor(np.kron(d, d), dtype=torch.float32)


def sinusoidal_table(T: int, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    args = torch.arange(T, dtype=torch.float64)[:, None] * freqs[None]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=1).float()


class ResBlock(nn.Module):
    def __init__(self, cin: int, cout: int, tdim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(8, cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.temb = nn.Linear(tdim, cout)
        self.norm2 = nn.GroupNorm(8, cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x, temb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.temb(temb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class MgaSite(nn.Module):
    """Pre-norm residual wrapper putting an MGA block on a feature map."""

    def __init__(self, width: int, embed_dim: int, heads: int):
        super().__init__()
        self.norm = nn.LayerNorm(width)
        self.mga = MixedGuidedAttention(width, embed_dim, heads)

    def forward(self, h, c, f_m, f_i, g):
        b, ch, hh, ww = h.shape
        seq = h.flatten(2).transpose(1, 2)
        out = self.mga(self.norm(seq), c, f_m, f_i, g)
        return h + out.transpose(1, 2).reshape(b, ch, hh, ww)


class Denoiser(nn.Module):
    """Small two-level U-Net predicting noise, with an MGA block at every attention site.

    Each 8x8 patch of the latent is rotated into an orthonormal DCT basis, where
    coefficients are close to independent. A per-coefficient Gaussian prior
    (``fit_prior``) gives the linear posterior mean of x0 given z_t in closed form;
    the network body only predicts the remainder, scaled by the posterior std.
    Noise stays white under the rotation, so the output is still a noise
    estimate in the latent's own basis. With the unfitted prior (mean 0, std 1)
    the skip path reduces to eps = sqrt(1 - abar) z_t.
    """

    def __init__(self, alpha_bars: np.ndarray, latent_channels: int = 3 * PATCH * PATCH, latent_size: int = 8,
                 width: int = 64, embed_dim: int = 64, heads: int = 4, init_std: float = 0.02):
        super().__init__()
        T = len(alpha_bars)
        self.latent_channels, self.latent_size = latent_channels, latent_size
        ab = torch.as_tensor(alpha_bars, dtype=torch.float64)
        self.register_buffer("alpha_bars", ab.float(), persistent=False)
        self.register_buffer("basis", patch_dct_basis(PATCH), persistent=False)
        shape = (latent_channels, latent_size, latent_size)
        self.register_buffer("prior_mean", torch.zeros(shape))
        self.register_buffer("prior_std", torch.ones(shape))
        self.register_buffer("prior_count", torch.zeros((), dtype=torch.long))
        self.register_buffer("time_table", sinusoidal_table(T, width), persistent=False)
        self.time_mlp = nn.Sequential(nn.Linear(width, width), nn.SiLU(), nn.Linear(width, width))
        self.conv_in = nn.Conv2d(latent_channels, width, 3, padding=1)
        self.pos = nn.Parameter(torch.zeros(1, width, latent_size, latent_size))
        self.res_in = ResBlock(width, width, width)
        self.attn_in = MgaSite(width, embed_dim, heads)
        self.down = nn.Conv2d(width, width, 3, stride=2, padding=1)
        self.res_mid = ResBlock(width, width, width)
        self.attn_mid = MgaSite(width, embed_dim, heads)
        self.up = nn.Conv2d(width, width, 3, padding=1)
        self.res_out = ResBlock(2 * width, width, width)
        self.attn_out = MgaSite(width, embed_dim, heads)
        self.norm_out = nn.GroupNorm(8, width)
        self.conv_out = nn.Conv2d(width, latent_channels, 3, padding=1)
        init_weights(self, init_std)
        nn.init.trunc_normal_(self.pos, std=init_std, a=-2 * init_std, b=2 * init_std)

    def to_spectrum(self, z: torch.Tensor) -> torch.Tensor:
        b, c, h, w = z.shape
        return torch.einsum("kp,bgphw->bgkhw", self.basis.to(z.dtype), z.view(b, c // self.basis.shape[0], -1, h, w)
                            ).reshape(b, c, h, w)

    def from_spectrum(self, y: torch.Tensor) -> torch.Tensor:
        b, c, h, w = y.shape
        return torch.einsum("kp,bgkhw->bgphw", self.basis.to(y.dtype), y.view(b, c // self.basis.shape[0], -1, h, w)
                            ).reshape(b, c, h, w)

    @torch.no_grad()
    def fit_prior(self, z0: torch.Tensor, floor: float = 1e-3) -> None:
        """Set the per-coefficient prior from clean latents (B, C, h, w)."""
        if z0.shape[0] < 2:
            raise ValueError("need at least 2 latents to fit the prior")
        y = self.to_spectrum(z0.double())
        self.prior_mean.copy_(y.mean(0).float())
        self.prior_std.copy_(y.std(0).clamp_min(floor).float())
        self.prior_count.fill_(z0.shape[0])

    def attention_sites(self) -> list[MgaSite]:
        return [self.attn_in, self.attn_mid, self.attn_out]

    def forward(self, z_t, t, c, f_i, f_m, g: GuidanceWeights):
        """z_t: (B, C, h, w); t: int or (B,) tensor; c: (B, L, D); f_i, f_m: (B, D)."""
        if z_t.shape[1:] != (self.latent_channels, self.latent_size, self.latent_size):
            raise ValueError(f"latent shape {tuple(z_t.shape[1:])} does not match the denoiser")
        t = torch.as_tensor(t, dtype=torch.long, device=z_t.device).reshape(-1).expand(z_t.shape[0])
        temb = self.time_mlp(self.time_table[t].to(z_t.dtype))
        a = self.alpha_bars[t].to(z_t.dtype)[:, None, None, None]
        mu, var = self.prior_mean.to(z_t.dtype), self.prior_std.to(z_t.dtype) ** 2
        denom = a * var + (1 - a)
        resid = self.to_spectrum(z_t) - a.sqrt() * mu
        h0 = self.conv_in(resid / denom.sqrt()) + self.pos
        h0 = self.attn_in(self.res_in(h0, temb), c, f_m, f_i, g)
        h = self.down(h0)
        h = self.attn_mid(self.res_mid(h, temb), c, f_m, f_i, g)
        h = self.up(F.interpolate(h, scale_factor=2, mode="nearest"))
        h = self.res_out(torch.cat([h, h0], dim=1), temb)
        h = self.attn_out(h, c, f_m, f_i, g)
        body = self.conv_out(F.silu(self.norm_out(h)))
        # x0 = mu + sqrt(a) var / denom * resid + sqrt(var (1 - a) / denom) * body, rewritten as noise
        eps = (1 - a).sqrt() / denom * resid - (a * var / denom).sqrt() * body
        return self.from_spectrum(eps)


@dataclass(frozen=True)
class ModelConfig:
    resolution: int = 64
    feature_dim: int = 128
    embed_dim: int = 64
    width: int = 64
    heads: int = 4
    T: int = 200
    beta_start: float = 5e-4
    beta_end: float = 0.1
    init_std: float = 0.02

    def __post_init__(self):
        if self.resolution % (2 * PATCH) or self.resolution < 32:
            raise ValueError(f"resolution {self.resolution} unsupported")


class TransferModel(nn.Module):
    """Encoder + projection heads + text table + denoiser, with the noise schedule attached."""

    def __init__(self, cfg: ModelConfig = ModelConfig(), seed: int | None = 0):
        super().__init__()
        if seed is not None:
            torch.manual_seed(seed)
        self.cfg = cfg
        self.encoder = FeatureEncoder(cfg.resolution, cfg.feature_dim, cfg.embed_dim, init_std=cfg.init_std)
        self.schedule = make_schedule(cfg.T, cfg.beta_start, cfg.beta_end)
        self.denoiser = Denoiser(self.schedule.alpha_bars, 3 * PATCH * PATCH, cfg.resolution // PATCH, cfg.width,
                                 cfg.embed_dim, cfg.heads, cfg.init_std)

    @property
    def latent_shape(self) -> tuple[int, int, int]:
        s = self.cfg.resolution // PATCH
        return (3 * PATCH * PATCH, s, s)

    def predict_noise(self, z_t, t, c, f_i, f_m, g: GuidanceWeights = GuidanceWeights()):
        return self.denoiser(z_t, t, c, f_i, f_m, g)

    def identity_embedding(self, image):
        return self.encoder.project_identity(self.encoder.encode_image(image))

    def makeup_embedding(self, image):
        return self.encoder.project_makeup(self.encoder.encode_image(image))

    def sample(self, z, c, f_i, f_m, g: GuidanceWeights, timesteps: list[int]) -> torch.Tensor:
        """Run DDIM from latent ``z`` at ``timesteps[0]`` through each listed step to the clean latent."""
        for k, t in enumerate(timesteps):
            t_prev = timesteps[k + 1] if k + 1 < len(timesteps) else -1
            eps = self.predict_noise(z, t, c, f_i, f_m, g)
            z = ddim_step(z, eps, t, t_prev, self.schedule)
        return z

    def initial_noise(self, seeds: list[int], dtype=torch.float32) -> torch.Tensor:
        """One standard-normal latent per seed, each from its own generator."""
        out = []
        for s in seeds:
            gen = torch.Generator().manual_seed(int(s))
            out.append(torch.randn(self.latent_shape, generator=gen, dtype=dtype))
        return torch.stack(out)

    @torch.no_grad()
    def generate(self, f_i, f_m, prompt, g: GuidanceWeights = GuidanceWeights(), ddim_steps: int = 50,
                 seed: int | list[int] = 0) -> torch.Tensor:
        """Full DDIM sampling from seeded noise at T-1; returns images in [-1, 1].

        f_i, f_m: (B, D); prompt: one prompt or a list of B prompts; seed: one seed
        (item k uses seed + k) or a list of B seeds.
        """
        if ddim_steps > self.cfg.T:
            raise ValueError(f"ddim_steps {ddim_steps} > T {self.cfg.T}")
        b = f_i.shape[0]
        seeds = [seed + k for k in range(b)] if isinstance(seed, int) else list(seed)
        prompts = [prompt] * b if isinstance(prompt, str) else list(prompt)
        c = self.encoder.embed_text(prompts)
        z = self.initial_noise(seeds, dtype=f_i.dtype)
        z = self.sample(z, c, f_i, f_m, g, ddim_timesteps(self.cfg.T - 1, ddim_steps))
        return decode_latent(z)

    @torch.no_grad()
    def transfer(self, source, reference, prompt, g: GuidanceWeights = GuidanceWeights(),
                 ddim_steps: int = 50, seed: int | list[int] = 0) -> torch.Tensor:
        """Source identity with the reference's makeup. Images (B, 3, H, W) in [-1, 1]."""
        return self.generate(self.identity_embedding(source), self.makeup_embedding(reference),
                             prompt, g, ddim_steps, seed)


def to_model_space(images: np.ndarray) -> torch.Tensor:
    """(..., H, W, 3) floats in [0, 1] -> (B, 3, H, W) in [-1, 1]."""
    x = torch.as_tensor(np.asarray(images, dtype=np.float32))
    if x.ndim == 3:
        x = x[None]
    return x.permute(0, 3, 1, 2) * 2.0 - 1.0


def to_image_space(x: torch.Tensor) -> np.ndarray:
    """(B, 3, H, W) in [-1, 1] -> (B, H, W, 3) float in [0, 1], clipped."""
    return ((x.detach().permute(0, 2, 3, 1).cpu().numpy() + 1.0) / 2.0).clip(0.0, 1.0)
