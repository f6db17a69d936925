"""Losses and the joint training loop.

Every step draws a batch of (bare source, reference, target) triples and
optimizes three terms: noise prediction on the noised target latent, and two
reconstructions produced by a short differentiable DDIM unroll: the source
identity wearing the reference makeup, and the source identity recovered from
the reference's bare-face makeup embedding. An optional fourth term
(``lambda_embed``) pulls makeup embeddings together by style and identity
embeddings together by person, contrasting against the rest of the batch.
"""
from __future__ import annotations

import copy
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from makeupdiff.diffusion import TransferModel, add_noise, decode_latent, ddim_timesteps, encode_latent, to_model_space
from makeupdiff.faces import PROMPT_REGION, REGION_LABEL, REGION_PROMPT, REGIONS, load_image, load_mask
from makeupdiff.manifest import DatasetManifest, ManifestError, SampleRecord, sibling_record
from makeupdiff.mga import GuidanceWeights

log = logging.getLogger(__name__)

BARE_PROMPT = "no makeup"


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 16
    steps: int = 1000
    T: int = 200
    ddim_steps: int = 50
    lambda1: float = 1.0
    lambda2: float = 1.0
    lambda_embed: float = 0.0
    embed_temperature: float = 0.1
    seed: int = 0
    recon_steps: int = 3
    region_prompt_prob: float = 0.3
    grad_clip: float = 1.0
    eval_batch: int = 32
    log_every: int = 50
    lr_schedule: str = "constant"

    def __post_init__(self):
        for name in ("learning_rate", "batch_size", "T", "ddim_steps", "recon_steps", "eval_batch"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.embed_temperature <= 0:
            raise ValueError("embed_temperature must be positive")
        if self.lambda1 < 0 or self.lambda2 < 0 or self.lambda_embed < 0:
            raise ValueError("loss weights must be >= 0")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValueError(f"lr_schedule must be 'constant' or 'cosine', got {self.lr_schedule!r}")
        if not 0.0 <= self.region_prompt_prob <= 1.0:
            raise ValueError("region_prompt_prob must be in [0, 1]")


@dataclass(frozen=True)
class LossReport:
    step: int
    l_diffusion: float
    l_makeup: float
    l_id: float
    l_total: float
    l_embed: float = 0.0

    def line(self) -> str:
        return (f"{self.step}\t{self.l_diffusion:.8e}\t{self.l_makeup:.8e}"
                f"\t{self.l_id:.8e}\t{self.l_total:.8e}\t{self.l_embed:.8e}")


# l_total is the three-term objective; the optimized loss adds lambda_embed * l_embed
LOG_HEADER = "step\tl_diffusion\tl_makeup\tl_id\tl_total\tl_embed"


def write_loss_log(reports: list[LossReport], path: str | os.PathLike) -> None:
    Path(path).write_text("\n".join([LOG_HEADER] + [r.line() for r in reports]) + "\n")


class TrainingDiverged(RuntimeError):
    pass


# ---------------------------------------------------------------- losses

def loss_total(l_diffusion, l_makeup, l_id, lambda1: float = 1.0, lambda2: float = 1.0):
    return l_diffusion + lambda1 * l_makeup + lambda2 * l_id


def loss_diffusion(model: TransferModel, target, c, f_i, f_m, g: GuidanceWeights, gen: torch.Generator,
                   t: torch.Tensor | None = None, eps: torch.Tensor | None = None):
    """Mean squared noise-prediction error on the noised target latent."""
    z0 = encode_latent(target)
    if t is None:
        t = torch.randint(0, model.schedule.T, (z0.shape[0],), generator=gen)
    if eps is None:
        eps = torch.randn(z0.shape, generator=gen, dtype=z0.dtype)
    pred = model.predict_noise(add_noise(z0, eps, t, model.schedule), t, c, f_i, f_m, g)
    return F.mse_loss(pred, eps)


def reconstruct(model: TransferModel, c, f_i, f_m, g: GuidanceWeights, gen: torch.Generator, steps: int = 3,
                z: torch.Tensor | None = None):
    """Short differentiable DDIM unroll from seeded noise at mid-schedule."""
    b = f_i.shape[0]
    if z is None:
        z = torch.randn((b, *model.latent_shape), generator=gen, dtype=f_i.dtype)
    ts = ddim_timesteps(model.schedule.T // 2, steps)
    return decode_latent(model.sample(z, c, f_i, f_m, g, ts))


def loss_makeup(model, source_f_i, reference_f_m, c, target_image, g, gen, steps: int = 3, z=None):
    """Reconstruction of the source identity wearing the reference's makeup."""
    out = reconstruct(model, c, source_f_i, reference_f_m, g, gen, steps, z)
    return F.mse_loss(out, target_image)


def loss_id(model, source_f_i, bare_f_m, bare_target_image, g, gen, steps: int = 3, z=None):
    """Recovery of the bare source from a bare-face makeup embedding, under the "no makeup" prompt."""
    c0 = model.encoder.embed_text([BARE_PROMPT] * source_f_i.shape[0])
    out = reconstruct(model, c0, source_f_i, bare_f_m, g, gen, steps, z)
    return F.mse_loss(out, bare_target_image)


def loss_contrastive(anchor: torch.Tensor, candidates: torch.Tensor, anchor_labels: torch.Tensor,
                     candidate_labels: torch.Tensor, temperature: float = 0.1) -> torch.Tensor:
    """Multi-positive InfoNCE: each anchor should be nearest the candidates sharing its label.

    Anchors without any positive candidate are skipped; returns 0 if none has one.
    """
    logits = F.normalize(anchor, dim=-1) @ F.normalize(candidates, dim=-1).T / temperature
    pos = anchor_labels[:, None] == candidate_labels[None, :]
    keep = pos.any(1)
    if not keep.any():
        return logits.sum() * 0.0
    log_p = logits.log_softmax(1)
    pos_lp = torch.logsumexp(log_p.masked_fill(~pos, float("-inf")), dim=1)
    return -pos_lp[keep].mean()


# ---------------------------------------------------------------- data

@dataclass
class Example:
    source: int
    target: int
    refs: list[int]
    ref_bares: list[int]
    mask: int
    prompt: str
    identity: int
    style: int
    ref_identities: list[int]


@dataclass
class Batch:
    source: torch.Tensor
    reference: torch.Tensor
    reference_bare: torch.Tensor
    target: torch.Tensor
    prompts: list[str]
    # unaugmented styled target and labels, for the embedding term
    styled: torch.Tensor | None = None
    identity: torch.Tensor | None = None
    style: torch.Tensor | None = None
    ref_identity: torch.Tensor | None = None


class PairBank:
    """All images a manifest touches, decoded once into model-space tensors.

    Base pairs (same identity) use as reference any other manifest target with the
    same style index; cross-identity pairs (source a, reference b) use their
    reference directly and read the ground-truth ``I{a}M{j}`` from the source's
    image directory. A reference's bare face is read the same way.
    """

    def __init__(self, manifest: DatasetManifest):
        if not len(manifest):
            raise ValueError("empty manifest")
        self.manifest = manifest
        self._index: dict[Path, int] = {}
        self._images: list[np.ndarray] = []
        self._mask_index: dict[Path, int] = {}
        self._masks: list[np.ndarray] = []

        by_style: dict[int, list[SampleRecord]] = {}
        for p in manifest.pairs:
            if p.source.id.identity_index == p.target.id.identity_index:
                by_style.setdefault(p.target.id.makeup_index, []).append(p.target)

        self.examples: list[Example] = []
        for p in manifest.pairs:
            a, j = p.source.id.identity_index, p.target.id.makeup_index
            if p.target.id.identity_index == a:
                refs = [r for r in by_style.get(j, []) if r.id.identity_index != a] or [p.target]
                target = p.target
            else:
                refs = [p.target]
                target = sibling_record(p.source, j, p.target.prompt)
            bares = [sibling_record(r, 0, BARE_PROMPT) for r in refs]
            self.examples.append(Example(
                source=self._image(p.source), target=self._image(target),
                refs=[self._image(r) for r in refs], ref_bares=[self._image(r) for r in bares],
                mask=self._mask(p.source), prompt=target.prompt, identity=a, style=j,
                ref_identities=[r.id.identity_index for r in refs]))
        self.images = to_model_space(np.stack(self._images))
        self.masks = torch.as_tensor(np.stack(self._masks))

    def _path(self, rel: str) -> Path:
        path = (self.manifest.root / rel).resolve()
        if not path.is_file():
            raise ManifestError(f"missing image {path}")
        return path

    def _image(self, rec: SampleRecord) -> int:
        path = self._path(rec.image_path)
        if path not in self._index:
            self._index[path] = len(self._images)
            self._images.append(load_image(path))
        return self._index[path]

    def _mask(self, rec: SampleRecord) -> int:
        path = self._path(rec.region_masks_path)
        if path not in self._mask_index:
            self._mask_index[path] = len(self._masks)
            self._masks.append(load_mask(path))
        return self._mask_index[path]

    def __len__(self):
        return len(self.examples)

    def batch(self, idx, rng: np.random.Generator, region_prompt_prob: float = 0.0) -> Batch:
        src, ref, refb, tgt, prompts, styled, labels = [], [], [], [], [], [], []
        for k in idx:
            ex = self.examples[int(k)]
            r = int(rng.integers(len(ex.refs)))
            target = self.images[ex.target]
            prompt = ex.prompt
            # prompt-aligned regional targets: keep only one region of a full style
            if prompt == "full makeup" and rng.random() < region_prompt_prob:
                region = REGIONS[int(rng.integers(len(REGIONS)))]
                inside = (self.masks[ex.mask] == REGION_LABEL[region])[None]
                target = torch.where(inside, target, self.images[ex.source])
                prompt = REGION_PROMPT[region]
            src.append(self.images[ex.source])
            ref.append(self.images[ex.refs[r]])
            refb.append(self.images[ex.ref_bares[r]])
            tgt.append(target)
            prompts.append(prompt)
            styled.append(self.images[ex.target])
            labels.append((ex.identity, ex.style, ex.ref_identities[r]))
        ident, style, ref_ident = torch.as_tensor(labels, dtype=torch.long).T
        return Batch(torch.stack(src), torch.stack(ref), torch.stack(refb), torch.stack(tgt), prompts,
                     torch.stack(styled), ident, style, ref_ident)


def region_mask(labels: torch.Tensor, prompt: str) -> torch.Tensor:
    return labels == REGION_LABEL[PROMPT_REGION[prompt]]


# ---------------------------------------------------------------- loop

def embedding_loss(f_i, f_m, f_m_bare, f_i_ref, f_i_styled, f_m_styled, batch: Batch, temperature: float):
    """Makeup head: a reference's nearest candidates are styled faces of its style, never bare faces.
    Identity head: a styled face's nearest candidates are that person's bare and reference faces."""
    bare = torch.zeros_like(batch.style)
    l_makeup = loss_contrastive(f_m, torch.cat([f_m_styled, f_m_bare]), batch.style,
                                torch.cat([batch.style, bare]), temperature)
    l_ident = loss_contrastive(f_i_styled, torch.cat([f_i, f_i_ref]), batch.identity,
                               torch.cat([batch.identity, batch.ref_identity]), temperature)
    return l_makeup + l_ident


def compute_losses(model: TransferModel, batch: Batch, gen: torch.Generator, cfg: TrainConfig,
                   g: GuidanceWeights = GuidanceWeights()):
    """Returns (l_diffusion, l_makeup, l_id, l_total, l_embed); l_embed is zero when its weight is."""
    b = batch.source.shape[0]
    use_embed = cfg.lambda_embed > 0 and batch.styled is not None
    # every image goes through the encoder in one pass
    parts = [batch.source, batch.reference, batch.reference_bare] + ([batch.styled] if use_embed else [])
    f_i_all, f_m_all = model.encoder(torch.cat(parts))
    f_i, f_m, f_m_bare = f_i_all[:b], f_m_all[b:2 * b], f_m_all[2 * b:3 * b]
    c = model.encoder.embed_text(batch.prompts)
    l_d = loss_diffusion(model, batch.target, c, f_i, f_m, g, gen)
    l_m = loss_makeup(model, f_i, f_m, c, batch.target, g, gen, cfg.recon_steps)
    l_i = loss_id(model, f_i, f_m_bare, batch.source, g, gen, cfg.recon_steps)
    if use_embed:
        l_e = embedding_loss(f_i, f_m, f_m_bare, f_i_all[b:2 * b], f_i_all[3 * b:], f_m_all[3 * b:], batch,
                             cfg.embed_temperature)
    else:
        l_e = l_d.new_zeros(())
    return l_d, l_m, l_i, loss_total(l_d, l_m, l_i, cfg.lambda1, cfg.lambda2), l_e


@torch.no_grad()
def evaluate_losses(model: TransferModel, bank: PairBank, cfg: TrainConfig, seed: int) -> LossReport:
    """Losses on a fixed batch with noise, timestep and reference draws never used for training."""
    rng = np.random.default_rng([seed, 1])
    gen = torch.Generator().manual_seed(seed + 7919)
    idx = np.arange(min(len(bank), cfg.eval_batch))
    batch = bank.batch(idx, rng, 0.0)
    l_d, l_m, l_i, l_t, l_e = compute_losses(model, batch, gen, cfg)
    return LossReport(-1, l_d.item(), l_m.item(), l_i.item(), l_t.item(), l_e.item())


@dataclass
class TrainResult:
    model: TransferModel
    log: list[LossReport] = field(default_factory=list)
    initial_eval: LossReport | None = None
    final_eval: LossReport | None = None


def train(model: TransferModel, manifest: DatasetManifest, cfg: TrainConfig,
          log_path: str | os.PathLike | None = None) -> TrainResult:
    """Train a copy of ``model`` on ``manifest``; the input model is left untouched."""
    if not len(manifest):
        raise ValueError("cannot train on an empty manifest")
    if cfg.T != model.cfg.T:
        raise ValueError(f"TrainConfig.T={cfg.T} but model schedule has T={model.cfg.T}")
    model = copy.deepcopy(model)
    bank = PairBank(manifest)
    if int(model.denoiser.prior_count) == 0:
        model.denoiser.fit_prior(encode_latent(bank.images))
    result = TrainResult(model)
    result.initial_eval = evaluate_losses(model, bank, cfg, cfg.seed)
    if cfg.steps == 0:
        result.final_eval = result.initial_eval
        return result

    rng = np.random.default_rng(cfg.seed)
    gen = torch.Generator().manual_seed(cfg.seed)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate, betas=(0.9, 0.999), eps=1e-8)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, cfg.steps) if cfg.lr_schedule == "cosine" else None
    order: list[int] = []
    model.train()
    fh = open(log_path, "w") if log_path is not None else None
    try:
        if fh:
            fh.write(LOG_HEADER + "\n")
        for step in range(cfg.steps):
            if len(order) < cfg.batch_size:
                order.extend(rng.permutation(len(bank)).tolist() * max(1, math.ceil(cfg.batch_size / len(bank))))
            idx, order = order[:cfg.batch_size], order[cfg.batch_size:]
            batch = bank.batch(idx, rng, cfg.region_prompt_prob)
            l_d, l_m, l_i, l_t, l_e = compute_losses(model, batch, gen, cfg)
            report = LossReport(step, l_d.item(), l_m.item(), l_i.item(), l_t.item(), l_e.item())
            if not all(math.isfinite(v) for v in (report.l_diffusion, report.l_makeup, report.l_id, report.l_embed)):
                raise TrainingDiverged(f"non-finite loss at step {step}: {report}")
            opt.zero_grad(set_to_none=True)
            (l_t + cfg.lambda_embed * l_e).backward()
            if cfg.grad_clip:
                torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
            opt.step()
            if sched is not None:
                sched.step()
            result.log.append(report)
            if fh:
                fh.write(report.line() + "\n")
            if cfg.log_every and step % cfg.log_every == 0:
                log.info("step %d  diff %.4f  makeup %.4f  id %.4f  total %.4f  embed %.4f", step,
                         report.l_diffusion, report.l_makeup, report.l_id, report.l_total, report.l_embed)
    finally:
        if fh:
            fh.close()
    model.eval()
    result.final_eval = evaluate_losses(model, bank, cfg, cfg.seed)
    return result
