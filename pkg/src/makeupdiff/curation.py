"""Train, generate, filter, retrain.

A first model G1 is trained on the base pairs. It then transfers the makeup of
every styled reference in pool B onto every bare face in pool A; each output
is scored by the cosine similarity of its makeup embedding to the reference's
and the pair (bare source, reference) is kept when the score reaches ``tau``.
G2 is trained, warm-started from G1, on the base pairs plus the kept pairs.
"""
from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from makeupdiff.checkpoint import save_checkpoint
from makeupdiff.diffusion import ModelConfig, TransferModel, to_image_space, to_model_space
from makeupdiff.encoders import FeatureEncoder, cosine_similarity
from makeupdiff.faces import build_base_dataset, holdout_split, load_image, save_png, to_uint8
from makeupdiff.manifest import (
    DatasetManifest,
    Provenance,
    SampleRecord,
    TrainingPair,
    merge_manifests,
    round_score,
    write_manifest,
)
from makeupdiff.metrics import MetricsRow, evaluate, load_test_set, write_report
from makeupdiff.mga import GuidanceWeights
from makeupdiff.training import TrainConfig, train, write_loss_log

log = logging.getLogger(__name__)

CANDIDATE_COLUMNS = ("a", "b", "j", "source", "reference", "generated", "sim", "status")


class PipelineError(RuntimeError):
    pass


@dataclass(frozen=True)
class CandidatePair:
    bare_source: SampleRecord
    styled_reference: SampleRecord
    generated_path: str | None = None
    sim: float | None = None
    error: str | None = None

    def __post_init__(self):
        if not self.bare_source.id.is_bare:
            raise ValueError(f"candidate source {self.bare_source.id.stem} is not bare")
        if self.styled_reference.id.is_bare:
            raise ValueError(f"candidate reference {self.styled_reference.id.stem} is bare")

    @property
    def key(self):
        return (self.bare_source.id, self.styled_reference.id)


@dataclass(frozen=True)
class PipelineConfig:
    tau: float = 0.7
    pool_A_size: int = 8
    pool_B_size: int = 8
    g1_train: TrainConfig = field(default_factory=TrainConfig)
    g2_train: TrainConfig = field(default_factory=TrainConfig)
    seed: int = 0
    disjoint_pools: bool = True
    ddim_steps: int = 50
    refs_per_test_pair: int = 2
    guidance: GuidanceWeights = field(default_factory=GuidanceWeights)
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        if not 0.0 < self.tau <= 1.0:
            raise ValueError(f"tau must be in (0, 1], got {self.tau}")
        if self.pool_A_size < 1 or self.pool_B_size < 1:
            raise ValueError("pool sizes must be >= 1")
        if self.ddim_steps < 1:
            raise ValueError("ddim_steps must be >= 1")


# ---------------------------------------------------------------- stages

def _load(root: Path, recs: list[SampleRecord]) -> torch.Tensor:
    return to_model_space(np.stack([load_image(root / r.image_path) for r in recs]))


@torch.no_grad()
def cross_generate(model: TransferModel, bare_pool: list[SampleRecord], styled_pool: list[SampleRecord],
                   pool_root: str | os.PathLike, out_dir: str | os.PathLike, seed: int = 0,
                   ddim_steps: int = 50, g: GuidanceWeights = GuidanceWeights(),
                   chunk: int = 32) -> list[CandidatePair]:
    """One transfer per (a, b) in bare_pool x styled_pool, written under ``out_dir/images``.

    Candidate order is sorted by (a, b). A failing generation is recorded on its
    candidate and does not stop the batch.
    """
    if any(not r.id.is_bare for r in bare_pool):
        raise ValueError("bare pool contains a styled sample")
    if any(r.id.is_bare for r in styled_pool):
        raise ValueError("styled pool contains a bare sample")
    pool_root, out_dir = Path(pool_root), Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    bare_pool = sorted(bare_pool, key=lambda r: r.id)
    styled_pool = sorted(styled_pool, key=lambda r: r.id)
    f_i = model.identity_embedding(_load(pool_root, bare_pool))
    f_m = model.makeup_embedding(_load(pool_root, styled_pool))
    todo = [(ia, ib) for ia in range(len(bare_pool)) for ib in range(len(styled_pool))]

    def run(items, start):
        ia = [a for a, _ in items]
        ib = [b for _, b in items]
        prompts = [styled_pool[b].prompt for b in ib]
        seeds = [seed + start + n for n in range(len(items))]
        out = model.generate(f_i[ia], f_m[ib], prompts, g, ddim_steps, seeds)
        if not torch.isfinite(out).all():
            raise FloatingPointError("non-finite generated image")
        return to_uint8(to_image_space(out))

    candidates = []
    for k in range(0, len(todo), chunk):
        items = todo[k:k + chunk]
        try:
            images = list(run(items, k))
        except Exception as e:  # noqa: BLE001 - isolate the failure to single pairs
            log.warning("chunk at %d failed (%s); retrying pair by pair", k, e)
            images = []
            for n, item in enumerate(items):
                try:
                    images.append(run([item], k + n)[0])
                except Exception as e1:  # noqa: BLE001
                    images.append(e1)
        for (ia, ib), img in zip(items, images):
            a, b = bare_pool[ia], styled_pool[ib]
            if isinstance(img, Exception):
                log.warning("generation failed for %s x %s: %s", a.id.stem, b.id.stem, img)
                candidates.append(CandidatePair(a, b, None, None, f"{type(img).__name__}: {img}"))
                continue
            rel = f"images/{a.id.stem}__{b.id.stem}.png"
            save_png(img, out_dir / rel)
            candidates.append(CandidatePair(a, b, rel))
    return candidates


@torch.no_grad()
def score_candidate(encoder: FeatureEncoder, generated: torch.Tensor, reference: torch.Tensor):
    """Cosine similarity of makeup embeddings; (3, H, W) inputs give a float, batches an array."""
    single = generated.ndim == 3
    if single:
        generated, reference = generated[None], reference[None]
    if generated.shape != reference.shape:
        raise ValueError(f"shape mismatch {tuple(generated.shape)} vs {tuple(reference.shape)}")
    a = encoder.project_makeup(encoder.encode_image(generated)).double().numpy()
    b = encoder.project_makeup(encoder.encode_image(reference)).double().numpy()
    s = cosine_similarity(a, b)
    return float(np.atleast_1d(s)[0]) if single else np.atleast_1d(s)


def score_candidates(encoder: FeatureEncoder, candidates: list[CandidatePair], pool_root, candidates_root,
                     chunk: int = 64) -> list[CandidatePair]:
    pool_root, candidates_root = Path(pool_root), Path(candidates_root)
    ok = [c for c in candidates if c.error is None]
    scores = {}
    for k in range(0, len(ok), chunk):
        part = ok[k:k + chunk]
        gen = to_model_space(np.stack([load_image(candidates_root / c.generated_path) for c in part]))
        ref = _load(pool_root, [c.styled_reference for c in part])
        for c, s in zip(part, score_candidate(encoder, gen, ref)):
            scores[c.key] = float(s)
    return [replace(c, sim=scores.get(c.key)) for c in candidates]


def filter_pair(sim: float, tau: float = 0.7) -> int:
    return int(sim >= tau)


def curate(candidates: list[CandidatePair], tau: float = 0.7, root: str | os.PathLike = ".") -> DatasetManifest:
    """Keep (bare source, styled reference) for every candidate whose score reaches ``tau``.

    The reference image, not the generated one, becomes the pair's target.
    Failed generations are skipped.
    """
    pairs = []
    for c in candidates:
        if c.error is not None:
            continue
        if c.sim is None:
            raise ValueError(f"candidate {c.bare_source.id.stem} x {c.styled_reference.id.stem} is unscored")
        # decide on the stored 6-decimal values so the manifest's own check agrees
        if filter_pair(round_score(c.sim), round_score(tau)):
            target = replace(c.styled_reference, provenance=Provenance.FILTERED_RETAINED)
            pairs.append(TrainingPair(c.bare_source, target, c.sim))
    manifest = DatasetManifest(tuple(pairs), tau, root=Path(root))
    manifest.validate()
    return manifest


def write_candidates(candidates: list[CandidatePair], path: str | os.PathLike, pool_root, candidates_root) -> None:
    path = Path(path)
    rel = lambda p: os.path.relpath(p, path.parent)
    lines = ["\t".join(CANDIDATE_COLUMNS)]
    for c in candidates:
        lines.append("\t".join([
            str(c.bare_source.id.identity_index), str(c.styled_reference.id.identity_index),
            str(c.styled_reference.id.makeup_index),
            rel(Path(pool_root) / c.bare_source.image_path), rel(Path(pool_root) / c.styled_reference.image_path),
            "NA" if c.generated_path is None else rel(Path(candidates_root) / c.generated_path),
            "NA" if c.sim is None else f"{c.sim:.6f}",
            "ok" if c.error is None else "failed: " + c.error.replace("\t", " "),
        ]))
    path.write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------- pipeline

@dataclass
class PipelineResult:
    g1: TransferModel
    candidates: list[CandidatePair]
    curated: DatasetManifest
    g2: TransferModel
    metrics_before_after: tuple[MetricsRow, MetricsRow]
    out_dir: Path


def build_pools(base: DatasetManifest, cfg: PipelineConfig, out_dir: Path):
    """Render new identities for pools A (bare) and B (one styled sample each)."""
    styles = sorted({p.target.id.makeup_index for p in base.pairs})
    first = max(r.id.identity_index for r in base.records()) + 1
    resolution = cfg.model.resolution
    n = cfg.pool_A_size + cfg.pool_B_size if cfg.disjoint_pools else max(cfg.pool_A_size, cfg.pool_B_size, 2)
    pool = build_base_dataset(n, max(styles), resolution, cfg.seed, out_dir, first_identity=first)
    by_key = {(r.id.identity_index, r.id.makeup_index): r for r in pool.records()}
    ids = list(range(first, first + n))
    a_ids = ids[:cfg.pool_A_size]
    b_ids = ids[cfg.pool_A_size:] if cfg.disjoint_pools else ids[:cfg.pool_B_size]
    bare = [by_key[(a, 0)] for a in a_ids]
    styled = [by_key[(b, styles[k % len(styles)])] for k, b in enumerate(b_ids)]
    return pool, bare, styled


def _stage(name: str):
    def wrap(fn):
        def inner(*args, **kwargs):
            log.info("pipeline stage: %s", name)
            try:
                return fn(*args, **kwargs)
            except Exception as e:
                raise PipelineError(f"stage '{name}' failed: {e}") from e
        return inner
    return wrap


def run_pipeline(cfg: PipelineConfig, base: DatasetManifest, out_dir: str | os.PathLike,
                 test: DatasetManifest | None = None, init: TransferModel | None = None) -> PipelineResult:
    """D0 -> train G1 -> generate -> filter -> retrain G2 on D0 + D*, then score both models.

    Without ``test`` the base manifest is split with ``holdout_split`` and the
    held-out combinations form the test set. Both models are scored in G1's
    encoder feature space so the two rows share one ruler.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if cfg.g1_train.T != cfg.model.T or cfg.g2_train.T != cfg.model.T:
        raise PipelineError("train configs and model config disagree on T")

    @_stage("split")
    def split():
        if test is not None:
            return base, test
        tr, te = holdout_split(base, cfg.refs_per_test_pair, cfg.seed)
        write_manifest(te, out / "test" / "manifest.txt")
        return tr, te

    base_train, test_m = split()

    @_stage("train G1")
    def train_g1():
        model = init if init is not None else TransferModel(cfg.model, seed=cfg.seed)
        res = train(model, base_train, cfg.g1_train)
        save_checkpoint(res.model, out / "g1" / "model.npz")
        write_loss_log(res.log, out / "g1" / "loss_log.txt")
        write_manifest(base_train, out / "g1" / "train_manifest.txt")
        return res.model

    g1 = train_g1()

    @_stage("generate")
    def generate():
        _, bare, styled = build_pools(base, cfg, out / "pool")
        cands = cross_generate(g1, bare, styled, out / "pool", out / "candidates", cfg.seed, cfg.ddim_steps,
                               cfg.guidance)
        return cands

    candidates = generate()

    @_stage("filter")
    def filter_():
        scored = score_candidates(g1.encoder, candidates, out / "pool", out / "candidates")
        write_candidates(scored, out / "candidates" / "candidates.txt", out / "pool", out / "candidates")
        curated = curate(scored, cfg.tau, root=out / "pool")
        write_manifest(curated, out / "curated" / "manifest.txt")
        log.info("kept %d of %d candidates at tau=%.2f", len(curated), len(scored), cfg.tau)
        return scored, curated.rebased(out / "curated")

    candidates, curated = filter_()

    @_stage("retrain G2")
    def retrain():
        merged = merge_manifests(base_train, curated, root=out / "g2", threshold=cfg.tau)
        write_manifest(merged, out / "g2" / "train_manifest.txt")
        res = train(g1, merged, cfg.g2_train)
        save_checkpoint(res.model, out / "g2" / "model.npz")
        write_loss_log(res.log, out / "g2" / "loss_log.txt")
        return res.model

    g2 = retrain()

    @_stage("evaluate")
    def score():
        ts = load_test_set(test_m)
        rows = (
            evaluate(g1, g1.encoder, test_m, g=cfg.guidance, ddim_steps=cfg.ddim_steps, seed=cfg.seed,
                     label="D0", test=ts),
            evaluate(g2, g1.encoder, test_m, g=cfg.guidance, ddim_steps=cfg.ddim_steps, seed=cfg.seed,
                     label="D0+D*", test=ts),
        )
        write_report(list(rows), out / "report.txt")
        return rows

    rows = score()
    return PipelineResult(g1, candidates, curated, g2, rows, out)
