"""Transfer quality metrics: Frechet distance, CLS (makeup) and Key-sim (identity).

All three are computed in the feature space of a trained ``FeatureEncoder``:
FID on the pooled trunk features, CLS on makeup-head embeddings and Key-sim on
identity-head embeddings.
"""
from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from makeupdiff.diffusion import TransferModel, to_image_space, to_model_space
from makeupdiff.encoders import FeatureEncoder, cosine_similarity
from makeupdiff.faces import REGION_LABEL, load_image, load_mask, to_uint8
from makeupdiff.manifest import DatasetManifest, sibling_record
from makeupdiff.mga import GuidanceWeights

REPORT_COLUMNS = ("Model", "FID", "CLS", "Key-sim", "FID-to-Real")


class FrechetError(ArithmeticError):
    pass


def _eig_sqrt_trace(m: np.ndarray, what: str) -> tuple[float, np.ndarray, np.ndarray]:
    m = (m + m.T) / 2.0
    w, v = np.linalg.eigh(m)
    if not np.all(np.isfinite(w)):
        raise FrechetError(f"{what}: non-finite eigenvalues")
    scale = max(1.0, float(np.abs(w).max()))
    if w.min() < -1e-10 * scale:
        raise FrechetError(
            f"{what}: eigenvalue {w.min():.3e} below -1e-10 (largest {w.max():.3e}, "
            f"condition ~{w.max() / max(abs(w).min(), 1e-300):.3e})")
    w = np.clip(w, 0.0, None)
    return float(np.sqrt(w).sum()), w, v


def frechet_distance(a, b) -> float:
    """Frechet distance between Gaussians fitted to the rows of ``a`` and ``b``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ValueError(f"feature sets must be 2-D with equal widths, got {a.shape} and {b.shape}")
    if a.shape[0] < 2 or b.shape[0] < 2:
        raise ValueError("each feature set needs at least 2 rows")
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise ValueError("non-finite features")
    diff = a.mean(0) - b.mean(0)
    cov_a = np.atleast_2d(np.cov(a, rowvar=False))
    cov_b = np.atleast_2d(np.cov(b, rowvar=False))
    # tr sqrt(A B) = tr sqrt(A^1/2 B A^1/2), and the latter is symmetric PSD
    _, w, v = _eig_sqrt_trace(cov_a, "cov_a")
    root_a = (v * np.sqrt(w)) @ v.T
    tr_sqrt, _, _ = _eig_sqrt_trace(root_a @ cov_b @ root_a, "sqrt(cov_a) cov_b sqrt(cov_a)")
    d = float(diff @ diff + np.trace(cov_a) + np.trace(cov_b) - 2.0 * tr_sqrt)
    if -1e-6 < d < 0:
        d = 0.0
    return d


@torch.no_grad()
def encoder_features(encoder: FeatureEncoder, images: torch.Tensor, chunk: int = 64):
    """(trunk features, identity embeddings, makeup embeddings) as float64 arrays."""
    f, fi, fm = [], [], []
    for k in range(0, images.shape[0], chunk):
        x = encoder.encode_image(images[k:k + chunk])
        f.append(x)
        fi.append(encoder.project_identity(x))
        fm.append(encoder.project_makeup(x))
    cat = lambda xs: torch.cat(xs).double().numpy()
    return cat(f), cat(fi), cat(fm)


def cls_score(generated: torch.Tensor, reference: torch.Tensor, encoder: FeatureEncoder) -> np.ndarray:
    """Per-pair cosine similarity of makeup embeddings."""
    _, _, a = encoder_features(encoder, generated)
    _, _, b = encoder_features(encoder, reference)
    return np.atleast_1d(cosine_similarity(a, b))


def key_sim(generated: torch.Tensor, source: torch.Tensor, encoder: FeatureEncoder) -> np.ndarray:
    """Per-pair cosine similarity of identity embeddings."""
    _, a, _ = encoder_features(encoder, generated)
    _, b, _ = encoder_features(encoder, source)
    return np.atleast_1d(cosine_similarity(a, b))


@dataclass(frozen=True)
class MetricsRow:
    fid: float
    cls: float
    key_sim: float
    fid_to_real: float | None = None
    label: str = "model"

    def cells(self) -> list[str]:
        f2r = "NA" if self.fid_to_real is None else f"{self.fid_to_real:.6f}"
        return [self.label, f"{self.fid:.6f}", f"{self.cls:.6f}", f"{self.key_sim:.6f}", f2r]


def format_report(rows: list[MetricsRow]) -> str:
    lines = ["\t".join(REPORT_COLUMNS)] + ["\t".join(r.cells()) for r in rows]
    return "\n".join(lines) + "\n"


def read_report(path: str | os.PathLike) -> list[MetricsRow]:
    lines = Path(path).read_text().splitlines()
    if not lines or tuple(lines[0].split("\t")) != REPORT_COLUMNS:
        raise ValueError(f"{path}: not a metrics report")
    rows = []
    for line in lines[1:]:
        label, fid, cls, ks, f2r = line.split("\t")
        rows.append(MetricsRow(float(fid), float(cls), float(ks), None if f2r == "NA" else float(f2r), label))
    return rows


def write_report(rows: list[MetricsRow], path: str | os.PathLike) -> None:
    text = format_report(rows)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


@dataclass
class TestSet:
    """Model-space tensors for each (source, reference[, ground truth]) test pair."""
    source: torch.Tensor
    reference: torch.Tensor
    truth: torch.Tensor | None
    reference_bare: torch.Tensor
    prompts: list[str]
    stems: list[str]

    def __len__(self):
        return self.source.shape[0]


def load_test_set(manifest: DatasetManifest) -> TestSet:
    """Read a test manifest whose pairs are (bare source, styled reference).

    Ground truth for a cross-identity pair is the source identity's render of
    the reference style, looked up beside the source image; it is used only if
    present for every pair.
    """
    if not len(manifest):
        raise ValueError("empty test set")
    src, ref, refb, truth, prompts, stems = [], [], [], [], [], []
    have_truth = True
    for p in manifest.pairs:
        src.append(load_image(manifest.resolve(p.source.image_path)))
        ref.append(load_image(manifest.resolve(p.target.image_path)))
        refb.append(load_image(manifest.resolve(sibling_record(p.target, 0, "no makeup").image_path)))
        gt = manifest.resolve(sibling_record(p.source, p.target.id.makeup_index, p.target.prompt).image_path)
        if gt.is_file():
            truth.append(load_image(gt))
        else:
            have_truth = False
        prompts.append(p.target.prompt)
        stems.append(f"{p.source.id.stem}_{p.target.id.stem}")
    return TestSet(to_model_space(np.stack(src)), to_model_space(np.stack(ref)),
                   to_model_space(np.stack(truth)) if have_truth else None,
                   to_model_space(np.stack(refb)), prompts, stems)


def quantize(x: torch.Tensor) -> torch.Tensor:
    """Round model-space images through 8-bit, as if written to and read back from PNG."""
    return to_model_space(to_uint8(to_image_space(x)).astype(np.float32) / 255.0)


@torch.no_grad()
def generate_test_outputs(model: TransferModel, test: TestSet, g: GuidanceWeights = GuidanceWeights(),
                          ddim_steps: int = 50, seed: int = 0, chunk: int = 32) -> torch.Tensor:
    outs = []
    for k in range(0, len(test), chunk):
        sl = slice(k, k + chunk)
        seeds = [seed + n for n in range(k, min(k + chunk, len(test)))]
        outs.append(model.transfer(test.source[sl], test.reference[sl], test.prompts[sl], g, ddim_steps, seeds))
    return quantize(torch.cat(outs))


def evaluate(model: TransferModel | None, encoder: FeatureEncoder, test_manifest: DatasetManifest,
             report_path: str | os.PathLike | None = None, g: GuidanceWeights = GuidanceWeights(),
             ddim_steps: int = 50, seed: int = 0, label: str = "model",
             generated: torch.Tensor | None = None, test: TestSet | None = None) -> MetricsRow:
    """Generate one transfer per test pair and score it against reference, source and truth.

    ``generated`` bypasses the model with precomputed outputs (model-space tensors).
    """
    test = load_test_set(test_manifest) if test is None else test
    if generated is None:
        if model is None:
            raise ValueError("need a model or precomputed outputs")
        generated = generate_test_outputs(model, test, g, ddim_steps, seed)
    f_gen, i_gen, m_gen = encoder_features(encoder, generated)
    f_ref, _, m_ref = encoder_features(encoder, test.reference)
    _, i_src, _ = encoder_features(encoder, test.source)
    row = MetricsRow(
        fid=frechet_distance(f_gen, f_ref),
        cls=float(np.mean(cosine_similarity(m_gen, m_ref))),
        key_sim=float(np.mean(cosine_similarity(i_gen, i_src))),
        fid_to_real=None if test.truth is None else frechet_distance(f_gen, encoder_features(encoder, test.truth)[0]),
        label=label,
    )
    if report_path is not None:
        write_report([row], report_path)
    return row


@dataclass(frozen=True)
class Disentanglement:
    keysim_source: float
    keysim_reference_bare: float
    cls_reference: float
    cls_source: float


def disentanglement(encoder: FeatureEncoder, generated: torch.Tensor, test: TestSet) -> Disentanglement:
    """Does each transfer look like its source's person wearing its reference's makeup?

    Identity similarity to the source is compared against the reference
    person's bare face; makeup similarity to the reference against the source.
    """
    _, i_out, m_out = encoder_features(encoder, generated)
    _, i_src, m_src = encoder_features(encoder, test.source)
    _, i_refb, _ = encoder_features(encoder, test.reference_bare)
    _, _, m_ref = encoder_features(encoder, test.reference)
    mean = lambda a, b: float(np.mean(cosine_similarity(a, b)))
    return Disentanglement(mean(i_out, i_src), mean(i_out, i_refb), mean(m_out, m_ref), mean(m_out, m_src))


@torch.no_grad()
def lip_pairs(manifest: DatasetManifest, n: int = 32) -> list[int]:
    """Indices of the first ``n`` test pairs whose reference style puts makeup on the lips."""
    idx = [k for k, p in enumerate(manifest.pairs) if p.target.prompt in ("full makeup", "lip makeup")][:n]
    if len(idx) < n:
        raise ValueError(f"only {len(idx)} test pairs with lip makeup, need {n}")
    return idx


def region_change_ratio(model: TransferModel, manifest: DatasetManifest, test: TestSet, pairs: list[int],
                        prompt: str = "lip makeup", region: str = "lips", g: GuidanceWeights = GuidanceWeights(),
                        ddim_steps: int = 50, seed: int = 0) -> tuple[float, float, float]:
    """Transfer under a region prompt; mean |result - source| outside the source's region mask over inside.

    Returns (ratio, inside, outside), each change averaged per transfer first.
    """
    if not pairs:
        raise ValueError("no test pairs selected")
    src, ref = test.source[pairs], test.reference[pairs]
    out = quantize(model.transfer(src, ref, prompt, g, ddim_steps, [seed + k for k in pairs]))
    change = (out - src).abs().mean(1) / 2.0  # [0, 1] image units
    masks = torch.stack([torch.as_tensor(load_mask(manifest.resolve(manifest.pairs[k].source.region_masks_path))
                                         == REGION_LABEL[region]) for k in pairs])
    if not masks.flatten(1).any(1).all():
        raise ValueError(f"a selected source has an empty {region} mask")
    inside = torch.stack([c[m].mean() for c, m in zip(change, masks)]).mean()
    outside = torch.stack([c[~m].mean() for c, m in zip(change, masks)]).mean()
    return float(outside / inside), float(inside), float(outside)
