"""Procedural faces with known identity and makeup factors.

Faces are flat-shaded ellipses on a fixed background. Identity is eight
geometry numbers plus a skin tone; makeup is a per-region color, intensity and
stripe texture blended only inside that region's mask. Label rasters use
0=background, 1=face skin, 2=eyes, 3=lips.
"""
from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from makeupdiff.manifest import (
    PROMPTS,
    DatasetManifest,
    Provenance,
    SampleId,
    SampleRecord,
    TrainingPair,
    write_manifest,
)

REGIONS = ("eyes", "lips", "face")
REGION_LABEL = {"face": 1, "eyes": 2, "lips": 3}
REGION_PROMPT = {"eyes": "eye makeup", "lips": "lip makeup", "face": "face makeup"}
PROMPT_REGION = {v: k for k, v in REGION_PROMPT.items()}

# (low, high) for each geometry component, in normalized [-1, 1] image coordinates
GEOMETRY_RANGES = {
    "face_width": (0.55, 0.80),
    "face_height": (0.70, 0.92),
    "eye_spacing": (0.28, 0.48),
    "eye_y": (-0.30, -0.12),
    "eye_size": (0.09, 0.15),
    "mouth_width": (0.24, 0.40),
    "mouth_y": (0.34, 0.50),
    "nose_offset": (-0.08, 0.08),
}
SKIN_RANGES = ((0.45, 0.95), (0.30, 0.80), (0.20, 0.70))
INTENSITY_RANGE = {"eyes": (0.55, 0.90), "lips": (0.55, 0.90), "face": (0.20, 0.45)}
TEXTURE_RANGE = (0.0, 6.0)
BACKGROUND = np.array([0.86, 0.88, 0.92])
_CATALOG_KEY = 0x4D4B5550  # separates the style catalog stream from identity seeds


@dataclass(frozen=True)
class IdentityParams:
    face_geometry: tuple[float, ...]
    skin_tone: tuple[float, float, float]

    def geometry(self, name: str) -> float:
        return self.face_geometry[list(GEOMETRY_RANGES).index(name)]


@dataclass(frozen=True)
class RegionStyle:
    color: tuple[float, float, float] = (0.0, 0.0, 0.0)
    intensity: float = 0.0
    texture_frequency: float = 0.0


@dataclass(frozen=True)
class MakeupParams:
    eyes: RegionStyle
    lips: RegionStyle
    face: RegionStyle
    style_index: int = 0

    def __post_init__(self):
        bare = all(self.region(r).intensity == 0.0 for r in REGIONS)
        if (self.style_index == 0) != bare:
            raise ValueError("style_index 0 must coincide with all-zero intensities")

    def region(self, name: str) -> RegionStyle:
        return getattr(self, name)

    def active_regions(self) -> tuple[str, ...]:
        return tuple(r for r in REGIONS if self.region(r).intensity > 0)


BARE = MakeupParams(RegionStyle(), RegionStyle(), RegionStyle(), 0)


def sample_identity(seed: int) -> IdentityParams:
    rng = np.random.default_rng(seed)
    geom = tuple(float(rng.uniform(lo, hi)) for lo, hi in GEOMETRY_RANGES.values())
    skin = tuple(float(rng.uniform(lo, hi)) for lo, hi in SKIN_RANGES)
    return IdentityParams(geom, skin)


def identity_seed(world_seed: int, identity_index: int) -> int:
    return int(np.random.SeedSequence([world_seed, identity_index]).generate_state(1)[0])


def style_regions(style_index: int) -> tuple[str, ...]:
    """Regions a catalog style paints: every fourth style is single-region, the rest full."""
    if style_index % 4 == 3:
        return (REGIONS[(style_index // 4) % 3],)
    return REGIONS


def sample_makeup(seed: int, style_index: int) -> MakeupParams:
    """Catalog style ``style_index``. ``seed`` is accepted for symmetry but styles are a fixed catalog."""
    if style_index < 0:
        raise ValueError(f"style_index must be >= 0, got {style_index}")
    if style_index == 0:
        return BARE
    rng = np.random.default_rng([_CATALOG_KEY, style_index])
    active = style_regions(style_index)
    styles = {}
    for r in REGIONS:
        color = tuple(float(c) for c in rng.uniform(0.0, 1.0, 3))
        intensity = float(rng.uniform(*INTENSITY_RANGE[r]))
        freq = float(rng.uniform(*TEXTURE_RANGE))
        styles[r] = RegionStyle(color, intensity, freq) if r in active else RegionStyle()
    return MakeupParams(styles["eyes"], styles["lips"], styles["face"], style_index)


def prompt_for(makeup: MakeupParams) -> str:
    active = makeup.active_regions()
    if not active:
        return "no makeup"
    if len(active) == 1:
        return REGION_PROMPT[active[0]]
    return "full makeup"


def _check_resolution(resolution: int) -> None:
    if not (32 <= resolution <= 512 and resolution & (resolution - 1) == 0):
        raise ValueError(f"resolution must be a power of two in [32, 512], got {resolution}")


def _ellipse(u, v, cx, cy, rx, ry):
    return ((u - cx) / rx) ** 2 + ((v - cy) / ry) ** 2 <= 1.0


def region_masks(identity: IdentityParams, resolution: int) -> np.ndarray:
    """Label raster (uint8, H x W) for the face geometry."""
    _check_resolution(resolution)
    g = identity.geometry
    # pixel centers in [-1, 1]
    c = (np.arange(resolution) + 0.5) / resolution * 2.0 - 1.0
    v, u = np.meshgrid(c, c, indexing="ij")
    face = _ellipse(u, v, 0.0, 0.0, g("face_width"), g("face_height"))
    s, ey, es = g("eye_spacing"), g("eye_y"), g("eye_size")
    eyes = (_ellipse(u, v, -s / 2, ey, es * 1.5, es) | _ellipse(u, v, s / 2, ey, es * 1.5, es)) & face
    lips = _ellipse(u, v, 0.0, g("mouth_y"), g("mouth_width") / 2, 0.09) & face & ~eyes
    labels = np.zeros((resolution, resolution), dtype=np.uint8)
    labels[face] = REGION_LABEL["face"]
    labels[eyes] = REGION_LABEL["eyes"]
    labels[lips] = REGION_LABEL["lips"]
    return labels


def render_face(identity: IdentityParams, makeup: MakeupParams, resolution: int = 64):
    """Return (float image H x W x 3 in [0, 1], label raster H x W)."""
    labels = region_masks(identity, resolution)
    g = identity.geometry
    c = (np.arange(resolution) + 0.5) / resolution * 2.0 - 1.0
    v, u = np.meshgrid(c, c, indexing="ij")
    skin = np.asarray(identity.skin_tone)

    img = np.empty((resolution, resolution, 3))
    img[:] = BACKGROUND
    face = labels == REGION_LABEL["face"]
    img[face] = skin
    # nose: darker skin stripe, part of the face class
    nose = face & (np.abs(u - g("nose_offset")) < 0.04) & (v > g("eye_y")) & (v < g("mouth_y") - 0.12)
    img[nose] = skin * 0.8
    eyes = labels == REGION_LABEL["eyes"]
    img[eyes] = (0.97, 0.97, 0.95)
    s, ey, es = g("eye_spacing"), g("eye_y"), g("eye_size")
    pupils = eyes & (_ellipse(u, v, -s / 2, ey, es * 0.5, es * 0.6) | _ellipse(u, v, s / 2, ey, es * 0.5, es * 0.6))
    img[pupils] = (0.15, 0.12, 0.10)
    lips = labels == REGION_LABEL["lips"]
    img[lips] = skin * np.array([0.95, 0.6, 0.6])

    for r in REGIONS:
        st = makeup.region(r)
        if st.intensity <= 0:
            continue
        m = labels == REGION_LABEL[r]
        texture = 0.8 + 0.2 * np.sin(np.pi * st.texture_frequency * (u + v))
        alpha = (st.intensity * texture)[m][:, None]
        img[m] = (1.0 - alpha) * img[m] + alpha * np.asarray(st.color)
    return img, labels


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)


def save_png(arr: np.ndarray, path: str | os.PathLike) -> None:
    # no metadata chunks, so identical arrays give identical bytes
    Image.fromarray(arr).save(path, format="PNG", optimize=False, compress_level=6)


def load_image(path: str | os.PathLike) -> np.ndarray:
    """uint8 PNG -> float32 H x W x 3 in [0, 1]."""
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0


def load_mask(path: str | os.PathLike) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im, dtype=np.uint8)


def render_sample(out_dir: Path, world_seed: int, sid: SampleId, resolution: int) -> SampleRecord:
    ident = sample_identity(identity_seed(world_seed, sid.identity_index))
    mk = sample_makeup(world_seed, sid.makeup_index)
    img, labels = render_face(ident, mk, resolution)
    rec = SampleRecord(sid, f"images/{sid.stem}.png", f"masks/{sid.stem}.png", prompt_for(mk), Provenance.BASE)
    save_png(to_uint8(img), out_dir / rec.image_path)
    save_png(labels, out_dir / rec.region_masks_path)
    return rec


def build_base_dataset(n_identities: int, n_styles: int, resolution: int = 64, seed: int = 0,
                       out_dir: str | os.PathLike = "data", first_identity: int = 0) -> DatasetManifest:
    """Render true pairs (I_iM_0, I_iM_j) for every identity and catalog style 1..n_styles.

    Identity indices run from ``first_identity``; each identity's geometry is keyed by
    (seed, index), so the same index always renders the same face for a given seed.
    """
    if n_identities < 2:
        raise ValueError("need at least 2 identities")
    if n_styles < 1:
        raise ValueError("need at least 1 style")
    _check_resolution(resolution)
    out_dir = Path(out_dir)
    try:
        (out_dir / "images").mkdir(parents=True, exist_ok=True)
        (out_dir / "masks").mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise OSError(f"cannot write dataset to {out_dir}: {e}") from e

    pairs = []
    for i in range(first_identity, first_identity + n_identities):
        bare = render_sample(out_dir, seed, SampleId(i, 0), resolution)
        for j in range(1, n_styles + 1):
            pairs.append(TrainingPair(bare, render_sample(out_dir, seed, SampleId(i, j), resolution)))
    manifest = DatasetManifest(tuple(pairs), root=out_dir)
    write_manifest(manifest, out_dir / "manifest.txt")
    return manifest


def holdout_split(manifest: DatasetManifest, refs_per_pair: int = 2, seed: int = 0):
    """Split true pairs into a training manifest and a cross-identity test manifest.

    Each identity loses one style (chosen by ``seed``) from training. Every
    held-out combination (i, j) becomes ``refs_per_pair`` test pairs
    (I_iM_0, I_kM_j) whose references come from other identities, so the ground
    truth I_iM_j is on disk but never seen in training.
    """
    rng = np.random.default_rng([seed, 0x5E1])
    by_identity: dict[int, list[TrainingPair]] = {}
    for p in manifest.pairs:
        by_identity.setdefault(p.source.id.identity_index, []).append(p)
    styles = sorted({p.target.id.makeup_index for p in manifest.pairs})
    if len(by_identity) < 2 or len(styles) < 2:
        raise ValueError("holdout needs at least 2 identities and 2 styles")
    offset = int(rng.integers(len(styles)))
    held = {i: styles[(n + offset) % len(styles)] for n, i in enumerate(sorted(by_identity))}

    train_pairs = [p for p in manifest.pairs if p.target.id.makeup_index != held[p.source.id.identity_index]]
    targets = {(p.target.id.identity_index, p.target.id.makeup_index): p.target for p in train_pairs}
    test_pairs = []
    for i in sorted(by_identity):
        j = held[i]
        donors = sorted(k for (k, jj) in targets if jj == j and k != i)
        if not donors:
            continue
        pick = rng.choice(len(donors), size=min(refs_per_pair, len(donors)), replace=False)
        for d in sorted(int(x) for x in pick):
            test_pairs.append(TrainingPair(by_identity[i][0].source, targets[(donors[d], j)]))
    root = manifest.root
    return DatasetManifest(tuple(train_pairs), manifest.threshold, root=root), \
        DatasetManifest(tuple(test_pairs), manifest.threshold, root=root)
