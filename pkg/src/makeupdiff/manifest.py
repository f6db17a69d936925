"""Sample notation and the on-disk pair manifest.

A sample ``I{i}M{j}`` is identity ``i`` wearing makeup style ``j``; ``j == 0``
is the bare face. A manifest is an ordered list of (bare source, styled target)
pairs stored one per line as tab-separated ``key=value`` fields, preceded by a
single header line.
"""
from __future__ import annotations

import enum
import os
from dataclasses import dataclass, field, replace
from pathlib import Path

from PIL import Image

SCHEMA_VERSION = 1
DEFAULT_THRESHOLD = 0.7
NA = "NA"
HEADER_TAG = "#makeupdiff-manifest"
PROMPTS = ("no makeup", "full makeup", "eye makeup", "lip makeup", "face makeup")

_FIELDS = (
    "src_i", "src_j", "src_image", "src_mask", "src_prompt", "src_provenance",
    "tgt_i", "tgt_j", "tgt_image", "tgt_mask", "tgt_prompt", "tgt_provenance",
    "sim",
)


class ManifestError(ValueError):
    pass


class Provenance(str, enum.Enum):
    BASE = "base"
    CROSS_GENERATED = "cross_generated"
    FILTERED_RETAINED = "filtered_retained"


@dataclass(frozen=True, order=True)
class SampleId:
    identity_index: int
    makeup_index: int

    def __post_init__(self):
        if self.identity_index < 0 or self.makeup_index < 0:
            raise ManifestError(f"negative sample index in {self}")

    @property
    def is_bare(self) -> bool:
        return self.makeup_index == 0

    @property
    def stem(self) -> str:
        return f"I{self.identity_index}M{self.makeup_index}"


@dataclass(frozen=True)
class SampleRecord:
    id: SampleId
    image_path: str
    region_masks_path: str
    prompt: str
    provenance: Provenance = Provenance.BASE

    def __post_init__(self):
        if self.prompt not in PROMPTS:
            raise ManifestError(f"prompt {self.prompt!r} not in vocabulary")
        object.__setattr__(self, "provenance", Provenance(self.provenance))


def round_score(x: float) -> float:
    return float(f"{x:.6f}")


@dataclass(frozen=True)
class TrainingPair:
    source: SampleRecord
    target: SampleRecord
    sim_score: float | None = None

    def __post_init__(self):
        # scores live at the manifest's 6-digit precision so that load(write(m)) == m
        if self.sim_score is not None:
            object.__setattr__(self, "sim_score", round_score(self.sim_score))

    @property
    def key(self) -> tuple[SampleId, SampleId]:
        return (self.source.id, self.target.id)


@dataclass(frozen=True)
class DatasetManifest:
    pairs: tuple[TrainingPair, ...] = ()
    threshold: float = DEFAULT_THRESHOLD
    schema_version: int = SCHEMA_VERSION
    # directory that record paths are relative to; not part of the value
    root: Path = field(default=Path("."), compare=False)

    def __post_init__(self):
        object.__setattr__(self, "pairs", tuple(self.pairs))
        object.__setattr__(self, "threshold", round_score(self.threshold))
        object.__setattr__(self, "root", Path(self.root))

    def __len__(self):
        return len(self.pairs)

    def resolve(self, relpath: str) -> Path:
        return self.root / relpath

    def records(self) -> list[SampleRecord]:
        """Distinct records in first-seen order."""
        seen = {}
        for p in self.pairs:
            for r in (p.source, p.target):
                seen.setdefault(r.id, r)
        return list(seen.values())

    def rebased(self, new_root: str | os.PathLike) -> DatasetManifest:
        """Same manifest with record paths rewritten relative to ``new_root``."""
        new_root = Path(new_root)

        def move(rec: SampleRecord) -> SampleRecord:
            return replace(
                rec,
                image_path=_relpath(self.root / rec.image_path, new_root),
                region_masks_path=_relpath(self.root / rec.region_masks_path, new_root),
            )

        pairs = tuple(replace(p, source=move(p.source), target=move(p.target)) for p in self.pairs)
        return replace(self, pairs=pairs, root=new_root)

    def validate(self, check_files: bool = False) -> None:
        """Raise ManifestError on the first record that breaks an invariant."""
        if self.schema_version != SCHEMA_VERSION:
            raise ManifestError(f"schema version {self.schema_version} != {SCHEMA_VERSION}")
        if not 0.0 < self.threshold <= 1.0:
            raise ManifestError(f"threshold {self.threshold} outside (0, 1]")
        keys = set()
        by_id: dict[SampleId, SampleRecord] = {}
        for n, p in enumerate(self.pairs):
            where = f"pair {n} ({p.source.id.stem} -> {p.target.id.stem})"
            if not p.source.id.is_bare:
                raise ManifestError(f"{where}: source is not bare-faced")
            if p.sim_score is not None and not -1.0 <= p.sim_score <= 1.0:
                raise ManifestError(f"{where}: sim_score {p.sim_score} outside [-1, 1]")
            if p.target.provenance is Provenance.FILTERED_RETAINED:
                if p.sim_score is None:
                    raise ManifestError(f"{where}: filtered_retained pair without sim_score")
                if p.sim_score < self.threshold:
                    raise ManifestError(
                        f"{where}: sim_score {p.sim_score:.6f} below threshold {self.threshold:.6f}")
            if p.key in keys:
                raise ManifestError(f"{where}: duplicate pair")
            keys.add(p.key)
            for rec in (p.source, p.target):
                prev = by_id.setdefault(rec.id, rec)
                if prev != rec:
                    raise ManifestError(f"{where}: sample {rec.id.stem} defined twice with different records")
        if check_files:
            for rec in by_id.values():
                _check_record_files(self.root, rec)


def _relpath(path: Path, start: Path) -> str:
    return Path(os.path.relpath(os.path.abspath(path), os.path.abspath(start))).as_posix()


def _check_record_files(root: Path, rec: SampleRecord) -> None:
    img, msk = root / rec.image_path, root / rec.region_masks_path
    for f in (img, msk):
        if not f.is_file():
            raise ManifestError(f"{rec.id.stem}: missing file {f}")
    with Image.open(img) as a, Image.open(msk) as b:
        if a.size != b.size:
            raise ManifestError(f"{rec.id.stem}: image {a.size} and mask {b.size} differ in size")


def _record_fields(prefix: str, rec: SampleRecord) -> list[tuple[str, str]]:
    return [
        (f"{prefix}_i", str(rec.id.identity_index)),
        (f"{prefix}_j", str(rec.id.makeup_index)),
        (f"{prefix}_image", rec.image_path),
        (f"{prefix}_mask", rec.region_masks_path),
        (f"{prefix}_prompt", rec.prompt),
        (f"{prefix}_provenance", rec.provenance.value),
    ]


def format_manifest(manifest: DatasetManifest) -> str:
    manifest.validate()
    lines = [f"{HEADER_TAG}\tschema_version={manifest.schema_version}\tthreshold={manifest.threshold:.6f}"]
    for p in manifest.pairs:
        kv = _record_fields("src", p.source) + _record_fields("tgt", p.target)
        kv.append(("sim", NA if p.sim_score is None else f"{p.sim_score:.6f}"))
        for k, v in kv:
            if "\t" in v or "\n" in v:
                raise ManifestError(f"field {k} contains a tab or newline: {v!r}")
        lines.append("\t".join(f"{k}={v}" for k, v in kv))
    return "\n".join(lines) + "\n"


def write_manifest(manifest: DatasetManifest, path: str | os.PathLike) -> None:
    """Write ``manifest`` to ``path``; record paths are re-expressed relative to the file."""
    path = Path(path)
    text = format_manifest(manifest.rebased(path.parent))
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def _parse_kv(line: str, lineno: int) -> dict[str, str]:
    out = {}
    for tok in line.split("\t"):
        if "=" not in tok:
            raise ManifestError(f"line {lineno}: malformed field {tok!r}")
        k, v = tok.split("=", 1)
        out[k] = v
    return out


def _parse_record(kv: dict[str, str], prefix: str) -> SampleRecord:
    return SampleRecord(
        id=SampleId(int(kv[f"{prefix}_i"]), int(kv[f"{prefix}_j"])),
        image_path=kv[f"{prefix}_image"],
        region_masks_path=kv[f"{prefix}_mask"],
        prompt=kv[f"{prefix}_prompt"],
        provenance=Provenance(kv[f"{prefix}_provenance"]),
    )


def parse_manifest(text: str, root: str | os.PathLike = ".") -> DatasetManifest:
    lines = text.splitlines()
    if not lines or not lines[0].startswith(HEADER_TAG + "\t"):
        raise ManifestError("missing manifest header")
    header = _parse_kv(lines[0][len(HEADER_TAG) + 1:], 1)
    try:
        version = int(header["schema_version"])
        threshold = float(header["threshold"])
    except (KeyError, ValueError) as e:
        raise ManifestError(f"bad header: {e}") from None
    if version != SCHEMA_VERSION:
        raise ManifestError(f"schema version {version} != {SCHEMA_VERSION}")
    pairs = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        kv = _parse_kv(line, lineno)
        if set(kv) != set(_FIELDS):
            raise ManifestError(f"line {lineno}: expected fields {_FIELDS}, got {tuple(kv)}")
        try:
            sim = None if kv["sim"] == NA else float(kv["sim"])
            pairs.append(TrainingPair(_parse_record(kv, "src"), _parse_record(kv, "tgt"), sim))
        except ValueError as e:
            raise ManifestError(f"line {lineno}: {e}") from None
    return DatasetManifest(tuple(pairs), threshold, version, Path(root))


def load_manifest(path: str | os.PathLike, check_files: bool = True) -> DatasetManifest:
    path = Path(path)
    if not path.is_file():
        raise ManifestError(f"manifest not found: {path}")
    manifest = parse_manifest(path.read_text(encoding="utf-8"), root=path.parent)
    manifest.validate(check_files=check_files)
    return manifest


def merge_manifests(*manifests: DatasetManifest, root: str | os.PathLike,
                    threshold: float | None = None) -> DatasetManifest:
    """Concatenate manifests, rebasing every path onto ``root``."""
    pairs = []
    for m in manifests:
        pairs.extend(m.rebased(root).pairs)
    if threshold is None:
        threshold = max((m.threshold for m in manifests), default=DEFAULT_THRESHOLD)
    merged = DatasetManifest(tuple(pairs), threshold, SCHEMA_VERSION, Path(root))
    merged.validate()
    return merged


def sibling_record(rec: SampleRecord, makeup_index: int, prompt: str) -> SampleRecord:
    """Record for the same identity with another style, following the ``images/I{i}M{j}.png`` layout."""
    sid = SampleId(rec.id.identity_index, makeup_index)
    img = Path(rec.image_path).with_name(sid.stem + ".png").as_posix()
    msk = Path(rec.region_masks_path).with_name(sid.stem + ".png").as_posix()
    return SampleRecord(sid, img, msk, prompt, Provenance.BASE)
