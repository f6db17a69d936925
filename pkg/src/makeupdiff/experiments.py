"""Desk-scale experiment setup shared by the acceptance tests and ``scripts/``.

Training a 64px model takes tens of minutes on one CPU core, so trained
checkpoints are cached next to a JSON key describing everything that went
into them; a cached checkpoint is reused only when the key matches exactly.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import os
from pathlib import Path

from makeupdiff.checkpoint import load_checkpoint, save_checkpoint
from makeupdiff.curation import PipelineConfig, run_pipeline
from makeupdiff.diffusion import ModelConfig, TransferModel
from makeupdiff.faces import build_base_dataset, holdout_split
from makeupdiff.manifest import DatasetManifest, load_manifest, write_manifest
from makeupdiff.metrics import MetricsRow, read_report
from makeupdiff.training import TrainConfig, train, write_loss_log

log = logging.getLogger(__name__)

DESK_DATA = dict(n_identities=16, n_styles=8, resolution=64, seed=0)
DESK_MODEL = ModelConfig(resolution=64, width=128)
DESK_TRAIN = TrainConfig(steps=2500, learning_rate=1e-3, lr_schedule="cosine", lambda_embed=0.1, log_every=100)
# G1 is the desk model itself (no extra G1 steps); G2 fine-tunes it on base + curated
DESK_PIPELINE = PipelineConfig(
    tau=0.7, pool_A_size=8, pool_B_size=8, model=DESK_MODEL,
    g1_train=dataclasses.replace(DESK_TRAIN, steps=0),
    g2_train=dataclasses.replace(DESK_TRAIN, steps=800, learning_rate=3e-4, seed=1),
)
# three references per held-out (identity, style) combination: 48 test transfers
DESK_REFS_PER_TEST_PAIR = 3


def default_cache_dir() -> Path:
    return Path(os.environ.get("MAKEUPDIFF_CACHE", Path(__file__).resolve().parents[2] / ".cache"))


def desk_dataset(root: str | os.PathLike) -> tuple[DatasetManifest, DatasetManifest]:
    """Render (once) the 16-identity x 8-style set and split it into train and held-out test manifests."""
    root = Path(root)
    if (root / "manifest.txt").is_file():
        base = load_manifest(root / "manifest.txt")
    else:
        d = DESK_DATA
        base = build_base_dataset(d["n_identities"], d["n_styles"], d["resolution"], d["seed"], root)
    train_m, test_m = holdout_split(base, DESK_REFS_PER_TEST_PAIR, DESK_DATA["seed"])
    write_manifest(train_m, root / "train_manifest.txt")
    write_manifest(test_m, root / "test_manifest.txt")
    return train_m, test_m


def _manifest_digest(m: DatasetManifest) -> str:
    h = hashlib.sha256()
    for p in m.pairs:
        for rec in (p.source, p.target):
            h.update(rec.image_path.encode())
            h.update(m.resolve(rec.image_path).read_bytes())
    return h.hexdigest()


def model_digest(model: TransferModel) -> str:
    h = hashlib.sha256(repr(dataclasses.asdict(model.cfg)).encode())
    for k, v in sorted(model.state_dict().items()):
        h.update(k.encode())
        h.update(v.detach().cpu().numpy().tobytes())
    return h.hexdigest()


def run_key(model: ModelConfig | str, manifest: DatasetManifest, cfg: TrainConfig) -> dict:
    """Everything a training run depends on. ``model`` is a config or the digest of an init checkpoint."""
    return {
        "model": dataclasses.asdict(model) if isinstance(model, ModelConfig) else model,
        "train": dataclasses.asdict(cfg),
        "data": _manifest_digest(manifest),
    }


def cached_train(init: TransferModel | ModelConfig, manifest: DatasetManifest, cfg: TrainConfig,
                 out_dir: str | os.PathLike) -> TransferModel:
    """Train on ``manifest`` unless ``out_dir`` already holds a checkpoint from identical inputs."""
    out_dir = Path(out_dir)
    key = run_key(init if isinstance(init, ModelConfig) else model_digest(init), manifest, cfg)
    ckpt, key_path = out_dir / "model.npz", out_dir / "key.json"
    if ckpt.is_file() and key_path.is_file() and json.loads(key_path.read_text()) == key:
        log.info("reusing %s", ckpt)
        return load_checkpoint(ckpt)
    model = TransferModel(init) if isinstance(init, ModelConfig) else init
    res = train(model, manifest, cfg)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_checkpoint(res.model, ckpt, steps=len(res.log))
    write_loss_log(res.log, out_dir / "loss_log.txt")
    key_path.write_text(json.dumps(key, indent=1, sort_keys=True))
    return res.model


def cached_pipeline(cfg: PipelineConfig, train_m: DatasetManifest, test_m: DatasetManifest, init: TransferModel,
                    out_dir: str | os.PathLike) -> list[MetricsRow]:
    """``run_pipeline`` warm-started from ``init``, skipped when ``out_dir`` holds a report from identical inputs."""
    out_dir = Path(out_dir)
    key = {"pipeline": repr(cfg), "init": model_digest(init), "train": _manifest_digest(train_m),
           "test": _manifest_digest(test_m)}
    key_path, report = out_dir / "key.json", out_dir / "report.txt"
    if report.is_file() and key_path.is_file() and json.loads(key_path.read_text()) == key:
        log.info("reusing %s", report)
        return read_report(report)
    res = run_pipeline(cfg, train_m, out_dir, test=test_m, init=init)
    key_path.write_text(json.dumps(key, indent=1, sort_keys=True))
    return list(res.metrics_before_after)
