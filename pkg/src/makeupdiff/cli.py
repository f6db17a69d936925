"""Command-line entry point: dataset, train, pipeline, transfer, evaluate.

Exit status is 0 on success, 2 for configuration or input errors (detected
before anything is written) and 3 when a run fails part-way.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from makeupdiff.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from makeupdiff.config import ConfigError, RunConfig, load_config
from makeupdiff.curation import run_pipeline
from makeupdiff.diffusion import TransferModel, to_image_space, to_model_space
from makeupdiff.faces import build_base_dataset, holdout_split, load_image, save_png, to_uint8
from makeupdiff.manifest import PROMPTS, ManifestError, load_manifest, write_manifest
from makeupdiff.metrics import evaluate, load_test_set, write_report
from makeupdiff.training import train, write_loss_log

log = logging.getLogger("makeupdiff")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3

# flag -> config key, shared by every subcommand
COMMON_FLAGS = {
    "--seed": "seed", "--out-dir": "out_dir", "--resolution": "resolution",
    "--lambda-text": "lambda_text", "--lambda-makeup": "lambda_makeup", "--lambda-id": "lambda_id",
    "--tau": "tau", "--ddim-steps": "ddim_steps",
}
COMMAND_FLAGS = {
    "dataset": {"--n-identities": "n_identities", "--n-styles": "n_styles",
                "--refs-per-test-pair": "refs_per_test_pair"},
    "train": {"--manifest": "manifest", "--steps": "steps", "--learning-rate": "learning_rate",
              "--batch-size": "batch_size", "--init-checkpoint": "init_checkpoint"},
    "pipeline": {"--manifest": "manifest", "--test-manifest": "test_manifest", "--n-identities": "n_identities",
                 "--n-styles": "n_styles", "--steps": "steps", "--g2-steps": "g2_steps",
                 "--learning-rate": "learning_rate", "--batch-size": "batch_size",
                 "--pool-a-size": "pool_a_size", "--pool-b-size": "pool_b_size"},
    "transfer": {"--checkpoint": "checkpoint", "--source": "source", "--reference": "reference",
                 "--prompt": "prompt"},
    "evaluate": {"--checkpoint": "checkpoint", "--compare-checkpoint": "compare_checkpoint",
                 "--test-manifest": "test_manifest"},
}
HELP = {
    "dataset": "render the synthetic base dataset and its held-out split",
    "train": "train a model on a manifest",
    "pipeline": "train, cross-generate, filter and retrain, then report both models",
    "transfer": "apply a reference's makeup to a source face",
    "evaluate": "score a checkpoint on a test manifest; with --compare-checkpoint, the dataset ablation",
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="makeupdiff", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, extra in COMMAND_FLAGS.items():
        p = sub.add_parser(name, help=HELP[name])
        p.add_argument("--config", help="key = value file; flags override it")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override any config key")
        for flag, key in {**COMMON_FLAGS, **extra}.items():
            p.add_argument(flag, dest=key, default=None)
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    overrides = {}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        overrides[k.strip().replace("-", "_")] = v.strip()
    keys = {**COMMON_FLAGS, **COMMAND_FLAGS[args.command]}.values()
    overrides.update({k: getattr(args, k) for k in keys if getattr(args, k) is not None})
    return load_config(args.config, **overrides)


def _require_file(path: str, what: str) -> Path:
    if not path:
        raise ConfigError(f"{what} not given")
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"{what} not found: {p}")
    return p


def _load_model(path: str, what: str = "checkpoint") -> TransferModel:
    _require_file(path, what)
    try:
        return load_checkpoint(path)
    except CheckpointError as e:
        raise ConfigError(str(e)) from e


def _load_manifest(path: str, what: str):
    _require_file(path, what)
    try:
        return load_manifest(path)
    except ManifestError as e:
        raise ConfigError(str(e)) from e


# ---------------------------------------------------------------- commands
# each returns a closure so that every input is checked before the first write

def cmd_dataset(cfg: RunConfig):
    def run():
        out = Path(cfg.out_dir)
        m = build_base_dataset(cfg.n_identities, cfg.n_styles, cfg.resolution, cfg.seed, out)
        log.info("wrote %d pairs to %s", len(m), out)
        if cfg.n_styles >= 2:
            train_m, test_m = holdout_split(m, cfg.refs_per_test_pair, cfg.seed)
            write_manifest(train_m, out / "train_manifest.txt")
            write_manifest(test_m, out / "test_manifest.txt")
            log.info("held-out split: %d training pairs, %d test transfers", len(train_m), len(test_m))
    return run


def cmd_train(cfg: RunConfig):
    manifest = _load_manifest(cfg.manifest, "manifest")
    init = _load_model(cfg.init_checkpoint, "init checkpoint") if cfg.init_checkpoint else None
    if init is not None and init.cfg != cfg.model_config():
        raise ConfigError("init checkpoint's model config differs from the run config")

    def run():
        out = Path(cfg.out_dir)
        res = train(init or TransferModel(cfg.model_config(), seed=cfg.seed), manifest, cfg.train_config())
        save_checkpoint(res.model, out / "model.npz", steps=len(res.log))
        write_loss_log(res.log, out / "loss_log.txt")
        log.info("held-out l_total %.4f -> %.4f", res.initial_eval.l_total, res.final_eval.l_total)
    return run


def cmd_pipeline(cfg: RunConfig):
    pcfg = cfg.pipeline_config()
    base = _load_manifest(cfg.manifest, "manifest") if cfg.manifest else None
    test = _load_manifest(cfg.test_manifest, "test manifest") if cfg.test_manifest else None

    def run():
        out = Path(cfg.out_dir)
        b = base
        if b is None:
            b = build_base_dataset(cfg.n_identities, cfg.n_styles, cfg.resolution, cfg.seed, out / "base")
        res = run_pipeline(pcfg, b, out, test=test)
        for row in res.metrics_before_after:
            log.info("%s", "  ".join(row.cells()))
    return run


def cmd_transfer(cfg: RunConfig):
    model = _load_model(cfg.checkpoint)
    src_path = _require_file(cfg.source, "source image")
    ref_path = _require_file(cfg.reference, "reference image")
    if cfg.prompt not in PROMPTS:
        raise ConfigError(f"prompt {cfg.prompt!r} not in {PROMPTS}")
    if cfg.ddim_steps > model.cfg.T:
        raise ConfigError(f"ddim_steps {cfg.ddim_steps} exceeds the checkpoint's T={model.cfg.T}")
    src, ref = load_image(src_path), load_image(ref_path)
    res = model.cfg.resolution
    for name, img in (("source", src), ("reference", ref)):
        if img.shape[:2] != (res, res):
            raise ConfigError(f"{name} is {img.shape[1]}x{img.shape[0]}, the checkpoint expects {res}x{res}")
    g = cfg.guidance()

    def run():
        out = model.transfer(to_model_space(src), to_model_space(ref), cfg.prompt, g, cfg.ddim_steps, cfg.seed)
        result = to_uint8(to_image_space(out))[0]
        grid = np.concatenate([to_uint8(src), to_uint8(ref), result], axis=1)
        out_dir = Path(cfg.out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        save_png(result, out_dir / "result.png")
        save_png(grid, out_dir / "grid.png")
        log.info("wrote %s", out_dir / "result.png")
    return run


def cmd_evaluate(cfg: RunConfig):
    model = _load_model(cfg.checkpoint)
    other = _load_model(cfg.compare_checkpoint, "compare checkpoint") if cfg.compare_checkpoint else None
    test_m = _load_manifest(cfg.test_manifest, "test manifest")
    if other is not None and other.cfg.resolution != model.cfg.resolution:
        raise ConfigError("the two checkpoints disagree on resolution")
    g = cfg.guidance()

    def run():
        test = load_test_set(test_m)
        kw = dict(g=g, ddim_steps=cfg.ddim_steps, seed=cfg.seed, test=test)
        if other is None:
            rows = [evaluate(model, model.encoder, test_m, label="model", **kw)]
        else:
            # base-only vs base + curated, both measured with the first model's encoder
            rows = [evaluate(model, model.encoder, test_m, label="D0", **kw),
                    evaluate(other, model.encoder, test_m, label="D0+D*", **kw)]
        write_report(rows, Path(cfg.out_dir) / "report.txt")
        for row in rows:
            log.info("%s", "  ".join(row.cells()))
    return run


COMMANDS = {"dataset": cmd_dataset, "train": cmd_train, "pipeline": cmd_pipeline,
            "transfer": cmd_transfer, "evaluate": cmd_evaluate}


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(stream=sys.stderr, level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(args)
        run = COMMANDS[args.command](cfg)
    except (ConfigError, ValueError) as e:
        log.error("%s", e)
        return EXIT_CONFIG
    try:
        torch.manual_seed(cfg.seed)
        run()
    except Exception as e:  # noqa: BLE001 - reported as a runtime failure
        log.error("%s failed: %s: %s", args.command, type(e).__name__, e)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
