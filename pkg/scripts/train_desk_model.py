"""Train (or load from cache) the desk-scale model and print its transfer probes.

Usage: python scripts/train_desk_model.py [--pipeline] [--cache DIR]

With --pipeline, also runs generate / filter / retrain from that model and
prints the two-row report. Uses the same configuration and cache as the
acceptance tests, so a run here makes the slow tests fast.
"""
import argparse
import logging
import sys
from pathlib import Path

from makeupdiff.experiments import (
    DESK_MODEL,
    DESK_PIPELINE,
    DESK_TRAIN,
    cached_pipeline,
    cached_train,
    default_cache_dir,
    desk_dataset,
)
from makeupdiff.metrics import (
    disentanglement,
    format_report,
    generate_test_outputs,
    lip_pairs,
    load_test_set,
    region_change_ratio,
)


def main(argv=None):
    ap = argparse.ArgumentParser()
    ap.add_argument("--pipeline", action="store_true")
    ap.add_argument("--cache", type=Path, default=None)
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    cache = args.cache or default_cache_dir()

    train_m, test_m = desk_dataset(cache / "desk_data")
    model = cached_train(DESK_MODEL, train_m, DESK_TRAIN, cache / "desk_model")
    test = load_test_set(test_m)
    out = generate_test_outputs(model, test, ddim_steps=DESK_TRAIN.ddim_steps)
    for k, v in vars(disentanglement(model.encoder, out, test)).items():
        print(f"{k:>22s} {v:.4f}")
    lips = lip_pairs(test_m, 32)
    ratio, inside, outside = region_change_ratio(model, test_m, test, lips, ddim_steps=DESK_TRAIN.ddim_steps)
    print(f"{'lip ratio':>22s} {ratio:.4f}  (inside {inside:.4f}, outside {outside:.4f}, n={len(lips)})")
    if args.pipeline:
        rows = cached_pipeline(DESK_PIPELINE, train_m, test_m, model, cache / "desk_pipeline")
        print(format_report(rows), end="")
    return 0


if __name__ == "__main__":
    sys.exit(main())
