"""Disentanglement and region-control probes for a trained checkpoint.

Usage: python scripts/probe_transfer.py CHECKPOINT TEST_MANIFEST [--ddim-steps N] [--n-region 32]

Prints mean identity similarity of each transfer to its source and to the
reference identity's bare face, mean makeup similarity to the reference and to
the source, and the outside/inside lips change ratio under the "lip makeup"
prompt for references whose style includes the lips.
"""
import argparse
import sys

from makeupdiff.checkpoint import load_checkpoint
from makeupdiff.manifest import load_manifest
from makeupdiff.metrics import disentanglement, generate_test_outputs, lip_pairs, load_test_set, region_change_ratio


def main(argv=None):
    ap = argparse.ArgumentParser()
    ap.add_argument("checkpoint")
    ap.add_argument("test_manifest")
    ap.add_argument("--ddim-steps", type=int, default=50)
    ap.add_argument("--n-region", type=int, default=32)
    args = ap.parse_args(argv)
    model = load_checkpoint(args.checkpoint)
    manifest = load_manifest(args.test_manifest)
    test = load_test_set(manifest)
    out = generate_test_outputs(model, test, ddim_steps=args.ddim_steps)
    for k, v in vars(disentanglement(model.encoder, out, test)).items():
        print(f"{k:>22s} {v:.4f}")
    ratio, inside, outside = region_change_ratio(model, manifest, test, lip_pairs(manifest, args.n_region),
                                                 ddim_steps=args.ddim_steps)
    print(f"{'lip ratio':>22s} {ratio:.4f}  (inside {inside:.4f}, outside {outside:.4f})")
    return 0


if __name__ == "__main__":
    sys.exit(main())
