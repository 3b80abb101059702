"""Trajectory-gap probe over several seeds on a pre-trained bundle.

Prints the final-step MSE for each injection level and whether it is
non-decreasing in the level.

    python scripts/gap_probe.py --checkpoint runs/toy/base --seeds 10
"""
import argparse
import json

from omgsr.checkpoint import CheckpointBundle
from omgsr.midstep import gap_probe


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--checkpoint", required=True)
    ap.add_argument("--seeds", type=int, default=10)
    ap.add_argument("--steps", type=int, default=20)
    ap.add_argument("--injection-step", type=int, default=10)
    ap.add_argument("--levels", type=float, nargs="+", default=[0.0, 0.3, 0.8])
    ap.add_argument("--latent-size", type=int, default=16)
    ap.add_argument("--out", help="optional JSON with every trajectory")
    args = ap.parse_args()

    bundle = CheckpointBundle.load(args.checkpoint)
    rows, ordered = [], 0
    for seed in range(args.seeds):
        reports = [gap_probe(bundle.denoiser, bundle.vae, bundle.config.scheduler, args.steps, args.injection_step,
                             lvl, seed=seed, latent_hw=(args.latent_size, args.latent_size)) for lvl in args.levels]
        finals = [r.final_mse for r in reports]
        ok = all(a <= b for a, b in zip(finals, finals[1:]))
        ordered += ok
        print(f"seed {seed}: " + "  ".join(f"{lvl}: {f:.5f}" for lvl, f in zip(args.levels, finals))
              + ("" if ok else "  (not ordered)"))
        rows.append({"seed": seed, "reports": [r.to_dict() for r in reports]})
    print(f"ordered on {ordered}/{args.seeds} seeds")
    if args.out:
        with open(args.out, "w") as fh:
            json.dump(rows, fh, indent=2)


if __name__ == "__main__":
    main()
