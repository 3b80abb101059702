"""Write a procedural LQ/HQ PNG dataset in the layout the CLI expects (``<out>/hq``, ``<out>/lq``).

    python scripts/make_corpus.py --out data/val --n 50 --size 256 --seed 1
"""
import argparse
import dataclasses
import json
from pathlib import Path

from omgsr.config import OMGConfig
from omgsr.data import make_corpus, pair_seed, save_png
from omgsr.degrade import degrade_with_params


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--out", required=True)
    ap.add_argument("--n", type=int, default=50)
    ap.add_argument("--size", type=int, default=256)
    ap.add_argument("--scale", type=int, default=4)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--config", help="config file whose [degrade] section is used")
    args = ap.parse_args()

    cfg = OMGConfig.load(args.config) if args.config else OMGConfig()
    deg = dataclasses.replace(cfg.degrade, downscale_factor=args.scale)
    out = Path(args.out)
    params = {}
    for i, hq in enumerate(make_corpus(args.n, args.size, args.seed)):
        lq, p = degrade_with_params(hq, deg, pair_seed(args.seed, i))
        name = f"{i:04d}.png"
        save_png(hq, out / "hq" / name)
        save_png(lq, out / "lq" / name)
        params[name] = p.to_dict()
    (out / "degradations.json").write_text(json.dumps(params, indent=2, sort_keys=True))
    print(f"wrote {args.n} pairs to {out}")


if __name__ == "__main__":
    main()
