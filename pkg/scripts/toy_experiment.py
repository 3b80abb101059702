"""Run the 64 -> 256 toy experiment and write a JSON summary plus per-run loss logs.

    python scripts/toy_experiment.py --out runs/toy --seeds 0 1 2 3 4
"""
import argparse
import json
import logging
import time
from pathlib import Path

import numpy as np

from omgsr import experiment


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--out", default="runs/toy")
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    ap.add_argument("--steps", type=int, help="fine-tune steps per run (default 3000)")
    ap.add_argument("--data-seed", type=int, default=0, help="seed for corpus, degradations and pre-training")
    ap.add_argument("--save-base", action="store_true", help="also write the pre-trained bundle")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    start = time.time()
    corpus, base, result = experiment.prepare(experiment.toy_config(args.data_seed))
    if args.save_base:
        base.save(out / "base")
    experiment.run_seeds(base, corpus, result, args.seeds, args.steps, out_dir=out / "logs")
    summary = result.summary() | {"total_seconds": time.time() - start}
    (out / "summary.json").write_text(json.dumps(summary, indent=2))

    mid = np.mean([s.psnr_mid for s in result.seeds])
    end = np.mean([s.psnr_endpoint for s in result.seeds])
    bic = result.seeds[0].psnr_bicubic
    print(f"t_star={result.t_star}  mid {mid:.2f} dB  endpoint {end:.2f} dB  bicubic {bic:.2f} dB  "
          f"pre-finetune {result.seeds[0].psnr_pre:.2f} dB  ({summary['total_seconds'] / 60:.1f} min)")


if __name__ == "__main__":
    main()
