"""Fit the decoder to a single sample and check it regenerates that sample.

    python scripts/overfit_single.py --data DIR [--index 0] [--steps 2000]
"""
import argparse
import logging
import time

import numpy as np
import torch

from wildcode import decoder
from wildcode.scenegen import Manifest


def main():
    ap = argparse.ArgumentParser(description="single-sample overfit check")
    ap.add_argument("--data", required=True)
    ap.add_argument("--index", type=int, default=0)
    ap.add_argument("--steps", type=int, default=2000)
    ap.add_argument("--variant", default="clip", choices=decoder.VARIANTS)
    ap.add_argument("--lr", type=float, default=5e-4)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    torch.set_num_threads(1)

    manifest = Manifest.load(args.data)
    cfg = decoder.config_for(manifest.config, width=128, heads=4, layers=2, lr=args.lr, batch_size=1,
                             variant=args.variant)
    sample = decoder.load_samples(manifest, cfg)[args.index]
    t0 = time.time()
    state = decoder.train_steps(decoder.init_state(cfg), [sample], args.steps, log_every=250)
    below = next((r["step"] for r in state.log if r["total"] < 1e-2), None)
    gen = decoder.generate(state.model, sample.features)
    same = gen.tokens == sample.stream.tokens
    err = max((float(np.abs(a - b).max()) for a, b in zip(gen.slots, sample.stream.slots)), default=0.0)
    print(f"sample {sample.record['sample_id']}: final loss {state.log[-1]['total']:.2e}, "
          f"first below 1e-2 at step {below}, tokens {'identical' if same else 'differ'}, "
          f"max payload error {err:.2e}, {time.time() - t0:.0f}s")
    return 0 if below is not None and same and err <= 1e-2 else 1


if __name__ == "__main__":
    raise SystemExit(main())
