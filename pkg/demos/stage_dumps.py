"""Train the toy model briefly, then save each stage's contribution next to the final image.

    python demos/stage_dumps.py --steps 100 --out demo_out
"""

import argparse
from pathlib import Path

import numpy as np

from pixfold.config import sub_rng, toy_config
from pixfold.data import make_grid, save_png
from pixfold.tensor import default_dtype, no_grad
from pixfold.training import Trainer


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--steps", type=int, default=100)
    ap.add_argument("--count", type=int, default=4)
    ap.add_argument("--out", default="demo_out")
    args = ap.parse_args()

    out = Path(args.out)
    trainer = Trainer(toy_config(), out_dir=out)
    trainer.run(args.steps, progress_every=25)
    gen = trainer.sampling_generator()
    z = sub_rng(0, "demo.stage_dumps").standard_normal((args.count, gen.cfg.latent_dim)).astype(trainer.dtype)
    with default_dtype(trainer.dtype), no_grad():
        image, _, partial = gen.generate_with_stage_outputs(z)
    # one row per sample: cumulative sums after stage 0, 1, 2 (the last equals the image)
    rows = np.stack([p.data for p in partial], axis=1).reshape(-1, *image.shape[1:])
    save_png(out / "stage_dumps.png", make_grid(rows, ncol=len(partial)))
    print(f"wrote {out / 'stage_dumps.png'}")


if __name__ == "__main__":
    main()
