"""Predict one volume with a trained checkpoint and write colour-coded slices.

    python3 scripts/make_overlays.py CHECKPOINT IMAGE TRUTH OUTDIR
"""
import sys
from pathlib import Path

from cartseg.cli import main

if __name__ == "__main__":
    ckpt, image, truth, out = sys.argv[1:5]
    steps = [
        ["predict", "--checkpoint", ckpt, "--input", image,
         "--out-prob", f"{out}/prob.vvol", "--out-mask", f"{out}/raw.vvol"],
        ["postprocess", "--input", f"{out}/raw.vvol", "--out", f"{out}/post.vvol"],
        ["eval", "--pred", f"{out}/raw.vvol", f"{out}/post.vvol", "--truth", truth, truth],
        ["overlay", "--image", image, "--truth", truth, "--pred", f"{out}/post.vvol",
         "--out", f"{out}/slices", "--only-labeled"],
    ]
    Path(out).mkdir(parents=True, exist_ok=True)
    for argv in steps:
        if main(argv):
            sys.exit(1)
