"""End-to-end tour of the command line on a small synthetic regression set.

Run with ``python3 demos/train_and_predict.py [workdir]``. Generates data,
trains a desk-scale model for a few hundred steps, predicts on the held-out
split and exports an attention map. Takes a couple of minutes on one core.
"""

import sys
import tempfile
from pathlib import Path

from mssit import formats
from mssit.cli import main
from mssit.model import tiny_config


def run(*argv):
    print("$ mssit", " ".join(str(a) for a in argv))
    code = main([str(a) for a in argv])
    if code:
        raise SystemExit(code)


def demo(work: Path):
    run("data", "synth", "--kind", "regression", "--n", 40, "--seed", 1, "--out", work / "data")
    cfg = work / "train.cfg"
    formats.write_config(
        cfg,
        {
            "model": tiny_config(in_channels=4).to_dict(),
            "train": {"lr": 1e-3, "warmup_iters": 30, "batch_size": 1, "augment": True, "eval_every": 8},
        },
    )
    run("train", "--manifest", work / "data" / "manifest.csv", "--config", cfg, "--out", work / "run", "--iterations", 320)
    run("predict", "--checkpoint", work / "run" / "best.mswt", "--manifest", work / "data" / "manifest.csv",
        "--split", "test", "--out", work / "pred.csv")
    print((work / "pred.csv").read_text())
    surface = next((work / "data" / "data").glob("*.surf"))
    run("attention", "--checkpoint", work / "run" / "best.mswt", "--surface", surface, "--out", work / "attn.scal")
    run("inspect", work / "attn.scal")


if __name__ == "__main__":
    if len(sys.argv) > 1:
        demo(Path(sys.argv[1]))
    else:
        with tempfile.TemporaryDirectory() as tmp:
            demo(Path(tmp))
