"""Drive the command line end to end: synthesize, train, evaluate, segment, verify.

Everything is written under a temporary directory whose path is printed.
"""

import tempfile
from pathlib import Path

from dualcorenet.cli import main

work = Path(tempfile.mkdtemp(prefix="dualcorenet-demo-"))
config = work / "quick.ini"
config.write_text("[training]\nepochs_lpl = 3\nepochs_cgl_seg = 10\nepochs_cgl_cls = 3\nepochs_joint = 2\n"
                  "[data]\naugment = false\n")


def run(*argv):
    print("$ dualcorenet", " ".join(argv))
    code = main(list(argv))
    print(f"  exit {code}")
    return code


run("--seed", "7", "synth", "--out", str(work / "data"), "--count", "40")
run("--seed", "7", "--config", str(config), "train", "--data", str(work / "data"), "--out", str(work / "run"))
run("--seed", "7", "--config", str(config), "eval", "--ckpt", str(work / "run" / "final.ckpt"),
    "--data", str(work / "data"), "--split", "train")
image = sorted((work / "data" / "images").glob("*.pgm"))[0]
run("segment", "--ckpt", str(work / "run" / "final.ckpt"), "--image", str(image), "--mask-out", str(work / "mask.pgm"))
run("verify", "--suite", "metrics")
run("train", "--data", str(work / "missing"), "--out", str(work / "x"))  # usage error, exit 2
print("outputs in", work)
print((work / "run" / "report.txt").read_text().split("\nroc", 1)[0][-200:])
