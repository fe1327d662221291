"""A whole run through the command line: prepare, train, evaluate, recommend."""

import sys
import tempfile
from pathlib import Path

from lsrec.cli import main

out = Path(tempfile.mkdtemp(prefix="lsrec-demo-")) / "run"
common = ["--out", str(out), "--set", "synthetic_movies=120", "--set", "max_epochs=4", "--set", "batch_rows=4"]


def step(*argv):
    print(f"\n$ lsrec {' '.join(argv)}")
    code = main(list(argv))
    if code:
        sys.exit(code)


step("prepare", "--synthetic-users", "300", *common)
step("train", "--tasks", "multi", *common)
print("\ntraining log:")
print((out / "logs" / "train.tsv").read_text())
step("eval", "--out", str(out))
step("recommend", "--out", str(out), "--user", "1", "-k", "5")
print(f"\nrun directory: {out}")
for p in sorted(out.rglob("*")):
    if p.is_file():
        print("  ", p.relative_to(out), p.stat().st_size, "bytes")
