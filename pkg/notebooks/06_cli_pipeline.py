# %% [markdown]
# # The command-line pipeline
#
# Each subcommand reads a sectioned config file and exchanges checkpoints and
# CSVs through one output directory. The same stages run in-process here via
# `radarkit.cli.main`; from a shell the equivalent is
# `radarkit train-classifier --config run.ini --out runs/demo`.

# %%
import tempfile
from pathlib import Path

from radarkit import cli

CONFIG = """\
[run]
seed = 4

[data]
per_class = 40
test_per_class = 3
image_size = 8
sigma = 0.01

[classifier]
epochs = 10
lr = 3e-3

[detector]
epochs = 3
attack_iters = 5

[radar]
epochs = 2
attack_iters = 5
val_limit = 20

[attack]
iters = 20
kind = opgd
detector = radar

[eval]
n_list = 5, 10
"""

tmp = Path(tempfile.mkdtemp())
(tmp / "run.ini").write_text(CONFIG)
for cmd in ("train-classifier", "train-detector", "finetune-radar", "attack", "evaluate"):
    code = cli.main([cmd, "--config", str(tmp / "run.ini"), "--out", str(tmp / "out")])
    print(f"{cmd:17s} exit {code}")
print(sorted(p.name for p in (tmp / "out").iterdir()))
print((tmp / "out" / "report.txt").read_text())

# %% [markdown]
# Configuration mistakes are reported with the file, line and key, and exit with
# code 1; a missing prerequisite checkpoint exits with code 2.

# %%
(tmp / "bad.ini").write_text(CONFIG.replace("[attack]\n", "[attack]\nstep = 0.1\n"))
print("exit", cli.main(["attack", "--config", str(tmp / "bad.ini")]))
print("exit", cli.main(["evaluate", "--config", str(tmp / "run.ini"), "--out", str(tmp / "empty")]))
