"""
Running the ablation through the harness
========================================

The command line drives the same functions used here.  The equivalent shell
call is ``nlcen ablate --config tiny.ini --out runs/tiny``.  The models here
are far too small and briefly trained to score well; the point is the
protocol and the files it leaves behind.
"""

import tempfile
from pathlib import Path

from nlcen import harness

root = Path(tempfile.mkdtemp())
ini = root / "tiny.ini"
ini.write_text("""
[data]
count = 40
side = 32
[model]
stage_channels = 4,8,8,16
pyramid_width = 8
codewords = 4
[train]
epochs = 4
finetune_epochs = 2
[attack]
intensities = 2,8
""")
cfg = harness.load_config(ini, seed=0, out=str(root / "run"))
result = harness.cmd_ablate(cfg)

###############################################################################
# Frozen stages leave every base weight untouched.

for stage, (before, after) in result.base_checksums.items():
    print(f"{stage:>6}: base checksum unchanged = {before == after}")

print((root / "run" / "ablation.csv").read_text())
print("files:", sorted(p.name for p in (root / "run").iterdir()))
