"""Drive the full pipeline from the bundled synthetic config.

Equivalent to ``ut-transfer all --config <synthetic.toml> --out <dir>``.

Run: python demos/05_pipeline.py [out_dir]
"""

import sys
import tempfile
from pathlib import Path

from ut_transfer import bundled_config, load_config, run_pipeline

cfg = load_config(bundled_config("synthetic"))
out = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(tempfile.mkdtemp()) / "synthetic"
result = run_pipeline(cfg, "all", out=out)
print(f"exit status {result.status}, {len(result.artifacts)} artifacts under {out}")
if result.status:
    sys.exit(result.message)
print((out / "report" / "summary.txt").read_text())

# Re-running with the same config reuses the checkpoints; a different seed is refused.
print("rerun:", run_pipeline(cfg, "all", out=out).status)
print("other seed:", run_pipeline(cfg.with_seed(1), "sweep", out=out).message)
