"""Bringing your own features.

Any backbone's embeddings can be written in the DRIFTLAB-FEATURES text
format and run through the same pipeline via a ``"kind": "file"`` stream.
"""

import json
import tempfile
from pathlib import Path

from driftlab.cli import main
from driftlab.data import apply_label_fraction, generate_blob_stream, load_feature_dataset, save_feature_dataset

work = Path(tempfile.mkdtemp())
stream = apply_label_fraction(generate_blob_stream(3, 3, 10, 80, 4.0, seed=1), 0.25, seed=0)
save_feature_dataset(stream, work / "features.txt")
print((work / "features.txt").read_text().splitlines()[:3])
assert load_feature_dataset(work / "features.txt") == stream

config = {
    "stream": {"kind": "file", "path": str(work / "features.txt")},
    "methods": ["naive", "sdc", "ldc", "oracle"],
    "seeds": [0],
    "extractor": {"hidden": [32], "feature_dim": 10},
    "train": {"epoch_scale": 0.1},
    "projector": {"epochs": 100, "lr": 0.005},
}
(work / "config.json").write_text(json.dumps(config, indent=2))
main(["run", str(work / "config.json"), "--out", str(work / "out")])
main(["analyze", str(work / "out" / "report.jsonl")])
print(sorted(p.name for p in (work / "out").iterdir()))
