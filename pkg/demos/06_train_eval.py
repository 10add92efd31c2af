"""End-to-end miniature: train briefly, evaluate, fuse iterations.

Uses a deliberately tiny model and a short schedule so the whole script
runs in about a minute; see configs/desk.cfg for the full desk profile.
"""

import numpy as np

from rrcdet.config import parse_config
from rrcdet.experiment import (
    load_detector,
    per_output_means,
    read_log_rows,
    train,
    validate,
)

config = parse_config("""
backbone.stages=1x12p,1x24p,1x32p
backbone.taps=1,2
model.common_channels=16
model.agg_channels=4
model.iterations=2
model.regressors=3
data.image_size=32
data.min_scale=0.25
data.max_scale=0.6
data.max_objects=2
data.train_scenes=300
data.val_scenes=60
train.steps=400
train.batch_size=8
train.checkpoint_every=400
optimizer.lr=0.005
optimizer.lr_decay_every=300
fusion.select=2,3
""")

result = train(config, "demo_run",
               progress=lambda s, r: print(f"  step {s}: loss {r.total:.2f}")
               if s % 100 == 0 else None)
print(f"trained {result.steps} steps in {result.seconds:.0f}s")

rows = read_log_rows(result.log_path)
print("mean training loss per output (last 100 steps):",
      [round(v, 3) for v in per_output_means(rows, tail=100)])

detector = load_detector(config, result.checkpoint_path)
report = validate(detector, selects=[(1,), (2, 3)], thresholds=(0.5, 0.7))
print("\nper-output validation loss:")
print(report.loss_table_text())
for sel, table in report.tables.items():
    print(f"\nfusion over outputs {list(sel)}:")
    print(table.to_text())
