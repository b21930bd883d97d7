"""Generate a small dataset, train two cells through the four phases, fuse them.

A shortened schedule keeps the whole script at a couple of minutes on one core.
Learning rates are scaled up by 100 because the model is small and trained
with plain momentum SGD for only a few epochs.
"""

import numpy as np

from anticipation.datagen import generate
from anticipation.evalkit import FusionSpec, ensemble_report, format_report
from anticipation.model import AnticipationModel, ModelConfig
from anticipation.trainer import OptimConfig, evaluate, predict_split, run_pipeline, scaled_pipeline

data = generate(42, sizes={"train": 600, "val": 150, "test": 150})
phases = scaled_pipeline({"warmup": 8, "ordinary": 6, "finetune": 4, "finetune_joint_val": 4}, lr_scale=100)
for p in phases:
    print(f"{p.name:<19} epochs {p.epochs}  lr {p.lr_start:g} -> {p.lr_end:g}  frames {p.n_frames}")

score_sets = []
for cell in ("horst", "mpnnel_tb"):
    model = AnticipationModel(ModelConfig(cell=cell, dim=32))
    print(f"\n{cell}: untrained val MT5R", {k: round(v, 3) for k, v in evaluate(model, data, "val").items()})
    run_pipeline(model, data, phases, OptimConfig(), log=print)
    score_sets.append(predict_split(model, data, "test", cell))

labels = data.labels("test")
rows = ensemble_report(score_sets, {
    "horst": (["horst"], None),
    "mpnnel_tb": (["mpnnel_tb"], None),
    "both": (["horst", "mpnnel_tb"], None),
    "both, rgb x1.2": (["horst", "mpnnel_tb"], FusionSpec.modality_weighted(score_sets)),
}, labels)
print()
print(format_report(rows))
# only warmup sees the frames past the observation window
print("\nwithheld-frame reads (all from warmup):", data.reads.withheld_reads)
print("action counts in train:", np.asarray(data.manifest.counts["train"]["action"]))
