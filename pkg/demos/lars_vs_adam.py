"""
LARS on top of Adam
===================

LARS keeps Adam's direction but rescales every weight matrix's step to a fixed
fraction of that matrix's norm. This script trains the same model with and
without the rescaling and compares the parameter-to-gradient norm ratios.
"""

import warnings

from stackalign.data import GeneratorConfig, generate, split_dataset
from stackalign.diagnostics import ShortWindowWarning, summarize
from stackalign.train import Trainer, run_config_from_flat

warnings.simplefilter("ignore", ShortWindowWarning)
train, val = split_dataset(generate(GeneratorConfig(num_episodes=80, seed=1)), [60, 20])
small = {"epochs": 20, "eval_every": 20, "model.projected_dim": 32, "model.stack_hidden": 32,
         "model.fc_hidden": 32}

rows = {}
for preset in ("rp+lars+sbn", "rp+adam+sbn"):
    trainer = Trainer(run_config_from_flat(dict(small, preset=preset)), train, val)
    trainer.run()
    rows[preset] = summarize(trainer.diag, window=10)
    print(preset, "val video accuracy", round(trainer.history[-1]["val"]["video_accuracy"], 3))

for group in rows["rp+lars+sbn"]["groups"]:
    lars, adam = (rows[p]["groups"][group]["mean"] for p in rows)
    print(f"{group:<20} LARS {lars:8.1f}   Adam {adam:8.1f}")
print("text/video ratio quotient", {p: round(r["text_over_video"], 2) for p, r in rows.items()})
