"""
Training the aligner on synthetic episodes
==========================================

Each synthetic episode draws a handful of events; every sentence describes
one event and one to three clips show it, with unrelated clips mixed in.
The model reads both sequences through backward LSTMs and predicts the next
action from the stack contents.
"""

import numpy as np

from stackalign.alignment import text_iou, video_accuracy
from stackalign.data import GeneratorConfig, apply_standardizer, generate, split_dataset
from stackalign.diagnostics import summarize
from stackalign.train import Trainer, evaluate, prepare, run_config_from_flat

train, val, test = split_dataset(generate(GeneratorConfig(num_episodes=200, seed=0)), [160, 20, 20])
print(f"{len(train)} training episodes, first one has {train[0].n_video} clips and {train[0].n_text} sentences")

# Small model, random projection on the inputs, LARS on top of Adam and
# sequence-wise batch norm on the stack outputs.
cfg = run_config_from_flat({"preset": "rp+lars+sbn", "epochs": 50, "eval_every": 10,
                            "model.projected_dim": 32, "model.stack_hidden": 32, "model.fc_hidden": 32})
trainer = Trainer(cfg, train, val)
for h in trainer.run():
    if h["val"]:
        print(f"epoch {h['epoch']:>3}  train loss {h['train_loss']:.3f}  val video acc {h['val']['video_accuracy']:.3f}")

###############################################################################
# Greedy decoding on unseen episodes
# ----------------------------------

held_out = prepare(trainer.model, apply_standardizer(trainer.standardizer, test), trainer.standardizer)
print({k: round(v, 3) for k, v in evaluate(trainer.model, held_out).items()})

trainer.model.eval()
p = held_out[0]
pred, actions, _ = trainer.model.decode(*p.inputs)
print("predicted", pred.text_clips)
print("gold     ", p.episode.gold.text_clips)
print("video accuracy", video_accuracy(pred, p.episode.gold, p.episode.clip_lengths),
      "text IoU", round(text_iou(pred, p.episode.gold, p.episode.intervals), 3))

###############################################################################
# How far each part of the network sits from a minimum: parameter norm over
# gradient norm, averaged over the last epochs.

for group, s in summarize(trainer.diag, window=10)["groups"].items():
    print(f"{group:<20} {s['mean']:.1f}")
