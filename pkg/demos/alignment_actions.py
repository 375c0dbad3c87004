"""
Aligning two sequences with stack actions
=========================================

An alignment between video clips and sentences is built by a small state
machine. Each step either drops the clip on top of the video stack, drops the
sentence on top of the text stack, or matches them.
"""

from stackalign.alignment import (YMS_ACTIONS, GoldAlignment, derive_oracle_actions, execute,
                                  state_to_alignment, text_iou, video_accuracy)

# Four clips, two sentences. Sentence 0 covers clips 0 and 1, clip 2 shows
# something unrelated and sentence 1 covers clip 3.
gold = GoldAlignment.from_lists([[0, 1], [3]], n_video=4)

# The oracle turns the gold alignment into the action sequence that
# reproduces it; this is what the network is trained to predict.
actions = derive_oracle_actions(gold, YMS_ACTIONS)
print([a.value for a in actions])

# Replaying the actions gives the matched slots and the alignment back.
state = execute(actions, gold.n_video, gold.n_text)
print(state.matched_slots)
print(state_to_alignment(state, 4, 2) == gold)

###############################################################################
# Scoring a prediction
# --------------------
# Video accuracy weighs every clip by its length; text IoU compares the spans
# of the clips each sentence received.

intervals = [[0, 10], [10, 30], [30, 60], [60, 100]]
lengths = [b - a for a, b in intervals]
pred = GoldAlignment.from_lists([[1, 2], [3]], n_video=4)
print("video accuracy", video_accuracy(pred, gold, lengths))
print("text IoU", text_iou(pred, gold, intervals))
