"""Action vocabulary, the two-cursor stack machine, oracle derivation and alignment metrics.

The video and text stacks are represented by cursors: the element at the
cursor is the top of the stack. Matched elements are grouped into slots; only
the most recent slot can still grow.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .tensorcore import ShapeError


class IllegalActionError(ValueError):
    pass


class ExpressivenessError(ValueError):
    pass


class Action(str, enum.Enum):
    POP_TEXT = "pop_text"
    POP_VIDEO = "pop_video"
    MATCH = "match"
    MATCH_RETAIN_TEXT = "match_retain_text"
    MATCH_RETAIN_VIDEO = "match_retain_video"

    def __str__(self):
        return self.value


ALL_ACTIONS = (Action.POP_TEXT, Action.POP_VIDEO, Action.MATCH,
               Action.MATCH_RETAIN_TEXT, Action.MATCH_RETAIN_VIDEO)
# one text to many clips, with unmatched clips
YMS_ACTIONS = (Action.POP_VIDEO, Action.POP_TEXT, Action.MATCH_RETAIN_TEXT)
ONE_TO_ONE_ACTIONS = (Action.POP_TEXT, Action.POP_VIDEO, Action.MATCH)

_MATCHING = (Action.MATCH, Action.MATCH_RETAIN_TEXT, Action.MATCH_RETAIN_VIDEO)


@dataclass(frozen=True)
class AlignmentState:
    video_cursor: int = 0
    text_cursor: int = 0
    action_history: tuple = ()
    # each slot: (frozenset of video idx, frozenset of text idx)
    matched_slots: tuple = ()
    done: bool = False

    @classmethod
    def initial(cls, n_video: int, n_text: int) -> "AlignmentState":
        return cls(done=n_video == 0 or n_text == 0)


@dataclass(frozen=True)
class GoldAlignment:
    """Per-text tuples of matched clip indices, plus the sizes of both sequences."""
    text_clips: tuple
    n_video: int

    @property
    def n_text(self):
        return len(self.text_clips)

    @classmethod
    def from_lists(cls, text_clips: Sequence[Iterable[int]], n_video: int) -> "GoldAlignment":
        return cls(tuple(tuple(sorted(int(i) for i in c)) for c in text_clips), int(n_video))

    @property
    def unmatched(self):
        used = {v for clips in self.text_clips for v in clips}
        return tuple(v for v in range(self.n_video) if v not in used)

    def clip_assignment(self):
        """Per clip, the frozenset of texts it is matched to (empty if unmatched)."""
        out = [set() for _ in range(self.n_video)]
        for j, clips in enumerate(self.text_clips):
            for v in clips:
                out[v].add(j)
        return [frozenset(s) for s in out]

    def validate(self):
        last = -1
        for j, clips in enumerate(self.text_clips):
            for v in clips:
                if not 0 <= v < self.n_video:
                    raise ValueError(f"text {j}: clip index {v} out of range [0, {self.n_video})")
            if clips:
                if clips[0] < last:
                    raise ValueError(f"text {j} clips {clips} cross the previous text's clips")
                last = clips[-1]
        return True


# predictions have the same structure
AlignmentPrediction = GoldAlignment


def valid_actions(state: AlignmentState, action_set: Sequence[Action] = ALL_ACTIONS) -> set:
    if state.done:
        return set()
    # both stacks are nonempty whenever the episode is still running
    return set(action_set)


def _add_match(slots: tuple, v: int, s: int) -> tuple:
    if slots:
        vids, txts = slots[-1]
        if v in vids or s in txts:
            return slots[:-1] + ((vids | {v}, txts | {s}),)
    return slots + ((frozenset([v]), frozenset([s])),)


def step(state: AlignmentState, action: Action, n_video: int, n_text: int) -> AlignmentState:
    action = Action(action)
    if state.done:
        raise IllegalActionError(f"{action.value} on a finished episode")
    v, s = state.video_cursor, state.text_cursor
    if v >= n_video or s >= n_text:
        raise IllegalActionError(f"{action.value} with an empty stack (cursors {v}, {s})")
    slots = state.matched_slots
    if action in _MATCHING:
        slots = _add_match(slots, v, s)
    if action in (Action.POP_VIDEO, Action.MATCH, Action.MATCH_RETAIN_TEXT):
        v += 1
    if action in (Action.POP_TEXT, Action.MATCH, Action.MATCH_RETAIN_VIDEO):
        s += 1
    return AlignmentState(v, s, state.action_history + (action,), slots,
                          v >= n_video or s >= n_text)


def execute(actions: Sequence[Action], n_video: int, n_text: int,
            action_set: Sequence[Action] | None = None) -> AlignmentState:
    state = AlignmentState.initial(n_video, n_text)
    for a in actions:
        if action_set is not None and Action(a) not in action_set:
            raise IllegalActionError(f"{Action(a).value} not in the configured action set")
        state = step(state, a, n_video, n_text)
    return state


def state_to_alignment(state: AlignmentState, n_video: int, n_text: int) -> AlignmentPrediction:
    per_text = [set() for _ in range(n_text)]
    for vids, txts in state.matched_slots:
        for j in txts:
            per_text[j] |= vids
    return GoldAlignment.from_lists(per_text, n_video)


def derive_oracle_actions(gold: GoldAlignment, action_set: Sequence[Action] = YMS_ACTIONS) -> list:
    """Action sequence whose execution reproduces ``gold``.

    Clips are visited in temporal order. A text whose clips are all consumed is
    popped; an unmatched clip is popped; a clip of the current text is matched.
    """
    action_set = tuple(Action(a) for a in action_set)
    N, M = gold.n_video, gold.n_text
    assign = gold.clip_assignment()
    text_clips = gold.text_clips
    has = set(action_set)
    actions = []
    state = AlignmentState.initial(N, M)
    while not state.done:
        v, s = state.video_cursor, state.text_cursor
        remaining = [c for c in text_clips[s] if c >= v]
        texts_of_v = assign[v]
        if not remaining:
            a = Action.POP_TEXT
        elif not texts_of_v:
            a = Action.POP_VIDEO
        elif s in texts_of_v:
            later_texts = any(j > s for j in texts_of_v)
            if later_texts:
                a = Action.MATCH_RETAIN_VIDEO
            elif len(remaining) == 1 and Action.MATCH in has:
                a = Action.MATCH
            else:
                a = Action.MATCH_RETAIN_TEXT
        else:
            raise ExpressivenessError(f"clip {v} belongs to texts {sorted(texts_of_v)} "
                                      f"while text {s} still has clips {remaining}; gold is not monotone")
        if a not in has:
            raise ExpressivenessError(f"gold needs {a.value}, which is not in {[x.value for x in action_set]}")
        actions.append(a)
        state = step(state, a, N, M)
    if state_to_alignment(state, N, M) != gold:
        raise ExpressivenessError("gold has matches past the point where a sequence is exhausted")
    return actions


def video_accuracy(pred: AlignmentPrediction, gold: GoldAlignment, clip_lengths) -> float:
    """Length-weighted fraction of clips whose text assignment (or unmatched status) is correct."""
    lengths = np.asarray(clip_lengths, dtype=float)
    if pred.n_video != gold.n_video or lengths.shape != (gold.n_video,):
        raise ShapeError(f"video accuracy: pred N={pred.n_video}, gold N={gold.n_video}, "
                         f"lengths shape {lengths.shape}")
    total = lengths.sum()
    if total <= 0:
        return 1.0
    pa, ga = pred.clip_assignment(), gold.clip_assignment()
    correct = sum(lengths[i] for i in range(gold.n_video) if pa[i] == ga[i])
    return float(correct / total)


def text_iou(pred: AlignmentPrediction, gold: GoldAlignment, clip_intervals) -> float:
    """Mean over text snippets of the temporal IoU of predicted vs gold clip spans."""
    iv = np.asarray(clip_intervals, dtype=float)
    if iv.shape != (gold.n_video, 2) or pred.n_text != gold.n_text or pred.n_video != gold.n_video:
        raise ShapeError(f"text IoU: intervals shape {iv.shape} for N={gold.n_video}")
    if np.any(iv[:, 1] < iv[:, 0]) or np.any(iv[1:, 0] < iv[:-1, 1]):
        raise ShapeError("clip intervals must be ordered and non-overlapping")
    if gold.n_text == 0:
        return 1.0
    lengths = iv[:, 1] - iv[:, 0]
    scores = []
    for p, g in zip(pred.text_clips, gold.text_clips):
        p, g = set(p), set(g)
        if not p and not g:
            scores.append(1.0)
            continue
        inter = sum(lengths[i] for i in p & g)
        union = sum(lengths[i] for i in p | g)
        scores.append(inter / union if union > 0 else 0.0)
    return float(np.mean(scores))


def action_accuracy(pred: Sequence[Action], gold: Sequence[Action]) -> float:
    if not gold:
        return 1.0
    hits = sum(1 for a, b in zip(pred, gold) if Action(a) == Action(b))
    return hits / len(gold)
