"""Synthetic parallel video/text episodes, feature standardization and the JSONL dataset format."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .alignment import YMS_ACTIONS, Action, GoldAlignment, derive_oracle_actions
from .tensorcore import DTYPE, ParameterError, Rng, sample_gaussian


class UnsplittableError(ValueError):
    pass


class ConfigError(ValueError):
    pass


def round_sig(arr: np.ndarray, digits: int = 9) -> np.ndarray:
    """Round to ``digits`` significant digits exactly as the dataset writer prints them."""
    arr = np.asarray(arr, dtype=DTYPE)
    if arr.size == 0:
        return arr.copy()
    return np.char.mod(f"%.{digits}g", arr).astype(DTYPE)


@dataclass(eq=False)
class Episode:
    id: str
    video: np.ndarray       # (N, D_v)
    intervals: np.ndarray   # (N, 2) frame spans [start, end)
    text: np.ndarray        # (M, D_t)
    gold: GoldAlignment
    # offsets into the parent episode, for chunks made by split_training_episode
    video_offset: int = 0
    text_offset: int = 0

    @property
    def n_video(self):
        return self.video.shape[0]

    @property
    def n_text(self):
        return self.text.shape[0]

    @property
    def clip_lengths(self):
        return self.intervals[:, 1] - self.intervals[:, 0]

    def oracle(self, action_set=YMS_ACTIONS):
        return derive_oracle_actions(self.gold, action_set)


@dataclass
class GeneratorConfig:
    num_episodes: int = 280
    n_video_range: tuple = (12, 24)
    n_text_range: tuple = (4, 8)
    clips_per_text: tuple = (1, 3)
    unmatched_prob: float = 0.2
    latent_dim: int = 8
    noise_scale: float = 0.1
    # per-clip perturbation of the event latent; 0 gives identical clips per event
    clip_jitter: float = 0.1
    # >0: event latents are drawn from this many fixed prototypes (recurring scenes)
    n_event_types: int = 16
    video_dim: int = 512
    text_dim: int = 768
    frame_len_range: tuple = (5, 50)
    seed: int = 0

    def __post_init__(self):
        for name in ("n_video_range", "n_text_range", "clips_per_text", "frame_len_range"):
            lo, hi = getattr(self, name)
            setattr(self, name, (int(lo), int(hi)))
            if lo > hi or lo < 0:
                raise ConfigError(f"{name} must be a nonempty range, got {(lo, hi)}")
        if self.clips_per_text[0] < 1 or self.n_text_range[0] < 1:
            raise ConfigError("every text needs at least one clip and episodes at least one text")
        if not 0.0 <= self.unmatched_prob <= 1.0:
            raise ConfigError(f"unmatched_prob must lie in [0, 1], got {self.unmatched_prob}")
        if self.latent_dim < 1 or self.video_dim < 1 or self.text_dim < 1:
            raise ConfigError("dimensions must be positive")

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorConfig":
        known = {f.name for f in fields(cls)}
        for k in d:
            if k not in known:
                raise ConfigError(f"unknown generator config key {k!r}")
        return cls(**d)


def _embedding(rng: Rng, out_dim: int, latent_dim: int):
    A = sample_gaussian(rng, (out_dim, latent_dim)) / np.sqrt(latent_dim)
    b = sample_gaussian(rng, (out_dim,), std=0.5)
    return A, b


def _episode_layout(cfg: GeneratorConfig, rng: Rng):
    """Draw text count, clips per text and distractor positions until N lands in range."""
    lo, hi = cfg.n_video_range
    for _ in range(10_000):
        M = int(rng.gen.integers(cfg.n_text_range[0], cfg.n_text_range[1] + 1))
        counts = rng.gen.integers(cfg.clips_per_text[0], cfg.clips_per_text[1] + 1, size=M)
        # layout entries: text index, or -1 for a distractor clip
        layout = []
        for j, k in enumerate(counts):
            for _ in range(int(k)):
                if rng.gen.random() < cfg.unmatched_prob:
                    layout.append(-1)
                layout.append(j)
        if rng.gen.random() < cfg.unmatched_prob:
            layout.append(-1)
        if lo <= len(layout) <= hi:
            return M, layout
    raise ConfigError(f"could not fit episodes into n_video_range {cfg.n_video_range}")


def generate_episode(cfg: GeneratorConfig, index: int, emb=None) -> Episode:
    if emb is None:
        emb = _embeddings(cfg)
    (Av, bv), (At, bt), protos = emb
    rng = Rng(cfg.seed, 1000 + index)
    M, layout = _episode_layout(cfg, rng)
    z_text = _event_latents(cfg, rng, M, protos)
    text = z_text @ At.T + bt + cfg.noise_scale * sample_gaussian(rng, (M, cfg.text_dim))
    N = len(layout)
    z_vid = np.empty((N, cfg.latent_dim))
    per_text = [[] for _ in range(M)]
    for i, j in enumerate(layout):
        if j < 0:
            # distractors show unrelated footage: always a fresh latent
            z_vid[i] = sample_gaussian(rng, (cfg.latent_dim,))
        else:
            z_vid[i] = z_text[j] + cfg.clip_jitter * sample_gaussian(rng, (cfg.latent_dim,))
            per_text[j].append(i)
    video = z_vid @ Av.T + bv + cfg.noise_scale * sample_gaussian(rng, (N, cfg.video_dim))
    flo, fhi = cfg.frame_len_range
    lens = rng.gen.integers(flo, fhi + 1, size=N)
    ends = np.cumsum(lens)
    intervals = np.stack([ends - lens, ends], axis=1).astype(np.int64)
    gold = GoldAlignment.from_lists(per_text, N)
    return Episode(f"ep{cfg.seed}-{index:05d}", round_sig(video), intervals, round_sig(text), gold)


def _embeddings(cfg: GeneratorConfig):
    rng = Rng(cfg.seed, 1)
    video = _embedding(rng, cfg.video_dim, cfg.latent_dim)
    text = _embedding(rng, cfg.text_dim, cfg.latent_dim)
    protos = sample_gaussian(Rng(cfg.seed, 2), (cfg.n_event_types, cfg.latent_dim)) if cfg.n_event_types else None
    return video, text, protos


def _event_latents(cfg: GeneratorConfig, rng: Rng, n: int, protos):
    if protos is None:
        return sample_gaussian(rng, (n, cfg.latent_dim))
    return protos[rng.gen.integers(0, len(protos), size=n)].copy()


def generate(cfg: GeneratorConfig) -> list:
    emb = _embeddings(cfg)
    return [generate_episode(cfg, i, emb) for i in range(cfg.num_episodes)]


def split_dataset(episodes: Sequence[Episode], sizes: Sequence[int]):
    if sum(sizes) > len(episodes):
        raise ConfigError(f"split sizes {list(sizes)} exceed {len(episodes)} episodes")
    out, start = [], 0
    for n in sizes:
        out.append(list(episodes[start:start + n]))
        start += n
    return out


# ------------------------------------------------------------- splitting

def _sub_episode(ep: Episode, v0: int, v1: int, t0: int, t1: int, k: int) -> Episode:
    clips = [[c - v0 for c in ep.gold.text_clips[j] if v0 <= c < v1] for j in range(t0, t1)]
    return Episode(f"{ep.id}/{k}", ep.video[v0:v1], ep.intervals[v0:v1], ep.text[t0:t1],
                   GoldAlignment.from_lists(clips, v1 - v0),
                   ep.video_offset + v0, ep.text_offset + t0)


def split_training_episode(ep: Episode, max_actions: int = 100, action_set=YMS_ACTIONS) -> list:
    """Cut a long training episode into chunks of at most ``max_actions`` oracle actions.

    Cuts fall only right after a text is popped, so no slot is split.
    """
    actions = derive_oracle_actions(ep.gold, action_set)
    if len(actions) <= max_actions:
        return [ep]
    # cursor positions after each action
    cuts = []  # (action index after which to cut, video cursor, text cursor)
    v = s = 0
    for i, a in enumerate(actions):
        if a in (Action.POP_VIDEO, Action.MATCH, Action.MATCH_RETAIN_TEXT):
            v += 1
        if a in (Action.POP_TEXT, Action.MATCH, Action.MATCH_RETAIN_VIDEO):
            s += 1
        if a in (Action.POP_TEXT, Action.MATCH):
            cuts.append((i + 1, v, s))
    chunks = []
    start, v0, t0 = 0, 0, 0
    while len(actions) - start > max_actions:
        # every chunk keeps at least one clip
        ok = [c for c in cuts if start < c[0] <= start + max_actions and c[1] > v0]
        if not ok:
            raise UnsplittableError(f"episode {ep.id}: no slot boundary within {max_actions} "
                                    f"actions of action {start}")
        end, v1, t1 = ok[-1]
        chunks.append((v0, v1, t0, t1))
        start, v0, t0 = end, v1, t1
    chunks.append((v0, ep.n_video, t0, ep.n_text))
    return [_sub_episode(ep, *c, k) for k, c in enumerate(chunks)]


def merge_golds(parts: Sequence[Episode], n_video: int, n_text: int) -> GoldAlignment:
    per_text = [[] for _ in range(n_text)]
    for p in parts:
        for j, clips in enumerate(p.gold.text_clips):
            per_text[p.text_offset + j].extend(c + p.video_offset for c in clips)
    return GoldAlignment.from_lists(per_text, n_video)


# ---------------------------------------------------------- standardizer

@dataclass(eq=False)
class Standardizer:
    video_mean: np.ndarray
    video_std: np.ndarray
    text_mean: np.ndarray
    text_std: np.ndarray
    std_floor: float = 1e-8
    # "raw": statistics of the dataset features; "projected": of the projected stack inputs
    stage: str = "raw"

    def apply_arrays(self, video: np.ndarray, text: np.ndarray):
        return (video - self.video_mean) / self.video_std, (text - self.text_mean) / self.text_std

    def apply(self, ep: Episode) -> Episode:
        """Standardize an episode's raw features (a no-op for the "projected" stage)."""
        if self.stage != "raw":
            return ep
        video, text = self.apply_arrays(ep.video, ep.text)
        return replace(ep, video=video, text=text)

    def to_dict(self):
        return {k: (v.tolist() if isinstance(v, np.ndarray) else v) for k, v in self.__dict__.items()}

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: (np.asarray(v, dtype=DTYPE) if isinstance(v, list) else v) for k, v in d.items()})

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))


def _moments(rows: np.ndarray, floor: float):
    if rows.shape[0] < 2:
        raise ValueError(f"standardizer needs at least 2 elements, got {rows.shape[0]}")
    mean = rows.mean(axis=0)
    std = np.maximum(rows.std(axis=0), floor)
    return mean, std


def fit_standardizer(train: Sequence[Episode], std_floor: float = 1e-8, project=None) -> Standardizer:
    """Per-dimension statistics over all training elements.

    With ``project`` (a ``(video, text) -> (video, text)`` callable) the
    statistics describe the projected features instead of the raw ones.
    """
    pairs = [(e.video, e.text) if project is None else project(e.video, e.text) for e in train]
    vm, vs = _moments(np.concatenate([v for v, _ in pairs]), std_floor)
    tm, ts = _moments(np.concatenate([t for _, t in pairs]), std_floor)
    return Standardizer(vm, vs, tm, ts, std_floor, "raw" if project is None else "projected")


def apply_standardizer(std: Standardizer, episodes: Iterable[Episode]) -> list:
    return [std.apply(e) for e in episodes]


# ---------------------------------------------------------------- JSONL

def _fmt(arr) -> str:
    arr = np.asarray(arr)
    if arr.ndim == 1:
        return "[" + ",".join(np.char.mod("%.9g", arr)) + "]" if arr.size else "[]"
    return "[" + ",".join(_fmt(row) for row in arr) + "]"


def episode_to_json(ep: Episode) -> str:
    gold = ",".join(f"[{j},[{','.join(str(c) for c in clips)}]]" for j, clips in enumerate(ep.gold.text_clips))
    unmatched = ",".join(str(c) for c in ep.gold.unmatched)
    intervals = ",".join(f"[{int(a)},{int(b)}]" for a, b in ep.intervals)
    return (f'{{"id":{json.dumps(ep.id)},"video":{_fmt(ep.video)},"intervals":[{intervals}],'
            f'"text":{_fmt(ep.text)},"gold":[{gold}],"unmatched":[{unmatched}]}}')


def episode_from_json(line: str) -> Episode:
    d = json.loads(line)
    video = np.asarray(d["video"], dtype=DTYPE)
    text = np.asarray(d["text"], dtype=DTYPE)
    n_text = text.shape[0]
    per_text = [[] for _ in range(n_text)]
    for j, clips in d["gold"]:
        per_text[j] = clips
    gold = GoldAlignment.from_lists(per_text, video.shape[0])
    if set(gold.unmatched) != set(d.get("unmatched", gold.unmatched)):
        raise ValueError(f"episode {d['id']}: 'unmatched' disagrees with 'gold'")
    return Episode(d["id"], video, np.asarray(d["intervals"], dtype=np.int64).reshape(-1, 2), text, gold)


def write_jsonl(path, episodes: Iterable[Episode]):
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for ep in episodes:
            f.write(episode_to_json(ep))
            f.write("\n")


def read_jsonl(path) -> list:
    with open(path, encoding="utf-8") as f:
        return [episode_from_json(line) for line in f if line.strip()]
