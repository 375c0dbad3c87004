"""Training and evaluation harness: run configuration, presets, the epoch loop and artifacts.

A run directory receives ``manifest.json``, ``metrics.csv``, ``ratios.csv``,
``feature_stats.csv``, ``last.npz`` and ``best.npz``.
"""
from __future__ import annotations

import copy
import hashlib
import json
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .alignment import action_accuracy, derive_oracle_actions, text_iou, video_accuracy
from .data import (Episode, Standardizer, apply_standardizer, fit_standardizer, read_jsonl,
                   split_training_episode)
from .diagnostics import (FEATURE_FIELDS, METRIC_FIELDS, RATIO_FIELDS, ComponentGrouping, CsvAppender,
                          DiagnosticsLog, record_feature_stats, record_ratio, truncate_csv)
from .model import AlignmentModel, ModelConfig, load_checkpoint, make_batch, model_config_dict, save_checkpoint
from .optim import LarsConfig, LrSchedule, Optimizer, TrainingDiverged, schedule_epoch_end
from .tensorcore import Rng

log = logging.getLogger(__name__)

OUT_DIR_ENV = "STACKALIGN_OUT"

# initial learning rates follow the ablation settings; "warmup" uses 5 epochs 5e-5 -> 5e-4 without smoothing
PRESETS = {
    "rp+lars+sbn": dict(use_rp=True, lars=True, normalization="sbn", lr=7e-3),
    "rp+adam+sbn": dict(use_rp=True, lars=False, normalization="sbn", lr=5e-4),
    "rp+adam+warmup+sbn": dict(use_rp=True, lars=False, normalization="sbn", lr=5e-4,
                               warmup=(5e-5, 5e-4, 5), label_smoothing=0.0),
    "rp+adam+ln2": dict(use_rp=True, lars=False, normalization="ln2", lr=1e-2),
    "rp+adam+ln4": dict(use_rp=True, lars=False, normalization="ln4", lr=7e-3),
    "rp+lars+ln2": dict(use_rp=True, lars=True, normalization="ln2", lr=5e-3),
    "rp+lars+ln4": dict(use_rp=True, lars=True, normalization="ln4", lr=8e-3),
    "rp+lars+none": dict(use_rp=True, lars=True, normalization="none", lr=7e-3),
    "full+adam+none": dict(use_rp=False, lars=False, normalization="none", lr=1e-3),
    "full+lars+sbn": dict(use_rp=False, lars=True, normalization="sbn", lr=5e-3),
    "full+lars+ln2": dict(use_rp=False, lars=True, normalization="ln2", lr=4e-3),
    "full+lars+ln4": dict(use_rp=False, lars=True, normalization="ln4", lr=5e-3),
}


class ConfigError(ValueError):
    pass


@dataclass
class OptimConfig:
    lr: float = 7e-3
    lars: bool = True
    lars_policy: str = "weights"
    weight_norm_floor: float = 1e-12
    clip: float = 2.0
    patience: int = 10
    factor: float = 0.5
    warmup_start: float | None = None
    warmup_end: float | None = None
    warmup_epochs: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8


@dataclass
class DataPaths:
    train: str | None = None
    val: str | None = None
    test: str | None = None
    standardizer: str | None = None
    max_actions: int = 100
    # standardize "raw" dataset features (default) or the "projected" stack inputs
    standardize: str = "raw"

    def __post_init__(self):
        if self.standardize not in ("raw", "projected"):
            raise ConfigError(f"data.standardize must be 'raw' or 'projected', got {self.standardize!r}")


@dataclass
class RunConfig:
    seed: int = 0
    epochs: int = 350
    batch_size: int = 32
    out_dir: str | None = None
    preset: str | None = None
    eval_every: int = 1
    feature_dims: int = 50
    probe_size: int = 32
    model: ModelConfig = field(default_factory=ModelConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    data: DataPaths = field(default_factory=DataPaths)

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")

    def to_dict(self):
        d = asdict(self)
        d["model"] = model_config_dict(self.model)
        return d


_SECTIONS = {"model": ModelConfig, "optim": OptimConfig, "data": DataPaths}


def apply_preset(flat: dict, name: str) -> dict:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    p = PRESETS[name]
    out = {"model.use_rp": p["use_rp"], "model.normalization": p["normalization"],
           "optim.lars": p["lars"], "optim.lr": p["lr"]}
    if "label_smoothing" in p:
        out["model.label_smoothing"] = p["label_smoothing"]
    if "warmup" in p:
        out["optim.warmup_start"], out["optim.warmup_end"], out["optim.warmup_epochs"] = p["warmup"]
    out.update(flat)
    return out


def flatten(d: dict, prefix: str = "") -> dict:
    out = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(flatten(v, key + "."))
        else:
            out[key] = v
    return out


def run_config_from_flat(flat: dict) -> RunConfig:
    """Build a RunConfig from dotted keys (``model.*``, ``optim.*``, ``data.*``); unknown keys raise."""
    flat = flatten(flat)
    if flat.get("preset"):
        flat = apply_preset({k: v for k, v in flat.items()}, flat["preset"])
    top = {f.name for f in fields(RunConfig)} - set(_SECTIONS)
    kw = {s: {} for s in _SECTIONS}
    root = {}
    for key, value in flat.items():
        if "." in key:
            section, name = key.split(".", 1)
            if section not in _SECTIONS or name not in {f.name for f in fields(_SECTIONS[section])}:
                raise ConfigError(f"unknown config key {key!r}")
            kw[section][name] = value
        elif key in top:
            root[key] = value
        else:
            raise ConfigError(f"unknown config key {key!r}")
    try:
        return RunConfig(model=ModelConfig(**kw["model"]), optim=OptimConfig(**kw["optim"]),
                         data=DataPaths(**kw["data"]), **root)
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from e


def load_run_config(path, overrides: dict | None = None) -> RunConfig:
    flat = json.loads(Path(path).read_text())
    flat = flatten(flat)
    flat.update(overrides or {})
    return run_config_from_flat(flat)


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


# ------------------------------------------------------------- evaluation

@dataclass(eq=False)
class Prepared:
    episode: Episode
    inputs: tuple
    plan: object


def prepare(model: AlignmentModel, episodes: Sequence[Episode], standardizer: Standardizer | None = None) -> list:
    """Project features and derive oracle plans; a "projected" standardizer is applied here."""
    post = standardizer if standardizer is not None and standardizer.stage == "projected" else None
    out = []
    for ep in episodes:
        acts = derive_oracle_actions(ep.gold, model.config.actions)
        inputs = model.prepare_inputs(ep.video, ep.text)
        if post is not None:
            inputs = post.apply_arrays(*inputs)
        out.append(Prepared(ep, inputs, model.plan(ep.n_video, ep.n_text, acts)))
    return out


def iter_batches(items: Sequence, batch_size: int):
    for i in range(0, len(items), batch_size):
        yield items[i:i + batch_size]


def teacher_forced_metrics(model: AlignmentModel, prepared: Sequence[Prepared], batch_size: int = 32):
    K = len(model.config.action_set)
    total_loss = hits = steps = 0.0
    for chunk in iter_batches(prepared, batch_size):
        batch = make_batch([p.inputs for p in chunk], [p.plan for p in chunk], K)
        loss, _, c = model.forward(batch)
        h, n = model.step_accuracy(c)
        total_loss += loss * n
        hits += h
        steps += n
    return total_loss / max(steps, 1), hits / max(steps, 1)


def evaluate(model: AlignmentModel, prepared: Sequence[Prepared], batch_size: int = 32,
             oracle: bool = False) -> dict:
    """Greedy-decode every episode; report mean video accuracy, text IoU, action accuracy and loss."""
    was_training = model.training
    model.eval()
    try:
        vacc, tiou, aacc = [], [], []
        for p in prepared:
            ep = p.episode
            if oracle:
                pred, acts = ep.gold, p.plan.actions
            else:
                pred, acts, _ = model.decode(*p.inputs)
            vacc.append(video_accuracy(pred, ep.gold, ep.clip_lengths))
            tiou.append(text_iou(pred, ep.gold, ep.intervals))
            aacc.append(action_accuracy(acts, p.plan.actions))
        loss, step_acc = teacher_forced_metrics(model, prepared, batch_size) if prepared else (math.nan, math.nan)
    finally:
        model.train(was_training)
    return dict(video_accuracy=float(np.mean(vacc)), text_iou=float(np.mean(tiou)),
                action_accuracy=float(step_acc), decoded_action_accuracy=float(np.mean(aacc)),
                loss=float(loss), episodes=len(prepared))


# ---------------------------------------------------------------- trainer

class Trainer:
    """Teacher-forced mini-batch training with per-epoch metrics, ratios and feature statistics."""

    def __init__(self, cfg: RunConfig, train: Sequence[Episode], val: Sequence[Episode] = (),
                 standardizer: Standardizer | None = None, out_dir=None, model: AlignmentModel | None = None):
        self.cfg = cfg
        self.out_dir = Path(out_dir) if out_dir is not None else None
        mc = cfg.model
        if model is None:
            mc.video_in_dim = train[0].video.shape[1]
            mc.text_in_dim = train[0].text.shape[1]
            mc.seed = cfg.seed if mc.seed == 0 else mc.seed
            model = AlignmentModel(mc)
        self.model = model
        if standardizer is None:
            project = model.prepare_inputs if cfg.data.standardize == "projected" else None
            standardizer = fit_standardizer(train, project=project)
        self.standardizer = standardizer
        train = apply_standardizer(standardizer, train)
        val = apply_standardizer(standardizer, val)
        chunks = [c for ep in train for c in split_training_episode(ep, cfg.data.max_actions, mc.actions)]
        self.train_set = prepare(model, chunks, standardizer)
        self.val_set = prepare(model, val, standardizer)
        self.probe = self.val_set[:cfg.probe_size] if self.val_set else self.train_set[:cfg.probe_size]
        oc = cfg.optim
        lars = LarsConfig(enabled=oc.lars, eta=oc.lr, weight_norm_floor=oc.weight_norm_floor, policy=oc.lars_policy)
        from .optim import AdamConfig
        self.optimizer = Optimizer(model.params(), oc.lr, lars if oc.lars else None,
                                   AdamConfig(oc.beta1, oc.beta2, oc.adam_eps), oc.clip)
        self.schedule = LrSchedule(oc.lr, oc.patience, oc.factor, oc.warmup_start, oc.warmup_end, oc.warmup_epochs)
        self.optimizer.lr = self.schedule.lr
        self.grouping = ComponentGrouping()
        self.diag = DiagnosticsLog()
        self.history = []
        self.epoch = 0
        self.best_val = -math.inf
        self.update_hook = None  # called as hook(optimizer) after every step

    # -- artifacts

    def _open_logs(self, resume: bool):
        if self.out_dir is None:
            self.logs = None
            return
        self.out_dir.mkdir(parents=True, exist_ok=True)
        if resume:
            for name in ("metrics.csv", "ratios.csv", "feature_stats.csv"):
                truncate_csv(self.out_dir / name, self.epoch)
        self.logs = dict(metrics=CsvAppender(self.out_dir / "metrics.csv", METRIC_FIELDS, resume),
                         ratios=CsvAppender(self.out_dir / "ratios.csv", RATIO_FIELDS, resume),
                         features=CsvAppender(self.out_dir / "feature_stats.csv", FEATURE_FIELDS, resume))

    def manifest(self, artifacts: dict | None = None) -> dict:
        return dict(package_version=__version__, config=self.cfg.to_dict(),
                    seeds=dict(run=self.cfg.seed, model=self.model.config.seed,
                               projections={m: [rp.seed, rp.stream] for m, rp in self.model.rp.items()}),
                    train_chunks=len(self.train_set), val_episodes=len(self.val_set),
                    artifacts=artifacts or {})

    def write_manifest(self, artifacts=None):
        if self.out_dir is not None:
            (self.out_dir / "manifest.json").write_text(json.dumps(self.manifest(artifacts), indent=2, sort_keys=True))

    def trainer_state(self) -> dict:
        return dict(epoch=self.epoch, schedule=self.schedule.state_dict(), adam_step=self.optimizer.adam.step,
                    best_val=self.best_val, dropout_rng=self.model.dropout_rng.gen.bit_generator.state,
                    standardizer=self.standardizer.to_dict(), run_config=self.cfg.to_dict())

    def save(self, name: str):
        if self.out_dir is not None:
            save_checkpoint(self.out_dir / name, self.model, self.trainer_state())

    def restore(self, path):
        model, extra = load_checkpoint(path, expect=self.model.config)
        self.model.load_state_arrays(model.state_arrays())
        self.epoch = extra["epoch"]
        self.schedule = LrSchedule.from_state(extra["schedule"])
        self.optimizer.adam.step = extra["adam_step"]
        self.optimizer.lr = self.schedule.lr
        self.best_val = extra["best_val"]
        self.model.dropout_rng.gen.bit_generator.state = extra["dropout_rng"]

    # -- loop

    def train_epoch(self, epoch: int):
        model, opt = self.model, self.optimizer
        model.train()
        K = len(model.config.action_set)
        order = Rng(self.cfg.seed, 20_000 + epoch).gen.permutation(len(self.train_set))
        items = [self.train_set[i] for i in order]
        batches = list(iter_batches(items, self.cfg.batch_size))
        total = hits = steps = 0.0
        for bi, chunk in enumerate(batches):
            batch = make_batch([p.inputs for p in chunk], [p.plan for p in chunk], K)
            opt.zero_grad()
            loss, _, cache = model.forward(batch)
            if not math.isfinite(loss):
                raise TrainingDiverged(f"loss {loss} at epoch {epoch}, batch {bi}")
            model.backward(cache)
            opt.clip_grads()
            if bi == len(batches) - 1:
                record_ratio(self.diag, epoch, model.params(), self.grouping)
            opt.step(record=self.update_hook is not None)
            if self.update_hook is not None:
                self.update_hook(opt)
            h, n = model.step_accuracy(cache)
            total += loss * n
            hits += h
            steps += n
        return total / steps, hits / steps

    def feature_stats(self, epoch: int):
        model = self.model
        model.eval()
        K = len(model.config.action_set)
        batch = make_batch([p.inputs for p in self.probe], [p.plan for p in self.probe], K)
        v, s = model.encode_sequences(batch.video, batch.video_mask, batch.text, batch.text_mask)
        record_feature_stats(self.diag, epoch, {"video": (v, batch.video_mask), "text": (s, batch.text_mask)},
                             self.cfg.feature_dims)
        model.train()

    def run(self, epochs: int | None = None, resume_from=None, progress: bool = False):
        epochs = self.cfg.epochs if epochs is None else epochs
        if resume_from is not None:
            self.restore(resume_from)
        self._open_logs(resume=resume_from is not None)
        self.write_manifest()
        n_ratio = len(self.diag.ratios)
        n_feat = len(self.diag.feature_stats)
        while self.epoch < epochs:
            epoch = self.epoch + 1
            t0 = time.perf_counter()
            lr = self.optimizer.lr
            train_loss, train_acc = self.train_epoch(epoch)
            rows = [(epoch, "train", None, None, train_acc, train_loss, lr)]
            val = None
            if self.val_set and (epoch % self.cfg.eval_every == 0 or epoch == epochs):
                val = evaluate(self.model, self.val_set, self.cfg.batch_size)
                rows.append((epoch, "val", val["video_accuracy"], val["text_iou"], val["action_accuracy"],
                             val["loss"], lr))
                self.feature_stats(epoch)
            self.history.append(dict(epoch=epoch, train_loss=train_loss, train_acc=train_acc, lr=lr, val=val))
            self.optimizer.lr = schedule_epoch_end(self.schedule, train_loss)
            self.epoch = epoch
            if self.logs is not None:
                self.logs["metrics"].write(rows)
                self.logs["ratios"].write(self.diag.ratios[n_ratio:])
                self.logs["features"].write(self.diag.feature_stats[n_feat:])
            n_ratio, n_feat = len(self.diag.ratios), len(self.diag.feature_stats)
            if val is not None and val["video_accuracy"] > self.best_val:
                self.best_val = val["video_accuracy"]
                self.save("best.npz")
            self.save("last.npz")
            if progress:
                msg = f"epoch {epoch} loss {train_loss:.4f} acc {train_acc:.3f} lr {lr:.2e}"
                if val is not None:
                    msg += f" | val vacc {val['video_accuracy']:.3f} iou {val['text_iou']:.3f} aacc {val['action_accuracy']:.3f}"
                log.info("%s (%.1fs)", msg, time.perf_counter() - t0)
        if self.out_dir is not None:
            arts = {n: file_sha256(self.out_dir / n) for n in ("metrics.csv", "ratios.csv", "feature_stats.csv")}
            self.write_manifest(arts)
        return self.history


def load_datasets(cfg: RunConfig):
    paths = cfg.data
    for key in ("train", "val"):
        p = getattr(paths, key)
        if p is None or not Path(p).exists():
            raise FileNotFoundError(f"data.{key} does not exist: {p}")
    train = read_jsonl(paths.train)
    val = read_jsonl(paths.val)
    std = Standardizer.load(paths.standardizer) if paths.standardizer else None
    return train, val, std
