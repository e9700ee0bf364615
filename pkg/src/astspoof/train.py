"""Fine-tuning loop: AdamW, periodic validation, selection by validation EER."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Iterator, NamedTuple

import numpy as np

from . import model as M
from .augment import augment, clip_rng, default_policies, make_rng, policy_for_label
from .evaluation import EERUndefinedError, compute_eer
from .features import FeatureConfig, RunningStats, normalize
from .pipeline import featurize, group_by_length, load_clip, score_patches, to_patches

log = logging.getLogger(__name__)


class NumericError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    max_steps: int = 2500
    train_batch: int = 16
    eval_batch: int = 32
    weight_decay: float = 0.02
    validate_every: int = 1000
    learning_rate: float = 1e-4
    early_stop_patience: int = 3
    seed: int = 0
    augment: bool = True
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        for f in ("max_steps", "train_batch", "eval_batch", "validate_every",
                  "early_stop_patience", "learning_rate"):
            if not getattr(self, f) > 0:
                raise ValueError(f"{f} must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")
        if self.validate_every > self.max_steps:
            raise ValueError("validate_every exceeds max_steps")

    @classmethod
    def from_mapping(cls, values: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**values)


def validation_steps(max_steps: int, validate_every: int) -> list:
    """Steps at which validation runs: every ``validate_every`` plus the last."""
    steps = list(range(validate_every, max_steps + 1, validate_every))
    if not steps or steps[-1] != max_steps:
        steps.append(max_steps)
    return steps


class Batch(NamedTuple):
    epoch: int
    items: list


def make_batches(records, batch: int, rng: np.random.Generator) -> Iterator[Batch]:
    """Endless stream of shuffled batches; the last batch of an epoch may be short."""
    records = list(records)
    if not records:
        raise ValueError("cannot batch an empty record list")
    epoch = 0
    while True:
        order = rng.permutation(len(records))
        for start in range(0, len(records), batch):
            yield Batch(epoch, [records[i] for i in order[start:start + batch]])
        epoch += 1


class AdamState:
    def __init__(self, params):
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}


def adamw_update(params, grads, state: AdamState, cfg: TrainConfig) -> None:
    """In-place decoupled-weight-decay Adam step."""
    state.t += 1
    lr, b1, b2 = cfg.learning_rate, cfg.beta1, cfg.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, w in params.items():
        g = grads[name]
        if cfg.weight_decay and M.is_decayed(name, w.shape):
            w *= 1.0 - lr * cfg.weight_decay
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        w -= lr * (m / c1) / (np.sqrt(v / c2) + cfg.eps)


def batch_loss_and_grads(examples, params, mcfg):
    """Mean loss and mean gradients over ``(patches, label)`` pairs."""
    grads = {k: np.zeros_like(v) for k, v in params.items()}
    total = 0.0
    for idx in group_by_length([p for p, _ in examples]):
        patches = np.stack([examples[i][0] for i in idx])
        labels = [examples[i][1] for i in idx]
        loss, g, _ = M.backward_patches(patches, labels, params, mcfg)
        total += loss
        for k in grads:
            grads[k] += g[k]
    n = len(examples)
    for k in grads:
        grads[k] /= n
    return total / n, grads


def train_step(params, examples, state: AdamState, cfg: TrainConfig, mcfg, ids=()):
    loss, grads = batch_loss_and_grads(examples, params, mcfg)
    if not np.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads.values()):
        raise NumericError(f"non-finite loss {loss} at step {state.t + 1}, batch {list(ids)}")
    adamw_update(params, grads, state, cfg)
    return loss


@dataclass
class FitResult:
    params: dict
    model_config: M.ModelConfig
    stats: M.NormStats
    best_step: int
    best_eer: float
    threshold: float
    log: list
    seen_technologies: list

    def meta(self) -> M.CheckpointMeta:
        return M.CheckpointMeta(self.best_step, self.best_eer, {
            "threshold_at_eer": self.threshold,
            "seen_technologies": self.seen_technologies,
        })


def _check_validation(val_records):
    labels = {r.label for r in val_records}
    if labels != {"bonafide", "spoof"}:
        raise EERUndefinedError(
            f"validation set needs both classes to define EER, has {sorted(labels)}")


def fit(train_records, val_records, mcfg: M.ModelConfig, tcfg: TrainConfig, root=".",
        out_dir=None, policies=None, fcfg: FeatureConfig = FeatureConfig(),
        clip_cache: dict | None = None) -> FitResult:
    """Train, validating every ``validate_every`` steps and at the last step.

    The lowest validation EER wins (earlier step on ties). Training stops
    once ``early_stop_patience`` consecutive validations fail to improve.
    With ``out_dir`` the best checkpoint goes to ``best.ckpt`` and the log
    to ``train_log.jsonl``.
    """
    train_records, val_records = list(train_records), list(val_records)
    if not train_records or not val_records:
        raise ValueError("train and validation sets must be non-empty")
    _check_validation(val_records)
    policies = policies or default_policies()
    cache = clip_cache if clip_cache is not None else {}

    def clip_of(r):
        if r.path not in cache:
            cache[r.path] = load_clip(r, root)
        return cache[r.path]

    stats_acc = RunningStats()
    plain = {}
    for r in train_records:
        spec = featurize(clip_of(r), None, fcfg)
        stats_acc.update(spec)
        plain[r.path] = spec
    stats = M.NormStats(stats_acc.mean, stats_acc.std if stats_acc.std > 0 else 1.0)

    def norm_patches(spec):
        return to_patches(normalize(spec, stats.mean, stats.std), mcfg)

    val_patches = [norm_patches(featurize(clip_of(r), None, fcfg)) for r in val_records]
    val_labels = [r.label for r in val_records]
    fixed = {} if tcfg.augment else {p: norm_patches(s) for p, s in plain.items()}
    del plain

    def example(r, epoch):
        if not tcfg.augment:
            return fixed[r.path], r.label
        clip = augment(clip_of(r), policy_for_label(policies, r.label),
                       clip_rng(tcfg.seed, r.path, epoch))
        return to_patches(featurize(clip, stats, fcfg), mcfg), r.label

    params = M.init(mcfg, tcfg.seed)
    state = AdamState(params)
    batches = make_batches(train_records, tcfg.train_batch, make_rng(tcfg.seed, "batches"))

    out = Path(out_dir) if out_dir is not None else None
    log_fh = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_fh = open(out / "train_log.jsonl", "w", encoding="utf-8", newline="\n")

    schedule = set(validation_steps(tcfg.max_steps, tcfg.validate_every))
    history = []
    best = dict(eer=float("inf"), step=0, thr=0.0, params=None)
    since_best = 0
    losses = []
    try:
        for step in range(1, tcfg.max_steps + 1):
            batch = next(batches)
            examples = [example(r, batch.epoch) for r in batch.items]
            losses.append(train_step(params, examples, state, tcfg, mcfg,
                                     ids=[r.path for r in batch.items]))
            if step not in schedule:
                continue
            scores = score_patches(val_patches, params, mcfg, tcfg.eval_batch)
            eer, thr = compute_eer(scores, val_labels)
            rec = {"step": step, "train_loss": float(np.mean(losses)), "val_eer": eer}
            losses = []
            history.append(rec)
            log.info("step %d  train_loss %.4f  val_eer %.4f", step, rec["train_loss"], eer)
            if log_fh is not None:
                log_fh.write(json.dumps(rec, sort_keys=True) + "\n")
                log_fh.flush()
            if eer < best["eer"]:
                best.update(eer=eer, step=step, thr=thr,
                            params={k: v.copy() for k, v in params.items()})
                since_best = 0
                if out is not None:
                    _save(out / "best.ckpt", best, mcfg, stats, train_records)
            else:
                since_best += 1
                if since_best >= tcfg.early_stop_patience:
                    log.info("early stop at step %d", step)
                    break
    finally:
        if log_fh is not None:
            log_fh.close()
    return FitResult(best["params"], mcfg, stats, best["step"], best["eer"], best["thr"],
                     history, _seen(train_records))


def _seen(records):
    return sorted({r.technology for r in records if r.is_spoof})


def _save(path, best, mcfg, stats, train_records):
    meta = M.CheckpointMeta(best["step"], best["eer"], {
        "threshold_at_eer": best["thr"], "seen_technologies": _seen(train_records)})
    M.save_checkpoint(path, best["params"], mcfg, stats, meta)
