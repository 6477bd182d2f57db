"""A single training run: warmup/inverse-sqrt schedule, Adam, dev tracking, early stopping."""
from __future__ import annotations

import hashlib
import json
import logging
import math
from collections import deque
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from . import numerics as nx
from .data import Corpus, Triple, batch as make_batches, collate
from .errors import ConfigError, NumericError
from .losses import LossWeights, total_loss
from .model import Model, ModelConfig, build, forward_text, greedy_decode_frames
from .numerics import AdamState, RngStream, adam_step

log = logging.getLogger(__name__)

MODEL_STREAM, DROPOUT_STREAM = 11, 12


@dataclass(frozen=True)
class TrainConfig:
    weights: LossWeights = field(default_factory=LossWeights)
    dropout: float = 0.1
    max_lr: float = 3e-3
    warmup_steps: int = 200
    max_steps: int = 5000
    patience: int = 10
    eval_every: int = 100
    seed: int = 0
    max_tokens: int = 600
    keep_checkpoints: int = 10
    mt_warmstart_steps: int = 0

    def __post_init__(self):
        if isinstance(self.weights, dict):
            object.__setattr__(self, "weights", LossWeights(**self.weights))

    def validate(self) -> "TrainConfig":
        self.weights.validate()
        if self.warmup_steps < 1 or self.patience < 1 or self.eval_every < 1:
            raise ConfigError("warmup_steps, patience and eval_every must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")
        if self.max_lr <= 0 or self.max_steps < 1 or self.keep_checkpoints < 1:
            raise ConfigError("max_lr, max_steps and keep_checkpoints must be positive")
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["weights"] = self.weights.to_dict()
        return d


@dataclass
class RunRecord:
    alpha_cr: float
    alpha_rd: float
    alpha_t: float
    dropout: float
    dev_metric: float
    test_metric: float
    seed: int
    failed: bool = False
    config_hash: str = ""
    curve: list[tuple[int, float]] = field(default_factory=list)

    def to_json(self) -> str:
        d = asdict(self)
        d["curve"] = [[int(s), float(m)] for s, m in self.curve]
        return json.dumps(d, sort_keys=False)

    @classmethod
    def from_dict(cls, d: dict) -> "RunRecord":
        return cls(
            alpha_cr=float(d["alpha_cr"]), alpha_rd=float(d["alpha_rd"]),
            alpha_t=float(d["alpha_t"]), dropout=float(d["dropout"]),
            dev_metric=float(d["dev_metric"]), test_metric=float(d.get("test_metric", float("nan"))),
            seed=int(d.get("seed", 0)), failed=bool(d.get("failed", False)),
            config_hash=str(d.get("config_hash", "")),
            curve=[(int(s), float(m)) for s, m in d.get("curve", [])],
        )


def config_hash(*parts: dict) -> str:
    blob = json.dumps(list(parts), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def run_hash(corpus_spec, model_config: ModelConfig, config: TrainConfig,
             model_seed: int) -> str:
    """Identity of one run; the trainer's dropout knob overrides the model's."""
    model_config = replace(model_config, dropout=config.dropout)
    return config_hash(corpus_spec.to_dict(), asdict(model_config), config.to_dict(),
                       {"model_seed": model_seed})


def lr_at(step: int, config: TrainConfig) -> float:
    """Linear warmup to ``max_lr``, then inverse square-root decay."""
    w = config.warmup_steps
    return config.max_lr * min(step / w, math.sqrt(w / step))


# ---------------------------------------------------------------- evaluation


def sequence_scores(pred: Sequence[int], ref: Sequence[int]) -> tuple[int, int]:
    """(correct, total) with positions beyond the shorter sequence counted wrong."""
    n = min(len(pred), len(ref))
    correct = int(sum(1 for a, b in zip(pred[:n], ref[:n]) if a == b))
    return correct, max(len(pred), len(ref), 1)


def decode_split(model: Model, items: Sequence[Triple], max_len: int | None = None,
                 chunk: int = 128) -> list[list[int]]:
    preds: list[list[int]] = []
    for start in range(0, len(items), chunk):
        part = items[start:start + chunk]
        b = collate(part)
        limit = max_len or max(len(t.src) for t in part) + 2
        preds += greedy_decode_frames(model, b.speech_frames, b.speech_mask, limit)
    return preds


def per_item_scores(model: Model, items: Sequence[Triple]) -> list[float]:
    scores = []
    for pred, t in zip(decode_split(model, items), items):
        c, n = sequence_scores(pred, t.tgt)
        scores.append(c / n)
    return scores


def evaluate(model: Model, items: Sequence[Triple]) -> tuple[float, float]:
    """Greedy-decode every item; return (token accuracy, exact-match rate)."""
    if not items:
        raise ValueError("cannot evaluate an empty split")
    correct = total = exact = 0
    for pred, t in zip(decode_split(model, items), items):
        c, n = sequence_scores(pred, t.tgt)
        correct += c
        total += n
        exact += int(list(pred) == list(t.tgt))
    return correct / total, exact / len(items)


# ---------------------------------------------------------------- training


def average_states(states: Sequence[dict[str, np.ndarray]]) -> dict[str, np.ndarray]:
    if len(states) == 1:
        return {k: v.copy() for k, v in states[0].items()}
    return {k: np.mean([s[k] for s in states], axis=0) for k in states[0]}


def _epochs(train: Sequence[Triple], max_tokens: int, seed: int):
    epoch = 0
    while True:
        for b in make_batches(train, max_tokens, seed=seed * 100003 + epoch):
            yield b
        epoch += 1


def _mt_warmstart(model: Model, batches, steps: int, config: TrainConfig,
                  rng: RngStream) -> None:
    state = AdamState()
    for step in range(1, steps + 1):
        b = next(batches)
        model.zero_grad()
        bundle = forward_text(model, b, rng.child(step), dropout_on=True)
        loss = nx.cross_entropy(bundle.logits, b.target_out_ids, b.target_mask)
        loss.backward()
        adam_step(model.params, {k: p.grad for k, p in model.params.items()}, state,
                  lr_at(step, config))


Evaluator = Callable[[Model], float]


def train(model_seed: int, corpus: Corpus, config: TrainConfig,
          model_config: ModelConfig | None = None,
          evaluator: Evaluator | None = None) -> tuple[RunRecord, Model]:
    """Optimise ``total_loss`` and return the run record plus the checkpoint-averaged model.

    ``evaluator`` replaces the dev-set token accuracy used for early stopping.
    """
    config.validate()
    model_config = replace(model_config or ModelConfig(), dropout=config.dropout)
    if model_config.vocab_size < corpus.spec.vocab_size:
        raise ConfigError("model vocabulary is smaller than the corpus vocabulary")
    chash = run_hash(corpus.spec, model_config, config, model_seed)
    train_items, dev_items = corpus.split("train"), corpus.split("dev")
    test_items = corpus.split("test")
    if not train_items or not dev_items:
        raise ConfigError("corpus needs non-empty train and dev splits")
    dev_eval = evaluator or (lambda m: evaluate(m, dev_items)[0])

    model = build(model_config, RngStream(model_seed, MODEL_STREAM))
    drop_rng = RngStream(config.seed, DROPOUT_STREAM)
    batches = _epochs(train_items, config.max_tokens, config.seed)
    w = config.weights
    record = RunRecord(alpha_cr=w.alpha_cr, alpha_rd=w.alpha_rd, alpha_t=w.alpha_t,
                       dropout=config.dropout, dev_metric=0.0, test_metric=0.0,
                       seed=config.seed, config_hash=chash)

    state = AdamState()
    retained: deque[dict[str, np.ndarray]] = deque(maxlen=config.keep_checkpoints)
    best = -math.inf
    stale = 0
    step = 0
    try:
        if config.mt_warmstart_steps:
            _mt_warmstart(model, batches, config.mt_warmstart_steps, config, drop_rng.child(0))
        for step in range(1, config.max_steps + 1):
            b = next(batches)
            model.zero_grad()
            breakdown = total_loss(w, b, model, drop_rng.child(step))
            breakdown.loss.backward()
            adam_step(model.params, {k: p.grad for k, p in model.params.items()}, state,
                      lr_at(step, config))
            if step % config.eval_every == 0:
                metric = float(dev_eval(model))
                record.curve.append((step, metric))
                retained.append(model.state())
                log.debug("step %d loss %.4f dev %.4f", step, breakdown.total, metric)
                if metric > best:
                    best, stale = metric, 0
                else:
                    stale += 1
                    if stale >= config.patience:
                        break
    except NumericError as exc:
        log.warning("run %s aborted at step %d: %s", chash, step, exc)
        record.failed = True
        if not record.curve:
            record.curve.append((step, 0.0))
        return record, model

    if retained:
        model.load_state(average_states(list(retained)))
    else:
        record.curve.append((step, float(dev_eval(model))))
    record.dev_metric = float(evaluate(model, dev_items)[0])
    record.test_metric = float(evaluate(model, test_items)[0]) if test_items else 0.0
    return record, model


def train_run(model_seed: int, corpus: Corpus, config: TrainConfig,
              model_config: ModelConfig | None = None,
              evaluator: Evaluator | None = None) -> RunRecord:
    return train(model_seed, corpus, config, model_config, evaluator)[0]
