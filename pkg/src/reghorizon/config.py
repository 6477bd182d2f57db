"""Experiment configuration: one JSON document, dotted-path overrides, seed env override."""
from __future__ import annotations

import copy
import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Sequence

from .data import CorpusSpec
from .errors import ConfigError
from .horizon import SweepSpec
from .model import ModelConfig
from .trainer import TrainConfig

SEED_ENV = "REGHORIZON_SEED"


@dataclass
class ExperimentConfig:
    corpus: CorpusSpec = field(default_factory=CorpusSpec)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    sweep: SweepSpec | None = None
    output_dir: Path = Path("runs")

    def to_dict(self) -> dict:
        d = {"corpus": self.corpus.to_dict(), "model": asdict(self.model),
             "train": self.train.to_dict(), "output_dir": str(self.output_dir)}
        if self.sweep is not None:
            d["sweep"] = {"axes": self.sweep.axes, "seeds": self.sweep.seeds}
        return d


def _parse_value(text: str) -> Any:
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(doc: dict, overrides: Sequence[str]) -> dict:
    """Apply ``a.b.c=value`` assignments; values are parsed as JSON when possible."""
    doc = copy.deepcopy(doc)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form path=value")
        path, raw = item.split("=", 1)
        keys = path.strip().split(".")
        node = doc
        for k in keys[:-1]:
            node = node.setdefault(k, {})
            if not isinstance(node, dict):
                raise ConfigError(f"cannot descend into {path!r}")
        node[keys[-1]] = _parse_value(raw)
    return doc


def _seed_override(doc: dict) -> dict:
    raw = os.environ.get(SEED_ENV)
    if raw is None or raw == "":
        return doc
    try:
        seed = int(raw)
    except ValueError as exc:
        raise ConfigError(f"{SEED_ENV} must be an integer, got {raw!r}") from exc
    doc = copy.deepcopy(doc)
    doc.setdefault("corpus", {})["seed"] = seed
    doc.setdefault("train", {})["seed"] = seed
    if doc.get("sweep") is not None:
        doc["sweep"]["seeds"] = [seed]
    return doc


def from_dict(doc: dict) -> ExperimentConfig:
    doc = _seed_override(doc)
    unknown = set(doc) - {"corpus", "model", "train", "sweep", "output_dir"}
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    try:
        corpus = CorpusSpec(**doc.get("corpus", {})).validate()
        model = ModelConfig(**doc.get("model", {})).validate()
        train = TrainConfig(**doc.get("train", {})).validate()
        sweep = None
        if doc.get("sweep") is not None:
            s = doc["sweep"]
            sweep = SweepSpec(base=train, axes={k: [float(v) for v in vals]
                                                for k, vals in s.get("axes", {}).items()},
                              seeds=[int(x) for x in s.get("seeds", [train.seed])]).validate()
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    if model.vocab_size < corpus.vocab_size:
        raise ConfigError("model.vocab_size must cover corpus.vocab_size")
    if model.frame_dim != corpus.frame_dim:
        raise ConfigError("model.frame_dim must equal corpus.frame_dim")
    return ExperimentConfig(corpus, model, train, sweep, Path(doc.get("output_dir", "runs")))


def load(path: str | Path, overrides: Sequence[str] = ()) -> ExperimentConfig:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return from_dict(apply_overrides(doc, overrides))
