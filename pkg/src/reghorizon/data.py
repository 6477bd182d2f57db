"""Synthetic paired corpus: token transcripts, a toy translation task, and pseudo-speech.

Pseudo-speech renders each transcript token as a fixed random codebook vector
repeated ``frames_per_token`` times, plus Gaussian noise, so the speech input
is continuous, longer and noisier than the text input it mirrors.
"""
from __future__ import annotations

import enum
import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, DataError
from .model import BOS, EOS, PAD, Batch
from .numerics import RngStream

NUM_SPECIALS = 3
SPLIT_FRACTIONS = (0.90, 0.05, 0.05)
CODEBOOK_STREAM, ITEM_STREAM = 1, 2


class Task(str, enum.Enum):
    COPY = "copy"
    REVERSE = "reverse"
    SHIFT_MAP = "shift_map"


@dataclass(frozen=True)
class CorpusSpec:
    vocab_size: int = 35
    min_len: int = 3
    max_len: int = 12
    size: int = 2000
    frames_per_token: int = 4
    frame_dim: int = 16
    noise_sigma: float = 0.1
    task: Task = Task.COPY
    seed: int = 0
    shift: int = 5

    def __post_init__(self):
        object.__setattr__(self, "task", Task(self.task))

    @property
    def content_vocab(self) -> int:
        return self.vocab_size - NUM_SPECIALS

    def validate(self) -> "CorpusSpec":
        if self.vocab_size <= NUM_SPECIALS:
            raise ConfigError(f"vocab_size {self.vocab_size} leaves no room beside PAD/BOS/EOS")
        if not 1 <= self.min_len <= self.max_len:
            raise ConfigError("need 1 <= min_len <= max_len")
        if self.size < 1 or self.frames_per_token < 1 or self.frame_dim < 1:
            raise ConfigError("size, frames_per_token and frame_dim must be >= 1")
        if not self.noise_sigma >= 0:
            raise ConfigError("noise_sigma must be >= 0")
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["task"] = self.task.value
        return d

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class Triple:
    speech: np.ndarray       # [T_s, frame_dim]
    src: list[int]
    tgt: list[int]

    def __eq__(self, other):
        return (isinstance(other, Triple) and self.src == other.src and self.tgt == other.tgt
                and np.array_equal(self.speech, other.speech))


@dataclass
class Corpus:
    spec: CorpusSpec
    triples: list[Triple]
    splits: dict[str, list[int]] = field(default_factory=dict)

    def split(self, name: str) -> list[Triple]:
        return [self.triples[i] for i in self.splits[name]]


def apply_task(spec: CorpusSpec, transcript: Sequence[int]) -> list[int]:
    """The ground-truth mapping; doubles as the lookup oracle for learnability checks."""
    if spec.task is Task.COPY:
        return list(transcript)
    if spec.task is Task.REVERSE:
        return list(reversed(transcript))
    c = spec.content_vocab
    return [(t - NUM_SPECIALS + spec.shift) % c + NUM_SPECIALS for t in transcript]


def codebook(spec: CorpusSpec) -> np.ndarray:
    gen = RngStream(spec.seed, CODEBOOK_STREAM).generator(0)
    return gen.standard_normal((spec.vocab_size, spec.frame_dim))


def render_speech(spec: CorpusSpec, transcript: Sequence[int], book: np.ndarray,
                  gen: np.random.Generator) -> np.ndarray:
    frames = np.repeat(book[np.asarray(transcript)], spec.frames_per_token, axis=0)
    if spec.noise_sigma > 0:
        frames = frames + gen.normal(0.0, spec.noise_sigma, size=frames.shape)
    return frames


def split_of(seed: int, index: int) -> str:
    h = hashlib.blake2b(f"{seed}:{index}".encode(), digest_size=8).digest()
    u = int.from_bytes(h, "big") / 2.0**64
    if u < SPLIT_FRACTIONS[0]:
        return "train"
    if u < SPLIT_FRACTIONS[0] + SPLIT_FRACTIONS[1]:
        return "dev"
    return "test"


def assign_splits(seed: int, n: int) -> dict[str, list[int]]:
    splits: dict[str, list[int]] = {"train": [], "dev": [], "test": []}
    for i in range(n):
        splits[split_of(seed, i)].append(i)
    return splits


def generate(spec: CorpusSpec) -> Corpus:
    spec.validate()
    book = codebook(spec)
    items = RngStream(spec.seed, ITEM_STREAM)
    triples = []
    for i in range(spec.size):
        gen = items.generator(i)
        n = int(gen.integers(spec.min_len, spec.max_len + 1))
        src = [int(t) for t in gen.integers(NUM_SPECIALS, spec.vocab_size, size=n)]
        triples.append(Triple(render_speech(spec, src, book, gen), src, apply_task(spec, src)))
    return Corpus(spec, triples, assign_splits(spec.seed, spec.size))


# ---------------------------------------------------------------- batching


def item_tokens(t: Triple) -> int:
    """Padded width an item occupies in a batch (its longest field, targets framed)."""
    return max(t.speech.shape[0], len(t.src), len(t.tgt) + 1)


def collate(triples: Sequence[Triple], pad_id: int = PAD) -> Batch:
    b = len(triples)
    ts = max(t.speech.shape[0] for t in triples)
    tt = max(len(t.src) for t in triples)
    ty = max(len(t.tgt) for t in triples) + 1
    fdim = triples[0].speech.shape[1]
    speech = np.zeros((b, ts, fdim))
    speech_mask = np.zeros((b, ts), dtype=bool)
    src = np.full((b, tt), pad_id, dtype=np.int64)
    src_mask = np.zeros((b, tt), dtype=bool)
    tin = np.full((b, ty), pad_id, dtype=np.int64)
    tout = np.full((b, ty), pad_id, dtype=np.int64)
    tmask = np.zeros((b, ty), dtype=bool)
    for i, t in enumerate(triples):
        n = t.speech.shape[0]
        speech[i, :n] = t.speech
        speech_mask[i, :n] = True
        src[i, :len(t.src)] = t.src
        src_mask[i, :len(t.src)] = True
        m = len(t.tgt) + 1
        tin[i, :m] = [BOS, *t.tgt]
        tout[i, :m] = [*t.tgt, EOS]
        tmask[i, :m] = True
    return Batch(speech, speech_mask, src, src_mask, tin, tout, tmask)


def batch(triples: Sequence[Triple], max_tokens: int, pad_id: int = PAD,
          seed: int | None = None) -> list[Batch]:
    """Length-bucketed batches with ``len(batch) * padded width <= max_tokens``.

    Items are sorted by width (ties broken by a seeded permutation) and packed
    greedily; with a seed the batch order is shuffled too.
    """
    widths = [item_tokens(t) for t in triples]
    if widths and max(widths) > max_tokens:
        raise DataError(f"item of width {max(widths)} exceeds max_tokens={max_tokens}")
    gen = np.random.default_rng(seed) if seed is not None else None
    tiebreak = gen.permutation(len(triples)) if gen is not None else np.arange(len(triples))
    order = sorted(range(len(triples)), key=lambda i: (widths[i], tiebreak[i]))
    groups: list[list[int]] = []
    cur: list[int] = []
    cur_w = 0
    for i in order:
        w = max(cur_w, widths[i])
        if cur and w * (len(cur) + 1) > max_tokens:
            groups.append(cur)
            cur, w = [], widths[i]
        cur.append(i)
        cur_w = w
    if cur:
        groups.append(cur)
    if gen is not None:
        groups = [groups[j] for j in gen.permutation(len(groups))]
    return [collate([triples[i] for i in g], pad_id) for g in groups]


# ---------------------------------------------------------------- JSONL


def triple_to_json(t: Triple) -> dict:
    return {"speech": t.speech.tolist(), "src": t.src, "tgt": t.tgt}


def triple_from_json(doc: dict) -> Triple:
    return Triple(np.asarray(doc["speech"], dtype=np.float64), list(doc["src"]), list(doc["tgt"]))


def export_jsonl(triples: Iterable[Triple], path: str | Path) -> None:
    with open(path, "w") as fh:
        for t in triples:
            fh.write(json.dumps(triple_to_json(t)) + "\n")


def import_jsonl(path: str | Path) -> list[Triple]:
    with open(path) as fh:
        return [triple_from_json(json.loads(line)) for line in fh if line.strip()]
