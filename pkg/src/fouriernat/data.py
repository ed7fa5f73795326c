"""Synthetic seq2seq tasks, vocabulary layout, batching and JSONL persistence."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .tensor import ConfigError, Rng

PAD, BOS, EOS, MASK = 0, 1, 2, 3
N_SPECIAL = 4
TASK_KINDS = ("copy", "reverse", "sort", "cipher")


@dataclass(frozen=True)
class Vocabulary:
    size: int

    def __post_init__(self):
        if self.size < N_SPECIAL + 1:
            raise ConfigError(f"vocabulary needs at least {N_SPECIAL + 1} ids, got {self.size}")

    pad = PAD
    bos = BOS
    eos = EOS
    mask = MASK

    @property
    def content_ids(self) -> range:
        return range(N_SPECIAL, self.size)

    @classmethod
    def for_content(cls, n_content: int) -> "Vocabulary":
        return cls(n_content + N_SPECIAL)


@dataclass
class Example:
    src: list[int]
    tgt: list[int]

    def to_json(self) -> str:
        return json.dumps({"src": list(map(int, self.src)), "tgt": list(map(int, self.tgt))},
                          separators=(",", ":"))


@dataclass
class TaskSpec:
    kind: str = "copy"
    content_vocab: int = 32
    min_len: int = 4
    max_len: int = 12
    seed: int = 0
    t_max: int = 16

    def validate(self):
        if self.kind not in TASK_KINDS:
            raise ConfigError(f"unknown task kind {self.kind!r}; expected one of {TASK_KINDS}")
        if not 1 <= self.min_len <= self.max_len:
            raise ConfigError(f"bad length range [{self.min_len}, {self.max_len}]")
        if self.max_len > self.t_max - 1:
            raise ConfigError(f"max_len {self.max_len} leaves no room for EOS within t_max={self.t_max}")
        if self.content_vocab < 1:
            raise ConfigError("content_vocab must be positive")

    @property
    def vocab(self) -> Vocabulary:
        return Vocabulary.for_content(self.content_vocab)


@dataclass
class Batch:
    src_ids: np.ndarray        # B x S, PAD-filled
    src_pad_mask: np.ndarray   # B x S, True at PAD
    tgt_ids: np.ndarray        # B x t_max, PAD-filled
    tgt_pad_mask: np.ndarray   # B x t_max, True at PAD
    gold_lengths: np.ndarray   # B, target length including EOS
    indices: list[int] = field(default_factory=list)

    def __len__(self):
        return len(self.gold_lengths)

    @property
    def content_lengths(self) -> np.ndarray:
        return self.gold_lengths - 1


def cipher_permutation(content_vocab: int, seed: int) -> np.ndarray:
    """Seed-derived substitution table over content ids (index = id - N_SPECIAL)."""
    return Rng(seed).spawn(0xC1F).permutation(content_vocab) + N_SPECIAL


def adjacent_swap(seq):
    out = list(seq)
    for i in range(0, len(out) - 1, 2):
        out[i], out[i + 1] = out[i + 1], out[i]
    return out


def apply_task(kind: str, src, perm=None) -> list[int]:
    """Gold target content (without EOS) for ``src`` under ``kind``."""
    src = list(src)
    if kind == "copy":
        return src
    if kind == "reverse":
        return src[::-1]
    if kind == "sort":
        return sorted(src)
    if kind == "cipher":
        if perm is None:
            raise ConfigError("cipher needs a permutation")
        return [int(perm[t - N_SPECIAL]) for t in adjacent_swap(src)]
    raise ConfigError(f"unknown task kind {kind!r}")


def generate(spec: TaskSpec, n: int) -> list[Example]:
    spec.validate()
    if n < 0:
        raise ConfigError("n must be non-negative")
    rng = Rng(spec.seed)
    perm = cipher_permutation(spec.content_vocab, spec.seed) if spec.kind == "cipher" else None
    out = []
    for _ in range(n):
        length = int(rng.integers(spec.min_len, spec.max_len + 1))
        src = [int(t) for t in rng.integers(N_SPECIAL, N_SPECIAL + spec.content_vocab, size=length)]
        out.append(Example(src, apply_task(spec.kind, src, perm) + [EOS]))
    return out


def save(examples, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ex in examples:
            fh.write(ex.to_json() + "\n")


def load(path) -> list[Example]:
    examples = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                src, tgt = rec["src"], rec["tgt"]
                if not all(isinstance(v, int) for v in src + tgt):
                    raise TypeError("ids must be integers")
            except (ValueError, KeyError, TypeError) as exc:
                raise ValueError(f"{path}:{lineno}: malformed record ({exc})") from None
            examples.append(Example(list(src), list(tgt)))
    return examples


def load_records(path) -> list[dict]:
    """Raw JSON objects, one per non-empty line."""
    with open(path, encoding="utf-8") as fh:
        out = []
        for lineno, line in enumerate(fh, 1):
            if line.strip():
                try:
                    out.append(json.loads(line))
                except ValueError as exc:
                    raise ValueError(f"{path}:{lineno}: malformed record ({exc})") from None
        return out


def source_with_eos(src) -> list[int]:
    # the encoder always sees an explicit end marker after the content
    return list(src) + [EOS]


def collate(examples, t_max: int, indices=None) -> Batch:
    srcs = [source_with_eos(ex.src) for ex in examples]
    S = max(len(s) for s in srcs)
    B = len(examples)
    src = np.full((B, S), PAD, dtype=np.int64)
    tgt = np.full((B, t_max), PAD, dtype=np.int64)
    lengths = np.zeros(B, dtype=np.int64)
    for i, (s, ex) in enumerate(zip(srcs, examples)):
        if len(ex.tgt) > t_max:
            idx = indices[i] if indices is not None else i
            raise ValueError(f"example {idx}: target length {len(ex.tgt)} exceeds t_max={t_max}")
        src[i, :len(s)] = s
        tgt[i, :len(ex.tgt)] = ex.tgt
        lengths[i] = len(ex.tgt)
    return Batch(src, src == PAD, tgt, tgt == PAD, lengths, list(indices or range(B)))


def make_batches(examples, t_max: int, examples_per_batch: int, rng: Rng | None = None) -> list[Batch]:
    for i, ex in enumerate(examples):
        if len(ex.tgt) > t_max:
            raise ValueError(f"example {i}: target length {len(ex.tgt)} exceeds t_max={t_max}")
    order = rng.permutation(len(examples)) if rng is not None else np.arange(len(examples))
    batches = []
    for start in range(0, len(order), examples_per_batch):
        idx = [int(i) for i in order[start:start + examples_per_batch]]
        batches.append(collate([examples[i] for i in idx], t_max, idx))
    return batches


def strip_eos(tokens) -> list[int]:
    tokens = list(tokens)
    return tokens[:tokens.index(EOS)] if EOS in tokens else tokens
