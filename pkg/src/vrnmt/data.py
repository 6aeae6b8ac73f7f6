"""Vocabularies, parallel corpora, the synthetic corpus generator and checkpoints."""

from __future__ import annotations

import io
import struct
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

PAD, UNK, BOS, EOS = 0, 1, 2, 3
RESERVED = ("<pad>", "<unk>", "<s>", "</s>")

TASKS = ("copy", "reverse", "lexmap", "lexmap_swap")

MAGIC = b"VRNMT1"
FORMAT_VERSION = 1


class FormatError(ValueError):
    """Malformed or incompatible data / checkpoint file."""


# --------------------------------------------------------------------------
# vocabulary
# --------------------------------------------------------------------------

class Vocabulary:
    """Token <-> id map with PAD/UNK/BOS/EOS at ids 0..3."""

    def __init__(self, tokens: Iterable[str] = ()):
        self.tokens: list[str] = list(RESERVED)
        self.index: dict[str, int] = {t: i for i, t in enumerate(RESERVED)}
        for tok in tokens:
            if tok in self.index:
                raise ValueError(f"duplicate vocabulary entry {tok!r}")
            self.index[tok] = len(self.tokens)
            self.tokens.append(tok)

    def __len__(self) -> int:
        return len(self.tokens)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.tokens == other.tokens

    def id(self, token: str) -> int:
        return self.index.get(token, UNK)

    def encode(self, tokens: Sequence[str]) -> list[int]:
        return [self.index.get(t, UNK) for t in tokens]

    def decode(self, ids: Iterable[int], strip: bool = True) -> list[str]:
        out = []
        for i in ids:
            if strip and i in (PAD, BOS, EOS):
                continue
            out.append(self.tokens[i])
        return out

    def save(self, path) -> None:
        Path(path).write_text("".join(t + "\n" for t in self.tokens), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").split("\n")
        if lines and lines[-1] == "":
            lines.pop()
        if tuple(lines[:4]) != RESERVED:
            raise FormatError(f"{path}: vocabulary must start with {' '.join(RESERVED)}")
        return cls(lines[4:])


def build_vocab(sentences: Iterable[Sequence[str]], max_size: int) -> Vocabulary:
    """Most frequent tokens first, ties broken by first occurrence."""
    if max_size < 5:
        raise ValueError("max_size must leave room for the 4 reserved tokens")
    counts: Counter[str] = Counter()
    first: dict[str, int] = {}
    for sent in sentences:
        for tok in sent:
            counts[tok] += 1
            first.setdefault(tok, len(first))
    if not counts:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    ranked = sorted(counts, key=lambda t: (-counts[t], first[t]))
    return Vocabulary(ranked[: max_size - len(RESERVED)])


# --------------------------------------------------------------------------
# corpora
# --------------------------------------------------------------------------

@dataclass
class ParallelCorpus:
    source: list[list[str]]
    target: list[list[str]]
    # gold links (source_pos, target_pos) per pair, when known
    alignments: list[list[tuple[int, int]]] | None = field(default=None)

    def __post_init__(self):
        if len(self.source) != len(self.target):
            raise ValueError("source and target sides differ in length")
        for k, (s, t) in enumerate(zip(self.source, self.target)):
            if not s or not t:
                raise ValueError(f"pair {k} has an empty side")

    def __len__(self) -> int:
        return len(self.source)

    def subset(self, indices: Sequence[int]) -> "ParallelCorpus":
        al = None if self.alignments is None else [self.alignments[i] for i in indices]
        return ParallelCorpus([self.source[i] for i in indices],
                              [self.target[i] for i in indices], al)

    def filter_length(self, max_len: int) -> "ParallelCorpus":
        keep = [i for i in range(len(self)) if len(self.source[i]) <= max_len
                and len(self.target[i]) <= max_len]
        return self.subset(keep)


def generate_toy_corpus(task: str, pairs: int, vocab_size: int = 50,
                        len_range: tuple[int, int] = (3, 12), swap_prob: float = 0.3,
                        seed: int = 0, max_len: int = 50) -> ParallelCorpus:
    """Synthetic translation pairs.

    The "language" (lexical bijection and the set of tokens that trigger a
    swap) is drawn first from ``seed``, so corpora with the same seed but
    different ``pairs`` share it. In ``lexmap_swap`` a source token from the
    trigger set (a ``swap_prob`` fraction of the vocabulary) swaps its
    translation with the next one; scanning resumes after the swapped pair.
    """
    if task not in TASKS:
        raise ValueError(f"unknown task {task!r}; expected one of {', '.join(TASKS)}")
    lo, hi = len_range
    if vocab_size < 5:
        raise ValueError("vocab_size must be at least 5")
    if not 1 <= lo <= hi <= max_len:
        raise ValueError(f"len_range must lie within [1, {max_len}]")
    rng = np.random.default_rng(seed)
    src_words = [f"s{k}" for k in range(vocab_size)]
    bijection = rng.permutation(vocab_size)
    triggers = set(rng.choice(vocab_size, int(round(swap_prob * vocab_size)), replace=False).tolist())

    source, target, links = [], [], []
    for _ in range(pairs):
        n = int(rng.integers(lo, hi + 1))
        ids = rng.integers(0, vocab_size, size=n)
        order = list(range(n))
        if task == "reverse":
            order = order[::-1]
        elif task == "lexmap_swap":
            i = 0
            while i < n - 1:
                if int(ids[i]) in triggers:
                    order[i], order[i + 1] = order[i + 1], order[i]
                    i += 2
                else:
                    i += 1
        if task in ("copy", "reverse"):
            tgt = [src_words[ids[k]] for k in order]
        else:
            tgt = [f"t{bijection[ids[k]]}" for k in order]
        source.append([src_words[k] for k in ids])
        target.append(tgt)
        links.append(sorted((order[j], j) for j in range(n)))
    return ParallelCorpus(source, target, links)


def read_lines(path) -> list[list[str]]:
    text = Path(path).read_text(encoding="utf-8")
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    return [ln.split() for ln in lines]


def write_lines(path, sentences: Iterable[Sequence[str]]) -> None:
    Path(path).write_text("".join(" ".join(s) + "\n" for s in sentences), encoding="utf-8")


def load_corpus(src_path, tgt_path, max_len: int | None = 50) -> ParallelCorpus:
    src, tgt = read_lines(src_path), read_lines(tgt_path)
    if len(src) != len(tgt):
        raise FormatError(f"{src_path} and {tgt_path} have different line counts")
    try:
        corpus = ParallelCorpus(src, tgt)
    except ValueError as exc:
        raise FormatError(str(exc)) from None
    return corpus if max_len is None else corpus.filter_length(max_len)


def save_corpus(corpus: ParallelCorpus, src_path, tgt_path, align_path=None) -> None:
    write_lines(src_path, corpus.source)
    write_lines(tgt_path, corpus.target)
    if align_path is not None and corpus.alignments is not None:
        write_alignments(align_path, corpus.alignments)


def format_alignment(links: Iterable[tuple[int, int]], possible: Iterable[tuple[int, int]] = ()) -> str:
    parts = [f"{i}-{j}" for i, j in sorted(links)]
    parts += [f"{i}?{j}" for i, j in sorted(possible)]
    return " ".join(parts)


def write_alignments(path, rows: Iterable[Iterable[tuple[int, int]]]) -> None:
    Path(path).write_text("".join(format_alignment(r) + "\n" for r in rows), encoding="utf-8")


def read_alignments(path) -> list[tuple[set[tuple[int, int]], set[tuple[int, int]]]]:
    """Per line: (sure links, possible links). ``i-j`` is sure, ``i?j`` possible-only.

    The possible set always includes the sure set.
    """
    lines = Path(path).read_text(encoding="utf-8").split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    rows = []
    for lineno, line in enumerate(lines, 1):
        sure, possible = set(), set()
        for item in line.split():
            sep = "-" if "-" in item else "?"
            try:
                i, j = (int(v) for v in item.split(sep))
            except ValueError:
                raise FormatError(f"{path}:{lineno}: bad link {item!r}") from None
            (sure if sep == "-" else possible).add((i, j))
        rows.append((sure, possible | sure))
    return rows


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------

@dataclass
class Checkpoint:
    version: int
    variant: str
    config: dict[str, str]
    tensors: dict[str, np.ndarray]
    optimizer: dict[str, np.ndarray] | None = None


OPT_PREFIX = "optimizer/"


def _pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


def save_checkpoint(path, variant: str, config: dict, tensors: dict[str, np.ndarray],
                    optimizer: dict[str, np.ndarray] | None = None) -> None:
    """Write the little-endian ``VRNMT1`` binary format.

    Layout: magic, config block (u32 length + ``key=value`` lines), u32 tensor
    count, then per tensor: u32 name length, name, u32 rank, u32 dims, f64 data.
    Optimizer slots are stored as extra tensors under ``optimizer/<name>``.
    """
    cfg = {"format_version": str(FORMAT_VERSION), "variant": variant}
    cfg.update({k: str(v) for k, v in config.items() if k not in cfg})
    block = "".join(f"{k}={v}\n" for k, v in cfg.items())
    records = dict(tensors)
    for name, arr in (optimizer or {}).items():
        records[OPT_PREFIX + name] = arr
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(_pack_str(block))
    buf.write(struct.pack("<I", len(records)))
    for name, arr in records.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        buf.write(_pack_str(name))
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes())
    Path(path).write_bytes(buf.getvalue())


class _Reader:
    def __init__(self, data: bytes, path):
        self.data, self.pos, self.path = data, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(f"{self.path}: truncated checkpoint")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def text(self) -> str:
        try:
            return self.take(self.u32()).decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError(f"{self.path}: corrupt string field") from None


def load_checkpoint(path) -> Checkpoint:
    r = _Reader(Path(path).read_bytes(), path)
    if r.take(len(MAGIC)) != MAGIC:
        raise FormatError(f"{path}: not a VRNMT checkpoint (bad magic)")
    config = {}
    for line in r.text().splitlines():
        if "=" not in line:
            raise FormatError(f"{path}: bad config line {line!r}")
        k, v = line.split("=", 1)
        config[k] = v
    version = int(config.pop("format_version", "-1"))
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported format version {version}")
    variant = config.pop("variant", "")
    tensors, optimizer = {}, {}
    for _ in range(r.u32()):
        name = r.text()
        rank = r.u32()
        shape = struct.unpack(f"<{rank}I", r.take(4 * rank))
        count = int(np.prod(shape)) if rank else 1
        arr = np.frombuffer(r.take(8 * count), dtype="<f8").astype(np.float64).reshape(shape)
        if name.startswith(OPT_PREFIX):
            optimizer[name[len(OPT_PREFIX):]] = arr
        else:
            tensors[name] = arr
    if r.pos != len(r.data):
        raise FormatError(f"{path}: trailing bytes after last tensor")
    return Checkpoint(version, variant, config, tensors, optimizer or None)
