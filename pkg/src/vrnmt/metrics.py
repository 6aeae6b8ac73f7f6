"""Corpus BLEU, n-gram repetition rate, AER, length-bucketed BLEU, paired bootstrap."""

from __future__ import annotations

import csv
import io
import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

Tokens = Sequence[str]


@dataclass
class EvalReport:
    metric: str
    value: float
    buckets: dict[str, tuple[float, int]] = field(default_factory=dict)  # label -> (value, count)
    count: int = 0
    settings: dict[str, object] = field(default_factory=dict)

    def rows(self) -> list[tuple[str, str, float, int]]:
        out = [(self.metric, "all", self.value, self.count)]
        out += [(self.metric, label, v, n) for label, (v, n) in self.buckets.items()]
        return out

    def to_csv(self) -> str:
        return format_csv(self.rows())


def format_csv(rows: Iterable[tuple]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["metric", "bucket", "value", "count"])
    for metric, bucket, value, count in rows:
        w.writerow([metric, bucket, f"{value:.6f}", count])
    return buf.getvalue()


def parse_csv(text: str) -> list[tuple[str, str, float, int]]:
    reader = csv.DictReader(io.StringIO(text))
    if reader.fieldnames != ["metric", "bucket", "value", "count"]:
        raise ValueError("expected header metric,bucket,value,count")
    return [(r["metric"], r["bucket"], float(r["value"]), int(r["count"])) for r in reader]


# --------------------------------------------------------------------------
# BLEU
# --------------------------------------------------------------------------

def ngrams(tokens: Tokens, n: int) -> list[tuple[str, ...]]:
    return [tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1)]


@dataclass
class BleuStats:
    """Sufficient statistics of one or more sentences."""

    matches: np.ndarray  # clipped n-gram matches per order
    totals: np.ndarray  # candidate n-gram counts per order
    cand_len: int
    ref_len: int

    def __add__(self, other: "BleuStats") -> "BleuStats":
        return BleuStats(self.matches + other.matches, self.totals + other.totals,
                         self.cand_len + other.cand_len, self.ref_len + other.ref_len)


def _norm(tokens: Tokens, lowercase: bool) -> list[str]:
    return [t.lower() for t in tokens] if lowercase else list(tokens)


def sentence_stats(candidate: Tokens, references: Sequence[Tokens], max_n: int = 4,
                   lowercase: bool = True) -> BleuStats:
    cand = _norm(candidate, lowercase)
    refs = [_norm(r, lowercase) for r in references]
    if not refs:
        raise ValueError("each candidate needs at least one reference")
    matches = np.zeros(max_n, dtype=np.int64)
    totals = np.zeros(max_n, dtype=np.int64)
    for n in range(1, max_n + 1):
        counts = Counter(ngrams(cand, n))
        max_ref: Counter = Counter()
        for r in refs:
            for g, c in Counter(ngrams(r, n)).items():
                max_ref[g] = max(max_ref[g], c)
        matches[n - 1] = sum(min(c, max_ref[g]) for g, c in counts.items())
        totals[n - 1] = sum(counts.values())
    # closest reference length, shorter one on ties
    ref_len = min((abs(len(r) - len(cand)), len(r)) for r in refs)[1]
    return BleuStats(matches, totals, len(cand), ref_len)


def bleu_from_stats(stats: BleuStats, smooth: bool = False) -> tuple[float, list[float], float]:
    """(BLEU in [0, 1], per-order precisions, brevity penalty)."""
    precisions = []
    for n, (m, t) in enumerate(zip(stats.matches, stats.totals), 1):
        if smooth and n > 1:
            precisions.append((m + 1.0) / (t + 1.0))
        else:
            precisions.append(m / t if t > 0 else 0.0)
    c, r = stats.cand_len, stats.ref_len
    bp = 0.0 if c == 0 else math.exp(min(0.0, 1.0 - r / c))
    if min(precisions) <= 0.0:
        return 0.0, precisions, bp
    log_mean = math.fsum(math.log(p) for p in precisions) / len(precisions)
    return bp * math.exp(log_mean), precisions, bp


def _as_ref_sets(references) -> list[list[Tokens]]:
    out = []
    for refs in references:
        if refs and isinstance(refs[0], str):
            out.append([refs])
        else:
            out.append(list(refs))
    return out


def corpus_stats(candidates: Sequence[Tokens], references, max_n: int = 4,
                 lowercase: bool = True) -> list[BleuStats]:
    refsets = _as_ref_sets(references)
    if len(candidates) != len(refsets):
        raise ValueError("candidate and reference counts differ")
    if not candidates:
        raise ValueError("empty corpus")
    return [sentence_stats(c, r, max_n, lowercase) for c, r in zip(candidates, refsets)]


def _sum_stats(stats: Sequence[BleuStats]) -> BleuStats:
    total = stats[0]
    for s in stats[1:]:
        total = total + s
    return total


def bleu(candidates: Sequence[Tokens], references, max_n: int = 4, lowercase: bool = True,
         smooth: bool = False) -> float:
    """Corpus BLEU in [0, 1].

    ``references[k]`` is either one token list or a list of token lists.
    """
    return bleu_from_stats(_sum_stats(corpus_stats(candidates, references, max_n, lowercase)),
                           smooth)[0]


# --------------------------------------------------------------------------
# N-GRR
# --------------------------------------------------------------------------

def n_grr(translations: Sequence[Sequence[Tokens]], n: int) -> float:
    """Mean fraction of duplicated n-grams per translation.

    ``translations[c]`` holds the R translations of source sentence c (a bare
    token list counts as R = 1). Translations shorter than ``n`` have no
    n-grams and are left out of the average.
    """
    if n < 1:
        raise ValueError("n must be at least 1")
    terms = []
    for group in translations:
        if group and isinstance(group[0], str):
            group = [group]
        for sent in group:
            grams = ngrams(list(sent), n)
            if not grams:
                continue
            terms.append((len(grams) - len(set(grams))) / len(grams))
    if not terms:
        raise ValueError(f"every translation is shorter than n={n}")
    return math.fsum(terms) / len(terms)


# --------------------------------------------------------------------------
# AER
# --------------------------------------------------------------------------

def aer(predicted: Iterable[tuple[int, int]], sure: Iterable[tuple[int, int]],
        possible: Iterable[tuple[int, int]]) -> float:
    """1 - (|A&S| + |A&P|) / (|A| + |S|); 0 when both A and S are empty."""
    A, S, P = set(predicted), set(sure), set(possible)
    if not S <= P:
        raise ValueError(f"sure links missing from the possible set: {sorted(S - P)}")
    denom = len(A) + len(S)
    if denom == 0:
        return 0.0
    return 1.0 - (len(A & S) + len(A & P)) / denom


def corpus_aer(predicted: Sequence[Iterable[tuple[int, int]]],
               gold: Sequence[tuple[Iterable[tuple[int, int]], Iterable[tuple[int, int]]]]) -> float:
    """AER with link counts pooled over sentences."""
    if len(predicted) != len(gold):
        raise ValueError("prediction and gold counts differ")
    a = s = a_s = a_p = 0
    for pred, (sure, possible) in zip(predicted, gold):
        A, S, P = set(pred), set(sure), set(possible)
        if not S <= P:
            raise ValueError("sure links missing from the possible set")
        a += len(A)
        s += len(S)
        a_s += len(A & S)
        a_p += len(A & P)
    return 0.0 if a + s == 0 else 1.0 - (a_s + a_p) / (a + s)


# --------------------------------------------------------------------------
# length buckets
# --------------------------------------------------------------------------

def bucket_label(length: int, width: int) -> str:
    k = (length - 1) // width
    return f"{k * width + 1}-{(k + 1) * width}"


def bucketed_bleu(candidates: Sequence[Tokens], references, source_lengths: Sequence[int],
                  bucket_width: int, max_n: int = 4, lowercase: bool = True,
                  smooth: bool = False) -> EvalReport:
    if bucket_width < 1:
        raise ValueError("bucket_width must be at least 1")
    refsets = _as_ref_sets(references)
    if not len(candidates) == len(refsets) == len(source_lengths):
        raise ValueError("candidate, reference and length counts differ")
    groups: dict[int, list[int]] = {}
    for i, n in enumerate(source_lengths):
        groups.setdefault((max(n, 1) - 1) // bucket_width, []).append(i)
    buckets = {}
    for k in sorted(groups):
        idx = groups[k]
        value = bleu([candidates[i] for i in idx], [refsets[i] for i in idx], max_n,
                     lowercase, smooth)
        buckets[bucket_label(k * bucket_width + 1, bucket_width)] = (100.0 * value, len(idx))
    total = bleu(candidates, refsets, max_n, lowercase, smooth)
    return EvalReport("bucketed-bleu", 100.0 * total, buckets, len(candidates),
                      {"max_n": max_n, "lowercase": lowercase, "bucket_width": bucket_width})


# --------------------------------------------------------------------------
# significance
# --------------------------------------------------------------------------

def _stack(stats: Sequence[BleuStats]):
    return (np.array([s.matches for s in stats]), np.array([s.totals for s in stats]),
            np.array([s.cand_len for s in stats]), np.array([s.ref_len for s in stats]))


def _bleu_of_sample(arrays, idx, smooth: bool) -> float:
    m, t, c, r = arrays
    st = BleuStats(m[idx].sum(axis=0), t[idx].sum(axis=0), int(c[idx].sum()), int(r[idx].sum()))
    return bleu_from_stats(st, smooth)[0]


def paired_bootstrap(stats_base: Sequence[BleuStats], stats_new: Sequence[BleuStats],
                     resamples: int = 1000, seed: int = 0, smooth: bool = False) -> float:
    """Fraction of paired resamples in which the new system's BLEU is not higher.

    Inputs are per-sentence statistics (see :func:`corpus_stats`) computed
    against the same references. Ties count against the new system.
    """
    if len(stats_base) != len(stats_new):
        raise ValueError("systems cover different numbers of sentences")
    if not stats_base:
        raise ValueError("empty corpus")
    if resamples < 100:
        raise ValueError("use at least 100 resamples")
    rng = np.random.default_rng(seed)
    a, b = _stack(stats_base), _stack(stats_new)
    n = len(stats_base)
    not_better = 0
    for _ in range(resamples):
        idx = rng.integers(0, n, size=n)
        if _bleu_of_sample(b, idx, smooth) <= _bleu_of_sample(a, idx, smooth):
            not_better += 1
    return not_better / resamples
