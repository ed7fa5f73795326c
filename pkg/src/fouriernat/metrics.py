"""Accuracy, corpus BLEU and ROUGE-1/2/L over token-id sequences."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import asdict, dataclass

from .data import EOS


@dataclass
class EvalReport:
    token_accuracy: float
    sequence_accuracy: float
    bleu: float
    rouge1: float
    rouge2: float
    rougeL: float
    n_examples: int

    def to_dict(self):
        return asdict(self)


def _content(seq):
    return [t for t in seq if t != EOS]


def _check_aligned(hyps, refs):
    if len(hyps) != len(refs):
        raise ValueError(f"corpus size mismatch: {len(hyps)} hypotheses vs {len(refs)} references")


def token_accuracy(hyps, refs) -> float:
    """Position-aligned matches over total reference tokens (EOS excluded)."""
    _check_aligned(hyps, refs)
    hits = total = 0
    for h, r in zip(hyps, refs):
        h, r = _content(h), _content(r)
        hits += sum(a == b for a, b in zip(h, r))
        total += len(r)
    return hits / total if total else 1.0


def sequence_accuracy(hyps, refs) -> float:
    _check_aligned(hyps, refs)
    if not refs:
        return 1.0
    return sum(_content(h) == _content(r) for h, r in zip(hyps, refs)) / len(refs)


def _ngrams(seq, n):
    return Counter(tuple(seq[i:i + n]) for i in range(len(seq) - n + 1))


def bleu(hyps, refs, max_n: int = 4, smooth: bool = False) -> float:
    """Corpus BLEU: clipped n-gram precisions, geometric mean, brevity penalty.

    Without smoothing any zero precision yields 0.  ``smooth`` adds one to
    numerator and denominator for n > 1.
    """
    _check_aligned(hyps, refs)
    matches = [0] * max_n
    totals = [0] * max_n
    hyp_len = ref_len = 0
    for h, r in zip(hyps, refs):
        h, r = _content(h), _content(r)
        hyp_len += len(h)
        ref_len += len(r)
        for n in range(1, max_n + 1):
            hc, rc = _ngrams(h, n), _ngrams(r, n)
            matches[n - 1] += sum(min(c, rc[g]) for g, c in hc.items())
            totals[n - 1] += max(len(h) - n + 1, 0)
    if hyp_len == 0:
        return 0.0
    log_p = 0.0
    for n in range(max_n):
        m, t = matches[n], totals[n]
        if smooth and n > 0:
            m, t = m + 1, t + 1
        if m == 0 or t == 0:
            return 0.0
        log_p += math.log(m / t) / max_n
    bp = min(1.0, math.exp(1 - ref_len / hyp_len))
    return bp * math.exp(log_p)


def _f1(overlap, n_hyp, n_ref):
    if overlap == 0 or n_hyp == 0 or n_ref == 0:
        return 0.0
    p, r = overlap / n_hyp, overlap / n_ref
    return 2 * p * r / (p + r)


def rouge_n(hyp, ref, n: int) -> float:
    hyp, ref = _content(hyp), _content(ref)
    hc, rc = _ngrams(hyp, n), _ngrams(ref, n)
    if not hc and not rc:
        # both too short to hold an n-gram
        return 1.0 if hyp == ref and hyp else 0.0
    overlap = sum(min(c, rc[g]) for g, c in hc.items())
    return _f1(overlap, sum(hc.values()), sum(rc.values()))


def lcs_length(a, b) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l(hyp, ref) -> float:
    hyp, ref = _content(hyp), _content(ref)
    return _f1(lcs_length(hyp, ref), len(hyp), len(ref))


def evaluate(hyps, refs) -> EvalReport:
    _check_aligned(hyps, refs)
    n = len(refs)

    def mean(vals):
        vals = list(vals)
        return sum(vals) / len(vals) if vals else 0.0

    return EvalReport(
        token_accuracy=token_accuracy(hyps, refs),
        sequence_accuracy=sequence_accuracy(hyps, refs),
        bleu=bleu(hyps, refs) if n else 0.0,
        rouge1=mean(rouge_n(h, r, 1) for h, r in zip(hyps, refs)),
        rouge2=mean(rouge_n(h, r, 2) for h, r in zip(hyps, refs)),
        rougeL=mean(rouge_l(h, r) for h, r in zip(hyps, refs)),
        n_examples=n,
    )
