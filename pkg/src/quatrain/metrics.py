"""Automatic metrics: corpus BLEU, selection overlap and innovation.

BLEU follows the classic corpus-level recipe: clipped modified n-gram
precision up to 4-grams with uniform weights and a corpus-level brevity
penalty, on the 0-100 scale. Tokens here are single characters.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass


class MetricError(ValueError):
    pass


@dataclass
class BleuReport:
    bleu: float                 # 0..100
    precisions: list[float]     # n = 1..4
    brevity_penalty: float
    hyp_length: int
    ref_length: int

    def to_dict(self) -> dict:
        return {"bleu": self.bleu, "precisions": self.precisions,
                "brevity_penalty": self.brevity_penalty,
                "hyp_length": self.hyp_length, "ref_length": self.ref_length}


def _ngrams(tokens, n):
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def corpus_bleu(hypotheses, references, max_n: int = 4) -> BleuReport:
    """Corpus BLEU over paired token sequences (one reference each).

    Any n-gram order with zero matches drives the score to 0; the
    per-order precisions are still reported.
    """
    if not hypotheses:
        raise MetricError("corpus_bleu: empty hypothesis set")
    if len(hypotheses) != len(references):
        raise MetricError(
            f"corpus_bleu: {len(hypotheses)} hypotheses vs "
            f"{len(references)} references")
    matches = [0] * max_n
    totals = [0] * max_n
    hyp_len = 0
    ref_len = 0
    for hyp, ref in zip(hypotheses, references):
        hyp = list(hyp)
        ref = list(ref)
        hyp_len += len(hyp)
        ref_len += len(ref)
        for n in range(1, max_n + 1):
            hyp_counts = _ngrams(hyp, n)
            if not hyp_counts:
                continue
            ref_counts = _ngrams(ref, n)
            totals[n - 1] += sum(hyp_counts.values())
            matches[n - 1] += sum(min(c, ref_counts[g])
                                  for g, c in hyp_counts.items())
    precisions = [m / t if t else 0.0 for m, t in zip(matches, totals)]
    if hyp_len == 0:
        raise MetricError("corpus_bleu: empty hypotheses")
    bp = 1.0 if hyp_len > ref_len else math.exp(1.0 - ref_len / hyp_len)
    if min(precisions) > 0.0:
        score = bp * math.exp(sum(math.log(p) for p in precisions) / max_n)
    else:
        score = 0.0
    return BleuReport(bleu=100.0 * score, precisions=precisions,
                      brevity_penalty=bp, hyp_length=hyp_len, ref_length=ref_len)


def jaccard(a, b) -> float:
    """|A n B| / |A u B|, with two empty sets agreeing perfectly."""
    a, b = set(a), set(b)
    if not a and not b:
        return 1.0
    return len(a & b) / len(a | b)


def saliency_jaccard(model_selections, gold_selections) -> float:
    """Mean per-line overlap between model- and human-selected index sets."""
    if len(model_selections) != len(gold_selections):
        raise MetricError(
            f"saliency_jaccard: {len(model_selections)} vs "
            f"{len(gold_selections)} lines")
    if not model_selections:
        raise MetricError("saliency_jaccard: no lines")
    return sum(jaccard(m, g) for m, g in
               zip(model_selections, gold_selections)) / len(model_selections)


def innovation(poems) -> float:
    """Mean pairwise Jaccard similarity of whole-poem character sets;
    lower means more varied output."""
    sets = [set("".join(p) if not isinstance(p, str) else p) for p in poems]
    if len(sets) < 2:
        raise MetricError("innovation needs at least 2 poems")
    total = 0.0
    pairs = 0
    for i in range(len(sets)):
        for j in range(i + 1, len(sets)):
            total += jaccard(sets[i], sets[j])
            pairs += 1
    return total / pairs
