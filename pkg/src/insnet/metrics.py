"""Evaluation metrics: corpus BLEU, keyword incorporation, attribute accuracy."""

from __future__ import annotations

import math
from collections import Counter
from typing import Sequence

from .datagen import extract_attributes


class MetricError(ValueError):
    pass


def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def _tok(x) -> list[str]:
    return x.split() if isinstance(x, str) else list(x)


def corpus_bleu(hypotheses: Sequence, references: Sequence, max_n: int = 4) -> float:
    """Corpus BLEU-``max_n`` on a 0..100 scale.

    ``references[i]`` is one reference (a string or a sequence of ids) or a
    list of references for hypothesis ``i``. A list of strings is always a
    reference set, so word-token references must be passed joined. Uses uniform weights over 1..max_n, clipped n-gram
    counts and the standard brevity penalty with the closest reference length.
    """
    if not references or len(references) != len(hypotheses):
        raise MetricError("BLEU needs one non-empty reference set per hypothesis")
    matches = [0] * max_n
    totals = [0] * max_n
    hyp_len = ref_len = 0
    for hyp, refs in zip(hypotheses, references):
        hyp = _tok(hyp)
        if isinstance(refs, str) or (refs and not isinstance(refs[0], (list, tuple, str))):
            refs = [refs]
        refs = [_tok(r) for r in refs]
        if not refs:
            raise MetricError("empty reference set")
        hyp_len += len(hyp)
        ref_len += min((abs(len(r) - len(hyp)), len(r)) for r in refs)[1]
        for n in range(1, max_n + 1):
            counts = _ngrams(hyp, n)
            best: Counter = Counter()
            for r in refs:
                best |= _ngrams(r, n)
            matches[n - 1] += sum(min(c, best[g]) for g, c in counts.items())
            totals[n - 1] += max(len(hyp) - n + 1, 0)
    if hyp_len == 0 or min(matches) == 0:
        return 0.0
    log_p = sum(math.log(m / t) for m, t in zip(matches, totals)) / max_n
    bp = 1.0 if hyp_len > ref_len else math.exp(1.0 - ref_len / hyp_len)
    return 100.0 * bp * math.exp(log_p)


def contains_in_order(tokens: Sequence, keywords: Sequence) -> bool:
    it = iter(tokens)
    return all(any(t == k for t in it) for k in keywords)


def incorporation_rate(decodes: Sequence[Sequence], keyword_sets: Sequence[Sequence]) -> float:
    """Percentage of decodes containing all their keywords as an in-order subsequence."""
    if not decodes:
        raise MetricError("no decodes to score")
    hits = sum(contains_in_order(d, k) for d, k in zip(decodes, keyword_sets, strict=True))
    return 100.0 * hits / len(decodes)


def attribute_accuracy(captions: Sequence, truths: Sequence[tuple[str, str]]) -> dict[str, float]:
    """Color, shape and joint accuracy (percent) of generated captions."""
    if not truths:
        raise MetricError("no reference attributes")
    color = shape = joint = 0
    for cap, (c_true, s_true) in zip(captions, truths, strict=True):
        c, s = extract_attributes(cap)
        color += c == c_true
        shape += s == s_true
        joint += c == c_true and s == s_true
    n = len(truths)
    return {"color_acc": 100.0 * color / n, "shape_acc": 100.0 * shape / n, "joint_acc": 100.0 * joint / n}
