"""Text preprocessing, corpus BLEU, WER and speech-length compliance."""

from __future__ import annotations

import math
import unicodedata
from collections import Counter
from fractions import Fraction
from typing import Callable, Sequence

from .errors import InputError

NGRAM_ORDER = 4
CHARACTER_LANGUAGES = frozenset({"zh", "ja", "yue"})
APOSTROPHES = frozenset("'’")


def identity(text: str) -> str:
    return text


def _is_punct(ch: str) -> bool:
    return unicodedata.category(ch).startswith("P")


def preprocess(lang: str, text: str, normalizer: Callable[[str], str] = identity) -> list[str]:
    """Scoring units of ``text``.

    Word languages are lowercased, stripped of punctuation other than
    apostrophes, and split on whitespace. Character languages are stripped of
    punctuation and whitespace and split into single characters.
    """
    text = normalizer(text)
    if lang in CHARACTER_LANGUAGES:
        return [ch for ch in text if not _is_punct(ch) and not ch.isspace()]
    text = text.lower()
    text = "".join(" " if _is_punct(ch) and ch not in APOSTROPHES else ch for ch in text)
    return text.split()


def _langs(lang, n: int) -> list[str]:
    if isinstance(lang, str):
        return [lang] * n
    lang = list(lang)
    if len(lang) != n:
        raise InputError("language list length does not match corpus size")
    return lang


def ngram_counts(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def bleu_statistics(hyp_units: Sequence[Sequence[str]], ref_units: Sequence[Sequence[str]]):
    """Corpus-level clipped n-gram matches, totals and lengths."""
    matches = [0] * NGRAM_ORDER
    totals = [0] * NGRAM_ORDER
    hyp_len = ref_len = 0
    for hyp, ref in zip(hyp_units, ref_units):
        hyp_len += len(hyp)
        ref_len += len(ref)
        for n in range(1, NGRAM_ORDER + 1):
            h, r = ngram_counts(hyp, n), ngram_counts(ref, n)
            matches[n - 1] += sum(min(c, r[g]) for g, c in h.items())
            totals[n - 1] += max(len(hyp) - n + 1, 0)
    return matches, totals, hyp_len, ref_len


def bleu_from_statistics(matches, totals, hyp_len: int, ref_len: int) -> float:
    # No smoothing: any zero precision gives a zero score.
    if hyp_len == 0 or any(m == 0 for m in matches) or any(t == 0 for t in totals):
        return 0.0
    log_precision = sum(math.log(m / t) for m, t in zip(matches, totals)) / NGRAM_ORDER
    bp = 1.0 if hyp_len >= ref_len else math.exp(1 - ref_len / hyp_len)
    return 100.0 * bp * math.exp(log_precision)


def corpus_bleu(hypotheses: Sequence[str], references: Sequence[str], lang, normalizer=identity) -> float:
    """Corpus BLEU in [0, 100] with one reference per hypothesis.

    ``lang`` is one language for the whole corpus or one per sentence.
    """
    if len(hypotheses) != len(references):
        raise InputError(f"{len(hypotheses)} hypotheses vs {len(references)} references")
    if not hypotheses:
        raise InputError("empty corpus")
    langs = _langs(lang, len(hypotheses))
    hyp_units = [preprocess(l, h, normalizer) for l, h in zip(langs, hypotheses)]
    ref_units = [preprocess(l, r, normalizer) for l, r in zip(langs, references)]
    return bleu_from_statistics(*bleu_statistics(hyp_units, ref_units))


def edit_distance(a: Sequence, b: Sequence) -> int:
    """Levenshtein distance with unit insert/delete/substitute costs."""
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, x in enumerate(a, 1):
        cur = [i]
        for j, y in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (x != y)))
        prev = cur
    return prev[-1]


def wer(hypothesis: str, reference: str, lang: str, normalizer=identity) -> float:
    ref = preprocess(lang, reference, normalizer)
    if not ref:
        raise InputError("empty reference")
    return edit_distance(preprocess(lang, hypothesis, normalizer), ref) / len(ref)


def _exact(x) -> Fraction:
    if isinstance(x, (Fraction, int)):
        return Fraction(x)
    return Fraction(x).limit_denominator(10**9)


def slc(src_durations: Sequence, tgt_durations: Sequence, tolerance: float) -> float:
    """Fraction of pairs whose target/source duration ratio lies in [1-tol, 1+tol]."""
    if len(src_durations) != len(tgt_durations):
        raise InputError("duration lists differ in length")
    if not src_durations:
        raise InputError("no duration pairs")
    tol = _exact(tolerance)
    lo, hi = 1 - tol, 1 + tol
    inside = 0
    for s, t in zip(src_durations, tgt_durations):
        s, t = _exact(s), _exact(t)
        if s <= 0 or t <= 0:
            raise InputError("durations must be positive")
        inside += lo <= t / s <= hi
    return inside / len(src_durations)
