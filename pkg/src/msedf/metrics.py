"""Caption metrics: BLEU-1..4, exact-match METEOR, ROUGE-L and CIDEr.

Token lists are plain lists of strings.  A "reference set" is a list of token
lists for one image.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import asdict, dataclass
from fractions import Fraction
from typing import Sequence

__all__ = [
    "ngrams",
    "bleu_stats",
    "bleu_n",
    "sentence_bleu",
    "lcs_length",
    "rouge_l",
    "corpus_rouge_l",
    "meteor_alignment",
    "meteor_lite",
    "cider",
    "comparison_score",
    "MetricReport",
    "corpus_evaluate",
]

Tokens = Sequence[str]

ROUGE_BETA = 1.2
METEOR_ALPHA = 0.9
METEOR_BETA = 3.0
METEOR_GAMMA = 0.5
CIDER_MAX_N = 4


def ngrams(tokens: Tokens, n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


# --------------------------------------------------------------------------
# BLEU
# --------------------------------------------------------------------------


def _closest_ref_len(c: int, refs: Sequence[Tokens]) -> int:
    return min((abs(len(r) - c), len(r)) for r in refs)[1]


def bleu_stats(candidates: Sequence[Tokens], references: Sequence[Sequence[Tokens]], n: int):
    """Corpus sufficient statistics: per-order (clipped matches, totals), c, r."""
    if not candidates:
        raise ValueError("BLEU needs at least one candidate")
    if len(candidates) != len(references):
        raise ValueError(f"{len(candidates)} candidates vs {len(references)} reference sets")
    matches = [0] * n
    totals = [0] * n
    c_len = r_len = 0
    for cand, refs in zip(candidates, references):
        if not refs:
            raise ValueError("empty reference set")
        c_len += len(cand)
        r_len += _closest_ref_len(len(cand), refs)
        for k in range(1, n + 1):
            counts = ngrams(cand, k)
            max_ref: Counter = Counter()
            for ref in refs:
                max_ref |= ngrams(ref, k)
            matches[k - 1] += sum(min(c, max_ref[g]) for g, c in counts.items())
            totals[k - 1] += max(0, len(cand) - k + 1)
    return matches, totals, c_len, r_len


def bleu_n(candidates: Sequence[Tokens], references: Sequence[Sequence[Tokens]], n: int = 4) -> float:
    """Corpus BLEU with uniform weights over orders 1..n and no smoothing."""
    if not 1 <= n <= 4:
        raise ValueError(f"BLEU order must be 1..4, got {n}")
    matches, totals, c, r = bleu_stats(candidates, references, n)
    if c == 0 or any(m == 0 for m in matches):
        return 0.0
    # exact rational product, one rounding, then the n-th root
    precision = float(math.prod(Fraction(m, t) for m, t in zip(matches, totals)))
    bp = 1.0 if c > r else math.exp(1.0 - r / c)
    return bp * precision ** (1.0 / n)


def sentence_bleu(candidate: Tokens, references: Sequence[Tokens], n: int = 4) -> float:
    return bleu_n([candidate], [references], n)


# --------------------------------------------------------------------------
# ROUGE-L
# --------------------------------------------------------------------------


def lcs_length(a: Tokens, b: Tokens) -> int:
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def _rouge_f(lcs: int, c: int, r: int, beta: float) -> float:
    if lcs == 0:
        return 0.0
    p, rec = lcs / c, lcs / r
    return (1 + beta**2) * p * rec / (rec + beta**2 * p)


def rouge_l(candidate: Tokens, references: Sequence[Tokens], beta: float = ROUGE_BETA) -> float:
    """Best LCS F-measure against any reference; empty inputs score 0."""
    refs = [r for r in references if r]
    if not candidate or not refs:
        return 0.0
    return max(_rouge_f(lcs_length(candidate, r), len(candidate), len(r), beta) for r in refs)


def corpus_rouge_l(candidates: Sequence[Tokens], references: Sequence[Sequence[Tokens]]) -> float:
    if not candidates:
        raise ValueError("ROUGE-L needs at least one candidate")
    if len(candidates) != len(references):
        raise ValueError(f"{len(candidates)} candidates vs {len(references)} reference sets")
    return sum(rouge_l(c, r) for c, r in zip(candidates, references)) / len(candidates)


# --------------------------------------------------------------------------
# METEOR (exact unigram matching only)
# --------------------------------------------------------------------------


def meteor_alignment(candidate: Tokens, reference: Tokens) -> tuple[int, int]:
    """(matches, chunks) for a maximum exact-match alignment with fewest chunks.

    The match count is fixed by per-token multiplicities; among those
    alignments a depth-first search maximises the number of candidate
    neighbours that stay neighbours in the reference (chunks = m - links).
    """
    ref_pos: dict[str, list[int]] = {}
    for j, t in enumerate(reference):
        ref_pos.setdefault(t, []).append(j)
    cand_counts = Counter(candidate)
    quota = {t: min(c, len(ref_pos.get(t, ()))) for t, c in cand_counts.items()}
    m = sum(quota.values())
    if m == 0:
        return 0, 0

    n = len(candidate)
    best = [-1]
    used: set[int] = set()
    remaining_cand = dict(cand_counts)

    def search(i: int, prev_j: int | None, links: int, left: dict[str, int]) -> None:
        if links + (n - i) <= best[0]:
            return
        if i == n:
            best[0] = max(best[0], links)
            return
        tok = candidate[i]
        remaining_cand[tok] -= 1
        need = left.get(tok, 0)
        if need > 0:
            # try the reference slot continuing the previous link first
            options = list(ref_pos[tok])
            if prev_j is not None and prev_j + 1 in options:
                options.remove(prev_j + 1)
                options.insert(0, prev_j + 1)
            for j in options:
                if j in used:
                    continue
                used.add(j)
                left[tok] = need - 1
                search(i + 1, j, links + (prev_j is not None and j == prev_j + 1), left)
                left[tok] = need
                used.discard(j)
        # leave this position unmatched only if later copies can still meet the quota
        if need <= remaining_cand[tok]:
            search(i + 1, None, links, left)
        remaining_cand[tok] += 1

    search(0, None, 0, dict(quota))
    return m, m - best[0]


def _meteor_single(candidate: Tokens, reference: Tokens) -> float:
    if not candidate or not reference:
        return 0.0
    m, chunks = meteor_alignment(candidate, reference)
    if m == 0:
        return 0.0
    p, r = m / len(candidate), m / len(reference)
    f_mean = p * r / (METEOR_ALPHA * p + (1 - METEOR_ALPHA) * r)
    penalty = METEOR_GAMMA * (chunks / m) ** METEOR_BETA
    return f_mean * (1 - penalty)


def meteor_lite(candidate: Tokens, references: Sequence[Tokens]) -> float:
    if not references:
        return 0.0
    return max(_meteor_single(candidate, ref) for ref in references)


# --------------------------------------------------------------------------
# CIDEr
# --------------------------------------------------------------------------


def _document_frequency(corpus_refs: Sequence[Sequence[Tokens]], n: int) -> Counter:
    df: Counter = Counter()
    for refs in corpus_refs:
        seen = set()
        for ref in refs:
            seen.update(ngrams(ref, n))
        df.update(seen)
    return df


def _tfidf(tokens: Tokens, n: int, df: Counter, log_n: float) -> dict:
    return {g: c * (log_n - math.log(max(1.0, df[g]))) for g, c in ngrams(tokens, n).items()}


def _cosine(u: dict, v: dict) -> float:
    nu = math.sqrt(sum(x * x for x in u.values()))
    nv = math.sqrt(sum(x * x for x in v.values()))
    if nu == 0.0 or nv == 0.0:
        return 0.0
    return sum(x * v.get(g, 0.0) for g, x in u.items()) / (nu * nv)


def cider(candidates: Sequence[Tokens], references: Sequence[Sequence[Tokens]],
          corpus_refs: Sequence[Sequence[Tokens]] | None = None) -> float:
    """Plain CIDEr (no length penalty, no clipping), averaged over images.

    Document frequencies count each image once and come from ``corpus_refs``
    (default: ``references``).  Unseen n-grams get df = 1.
    """
    if corpus_refs is None:
        corpus_refs = references
    if not candidates or not corpus_refs:
        raise ValueError("CIDEr needs a non-empty corpus")
    if len(candidates) != len(references):
        raise ValueError(f"{len(candidates)} candidates vs {len(references)} reference sets")
    log_n = math.log(len(corpus_refs))
    dfs = [_document_frequency(corpus_refs, n) for n in range(1, CIDER_MAX_N + 1)]
    total = 0.0
    for cand, refs in zip(candidates, references):
        per_n = []
        for n, df in enumerate(dfs, start=1):
            vc = _tfidf(cand, n, df, log_n)
            per_n.append(sum(_cosine(vc, _tfidf(r, n, df, log_n)) for r in refs) / len(refs))
        total += 10.0 * sum(per_n) / CIDER_MAX_N
    return total / len(candidates)


# --------------------------------------------------------------------------
# combined scores
# --------------------------------------------------------------------------


def comparison_score(candidate: Tokens, references: Sequence[Tokens]) -> float:
    """Mean of sentence BLEU-2, METEOR-lite and ROUGE-L, used to rerank beams."""
    if not candidate:
        return 0.0
    return (sentence_bleu(candidate, references, 2) + meteor_lite(candidate, references)
            + rouge_l(candidate, references)) / 3.0


@dataclass
class MetricReport:
    bleu1: float
    bleu2: float
    bleu3: float
    bleu4: float
    meteor: float
    rouge_l: float
    cider: float

    KEYS = ("bleu1", "bleu2", "bleu3", "bleu4", "meteor", "rouge_l", "cider")

    def to_dict(self) -> dict[str, float]:
        return asdict(self)


def corpus_evaluate(candidates: Sequence[Tokens], references: Sequence[Sequence[Tokens]]) -> MetricReport:
    """All seven metrics for one caption per image against its reference set."""
    if len(candidates) != len(references):
        raise ValueError(f"{len(candidates)} captions for {len(references)} images")
    return MetricReport(
        bleu1=bleu_n(candidates, references, 1),
        bleu2=bleu_n(candidates, references, 2),
        bleu3=bleu_n(candidates, references, 3),
        bleu4=bleu_n(candidates, references, 4),
        meteor=sum(meteor_lite(c, r) for c, r in zip(candidates, references)) / len(candidates),
        rouge_l=corpus_rouge_l(candidates, references),
        cider=cider(candidates, references),
    )
