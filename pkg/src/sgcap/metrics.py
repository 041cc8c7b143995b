"""Corpus captioning metrics: CIDEr-D, BLEU-N, and per-POS word recall.

Tokenization is fixed here because every score depends on it: lowercase,
split on whitespace, strip terminal punctuation from each token.

CIDEr-D follows the consensus-metric convention: per n-gram order 1..4,
TF-IDF vectors with IDF = log(corpus size / max(1, document frequency)),
candidate counts clipped to the reference count, cosine similarity, a
Gaussian length penalty exp(-(lc - lr)^2 / (2 * 6^2)), averaged over
orders and references, scaled by 10.
"""

from __future__ import annotations

import math
from collections import Counter, defaultdict
from dataclasses import dataclass
from typing import Iterable, Sequence

_TERMINAL_PUNCT = ".,!?;:"

NGRAM_MAX = 4
CIDER_SIGMA = 6.0

POS_CLASSES = {
    "nouns": "NOUN",
    "adjectives": "ADJ",
    "verbs": "VERB",
    "prepositions": "PREP",
}


def tokenize(text: str) -> list[str]:
    """Lowercase whitespace tokens with terminal punctuation stripped."""
    out = []
    for tok in text.lower().split():
        tok = tok.rstrip(_TERMINAL_PUNCT)
        if tok:
            out.append(tok)
    return out


def ngram_counts(tokens: Sequence[str], n_max: int = NGRAM_MAX) -> Counter:
    counts: Counter = Counter()
    for n in range(1, n_max + 1):
        for i in range(len(tokens) - n + 1):
            counts[tuple(tokens[i:i + n])] += 1
    return counts


@dataclass
class Corpus:
    """Candidate/reference pairs plus reference document frequencies."""

    items: list[tuple[str, list[str]]]

    def __post_init__(self):
        for i, (_cand, refs) in enumerate(self.items):
            if not refs:
                raise ValueError(f"corpus item {i} has no references")
        self._df: dict[tuple, int] = defaultdict(int)
        for _cand, refs in self.items:
            seen = set()
            for ref in refs:
                seen.update(ngram_counts(tokenize(ref)))
            for gram in seen:
                self._df[gram] += 1

    def __len__(self) -> int:
        return len(self.items)

    @property
    def document_frequency(self) -> dict[tuple, int]:
        return dict(self._df)


class CiderD:
    """CIDEr-D scorer with document frequencies fixed at fit time.

    The training loop fits this once on the training references and then
    scores individual sampled/greedy captions against their references.
    """

    def __init__(self, n_max: int = NGRAM_MAX, sigma: float = CIDER_SIGMA):
        self.n_max = n_max
        self.sigma = sigma
        self._df: dict[tuple, int] | None = None
        self._log_size: float | None = None

    def fit(self, reference_lists: Iterable[Sequence[str]]) -> "CiderD":
        """Collect n-gram document frequencies from reference sets."""
        df: dict[tuple, int] = defaultdict(int)
        size = 0
        for refs in reference_lists:
            size += 1
            seen = set()
            for ref in refs:
                seen.update(ngram_counts(tokenize(ref), self.n_max))
            for gram in seen:
                df[gram] += 1
        if size < 2:
            raise ValueError("CIDEr-D needs at least 2 items to fit document frequencies")
        self._df = df
        self._log_size = math.log(size)
        return self

    @property
    def fitted(self) -> bool:
        return self._df is not None

    def score(self, candidate: str, references: Sequence[str]) -> float:
        """Score one candidate against its references (0..10 scale).

        An empty candidate scores 0 (useful as a sampled-caption reward).
        """
        if not self.fitted:
            raise ValueError("scorer not fitted")
        cand_tokens = tokenize(candidate)
        if not cand_tokens:
            return 0.0
        cand_vec, cand_norm, cand_len = self._tfidf(cand_tokens)
        total = 0.0
        for ref in references:
            ref_tokens = tokenize(ref)
            ref_vec, ref_norm, ref_len = self._tfidf(ref_tokens)
            total += self._similarity(cand_vec, cand_norm, cand_len, ref_vec, ref_norm, ref_len)
        return total / (self.n_max * len(references)) * 10.0

    def _tfidf(self, tokens):
        """Per-order TF-IDF vectors, their norms, and the token length."""
        vecs = [dict() for _ in range(self.n_max)]
        norms = [0.0] * self.n_max
        for gram, count in ngram_counts(tokens, self.n_max).items():
            idf = self._log_size - math.log(max(1.0, self._df.get(gram, 0)))
            order = len(gram) - 1
            w = count * idf
            vecs[order][gram] = w
            norms[order] += w * w
        return vecs, [math.sqrt(v) for v in norms], len(tokens)

    def _similarity(self, cv, cn, cl, rv, rn, rl):
        """Sum over orders of clipped cosine similarity with length penalty."""
        penalty = math.exp(-((cl - rl) ** 2) / (2.0 * self.sigma ** 2))
        total = 0.0
        for order in range(self.n_max):
            num = 0.0
            for gram, w in cv[order].items():
                rw = rv[order].get(gram)
                if rw is not None:
                    num += min(w, rw) * rw
            if cn[order] > 0 and rn[order] > 0:
                total += num / (cn[order] * rn[order]) * penalty
        return total


def cider_d(corpus: Corpus, n_max: int = NGRAM_MAX, sigma: float = CIDER_SIGMA) -> tuple[list[float], float]:
    """Per-item CIDEr-D scores and their mean over the corpus."""
    if len(corpus) < 2:
        raise ValueError("CIDEr-D needs a corpus of at least 2 items")
    for i, (cand, _refs) in enumerate(corpus.items):
        if not tokenize(cand):
            raise ValueError(f"corpus item {i} has an empty candidate")
    scorer = CiderD(n_max, sigma)
    scorer._df = corpus.document_frequency
    scorer._log_size = math.log(len(corpus))
    scores = [scorer.score(cand, refs) for cand, refs in corpus.items]
    return scores, sum(scores) / len(scores)


def bleu(corpus: Corpus, n: int = 4) -> float:
    """Corpus-level BLEU-n with clipped precision and brevity penalty.

    Reference length uses the closest-length convention.  Any n-gram
    order with zero matches yields a score of exactly 0 (no smoothing).
    """
    if not 1 <= n <= NGRAM_MAX:
        raise ValueError("bleu order must be in 1..4")
    matched = [0] * n
    attempted = [0] * n
    cand_total = 0
    ref_total = 0
    for cand, refs in corpus.items:
        cand_tokens = tokenize(cand)
        ref_token_lists = [tokenize(r) for r in refs]
        c = len(cand_tokens)
        cand_total += c
        ref_total += min((abs(len(r) - c), len(r)) for r in ref_token_lists)[1]
        max_ref: Counter = Counter()
        for ref_tokens in ref_token_lists:
            for gram, count in ngram_counts(ref_tokens, n).items():
                if count > max_ref[gram]:
                    max_ref[gram] = count
        cand_counts = ngram_counts(cand_tokens, n)
        for gram, count in cand_counts.items():
            order = len(gram) - 1
            attempted[order] += count
            matched[order] += min(count, max_ref.get(gram, 0))
    log_precision = 0.0
    for order in range(n):
        if matched[order] == 0 or attempted[order] == 0:
            return 0.0
        log_precision += math.log(matched[order] / attempted[order])
    score = math.exp(log_precision / n)
    if cand_total < ref_total:
        score *= math.exp(1.0 - ref_total / max(1, cand_total))
    return score


def pos_recall(
    candidates: Sequence[str],
    tagged_references: Sequence[tuple[str, Sequence[str]]],
    classes: dict[str, str] | None = None,
) -> dict[str, float]:
    """Fraction of tagged reference words that appear in the candidate.

    tagged_references pairs each reference caption with per-word POS
    tags.  Counting is per occurrence and micro-averaged over the
    corpus; classes maps report keys to tag names.
    """
    classes = classes or POS_CLASSES
    if len(candidates) != len(tagged_references):
        raise ValueError("candidates and references must align")
    hit = {key: 0 for key in classes}
    total = {key: 0 for key in classes}
    inverse = {tag: key for key, tag in classes.items()}
    for cand, (ref, tags) in zip(candidates, tagged_references):
        cand_words = set(tokenize(cand))
        ref_words = tokenize(ref)
        if len(ref_words) != len(tags):
            raise ValueError("reference tags misaligned with reference words")
        for word, tag in zip(ref_words, tags):
            key = inverse.get(tag)
            if key is None:
                continue
            total[key] += 1
            if word in cand_words:
                hit[key] += 1
    return {key: (hit[key] / total[key]) if total[key] else 0.0 for key in classes}
