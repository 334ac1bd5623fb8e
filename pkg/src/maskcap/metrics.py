"""Caption quality and diversity measures.

Quality: corpus BLEU-4 (clipped counts, closest-reference brevity penalty,
uniform 1..4-gram weights), ROUGE-L (LCS F-measure with beta = 1.2, best
reference per sample, corpus mean), CIDEr (TF-IDF n-gram cosine, n = 1..4
averaged, x10, IDF computed from this corpus's references, so scores are
comparable only within a run).

Diversity: vocabulary size (distinct tokens over generated captions), novel
captions (percent of generated captions absent from the training caption
set, exact token-sequence match), and per-position unique n-gram counts
(for the positional uniqueness curves).

All operations take tokenized captions (lists of token strings) produced by
the same pipeline as training data; no stemming or re-tokenization happens
here.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field

from .errors import DomainError

ROUGE_BETA = 1.2

# Full-scale diversity numbers reported for the two model variants (context
# for the directional desk-scale checks; not reproducible here).
DIVERSITY_REFERENCE = {
    "base_vocab_size": 443,
    "interpret_vocab_size": 862,
    "base_novel_captions": 36.23,
    "interpret_novel_captions": 51.54,
}


@dataclass
class CorpusPair:
    """Aligned generated/reference captions, plus the training corpus."""

    generated: list
    references: list
    training_captions: list = field(default_factory=list)

    def __post_init__(self):
        if len(self.generated) != len(self.references):
            raise DomainError(f"{len(self.generated)} candidates vs "
                              f"{len(self.references)} reference groups")
        for i, refs in enumerate(self.references):
            if not refs:
                raise DomainError(f"sample {i} has no references")

    def __len__(self):
        return len(self.generated)


def _ngrams(tokens, n):
    return [tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1)]


def bleu4(corpus):
    """Corpus-level BLEU-4 in [0, 1]; zero when any n-gram order has no match."""
    if len(corpus) == 0:
        raise DomainError("bleu4 needs a non-empty corpus")
    correct = [0] * 4
    guess = [0] * 4
    cand_len = 0
    ref_len = 0
    for cand, refs in zip(corpus.generated, corpus.references):
        cand_len += len(cand)
        # closest reference length; ties toward the shorter reference
        ref_len += min((abs(len(r) - len(cand)), len(r)) for r in refs)[1]
        for n in range(1, 5):
            counts = Counter(_ngrams(cand, n))
            max_ref = Counter()
            for ref in refs:
                for gram, k in Counter(_ngrams(ref, n)).items():
                    max_ref[gram] = max(max_ref[gram], k)
            guess[n - 1] += max(0, len(cand) - n + 1)
            correct[n - 1] += sum(min(k, max_ref[gram]) for gram, k in counts.items())
    if any(g == 0 for g in guess) or any(c == 0 for c in correct):
        return 0.0
    log_precision = sum(0.25 * math.log(c / g) for c, g in zip(correct, guess))
    if cand_len == 0:
        return 0.0
    bp = 1.0 if cand_len > ref_len else math.exp(1.0 - ref_len / cand_len)
    return bp * math.exp(log_precision)


def _lcs_length(a, b):
    table = [[0] * (len(b) + 1) for _ in range(len(a) + 1)]
    for i in range(1, len(a) + 1):
        for j in range(1, len(b) + 1):
            if a[i - 1] == b[j - 1]:
                table[i][j] = table[i - 1][j - 1] + 1
            else:
                table[i][j] = max(table[i - 1][j], table[i][j - 1])
    return table[len(a)][len(b)]


def rouge_l(corpus):
    """Mean over samples of the best per-reference LCS F-measure."""
    if len(corpus) == 0:
        raise DomainError("rouge_l needs a non-empty corpus")
    beta2 = ROUGE_BETA ** 2
    total = 0.0
    for cand, refs in zip(corpus.generated, corpus.references):
        best = 0.0
        for ref in refs:
            if not cand or not ref:
                continue
            lcs = _lcs_length(cand, ref)
            if lcs == 0:
                continue
            p = lcs / len(cand)
            r = lcs / len(ref)
            best = max(best, (1 + beta2) * p * r / (r + beta2 * p))
        total += best
    return total / len(corpus)


def cider(corpus, max_n=4):
    """TF-IDF n-gram cosine consensus score, averaged over n, x10.

    IDF comes from this corpus's reference sets (document = one sample's
    references), so a single-sample corpus is rejected as degenerate.
    """
    if len(corpus) < 2:
        raise DomainError("cider needs >= 2 samples to define IDF")
    doc_freq = [Counter() for _ in range(max_n)]
    for refs in corpus.references:
        for n in range(1, max_n + 1):
            seen = set()
            for ref in refs:
                seen.update(_ngrams(ref, n))
            for gram in seen:
                doc_freq[n - 1][gram] += 1
    log_docs = math.log(len(corpus))

    def tfidf(tokens, n):
        vec = {}
        for gram, tf in Counter(_ngrams(tokens, n)).items():
            idf = log_docs - math.log(max(1.0, doc_freq[n - 1][gram]))
            vec[gram] = tf * idf
        norm = math.sqrt(sum(w * w for w in vec.values()))
        return vec, norm

    total = 0.0
    for cand, refs in zip(corpus.generated, corpus.references):
        score_n = [0.0] * max_n
        for n in range(1, max_n + 1):
            cv, cnorm = tfidf(cand, n)
            for ref in refs:
                rv, rnorm = tfidf(ref, n)
                if cnorm == 0.0 or rnorm == 0.0:
                    continue
                dot = sum(w * rv[gram] for gram, w in cv.items() if gram in rv)
                score_n[n - 1] += dot / (cnorm * rnorm)
        total += 10.0 * sum(score_n) / max_n / len(refs)
    return total / len(corpus)


def vocab_size(captions):
    """Count of distinct tokens across the given captions."""
    return len({tok for cap in captions for tok in cap})


def novel_captions(generated, training_set):
    """Percent of generated captions not appearing verbatim in training."""
    if not generated:
        return 0.0
    seen = {tuple(cap) for cap in training_set}
    novel = sum(1 for cap in generated if tuple(cap) not in seen)
    return 100.0 * novel / len(generated)


def positional_ngrams(captions, n):
    """Distinct n-grams starting at each word position, over all captions."""
    if n not in (1, 2):
        raise DomainError(f"positional n-gram order must be 1 or 2, got {n}")
    per_position = []
    max_start = max((len(c) - n + 1 for c in captions), default=0)
    for pos in range(max_start):
        grams = {tuple(cap[pos:pos + n]) for cap in captions if len(cap) - n >= pos}
        per_position.append(len(grams))
    return per_position


def write_metrics_csv(path, values):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("metric,value\n")
        for name, value in values.items():
            fh.write(f"{name},{value!r}\n")


def write_ngram_curve_csv(path, series):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("position,unique_count\n")
        for pos, count in enumerate(series):
            fh.write(f"{pos},{count}\n")
