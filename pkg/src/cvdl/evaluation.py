"""Checkpoint evaluation: attack success rate on triggered inputs plus
BLEU@4 and CIDEr caption quality on clean inputs.

BLEU is corpus-level with uniform quarter weights over orders 1-4, brevity
penalty, and add-one smoothing of zero-count precisions for orders >= 2
(a raw zero unigram precision yields a score of 0). CIDEr is the plain
variant: per-sample mean over orders of 10x clipped cosine similarity of
TF-IDF n-gram vectors, IDF taken from the clean reference corpus.
"""

from __future__ import annotations

import math
from collections import Counter, defaultdict
from dataclasses import dataclass

import numpy as np

from .attacks import is_attack_success
from .datagen import BOS, EOS, PAD, Dataset, Vocab
from .model import ModelParams, greedy_decode

CSV_HEADER = "model,attack,defense,b4,cider,asr,n"

NGRAM_ORDERS = (1, 2, 3, 4)


@dataclass(frozen=True)
class MetricsRow:
    model: str
    attack: str
    defense: str
    b4: float
    cider: float
    asr: float
    n: int

    def validate(self) -> None:
        if not all(map(math.isfinite, (self.b4, self.cider, self.asr))):
            raise ValueError("non-finite metric")
        if not 0.0 <= self.asr <= 100.0:
            raise ValueError("asr outside [0, 100]")

    def csv_line(self) -> str:
        # caption metrics reported x100 to one decimal, table style
        return (
            f"{self.model},{self.attack},{self.defense},"
            f"{100.0 * self.b4:.1f},{100.0 * self.cider:.1f},{self.asr:.1f},{self.n}"
        )


def strip_special(ids) -> tuple[int, ...]:
    return tuple(t for t in ids if t not in (PAD, BOS, EOS))


def _ngram_counts(seq, n: int) -> Counter:
    return Counter(tuple(seq[i : i + n]) for i in range(len(seq) - n + 1))


def asr(params: ModelParams, triggered_set: Dataset, vocab: Vocab, max_len: int = 16) -> float:
    """Percent of triggered samples whose decoded output contains "banana"."""
    if not triggered_set.samples:
        raise ValueError("empty triggered set")
    hits = 0
    for s in triggered_set.samples:
        out = greedy_decode(s.image, s.instruction, params, max_len=max_len)
        hits += int(is_attack_success(out, vocab))
    return 100.0 * hits / len(triggered_set.samples)


def bleu4(candidates, references) -> float:
    """Corpus BLEU with orders 1-4 on token-id sequences, one reference each."""
    if len(candidates) != len(references):
        raise ValueError("candidates and references must pair up")
    if not candidates:
        raise ValueError("empty corpus")
    matched = [0] * len(NGRAM_ORDERS)
    total = [0] * len(NGRAM_ORDERS)
    cand_len = 0
    ref_len = 0
    for cand, ref in zip(candidates, references):
        cand, ref = tuple(cand), tuple(ref)
        cand_len += len(cand)
        ref_len += len(ref)
        for k, n in enumerate(NGRAM_ORDERS):
            counts = _ngram_counts(cand, n)
            ref_counts = _ngram_counts(ref, n)
            total[k] += max(0, len(cand) - n + 1)
            matched[k] += sum(min(c, ref_counts[g]) for g, c in counts.items())
    log_prec = 0.0
    for k, n in enumerate(NGRAM_ORDERS):
        m, t = matched[k], total[k]
        if n >= 2 and m == 0:
            m, t = m + 1, t + 1  # add-one smoothing of zero counts
        if m == 0 or t == 0:
            return 0.0
        log_prec += math.log(m / t) / len(NGRAM_ORDERS)
    if cand_len == 0:
        return 0.0
    bp = 1.0 if cand_len > ref_len else math.exp(1.0 - ref_len / cand_len)
    return bp * math.exp(log_prec)


def cider(candidates, references, corpus) -> float:
    """Plain CIDEr over token-id sequences; corpus supplies document frequencies."""
    if len(candidates) != len(references):
        raise ValueError("candidates and references must pair up")
    if not candidates or not corpus:
        raise ValueError("empty corpus")
    n_docs = len(corpus)
    doc_freq = [defaultdict(int) for _ in NGRAM_ORDERS]
    for doc in corpus:
        for k, n in enumerate(NGRAM_ORDERS):
            for gram in set(_ngram_counts(tuple(doc), n)):
                doc_freq[k][gram] += 1

    def tfidf(seq, k, n):
        vec = {
            g: c * (math.log(n_docs) - math.log(max(1.0, doc_freq[k][g])))
            for g, c in _ngram_counts(tuple(seq), n).items()
        }
        norm = math.sqrt(sum(v * v for v in vec.values()))
        return vec, norm

    scores = []
    for cand, ref in zip(candidates, references):
        per_order = []
        for k, n in enumerate(NGRAM_ORDERS):
            cv, cn = tfidf(cand, k, n)
            rv, rn = tfidf(ref, k, n)
            if cn == 0.0 or rn == 0.0:
                per_order.append(0.0)
                continue
            # clip candidate counts at the reference counts
            dot = sum(min(v, rv[g]) * rv[g] for g, v in cv.items() if g in rv)
            per_order.append(dot / (cn * rn))
        scores.append(10.0 * sum(per_order) / len(per_order))
    return float(np.mean(scores))


def evaluate(
    params: ModelParams,
    clean_set: Dataset,
    triggered_set: Dataset,
    vocab: Vocab,
    model_tag: str = "model",
    attack: str = "none",
    defense: str = "off",
    max_len: int = 16,
) -> MetricsRow:
    """One metrics row: caption quality on clean data, ASR on triggered data."""
    if not clean_set.samples or not triggered_set.samples:
        raise ValueError("evaluation sets must be non-empty")
    references = [strip_special(s.target) for s in clean_set.samples]
    candidates = [
        greedy_decode(s.image, s.instruction, params, max_len=max_len)
        for s in clean_set.samples
    ]
    row = MetricsRow(
        model=model_tag,
        attack=attack,
        defense=defense,
        b4=bleu4(candidates, references),
        cider=cider(candidates, references, references),
        asr=asr(params, triggered_set, vocab, max_len=max_len),
        n=len(clean_set.samples),
    )
    row.validate()
    return row
