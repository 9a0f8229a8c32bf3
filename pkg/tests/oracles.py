"""Brute-force metric reimplementations used as independent test oracles.

Deliberately unoptimized and free of any imports from the package under
test: n-grams are enumerated positionally, vectors are materialized over
the union of all n-grams, and each formula term is spelled out.
"""
import math


def all_ngrams(tokens, n):
    out = []
    for i in range(len(tokens)):
        if i + n <= len(tokens):
            out.append(tuple(tokens[i:i + n]))
    return out


def count_of(ngram, tokens, n):
    return sum(1 for g in all_ngrams(tokens, n) if g == ngram)


def brute_bleu(candidate, references, n):
    if len(candidate) == 0:
        return 0.0
    precisions = []
    for order in range(1, n + 1):
        cand_grams = all_ngrams(candidate, order)
        if len(cand_grams) == 0:
            return 0.0
        matched = 0
        for ngram in set(cand_grams):
            cand_count = count_of(ngram, candidate, order)
            best_ref = 0
            for ref in references:
                best_ref = max(best_ref, count_of(ngram, ref, order))
            matched += min(cand_count, best_ref)
        precisions.append(matched / len(cand_grams))
    if any(p == 0.0 for p in precisions):
        return 0.0
    geo = 1.0
    for p in precisions:
        geo *= p
    geo = geo ** (1.0 / n)
    c = len(candidate)
    best = None
    for ref in references:
        r = len(ref)
        if best is None or abs(r - c) < abs(best - c) or (abs(r - c) == abs(best - c) and r < best):
            best = r
    bp = 1.0 if c > best else math.exp(1.0 - best / c)
    if c == best:
        bp = 1.0
    return bp * geo


def brute_document_frequency(reference_sets, ngram):
    docs = 0
    for refs in reference_sets:
        present = False
        for ref in refs:
            if ngram in all_ngrams(ref, len(ngram)):
                present = True
        if present:
            docs += 1
    return docs


def brute_cider_d(candidate, references, reference_sets, sigma=6.0):
    """CIDEr-D from the raw formula, document frequencies recounted each call."""
    num_docs = len(reference_sets)
    total = 0.0
    for n in range(1, 5):
        order_sum = 0.0
        for ref in references:
            union = set(all_ngrams(candidate, n)) | set(all_ngrams(ref, n))
            cand_vec = {}
            ref_vec = {}
            for ngram in union:
                df = brute_document_frequency(reference_sets, ngram)
                idf = math.log(num_docs / max(1.0, df))
                cand_vec[ngram] = count_of(ngram, candidate, n) * idf
                ref_vec[ngram] = count_of(ngram, ref, n) * idf
            dot = sum(min(cand_vec[g], ref_vec[g]) * ref_vec[g] for g in union)
            cnorm = math.sqrt(sum(v * v for v in cand_vec.values()))
            rnorm = math.sqrt(sum(v * v for v in ref_vec.values()))
            cosine = dot / (cnorm * rnorm) if cnorm > 0 and rnorm > 0 else 0.0
            delta = len(candidate) - len(ref)
            penalty = math.exp(-(delta ** 2) / (2.0 * sigma ** 2))
            order_sum += penalty * cosine
        total += order_sum / len(references)
    return 10.0 * total / 4.0
