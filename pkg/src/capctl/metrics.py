"""Caption quality metrics: BLEU-n, per-sentence CIDEr-D, and report aggregates.

All functions take token sequences (any hashable token type; the pipeline
uses word strings) and are pure. CIDEr-D follows the consensus formulation:
idf-weighted n-gram vectors for n = 1..4, candidate counts clipped to the
reference, a Gaussian length penalty, and a final x10 scaling, so scores
live on the native 0..10 per-sentence scale. Reports that mirror the usual
x100 presentation multiply at the printing layer only.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

from .errors import ContractError

MAX_NGRAM = 4
CIDER_SIGMA = 6.0
PAPER_SCALE = 100.0  # presentation scale for CIDEr-style reporting


def ngram_counts(tokens, n):
    counts = {}
    for i in range(len(tokens) - n + 1):
        key = tuple(tokens[i:i + n])
        counts[key] = counts.get(key, 0) + 1
    return counts


@dataclass
class IdfStats:
    """Document frequencies over reference sets; one document per scene."""

    num_docs: int
    df: dict = field(default_factory=dict)  # ngram tuple -> doc count
    max_n: int = MAX_NGRAM

    @classmethod
    def from_reference_sets(cls, reference_sets, max_n=MAX_NGRAM):
        df = {}
        for refs in reference_sets:
            seen = set()
            for ref in refs:
                for n in range(1, max_n + 1):
                    seen.update(ngram_counts(ref, n))
            for ng in seen:
                df[ng] = df.get(ng, 0) + 1
        return cls(num_docs=len(reference_sets), df=df, max_n=max_n)

    def weight(self, ngram):
        # unseen n-grams fall back to df = 1 (maximum idf)
        return math.log(self.num_docs / max(1.0, self.df.get(ngram, 0)))

    def to_json_dict(self):
        return {
            "num_docs": self.num_docs,
            "df": {" ".join(str(t) for t in ng): c for ng, c in self.df.items()},
        }

    @classmethod
    def from_json_dict(cls, payload):
        df = {tuple(key.split(" ")): int(c) for key, c in payload["df"].items()}
        return cls(num_docs=int(payload["num_docs"]), df=df)


def length_penalty(len_candidate, len_reference, sigma=CIDER_SIGMA):
    delta = float(len_candidate - len_reference)
    return math.exp(-(delta * delta) / (2.0 * sigma * sigma))


def _tfidf_vectors(tokens, idf):
    vecs = []
    norms = []
    for n in range(1, idf.max_n + 1):
        vec = {ng: c * idf.weight(ng) for ng, c in ngram_counts(tokens, n).items()}
        vecs.append(vec)
        norms.append(math.sqrt(sum(w * w for w in vec.values())))
    return vecs, norms


def cider_d(candidate, references, idf, sigma=CIDER_SIGMA):
    """Per-sentence CIDEr-D of candidate against its reference set, in [0, 10]."""
    if not references:
        raise ContractError("cider_d needs at least one reference")
    cand_vecs, cand_norms = _tfidf_vectors(candidate, idf)
    per_order = [0.0] * idf.max_n
    for ref in references:
        ref_vecs, ref_norms = _tfidf_vectors(ref, idf)
        penalty = length_penalty(len(candidate), len(ref), sigma)
        for n in range(idf.max_n):
            num = 0.0
            rv = ref_vecs[n]
            for ng, cw in cand_vecs[n].items():
                rw = rv.get(ng)
                if rw is not None:
                    num += min(cw, rw) * rw
            den = cand_norms[n] * ref_norms[n]
            if den > 0:
                per_order[n] += penalty * num / den
    n_refs = len(references)
    return 10.0 * sum(v / n_refs for v in per_order) / idf.max_n


def bleu_n(candidate, references, n):
    """Sentence BLEU with clipped precisions for orders 1..n and brevity penalty."""
    if n not in (1, 2, 3, 4):
        raise ContractError(f"bleu order must be 1..4, got {n}")
    if not references:
        raise ContractError("bleu_n needs at least one reference")
    if len(candidate) == 0:
        warnings.warn("bleu_n of an empty candidate is 0", stacklevel=2)
        return 0.0
    log_sum = 0.0
    for order in range(1, n + 1):
        counts = ngram_counts(candidate, order)
        total = sum(counts.values())
        if total == 0:
            return 0.0
        clipped = 0
        for ng, c in counts.items():
            best = max(ngram_counts(ref, order).get(ng, 0) for ref in references)
            clipped += min(c, best)
        if clipped == 0:
            return 0.0
        log_sum += math.log(clipped / total)
    c_len = len(candidate)
    r_len = min((len(ref) for ref in references),
                key=lambda r: (abs(r - c_len), r))
    brevity = math.exp(min(0.0, 1.0 - r_len / c_len))
    return brevity * math.exp(log_sum / n)


def poor_quality_fraction(scores, threshold):
    """Share of scores strictly below the threshold."""
    if len(scores) == 0:
        raise ContractError("poor_quality_fraction of an empty score list")
    return sum(1 for s in scores if s < threshold) / len(scores)


def control_compliance(pairs):
    """Fraction of (requested, observed) attribute pairs that match exactly."""
    pairs = list(pairs)
    if not pairs:
        raise ContractError("control_compliance of an empty pair list")
    return sum(1 for want, got in pairs if want == got) / len(pairs)


@dataclass
class EvalReport:
    bleu1: float
    bleu4: float
    cider: float
    poor_quality_fraction: float
    compliance: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("bleu1", "bleu4", "poor_quality_fraction"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ContractError(f"{name}={v} outside [0, 1]")
        if self.cider < 0.0:
            raise ContractError(f"cider={self.cider} negative")
        for attr, frac in self.compliance.items():
            if not 0.0 <= frac <= 1.0:
                raise ContractError(f"compliance[{attr}]={frac} outside [0, 1]")

    def to_json_dict(self):
        return {
            "bleu1": self.bleu1,
            "bleu4": self.bleu4,
            "cider": self.cider,
            "poor_quality_fraction": self.poor_quality_fraction,
            "compliance": dict(self.compliance),
        }

    @classmethod
    def from_json_dict(cls, payload):
        return cls(
            bleu1=payload["bleu1"],
            bleu4=payload["bleu4"],
            cider=payload["cider"],
            poor_quality_fraction=payload["poor_quality_fraction"],
            compliance=dict(payload.get("compliance", {})),
        )
