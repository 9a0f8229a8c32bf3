"""Held-out evaluation of captioning systems.

A system under test is a forward captioner plus optional backward captioner
and matcher. Per scene it decodes candidates, optionally lets the matcher
pick among them, and aggregates BLEU, mean per-sentence consensus score,
the poor-quality fraction, and control compliance when an attribute is
under study.
"""
from __future__ import annotations

import csv
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import captioner as cap
from . import matcher as mat
from .corpus import ControlSignal, count_nouns, tag_tense
from .errors import ContractError
from .metrics import (EvalReport, bleu_n, cider_d, control_compliance,
                      poor_quality_fraction)

THREADS_ENV = "CAPCTL_THREADS"


@dataclass
class SystemUnderTest:
    forward: cap.CaptionerParams
    beta: ControlSignal
    backward: cap.CaptionerParams = None
    matcher_params: mat.MatcherParams = None
    matcher_config: mat.MatcherConfig = None
    decode: str = "greedy"
    beam_k: int = 1
    max_len: int = 16

    def __post_init__(self):
        if self.decode not in ("greedy", "beam"):
            raise ContractError(f"decode mode must be greedy|beam, got {self.decode!r}")
        if self.decode == "beam" and self.beam_k < 1:
            raise ContractError("beam decode needs beam_k >= 1")
        if self.matcher_params is not None and self.backward is None and self.beam_k <= 1:
            raise ContractError(
                "a matcher needs either a backward model or beam_k > 1 to choose from")
        if self.matcher_params is not None and self.matcher_config is None:
            self.matcher_config = mat.MatcherConfig()


def _decode_candidates(sut, record):
    """Candidate token lists and their source labels for one scene."""
    if sut.decode == "beam" and sut.beam_k > 1:
        beams = cap.beam_decode(sut.forward, record.features, sut.beta,
                                k=sut.beam_k, max_len=sut.max_len)
        return [(tokens, f"beam_{i}") for i, (tokens, _) in enumerate(beams)]
    candidates = [(cap.greedy_decode(sut.forward, record.features, sut.beta,
                                     max_len=sut.max_len), "fwd")]
    if sut.backward is not None:
        candidates.append((cap.greedy_decode(sut.backward, record.features, sut.beta,
                                             max_len=sut.max_len), "bwd"))
    return candidates


def _evaluate_scene(sut, record, idf, vocab):
    candidates = _decode_candidates(sut, record)
    if sut.matcher_params is not None and len(candidates) > 1:
        index, _ = mat.select_caption(record.features,
                                      [tokens for tokens, _ in candidates],
                                      sut.matcher_params, sut.matcher_config.tau)
    else:
        index = 0
    tokens, source = candidates[index]
    words = vocab.decode(tokens)
    refs = [c.words(vocab) for c in record.captions]
    if tokens:
        b1 = bleu_n(words, refs, 1)
        b4 = bleu_n(words, refs, 4)
    else:
        b1 = b4 = 0.0  # empty caption scores zero without the warning noise
    return {
        "scene_id": record.scene_id,
        "tokens": tokens,
        "words": words,
        "source": source,
        "cider": cider_d(words, refs, idf),
        "bleu1": b1,
        "bleu4": b4,
    }


def _observed(tokens, attribute, vocab):
    if attribute == "length":
        return len(tokens)
    if attribute == "tense":
        return tag_tense(tokens, vocab)
    if attribute == "nouns":
        return count_nouns(tokens, vocab)
    raise ContractError(f"attribute {attribute!r} has no exact-match observable")


def _worker_count():
    value = os.environ.get(THREADS_ENV, "1")
    try:
        return max(1, int(value))
    except ValueError:
        return 1


def eval_system(sut, records, idf, vocab, threshold=None, control_attribute=None,
                csv_path=None):
    """Evaluate a system over a split; returns (EvalReport, per-scene rows).

    threshold is the poor-quality cutoff on the native 0..10 scale; None
    calibrates it to the median of this run's own per-scene scores.
    """
    if not records:
        raise ContractError("eval_system needs a non-empty split")
    if sut.forward.vocab_size != len(vocab):
        raise ContractError(
            f"checkpoint vocabulary size {sut.forward.vocab_size} != {len(vocab)}")
    workers = _worker_count()
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(lambda r: _evaluate_scene(sut, r, idf, vocab), records))
    else:
        rows = [_evaluate_scene(sut, rec, idf, vocab) for rec in records]
    scores = [row["cider"] for row in rows]
    cutoff = float(np.median(scores)) if threshold is None else threshold
    compliance = {}
    if control_attribute is not None:
        requested = sut.beta.values[sut.beta.layout.index(control_attribute)]
        pairs = [(int(requested), _observed(row["tokens"], control_attribute, vocab))
                 for row in rows]
        compliance[control_attribute] = control_compliance(pairs)
    report = EvalReport(
        bleu1=float(np.mean([row["bleu1"] for row in rows])),
        bleu4=float(np.mean([row["bleu4"] for row in rows])),
        cider=float(np.mean(scores)),
        poor_quality_fraction=poor_quality_fraction(scores, cutoff),
        compliance=compliance,
    )
    if csv_path is not None:
        write_scene_csv(csv_path, rows)
    return report, rows


def write_scene_csv(path, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["scene_id", "caption", "cider", "selected_source"])
        for row in rows:
            writer.writerow([row["scene_id"], " ".join(row["words"]),
                             f"{row['cider']:.6f}", row["source"]])


def beta_sweep(forward, values, records, idf, vocab, attribute="quality",
               max_len=16, threshold=None):
    """One evaluation per control value, everything else held fixed."""
    out = []
    for value in values:
        sut = SystemUnderTest(
            forward=forward, max_len=max_len,
            beta=ControlSignal.for_attributes((attribute,), (value,)))
        report, _ = eval_system(sut, records, idf, vocab, threshold=threshold)
        out.append((value, report))
    return out


def control_study(forward, attribute, requested_values, records, idf, vocab,
                  max_len=16):
    """Decode the split at each requested value and measure exact compliance."""
    results = []
    for value in requested_values:
        beta = ControlSignal.for_attributes((attribute,), (value,))
        observed = []
        ciders = []
        for rec in records:
            tokens = cap.greedy_decode(forward, rec.features, beta, max_len=max_len)
            observed.append(_observed(tokens, attribute, vocab))
            refs = [c.words(vocab) for c in rec.captions]
            ciders.append(cider_d(vocab.decode(tokens), refs, idf))
        results.append({
            "requested": value,
            "compliance": control_compliance([(int(value), o) for o in observed]),
            "mean_observed": float(np.mean(observed)),
            "mean_cider": float(np.mean(ciders)),
        })
    return results
