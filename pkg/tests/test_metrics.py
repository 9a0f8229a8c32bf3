import math

import numpy as np
import pytest

from capctl.errors import ContractError
from capctl.metrics import (EvalReport, IdfStats, bleu_n, cider_d,
                            control_compliance, length_penalty, ngram_counts,
                            poor_quality_fraction)

from oracles import brute_bleu, brute_cider_d

WORDS = ["a", "b", "c", "d", "e", "f", "g", "h"]


def random_corpus(rng, n_docs=4, refs_per_doc=3, max_len=8):
    corpus = []
    for _ in range(n_docs):
        refs = []
        for _ in range(refs_per_doc):
            length = int(rng.integers(1, max_len + 1))
            refs.append([WORDS[i] for i in rng.integers(0, len(WORDS), size=length)])
        corpus.append(refs)
    return corpus


class TestBleu:
    def test_identity(self):
        assert bleu_n(list("abcd"), [list("abcd")], 4) == pytest.approx(1.0)

    def test_hand_counted_unigram(self):
        # c = r = 3, brevity penalty 1, clipped matches 2 of 3
        assert bleu_n(["a", "b", "c"], [["a", "b", "d"]], 1) == pytest.approx(2.0 / 3.0)

    def test_disjoint_tokens(self):
        assert bleu_n(["a", "b"], [["c", "d"]], 1) == 0.0

    def test_empty_candidate_warns_and_returns_zero(self):
        with pytest.warns(UserWarning):
            assert bleu_n([], [["a"]], 1) == 0.0

    def test_bad_order_rejected(self):
        with pytest.raises(ContractError):
            bleu_n(["a"], [["a"]], 5)

    def test_permutation_invariant_over_references(self):
        cand = ["a", "b", "c", "a"]
        refs = [["a", "b"], ["b", "c", "a"], ["a", "a", "c"]]
        forward = bleu_n(cand, refs, 2)
        assert bleu_n(cand, list(reversed(refs)), 2) == pytest.approx(forward)

    def test_range(self):
        rng = np.random.default_rng(5)
        for _ in range(50):
            cand = [WORDS[i] for i in rng.integers(0, 8, size=rng.integers(1, 9))]
            refs = [[WORDS[i] for i in rng.integers(0, 8, size=rng.integers(1, 9))]
                    for _ in range(3)]
            v = bleu_n(cand, refs, 4)
            assert 0.0 <= v <= 1.0


class TestCiderD:
    def small_idf(self):
        corpus = [
            [list("abcde")],
            [list("fghab")],
            [list("cdefg")],
        ]
        return corpus, IdfStats.from_reference_sets(corpus)

    def test_identity_single_reference_is_ten(self):
        corpus, idf = self.small_idf()
        score = cider_d(list("abcde"), [list("abcde")], idf)
        assert score == pytest.approx(10.0, abs=1e-9)

    def test_no_overlap_is_zero(self):
        corpus, idf = self.small_idf()
        assert cider_d(list("ff"), [list("abcde")], idf) == 0.0

    def test_nonnegative_and_bounded(self):
        rng = np.random.default_rng(9)
        corpus = random_corpus(rng)
        idf = IdfStats.from_reference_sets(corpus)
        for refs in corpus:
            for cand in refs:
                v = cider_d(cand, refs, idf)
                assert 0.0 <= v <= 10.0 + 1e-9

    def test_needs_references(self):
        _, idf = self.small_idf()
        with pytest.raises(ContractError):
            cider_d(list("ab"), [], idf)

    def test_toy_corpus_matches_brute_force(self):
        rng = np.random.default_rng(123)
        corpus = random_corpus(rng, n_docs=5, refs_per_doc=2, max_len=6)
        idf = IdfStats.from_reference_sets(corpus)
        cands = [refs[0] for refs in corpus]
        for cand, refs in zip(cands, corpus):
            fast = cider_d(cand, refs, idf)
            slow = brute_cider_d(cand, refs, corpus)
            assert fast == pytest.approx(slow, abs=1e-9)

    def test_permutation_invariant_over_references(self):
        corpus, idf = self.small_idf()
        refs = [list("abcde"), list("abcfg"), list("cdeab")]
        assert cider_d(list("abc"), refs, idf) == pytest.approx(
            cider_d(list("abc"), list(reversed(refs)), idf), abs=1e-12)

    def test_length_penalty_monotone_in_gap(self):
        penalties = [length_penalty(10, 10 + gap) for gap in range(6)]
        assert all(a > b for a, b in zip(penalties, penalties[1:]))

    def test_score_drops_as_length_gap_grows(self):
        corpus, idf = self.small_idf()
        ref = list("abcde")
        near = cider_d(list("abcd"), [ref], idf)
        far = cider_d(list("ab"), [ref], idf)
        assert far < near


class TestBruteForceAgreement:
    """Both metrics against the slow oracles on random small cases."""

    def test_hundred_random_cases(self):
        rng = np.random.default_rng(2024)
        checked = 0
        while checked < 100:
            corpus = random_corpus(rng, n_docs=int(rng.integers(2, 5)),
                                   refs_per_doc=int(rng.integers(1, 4)),
                                   max_len=7)
            idf = IdfStats.from_reference_sets(corpus)
            doc = int(rng.integers(0, len(corpus)))
            cand = [WORDS[i] for i in rng.integers(0, 8, size=rng.integers(1, 8))]
            refs = corpus[doc]
            order = int(rng.integers(1, 5))
            assert bleu_n(cand, refs, order) == pytest.approx(
                brute_bleu(cand, refs, order), abs=1e-9)
            assert cider_d(cand, refs, idf) == pytest.approx(
                brute_cider_d(cand, refs, corpus), abs=1e-9)
            checked += 1


class TestIdfStats:
    def test_df_counts_documents_not_sentences(self):
        corpus = [
            [list("ab"), list("ab")],  # same doc twice -> df 1
            [list("ab")],
        ]
        idf = IdfStats.from_reference_sets(corpus)
        assert idf.df[("a",)] == 2
        assert idf.df[("a", "b")] == 2
        assert idf.num_docs == 2

    def test_unseen_gets_max_idf(self):
        corpus = [[list("ab")], [list("cd")]]
        idf = IdfStats.from_reference_sets(corpus)
        assert idf.weight(("zz",)) == pytest.approx(math.log(2.0))

    def test_weights_nonnegative(self):
        rng = np.random.default_rng(3)
        corpus = random_corpus(rng)
        idf = IdfStats.from_reference_sets(corpus)
        assert all(idf.weight(ng) >= 0.0 for ng in idf.df)

    def test_json_round_trip(self):
        corpus = [[list("ab")], [list("bc")]]
        idf = IdfStats.from_reference_sets(corpus)
        restored = IdfStats.from_json_dict(idf.to_json_dict())
        assert restored.num_docs == idf.num_docs
        assert restored.df == idf.df


class TestAggregates:
    def test_poor_quality_all_above(self):
        assert poor_quality_fraction([2.0, 3.0], 1.0) == 0.0

    def test_poor_quality_forced(self):
        assert poor_quality_fraction([1, 2, 3], 2.5) == pytest.approx(2.0 / 3.0)

    def test_poor_quality_empty_rejected(self):
        with pytest.raises(ContractError):
            poor_quality_fraction([], 1.0)

    def test_poor_quality_monotone_in_threshold(self):
        rng = np.random.default_rng(17)
        scores = list(rng.uniform(0, 10, size=40))
        fractions = [poor_quality_fraction(scores, t) for t in np.linspace(0, 10, 9)]
        assert all(a <= b for a, b in zip(fractions, fractions[1:]))

    def test_compliance_all_equal(self):
        assert control_compliance([(3, 3), (4, 4)]) == 1.0

    def test_compliance_none_equal(self):
        assert control_compliance([(3, 4), (4, 5)]) == 0.0

    def test_compliance_half(self):
        assert control_compliance([(9, 9), (10, 9)]) == 0.5

    def test_compliance_empty_rejected(self):
        with pytest.raises(ContractError):
            control_compliance([])


class TestEvalReport:
    def test_json_keys_exact(self):
        report = EvalReport(bleu1=0.5, bleu4=0.2, cider=3.0,
                            poor_quality_fraction=0.4, compliance={"length": 0.9})
        payload = report.to_json_dict()
        assert set(payload) == {"bleu1", "bleu4", "cider",
                                "poor_quality_fraction", "compliance"}

    def test_range_validation(self):
        with pytest.raises(ContractError):
            EvalReport(bleu1=1.5, bleu4=0.0, cider=0.0, poor_quality_fraction=0.0)

    def test_round_trip(self):
        report = EvalReport(bleu1=0.5, bleu4=0.2, cider=3.0,
                            poor_quality_fraction=0.4, compliance={"tense": 1.0})
        assert EvalReport.from_json_dict(report.to_json_dict()) == report


def test_ngram_counts_positional():
    assert ngram_counts(list("aba"), 2) == {("a", "b"): 1, ("b", "a"): 1}
    assert ngram_counts(list("aa"), 1) == {("a",): 2}
    assert ngram_counts(list("a"), 2) == {}
