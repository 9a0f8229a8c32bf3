import math

import numpy as np
import pytest

from capctl import matcher as S
from capctl import tensor as T
from capctl.errors import ContractError, DimensionError
from capctl.tensor import Tensor

TINY = S.MatcherPreset(embed_dim=2, hidden_dim=3, feature_dim=3,
                       project_regions=False)


def tiny_params(seed=0, vocab_size=6, dtype=np.float64):
    rng = np.random.default_rng(seed)
    return S.MatcherParams.init(rng, vocab_size=vocab_size, preset=TINY, dtype=dtype)


class TestEncodeText:
    def test_single_token_is_mean_of_both_passes(self):
        p = tiny_params(seed=1)
        e = S.encode_text([4], p)
        zero = Tensor(np.zeros((1, 3)))
        emb = T.rows(p.embed, [4])
        fwd = T.gru_cell(emb, zero, p.gru_fwd)
        bwd = T.gru_cell(emb, zero, p.gru_bwd)
        expected = 0.5 * (fwd.data + bwd.data)
        assert np.allclose(e.data, expected, atol=1e-12)

    def test_zero_gru_weights_give_zero_features(self):
        p = tiny_params(seed=2)
        for cell in (p.gru_fwd, p.gru_bwd):
            for t in cell.tensors():
                t.data[:] = 0.0
        e = S.encode_text([4, 5, 4], p)
        assert np.allclose(e.data, 0.0)

    def test_empty_sequence_rejected(self):
        with pytest.raises(ContractError):
            S.encode_text([], tiny_params())

    def test_output_shape(self):
        e = S.encode_text([4, 5, 4], tiny_params(seed=3))
        assert e.data.shape == (3, 3)

    def test_gradient_through_encoding(self):
        p = tiny_params(seed=4)

        def loss(params):
            e = S.encode_text([4, 5, 4], p)
            return T.tsum(T.mul(e, e))

        assert T.finite_diff_check(loss, p.tensors(), step=1e-5) < 1e-4


class TestSimilarity:
    def test_identical_unit_vectors(self):
        v = Tensor(np.asarray([[1.0, 0.0, 0.0]]))
        e = Tensor(np.asarray([[1.0, 0.0, 0.0]]))
        out = S.similarity(v, e, tau=9.0)
        assert out.s.data[0, 0] == pytest.approx(1.0)
        assert out.alpha.data[0, 0] == pytest.approx(1.0)
        assert out.r.data[0, 0] == pytest.approx(1.0)
        assert float(out.score.data) == pytest.approx(1.0)

    def test_orthogonal_regions_score_zero(self):
        v = Tensor(np.asarray([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]))
        e = Tensor(np.asarray([[0.0, 0.0, 1.0]]))
        out = S.similarity(v, e, tau=9.0)
        assert float(out.score.data) == pytest.approx(0.0, abs=1e-12)

    def test_temperature_attention_hand_value(self):
        # one word aligned with region 0 and orthogonal to region 1
        v = Tensor(np.asarray([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]))
        e = Tensor(np.asarray([[2.0, 0.0, 0.0]]))
        out = S.similarity(v, e, tau=9.0)
        expected_hi = math.exp(9.0) / (math.exp(9.0) + 1.0)
        assert out.s_bar.data[0, 0] == pytest.approx(1.0)
        assert out.s_bar.data[1, 0] == pytest.approx(0.0)
        assert out.alpha.data[0, 0] == pytest.approx(expected_hi, abs=1e-9)
        assert out.alpha.data[1, 0] == pytest.approx(1.0 - expected_hi, abs=1e-9)

    def test_alpha_columns_are_distributions_and_av_in_hull(self):
        rng = np.random.default_rng(7)
        v = Tensor(rng.normal(size=(4, 3)))
        e = Tensor(rng.normal(size=(5, 3)))
        out = S.similarity(v, e, tau=9.0)
        assert np.allclose(out.alpha.data.sum(axis=0), 1.0, atol=1e-6)
        low = v.data.min(axis=0) - 1e-9
        high = v.data.max(axis=0) + 1e-9
        for row in out.a_v.data:
            assert np.all(row >= low) and np.all(row <= high)

    def test_score_in_range(self):
        rng = np.random.default_rng(8)
        for _ in range(20):
            v = Tensor(rng.normal(size=(rng.integers(1, 5), 3)))
            e = Tensor(rng.normal(size=(rng.integers(1, 5), 3)))
            r = S.similarity(v, e, tau=9.0).r.data
            assert np.all(r >= -1.0 - 1e-9) and np.all(r <= 1.0 + 1e-9)

    def test_width_mismatch_rejected(self):
        with pytest.raises(DimensionError):
            S.similarity(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 4))), tau=9.0)

    def test_zero_vectors_score_zero(self):
        v = Tensor(np.zeros((2, 3)))
        e = Tensor(np.asarray([[1.0, 0.0, 0.0]]))
        out = S.similarity(v, e, tau=9.0)
        assert float(out.score.data) == pytest.approx(0.0, abs=1e-12)


class TestTripletLoss:
    def test_equal_scores_give_margin(self):
        assert float(S.triplet_loss(0.4, 0.4, 0.2).data) == pytest.approx(0.2)

    def test_satisfied_margin_clips_to_zero(self):
        assert float(S.triplet_loss(0.9, 0.4, 0.2).data) == 0.0

    def test_hand_value(self):
        assert float(S.triplet_loss(0.5, 0.45, 0.2).data) == pytest.approx(0.15)

    def test_monotonicity(self):
        base = float(S.triplet_loss(0.5, 0.45, 0.2).data)
        assert float(S.triplet_loss(0.55, 0.45, 0.2).data) <= base
        assert float(S.triplet_loss(0.5, 0.5, 0.2).data) >= base

    def test_bad_margin_rejected(self):
        with pytest.raises(ContractError):
            S.triplet_loss(0.5, 0.4, 0.0)

    def test_gradient_through_full_matcher(self):
        p = tiny_params(seed=9)
        rng = np.random.default_rng(10)
        feats = Tensor(rng.normal(size=(2, 3)))

        def loss(params):
            pos = S.similarity(S.image_regions(feats, p),
                               S.encode_text([4, 5], p), tau=9.0).score
            neg = S.similarity(S.image_regions(feats, p),
                               S.encode_text([5, 4, 4], p), tau=9.0).score
            return S.triplet_loss(pos, neg, 0.2)

        assert T.finite_diff_check(loss, p.tensors(), step=1e-5) < 1e-4


class TestSelectCaption:
    def test_single_candidate(self):
        p = tiny_params(seed=11)
        feats = np.random.default_rng(0).normal(size=(2, 3))
        idx, scores = S.select_caption(feats, [[4, 5]], p, tau=9.0)
        assert idx == 0
        assert len(scores) == 1

    def test_duplicates_tie_to_lowest_index(self):
        p = tiny_params(seed=12)
        feats = np.random.default_rng(1).normal(size=(2, 3))
        idx, scores = S.select_caption(feats, [[4, 5], [4, 5]], p, tau=9.0)
        assert idx == 0
        assert scores[0] == scores[1]

    def test_aligned_candidate_wins(self):
        # word embeddings aligned with the regions for candidate B, orthogonal for A
        p = tiny_params(seed=13)
        for cell in (p.gru_fwd, p.gru_bwd):
            for t in cell.tensors():
                t.data[:] = 0.0
        # gru with zero weights collapses features to zero; use the embedding
        # passthrough instead: one-step GRU with crafted input weights
        hid = p.hidden_dim
        for cell in (p.gru_fwd, p.gru_bwd):
            cell.w_x.data[:] = 0.0
            cell.b.data[:] = 0.0
            cell.b.data[0, :hid] = -50.0  # update gate ~ 0 -> h = n
            cell.w_x.data[:, 2 * hid:] = np.asarray([[5.0, 0.0, 0.0],
                                                     [0.0, 5.0, 0.0]])
        feats = np.asarray([[1.0, 0.0, 0.0], [1.0, 0.0, 0.0]])
        token_a, token_b = 5, 4
        p.embed.data[token_a] = [0.0, 1.0]   # maps toward axis 1: orthogonal
        p.embed.data[token_b] = [1.0, 0.0]   # maps toward axis 0: aligned
        idx, scores = S.select_caption(feats, [[token_a], [token_b]], p, tau=9.0)
        assert idx == 1
        assert scores[1] > scores[0]

    def test_empty_candidate_never_beats_real_one(self):
        p = tiny_params(seed=14)
        feats = np.random.default_rng(2).normal(size=(2, 3))
        idx, scores = S.select_caption(feats, [[], [4, 5]], p, tau=9.0)
        assert idx == 1
        assert scores[0] == float("-inf")

    def test_empty_list_rejected(self):
        with pytest.raises(ContractError):
            S.select_caption(np.zeros((2, 3)), [], tiny_params(), tau=9.0)

    def test_invariant_under_increasing_transform(self):
        p = tiny_params(seed=15)
        feats = np.random.default_rng(3).normal(size=(3, 3))
        cands = [[4], [5], [4, 5], [5, 4]]
        idx, scores = S.select_caption(feats, cands, p, tau=9.0)
        transformed = [math.tanh(2.0 * s + 1.0) for s in scores]
        assert transformed.index(max(transformed)) == idx


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        from capctl.checkpoint import load_checkpoint, save_checkpoint
        p = tiny_params(seed=16, dtype=np.float32)
        cfg = S.MatcherConfig(margin=0.2, tau=9.0)
        path = tmp_path / "matcher.ckpt"
        save_checkpoint(path, p.to_checkpoint(cfg, vocab_fingerprint=123))
        restored, restored_cfg = S.MatcherParams.from_checkpoint(load_checkpoint(path))
        assert restored_cfg.margin == pytest.approx(cfg.margin, abs=1e-7)
        assert restored_cfg.tau == pytest.approx(cfg.tau, abs=1e-6)
        for a, b in zip(p.tensors(), restored.tensors()):
            assert np.array_equal(a.data, b.data)

    def test_config_validation(self):
        with pytest.raises(ContractError):
            S.MatcherConfig(margin=-1.0, tau=9.0)
        with pytest.raises(ContractError):
            S.MatcherConfig(margin=0.2, tau=0.0)
