import math

import numpy as np
import pytest

from capctl import captioner as cap
from capctl import matcher as mat
from capctl import tensor as T
from capctl import trainer as tr
from capctl.corpus import Caption, ControlSignal, substream
from capctl.errors import ConfigError, ContractError

SMALL = cap.CaptionerPreset(feature_dim=64, proj_dim=32, embed_dim=32,
                            hidden_dim=48, attention_dim=24)


def fresh_params(vocab_size, seed=0, beta_dim=1, direction="forward"):
    return cap.CaptionerParams.init(substream(seed, "init"), vocab_size,
                                    beta_dim=beta_dim, direction=direction,
                                    preset=SMALL)


def xe_config(**kw):
    base = dict(mode="xe", epochs=2, batch_size=16, seed=7, control="quality",
                val_limit=4)
    base.update(kw)
    return tr.TrainConfig(**base)


class TestTrainConfig:
    def test_lr_schedule_exact(self):
        cfg = xe_config(lr=5e-4, lr_decay_factor=0.8, lr_decay_every=3)
        assert cfg.lr_at(0) == pytest.approx(5e-4)
        assert cfg.lr_at(2) == pytest.approx(5e-4)
        assert cfg.lr_at(3) == pytest.approx(4e-4)
        assert cfg.lr_at(6) == pytest.approx(5e-4 * 0.8 ** 2)

    def test_validation(self):
        with pytest.raises(ConfigError):
            xe_config(epochs=0).validate()
        with pytest.raises(ConfigError):
            xe_config(lr=-1.0).validate()
        with pytest.raises(ConfigError):
            xe_config(lr_decay_factor=0.0).validate()
        with pytest.raises(ConfigError):
            tr.TrainConfig(mode="scst", beta_policy="from-label").validate()
        with pytest.raises(ConfigError):
            tr.TrainConfig(mode="xe", beta_policy="fixed").validate()

    def test_fixed_beta_defaults(self):
        cfg = tr.TrainConfig(mode="scst", beta_policy="fixed", control="quality")
        assert cfg.fixed_beta().values == (4.0,)
        multi = tr.TrainConfig(mode="scst", beta_policy="fixed", control="multi")
        assert multi.fixed_beta().dim == 4


class TestTrainXe:
    def test_loss_beats_uniform_bound(self, tiny_dataset):
        params = fresh_params(len(tiny_dataset.vocab), seed=1)
        _, log = tr.train_xe(params, tiny_dataset, xe_config(epochs=1))
        assert len(log.records) == 1
        assert log.records[0].mean_loss < math.log(len(tiny_dataset.vocab))

    def test_loss_decreases_with_epochs(self, tiny_dataset):
        params = fresh_params(len(tiny_dataset.vocab), seed=2)
        _, log = tr.train_xe(params, tiny_dataset, xe_config(epochs=6, val_limit=0))
        assert log.records[-1].mean_loss < log.records[0].mean_loss

    def test_seeded_runs_bit_identical(self, tiny_dataset, tmp_path):
        paths = []
        for name in ("one", "two"):
            params = fresh_params(len(tiny_dataset.vocab), seed=3)
            path = tmp_path / f"{name}.ckpt"
            tr.train_xe(params, tiny_dataset, xe_config(epochs=2, val_limit=0),
                        ckpt_path=path)
            paths.append(path)
        assert paths[0].read_bytes() == paths[1].read_bytes()

    def test_beta_dim_mismatch_rejected(self, tiny_dataset):
        params = fresh_params(len(tiny_dataset.vocab), beta_dim=2)
        with pytest.raises(ContractError):
            tr.train_xe(params, tiny_dataset, xe_config())

    def test_log_round_trip(self, tiny_dataset, tmp_path):
        params = fresh_params(len(tiny_dataset.vocab), seed=4)
        _, log = tr.train_xe(params, tiny_dataset, xe_config(epochs=2))
        path = tmp_path / "log.jsonl"
        log.to_jsonl(path)
        restored = tr.TrainLog.from_jsonl(path)
        assert len(restored.records) == 2
        assert restored.records[0].mean_loss == pytest.approx(log.records[0].mean_loss)
        assert path.read_text().count("\n") == 2


class TestTrainScst:
    def scst_config(self, **kw):
        base = dict(mode="scst", epochs=1, batch_size=8, seed=11,
                    beta_policy="fixed", control="quality", val_limit=0)
        base.update(kw)
        return tr.TrainConfig(**base)

    def test_zero_advantage_never_updates(self, tiny_dataset):
        # a hard-peaked model samples exactly its greedy caption every time
        params = fresh_params(len(tiny_dataset.vocab), seed=5)
        for t in params.tensors():
            t.data[:] = 0.0
        params.b_p.data[0, 10] = 80.0
        params.b_p.data[0, 2] = 40.0  # end token close behind
        before = [t.data.copy() for t in params.tensors()]
        tr.train_scst(params, tiny_dataset, self.scst_config())
        for prev, t in zip(before, params.tensors()):
            assert np.array_equal(prev, t.data)

    def test_positive_advantage_raises_sample_probability(self, tiny_dataset):
        params = fresh_params(len(tiny_dataset.vocab), seed=6)
        rec = tiny_dataset.splits["train"][0]
        beta = ControlSignal.for_attributes(("quality",), (4.0,))
        sampled = [10, 11, 12]
        refc = Caption(tokens=sampled, length=3, tense=1, noun_count=0)

        def forced_nll():
            v, v_bar = cap.project_features(rec.features, params)
            return cap.xe_loss(params, beta, refc, v, v_bar).item()

        before = forced_nll()
        advantage = 1.5
        v, v_bar = cap.project_features(rec.features, params)
        loss = T.mul(cap.xe_loss(params, beta, refc, v, v_bar), advantage)
        T.backward(loss)
        state = T.AdamState(params.tensors(), lr=1e-3)
        T.adam_step(params.tensors(), state)
        assert forced_nll() < before  # log-probability of the sample went up

    def test_runs_and_logs_reward(self, tiny_dataset):
        params = fresh_params(len(tiny_dataset.vocab), seed=7)
        _, log = tr.train_scst(params, tiny_dataset, self.scst_config())
        assert len(log.records) == 1
        assert log.records[0].mean_reward is not None
        assert log.records[0].mean_reward >= 0.0


class TestMatcherPairs:
    def test_pair_construction_orders_by_score(self, tiny_dataset):
        fwd = fresh_params(len(tiny_dataset.vocab), seed=8)
        bwd = fresh_params(len(tiny_dataset.vocab), seed=9, direction="backward")
        beta = ControlSignal.for_attributes(("quality",), (4.0,))
        pairs = tr.make_matcher_pairs(fwd, bwd, tiny_dataset, beta)
        assert len(pairs) <= len(tiny_dataset.splits["train"])
        for pair in pairs:
            assert pair.cider_better > pair.cider_worse
            assert abs(pair.cider_better - pair.cider_worse) >= 1e-6
            assert pair.better and pair.worse

    def test_identical_directions_drop_everything(self, tiny_dataset):
        fwd = fresh_params(len(tiny_dataset.vocab), seed=8)
        beta = ControlSignal.for_attributes(("quality",), (4.0,))
        # same weights, same direction: decodes agree, every pair is a tie
        pairs = tr.make_matcher_pairs(fwd, fwd, tiny_dataset, beta)
        assert pairs == []


class TestTrainMatcher:
    def matcher_config(self, **kw):
        base = dict(mode="matcher", epochs=2, batch_size=8, seed=13, val_limit=0)
        base.update(kw)
        return tr.TrainConfig(**base)

    def synthetic_pairs(self, dataset, n=12):
        rng = np.random.default_rng(0)
        pairs = []
        for rec in dataset.splits["train"][:n]:
            caps = rec.captions
            pairs.append(tr.MatcherPair(
                scene_id=rec.scene_id, features=rec.features,
                better=caps[0].tokens, worse=list(rng.integers(4, 20, size=4)),
                cider_better=2.0, cider_worse=1.0))
        return pairs

    def test_loss_not_worse_after_training(self, tiny_dataset):
        preset = mat.MatcherPreset(embed_dim=32, hidden_dim=64, feature_dim=64,
                                   project_regions=False)
        params = mat.MatcherParams.init(substream(1, "minit"),
                                        len(tiny_dataset.vocab), preset=preset)
        pairs = self.synthetic_pairs(tiny_dataset)
        _, log = tr.train_matcher(params, pairs, self.matcher_config(epochs=3))
        assert log.records[-1].mean_loss <= log.records[0].mean_loss + 1e-6

    def test_satisfied_margins_leave_params_untouched(self, tiny_dataset):
        # crafted matcher from the alignment construction: S_pos=1, S_neg=0
        preset = mat.MatcherPreset(embed_dim=2, hidden_dim=2, feature_dim=2,
                                   project_regions=False)
        params = mat.MatcherParams.init(substream(2, "minit"), 30, preset=preset)
        hid = params.hidden_dim
        for cell in (params.gru_fwd, params.gru_bwd):
            cell.w_h.data[:] = 0.0
            cell.w_x.data[:] = 0.0
            cell.b.data[:] = 0.0
            cell.b.data[0, :hid] = -50.0
            cell.w_x.data[:, 2 * hid:] = np.asarray([[5.0, 0.0], [0.0, 5.0]])
        params.embed.data[:] = 0.0
        params.embed.data[10] = [1.0, 0.0]  # aligned word
        params.embed.data[11] = [0.0, 1.0]  # orthogonal word
        feats = np.asarray([[1.0, 0.0]], dtype=np.float32)
        pair = tr.MatcherPair(scene_id=0, features=feats, better=[10], worse=[11],
                              cider_better=2.0, cider_worse=1.0)
        before = [t.data.copy() for t in params.tensors()]
        _, log = tr.train_matcher(params, [pair], self.matcher_config(epochs=1))
        assert log.records[0].mean_loss == 0.0
        for prev, t in zip(before, params.tensors()):
            assert np.array_equal(prev, t.data)

    def test_seeded_determinism(self, tiny_dataset, tmp_path):
        preset = mat.MatcherPreset(embed_dim=16, hidden_dim=64, feature_dim=64,
                                   project_regions=False)
        pairs = self.synthetic_pairs(tiny_dataset, n=8)
        blobs = []
        for name in ("a", "b"):
            params = mat.MatcherParams.init(substream(3, "minit"),
                                            len(tiny_dataset.vocab), preset=preset)
            path = tmp_path / f"{name}.ckpt"
            tr.train_matcher(params, pairs, self.matcher_config(epochs=2),
                             ckpt_path=path)
            blobs.append(path.read_bytes())
        assert blobs[0] == blobs[1]

    def test_empty_pairs_rejected(self):
        preset = mat.MatcherPreset(embed_dim=8, hidden_dim=8, feature_dim=8,
                                   project_regions=False)
        params = mat.MatcherParams.init(substream(4, "minit"), 10, preset=preset)
        with pytest.raises(ContractError):
            tr.train_matcher(params, [], self.matcher_config())
