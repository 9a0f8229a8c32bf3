"""Training loops: teacher-forced cross entropy, self-critical reward
optimization, and matcher triplet training over generated caption pairs.

Every loop owns its parameters, draws all randomness from named substreams
of one seed, applies global-norm gradient clipping, and emits one TrainLog
record per epoch. Checkpoints persist parameters, metadata, and Adam state.
"""
from __future__ import annotations

import json
import time
from dataclasses import dataclass, field

import numpy as np

from . import captioner as cap
from . import matcher as mat
from . import tensor as T
from .checkpoint import save_checkpoint, scalar
from .corpus import ControlSignal, attribute_layout, substream
from .errors import ConfigError, ContractError
from .metrics import cider_d
from .tensor import Tensor

DEFAULT_EVAL_BETA = {"quality": 4.0, "length": 8.0, "tense": 4.0, "nouns": 3.0}

MODES = ("xe", "scst", "matcher")


@dataclass
class TrainConfig:
    mode: str = "xe"
    epochs: int = 30
    batch_size: int = 32
    lr: float = 5e-4
    lr_decay_factor: float = 0.8
    lr_decay_every: int = 3
    seed: int = 0
    control: str = "quality"
    beta_policy: str = "from-label"
    beta_value: tuple = ()
    clip_norm: float = 5.0
    val_limit: int = 100
    max_len: int = 16

    def validate(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if not 0 < self.lr_decay_factor <= 1:
            raise ConfigError("lr decay factor must be in (0, 1]")
        if self.lr_decay_every < 1:
            raise ConfigError("lr decay interval must be >= 1 epoch")
        if self.batch_size < 1:
            raise ConfigError("batch size must be >= 1")
        if self.mode == "xe" and self.beta_policy != "from-label":
            raise ConfigError("cross-entropy training conditions on label attributes")
        if self.mode == "scst" and self.beta_policy != "fixed":
            raise ConfigError("reward training needs a fixed control value")
        return self

    def lr_at(self, epoch):
        return self.lr * self.lr_decay_factor ** (epoch // self.lr_decay_every)

    def layout(self):
        return attribute_layout(self.control)

    def fixed_beta(self):
        layout = self.layout()
        values = self.beta_value or tuple(DEFAULT_EVAL_BETA[a] for a in layout)
        return ControlSignal.for_attributes(layout, values)


# schedule presets; the reward stage keeps a flat learning rate
TRAIN_PRESETS = {
    "desk": {
        "xe": dict(epochs=30, lr=5e-4, lr_decay_factor=0.8, lr_decay_every=3),
        "scst": dict(epochs=20, lr=5e-5, lr_decay_factor=1.0, lr_decay_every=1),
        "matcher": dict(epochs=10, lr=5e-4, lr_decay_factor=0.8, lr_decay_every=3),
    },
    "paper": {
        "xe": dict(epochs=35, lr=5e-4, lr_decay_factor=0.8, lr_decay_every=3),
        "scst": dict(epochs=40, lr=5e-5, lr_decay_factor=1.0, lr_decay_every=1),
        "matcher": dict(epochs=10, lr=5e-4, lr_decay_factor=0.8, lr_decay_every=3),
    },
}


@dataclass
class EpochRecord:
    epoch: int
    mean_loss: float
    mean_reward: float = None
    val_cider: float = None
    wall_time: float = 0.0

    def to_json_dict(self):
        return {"epoch": self.epoch, "mean_loss": self.mean_loss,
                "mean_reward": self.mean_reward, "val_cider": self.val_cider,
                "wall_time": self.wall_time}


@dataclass
class TrainLog:
    records: list = field(default_factory=list)

    def append(self, record):
        self.records.append(record)

    def to_jsonl(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            for rec in self.records:
                fh.write(json.dumps(rec.to_json_dict(), sort_keys=True) + "\n")

    @classmethod
    def from_jsonl(cls, path):
        log = cls()
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                payload = json.loads(line)
                log.append(EpochRecord(
                    epoch=payload["epoch"], mean_loss=payload["mean_loss"],
                    mean_reward=payload.get("mean_reward"),
                    val_cider=payload.get("val_cider"),
                    wall_time=payload.get("wall_time", 0.0)))
        return log


@dataclass
class MatcherPair:
    scene_id: int
    features: np.ndarray
    better: list
    worse: list
    cider_better: float
    cider_worse: float


def label_beta_rows(captions, layout, dtype=np.float32):
    rows = [ControlSignal.from_caption(c, layout).values for c in captions]
    return np.asarray(rows, dtype=dtype)


def _batch_regions(records, dtype):
    """Pad a batch of per-scene region features; returns arrays for the graph."""
    kmax = max(rec.features.shape[0] for rec in records)
    feat_dim = records[0].features.shape[1]
    feats = np.zeros((len(records), kmax, feat_dim), dtype=dtype)
    bias = np.zeros((len(records), kmax, 1), dtype=dtype)
    mean_w = np.zeros((len(records), 1, kmax), dtype=dtype)
    for i, rec in enumerate(records):
        k = rec.features.shape[0]
        feats[i, :k] = rec.features
        bias[i, k:] = -1e9
        mean_w[i, 0, :k] = 1.0 / k
    return feats, bias, mean_w


def _project_batch(params, feats, mean_w):
    v = T.add(T.matmul(Tensor(feats), params.w_v), params.b_v)
    v_bar = T.reshape(T.matmul(Tensor(mean_w), v), (feats.shape[0], -1))
    return v, v_bar


def _optimizer_payload(params, state):
    payload = {}
    for name, tensor_ in params.named_tensors().items():
        idx = state.params.index(tensor_)
        payload[f"optim/m/{name}"] = state.m[idx]
        payload[f"optim/v/{name}"] = state.v[idx]
    payload["optim/step"] = scalar(state.step)
    return payload


def _mean_val_cider(params, records, beta, idf, vocab, max_len, limit):
    if not records or limit == 0:
        return None
    subset = records[:limit] if limit and limit > 0 else records
    scores = []
    for rec in subset:
        tokens = cap.greedy_decode(params, rec.features, beta, max_len=max_len)
        refs = [c.words(vocab) for c in rec.captions]
        scores.append(cider_d(vocab.decode(tokens), refs, idf))
    return float(np.mean(scores))


def train_xe(params, dataset, config, ckpt_path=None):
    """Teacher-forced training; mean_loss is nats per target token."""
    config.validate()
    if config.mode != "xe":
        raise ContractError("train_xe requires an xe-mode config")
    layout = config.layout()
    if len(layout) != params.beta_dim:
        raise ContractError(
            f"control layout {layout} incompatible with beta_dim {params.beta_dim}")
    records = dataset.splits["train"]
    if not records:
        raise ContractError("training split is empty")
    vocab = dataset.vocab
    dtype = params.w_v.data.dtype
    eval_beta = config.fixed_beta()
    pairs = [(i, j) for i in range(len(records)) for j in range(len(records[i].captions))]
    state = T.AdamState(params.tensors(), lr=config.lr)
    log = TrainLog()
    payload = None
    for epoch in range(config.epochs):
        start = time.time()
        state.lr = config.lr_at(epoch)
        order = substream(config.seed, "shuffle", epoch).permutation(len(pairs))
        total_nats = 0.0
        total_tokens = 0.0
        for lo in range(0, len(order), config.batch_size):
            chunk = [pairs[i] for i in order[lo:lo + config.batch_size]]
            recs = [records[i] for i, _ in chunk]
            caps = [records[i].captions[j] for i, j in chunk]
            feats, bias, mean_w = _batch_regions(recs, dtype)
            v, v_bar = _project_batch(params, feats, mean_w)
            beta_rows = label_beta_rows(caps, layout, dtype)
            loss_sum, n_tokens = cap.xe_loss_batch(
                params, beta_rows, [c.tokens for c in caps], v, v_bar,
                mask_bias=Tensor(bias))
            loss = T.mul(loss_sum, 1.0 / len(chunk))
            T.backward(loss)
            T.clip_grad_norm(params.tensors(), config.clip_norm)
            T.adam_step(params.tensors(), state)
            total_nats += loss_sum.item()
            total_tokens += n_tokens
        val = _mean_val_cider(params, dataset.splits.get("val", []), eval_beta,
                              dataset.idf, vocab, config.max_len, config.val_limit)
        log.append(EpochRecord(epoch=epoch, mean_loss=total_nats / total_tokens,
                               val_cider=val, wall_time=time.time() - start))
        payload = params.to_checkpoint(vocab.fingerprint(),
                                       extra=_optimizer_payload(params, state))
        if ckpt_path is not None:
            save_checkpoint(ckpt_path, payload)
    return payload, log


def train_scst(params, dataset, config, ckpt_path=None):
    """Self-critical reward training: sampled caption vs greedy baseline."""
    config.validate()
    if config.mode != "scst":
        raise ContractError("train_scst requires an scst-mode config")
    beta = config.fixed_beta()
    if beta.dim != params.beta_dim:
        raise ContractError(
            f"fixed control arity {beta.dim} != model beta_dim {params.beta_dim}")
    records = dataset.splits["train"]
    if not records:
        raise ContractError("training split is empty")
    vocab = dataset.vocab
    idf = dataset.idf
    dtype = params.w_v.data.dtype
    state = T.AdamState(params.tensors(), lr=config.lr)
    log = TrainLog()
    payload = None
    for epoch in range(config.epochs):
        start = time.time()
        state.lr = config.lr_at(epoch)
        rng = substream(config.seed, "sample", epoch)
        order = substream(config.seed, "shuffle", epoch).permutation(len(records))
        rewards = []
        loss_accum = 0.0
        n_batches = 0
        for lo in range(0, len(order), config.batch_size):
            chunk = [records[i] for i in order[lo:lo + config.batch_size]]
            sampled_rows = []
            advantages = []
            kept = []
            for rec in chunk:
                refs = [c.words(vocab) for c in rec.captions]
                sampled, _ = cap.sample_decode(params, rec.features, beta,
                                               config.max_len, rng)
                greedy = cap.greedy_decode(params, rec.features, beta,
                                           max_len=config.max_len)
                r_sample = cider_d(vocab.decode(sampled), refs, idf)
                r_greedy = cider_d(vocab.decode(greedy), refs, idf)
                rewards.append(r_sample)
                advantage = r_sample - r_greedy
                if advantage != 0.0 and sampled:
                    sampled_rows.append(sampled)
                    advantages.append(advantage)
                    kept.append(rec)
            if not kept:
                continue  # zero advantage everywhere: no update
            feats, bias, mean_w = _batch_regions(kept, dtype)
            v, v_bar = _project_batch(params, feats, mean_w)
            beta_rows = np.repeat(beta.as_array(dtype), len(kept), axis=0)
            weighted, _ = cap.xe_loss_batch(
                params, beta_rows, sampled_rows, v, v_bar, mask_bias=Tensor(bias),
                row_weights=np.asarray(advantages, dtype=dtype))
            loss = T.mul(weighted, 1.0 / len(chunk))
            T.backward(loss)
            T.clip_grad_norm(params.tensors(), config.clip_norm)
            T.adam_step(params.tensors(), state)
            loss_accum += loss.item()
            n_batches += 1
        val = _mean_val_cider(params, dataset.splits.get("val", []), beta,
                              idf, vocab, config.max_len, config.val_limit)
        log.append(EpochRecord(
            epoch=epoch, mean_loss=loss_accum / max(1, n_batches),
            mean_reward=float(np.mean(rewards)) if rewards else 0.0,
            val_cider=val, wall_time=time.time() - start))
        payload = params.to_checkpoint(vocab.fingerprint(),
                                       extra=_optimizer_payload(params, state))
        if ckpt_path is not None:
            save_checkpoint(ckpt_path, payload)
    return payload, log


def make_matcher_pairs(fwd_params, bwd_params, dataset, beta, split="train",
                       max_len=16, tie_eps=1e-6):
    """Greedy-decode both directions per scene and order the pair by score."""
    vocab = dataset.vocab
    idf = dataset.idf
    pairs = []
    for rec in dataset.splits[split]:
        refs = [c.words(vocab) for c in rec.captions]
        fwd_tokens = cap.greedy_decode(fwd_params, rec.features, beta, max_len=max_len)
        bwd_tokens = cap.greedy_decode(bwd_params, rec.features, beta, max_len=max_len)
        if not fwd_tokens or not bwd_tokens:
            continue
        c_fwd = cider_d(vocab.decode(fwd_tokens), refs, idf)
        c_bwd = cider_d(vocab.decode(bwd_tokens), refs, idf)
        if abs(c_fwd - c_bwd) < tie_eps:
            continue
        if c_fwd > c_bwd:
            better, worse, c_b, c_w = fwd_tokens, bwd_tokens, c_fwd, c_bwd
        else:
            better, worse, c_b, c_w = bwd_tokens, fwd_tokens, c_bwd, c_fwd
        pairs.append(MatcherPair(scene_id=rec.scene_id, features=rec.features,
                                 better=better, worse=worse,
                                 cider_better=c_b, cider_worse=c_w))
    return pairs


def make_reference_pairs(dataset, rng, split="train"):
    """Optional extra positives: a scene's own reference vs another scene's.

    Off by default; appending these to the generated-caption pairs gives the
    matcher grounding signal beyond the two decoders' outputs.
    """
    records = dataset.splits[split]
    if len(records) < 2:
        return []
    pairs = []
    for i, rec in enumerate(records):
        own = rec.captions[int(rng.integers(0, len(rec.captions)))]
        j = int(rng.integers(0, len(records) - 1))
        other_rec = records[j if j < i else j + 1]
        other = other_rec.captions[int(rng.integers(0, len(other_rec.captions)))]
        pairs.append(MatcherPair(scene_id=rec.scene_id, features=rec.features,
                                 better=list(own.tokens), worse=list(other.tokens),
                                 cider_better=float("nan"), cider_worse=float("nan")))
    return pairs


def train_matcher(params, pairs, config, matcher_config=None, ckpt_path=None,
                  vocab_fingerprint=None):
    """Triplet training on (better, worse) caption pairs."""
    config.validate()
    if config.mode != "matcher":
        raise ContractError("train_matcher requires a matcher-mode config")
    if not pairs:
        raise ContractError("no matcher pairs to train on")
    matcher_config = matcher_config or mat.MatcherConfig()
    state = T.AdamState(params.tensors(), lr=config.lr)
    log = TrainLog()
    payload = None
    for epoch in range(config.epochs):
        start = time.time()
        state.lr = config.lr_at(epoch)
        order = substream(config.seed, "shuffle", "matcher", epoch).permutation(len(pairs))
        total = 0.0
        count = 0
        for lo in range(0, len(order), config.batch_size):
            chunk = [pairs[i] for i in order[lo:lo + config.batch_size]]
            terms = []
            for pair in chunk:
                v = mat.image_regions(pair.features, params)
                pos = mat.similarity(v, mat.encode_text(pair.better, params),
                                     matcher_config.tau).score
                neg = mat.similarity(v, mat.encode_text(pair.worse, params),
                                     matcher_config.tau).score
                terms.append(mat.triplet_loss(pos, neg, matcher_config.margin))
            stacked = terms[0]
            for term in terms[1:]:
                stacked = T.add(stacked, term)
            loss = T.mul(stacked, 1.0 / len(chunk))
            total += loss.item() * len(chunk)
            count += len(chunk)
            if loss.item() > 0.0:
                T.backward(loss)
                T.clip_grad_norm(params.tensors(), config.clip_norm)
                T.adam_step(params.tensors(), state)
        log.append(EpochRecord(epoch=epoch, mean_loss=total / count,
                               wall_time=time.time() - start))
        payload = params.to_checkpoint(matcher_config, vocab_fingerprint,
                                       extra=_optimizer_payload(params, state))
        if ckpt_path is not None:
            save_checkpoint(ckpt_path, payload)
    return payload, log
