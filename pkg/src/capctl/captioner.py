"""Control-conditioned two-LSTM attention decoder.

Per step, the attention LSTM reads the concatenation of the control signal,
the previous language-LSTM output, the mean projected region feature, and
the previous word embedding. Its hidden state queries additive attention
over the projected regions, and the language LSTM turns the attended
feature into the next-token distribution.

A forward model emits tokens in natural order; a backward model is trained
on reversed references and decodes reversed, so every public decode returns
natural order. All decode paths run with recording disabled; training
builds gradients by teacher-forcing the chosen token sequence.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .checkpoint import meta_value, scalar, vocab_hash_tensor
from .corpus import BEGIN_ID, END_ID, PAD_ID
from .errors import ContractError, DataError, DimensionError
from .tensor import Tensor

DIRECTIONS = ("forward", "backward")


@dataclass(frozen=True)
class CaptionerPreset:
    feature_dim: int
    proj_dim: int
    embed_dim: int
    hidden_dim: int
    attention_dim: int
    max_len: int = 16


DESK_PRESET = CaptionerPreset(feature_dim=64, proj_dim=64, embed_dim=64,
                              hidden_dim=128, attention_dim=64)
PAPER_PRESET = CaptionerPreset(feature_dim=2048, proj_dim=1000, embed_dim=1000,
                               hidden_dim=1000, attention_dim=512)
PRESETS = {"desk": DESK_PRESET, "paper": PAPER_PRESET}


class CaptionerParams:
    """All decoder weights plus the control arity and generation direction."""

    def __init__(self, w_v, b_v, embed, lstm1, lstm2, w_va, w_ha, w_a, w_p, b_p,
                 direction, beta_dim):
        if direction not in DIRECTIONS:
            raise ContractError(f"direction must be forward|backward, got {direction!r}")
        if not 1 <= beta_dim <= 4:
            raise ContractError(f"beta_dim must be 1..4, got {beta_dim}")
        self.w_v = w_v
        self.b_v = b_v
        self.embed = embed
        self.lstm1 = lstm1
        self.lstm2 = lstm2
        self.w_va = w_va
        self.w_ha = w_ha
        self.w_a = w_a
        self.w_p = w_p
        self.b_p = b_p
        self.direction = direction
        self.beta_dim = beta_dim

    @classmethod
    def init(cls, rng, vocab_size, beta_dim=1, direction="forward",
             preset=DESK_PRESET, dtype=np.float32):
        d_f, d, e, h, a = (preset.feature_dim, preset.proj_dim, preset.embed_dim,
                           preset.hidden_dim, preset.attention_dim)
        xav = T.xavier_uniform
        return cls(
            w_v=Tensor(xav(rng, d_f, d, dtype), requires_grad=True),
            b_v=Tensor(np.zeros((1, d), dtype=dtype), requires_grad=True),
            embed=Tensor(xav(rng, vocab_size, e, dtype), requires_grad=True),
            lstm1=T.LSTMCellParams.init(rng, beta_dim + h + d + e, h, dtype),
            lstm2=T.LSTMCellParams.init(rng, d + h, h, dtype),
            w_va=Tensor(xav(rng, d, a, dtype), requires_grad=True),
            w_ha=Tensor(xav(rng, h, a, dtype), requires_grad=True),
            w_a=Tensor(xav(rng, a, 1, dtype), requires_grad=True),
            # zero output projection: training starts at the uniform distribution
            w_p=Tensor(np.zeros((h, vocab_size), dtype=dtype), requires_grad=True),
            b_p=Tensor(np.zeros((1, vocab_size), dtype=dtype), requires_grad=True),
            direction=direction,
            beta_dim=beta_dim,
        )

    @property
    def hidden_dim(self):
        return self.w_ha.data.shape[0]

    @property
    def proj_dim(self):
        return self.w_v.data.shape[1]

    @property
    def feature_dim(self):
        return self.w_v.data.shape[0]

    @property
    def vocab_size(self):
        return self.embed.data.shape[0]

    def tensors(self):
        return [self.w_v, self.b_v, self.embed,
                *self.lstm1.tensors(), *self.lstm2.tensors(),
                self.w_va, self.w_ha, self.w_a, self.w_p, self.b_p]

    def named_tensors(self):
        return {
            "captioner/w_v": self.w_v, "captioner/b_v": self.b_v,
            "captioner/embed": self.embed,
            "captioner/lstm1/w_x": self.lstm1.w_x, "captioner/lstm1/w_h": self.lstm1.w_h,
            "captioner/lstm1/b": self.lstm1.b,
            "captioner/lstm2/w_x": self.lstm2.w_x, "captioner/lstm2/w_h": self.lstm2.w_h,
            "captioner/lstm2/b": self.lstm2.b,
            "captioner/w_va": self.w_va, "captioner/w_ha": self.w_ha,
            "captioner/w_a": self.w_a,
            "captioner/w_p": self.w_p, "captioner/b_p": self.b_p,
        }

    def to_checkpoint(self, vocab_fingerprint=None, extra=None):
        payload = {name: t.data for name, t in self.named_tensors().items()}
        payload["meta/beta_dim"] = scalar(self.beta_dim)
        payload["meta/direction"] = scalar(DIRECTIONS.index(self.direction))
        if vocab_fingerprint is not None:
            payload["meta/vocab_hash"] = vocab_hash_tensor(vocab_fingerprint)
        if extra:
            payload.update(extra)
        return payload

    @classmethod
    def from_checkpoint(cls, payload, trainable=False):
        try:
            direction = DIRECTIONS[int(meta_value(payload, "meta/direction"))]
            beta_dim = int(meta_value(payload, "meta/beta_dim"))
            def t(name):
                return Tensor(payload[name].copy(), requires_grad=trainable)
            return cls(
                w_v=t("captioner/w_v"), b_v=t("captioner/b_v"),
                embed=t("captioner/embed"),
                lstm1=T.LSTMCellParams(w_x=t("captioner/lstm1/w_x"),
                                       w_h=t("captioner/lstm1/w_h"),
                                       b=t("captioner/lstm1/b")),
                lstm2=T.LSTMCellParams(w_x=t("captioner/lstm2/w_x"),
                                       w_h=t("captioner/lstm2/w_h"),
                                       b=t("captioner/lstm2/b")),
                w_va=t("captioner/w_va"), w_ha=t("captioner/w_ha"), w_a=t("captioner/w_a"),
                w_p=t("captioner/w_p"), b_p=t("captioner/b_p"),
                direction=direction, beta_dim=beta_dim,
            )
        except KeyError as exc:
            raise DataError(f"checkpoint is missing tensor {exc.args[0]!r}") from exc

    def zero_control_inputs(self):
        """Zero the attention-LSTM weight rows that read the control signal."""
        self.lstm1.w_x.data[:self.beta_dim, :] = 0.0


@dataclass
class DecoderState:
    h1: Tensor
    c1: Tensor
    h2: Tensor
    c2: Tensor

    @classmethod
    def zeros(cls, batch, hidden, dtype=np.float32):
        def z():
            return Tensor(np.zeros((batch, hidden), dtype=dtype))
        return cls(h1=z(), c1=z(), h2=z(), c2=z())


@dataclass
class AttentionContext:
    z: Tensor      # per-region scores [B, k, 1]
    alpha: Tensor  # per-region weights [B, k, 1]
    v_hat: Tensor  # attended feature [B, proj_dim]


def project_features(features, params):
    """Project raw region features and mean-pool: returns (V, v_bar)."""
    feats = features if isinstance(features, Tensor) else Tensor(features)
    if feats.data.shape[-1] != params.feature_dim:
        raise DimensionError(
            f"region feature width {feats.data.shape[-1]} != {params.feature_dim}")
    v = T.add(T.matmul(feats, params.w_v), params.b_v)
    v_bar = T.tmean(v, axis=-2, keepdims=True)
    return v, v_bar


def attend(h1, v, params, va=None, mask_bias=None):
    """Additive attention of the query h1 [B, H] over regions v [B, k, D]."""
    if va is None:
        va = T.matmul(v, params.w_va)
    query = T.reshape(T.matmul(h1, params.w_ha), (h1.data.shape[0], 1, -1))
    z = T.matmul(T.tanh(T.add(va, query)), params.w_a)  # [B, k, 1]
    scores = z if mask_bias is None else T.add(z, mask_bias)
    alpha = T.softmax(scores, axis=-2)
    v_hat = T.reshape(T.matmul(T.transpose(alpha), v), (h1.data.shape[0], -1))
    return AttentionContext(z=z, alpha=alpha, v_hat=v_hat)


def _check_beta(params, beta):
    if beta.dim != params.beta_dim:
        raise ContractError(
            f"control signal arity {beta.dim} != model beta_dim {params.beta_dim}")


def _step(state, beta_rows, prev_ids, v, v_bar, params, va=None, mask_bias=None):
    """One decoder step over a batch; returns (logits, new state, attention)."""
    emb = T.rows(params.embed, prev_ids)
    x1 = T.concat([beta_rows, state.h2, v_bar, emb], axis=1)
    h1, c1 = T.lstm_cell(x1, state.h1, state.c1, params.lstm1)
    ctx = attend(h1, v, params, va=va, mask_bias=mask_bias)
    x2 = T.concat([ctx.v_hat, h1], axis=1)
    h2, c2 = T.lstm_cell(x2, state.h2, state.c2, params.lstm2)
    logits = T.add(T.matmul(h2, params.w_p), params.b_p)
    return logits, DecoderState(h1=h1, c1=c1, h2=h2, c2=c2), ctx


def decode_step(state, beta, prev_token, v, v_bar, params):
    """Single-scene step: token distribution and the advanced state."""
    _check_beta(params, beta)
    beta_rows = Tensor(beta.as_array(dtype=v.data.dtype))
    v3 = T.reshape(v, (1,) + tuple(v.data.shape)) if v.data.ndim == 2 else v
    logits, new_state, _ = _step(state, beta_rows, [prev_token], v3, v_bar, params)
    return T.softmax(logits, axis=-1), new_state


def _oriented(tokens, params):
    return list(reversed(tokens)) if params.direction == "backward" else list(tokens)


def reverse_caption(tokens):
    return list(reversed(tokens))


def xe_loss(params, beta, reference, v, v_bar):
    """Teacher-forced negative log-likelihood, summed over tokens incl. the end token."""
    _check_beta(params, beta)
    tokens = reference.tokens if hasattr(reference, "tokens") else list(reference)
    if not tokens:
        raise ContractError("xe_loss needs a non-empty reference")
    if any(not 0 <= t < params.vocab_size for t in tokens):
        raise ContractError("reference token outside the model vocabulary")
    tokens = _oriented(tokens, params)
    inputs = [BEGIN_ID] + tokens
    targets = tokens + [END_ID]
    beta_rows = Tensor(beta.as_array(dtype=v.data.dtype))
    v3 = T.reshape(v, (1,) + tuple(v.data.shape)) if v.data.ndim == 2 else v
    va = T.matmul(v3, params.w_va)
    state = DecoderState.zeros(1, params.hidden_dim, dtype=v.data.dtype)
    total = None
    for prev, tgt in zip(inputs, targets):
        logits, state, _ = _step(state, beta_rows, [prev], v3, v_bar, params, va=va)
        lp = T.gather_last(T.log_softmax(logits, axis=-1), [tgt])
        total = lp if total is None else T.add(total, lp)
    return T.neg(T.tsum(total))


def xe_loss_batch(params, beta_rows, token_rows, v, v_bar, mask_bias=None,
                  row_weights=None):
    """Batched teacher forcing; returns (summed loss, token count).

    beta_rows: [B, beta_dim] array; token_rows: list of token lists (natural
    order); v: [B, k, D] tensor; v_bar: [B, D] tensor; mask_bias: [B, k, 1]
    additive attention bias for padded regions. row_weights scales each
    sequence's log-likelihood (advantage weighting); the returned token
    count is always unweighted.
    """
    batch = len(token_rows)
    oriented = [_oriented(row, params) for row in token_rows]
    steps = max(len(row) for row in oriented) + 1
    inputs = np.full((batch, steps), PAD_ID, dtype=np.intp)
    targets = np.full((batch, steps), PAD_ID, dtype=np.intp)
    mask = np.zeros((batch, steps), dtype=v.data.dtype)
    for b, row in enumerate(oriented):
        if not row:
            raise ContractError("xe_loss_batch needs non-empty references")
        inputs[b, 0] = BEGIN_ID
        inputs[b, 1:len(row) + 1] = row
        targets[b, :len(row)] = row
        targets[b, len(row)] = END_ID
        mask[b, :len(row) + 1] = 1.0
    token_count = float(mask.sum())
    if row_weights is not None:
        mask = mask * np.asarray(row_weights, dtype=v.data.dtype)[:, None]
    beta_t = Tensor(np.asarray(beta_rows, dtype=v.data.dtype))
    va = T.matmul(v, params.w_va)
    state = DecoderState.zeros(batch, params.hidden_dim, dtype=v.data.dtype)
    total = None
    for t in range(steps):
        logits, state, _ = _step(state, beta_t, inputs[:, t], v, v_bar, params,
                                 va=va, mask_bias=mask_bias)
        lp = T.gather_last(T.log_softmax(logits, axis=-1), targets[:, t])
        term = T.tsum(T.mul(lp, Tensor(mask[:, t])))
        total = term if total is None else T.add(total, term)
    return T.neg(total), token_count


def _decode_prep(params, features, beta):
    _check_beta(params, beta)
    v, v_bar = project_features(features, params)
    v3 = T.reshape(v, (1,) + tuple(v.data.shape))
    va = T.matmul(v3, params.w_va)
    beta_rows = Tensor(beta.as_array(dtype=v.data.dtype))
    return v3, v_bar, va, beta_rows


def greedy_decode(params, features, beta, max_len=16):
    """Argmax decoding; ties take the lowest token id. Returns natural-order ids."""
    with T.no_grad():
        v3, v_bar, va, beta_rows = _decode_prep(params, features, beta)
        state = DecoderState.zeros(1, params.hidden_dim, dtype=v3.data.dtype)
        prev = BEGIN_ID
        out = []
        for _ in range(max_len):
            logits, state, _ = _step(state, beta_rows, [prev], v3, v_bar, params, va=va)
            prev = int(np.argmax(logits.data[0]))
            if prev == END_ID:
                break
            out.append(prev)
    return _oriented(out, params)


def sample_decode(params, features, beta, max_len, rng):
    """Multinomial decoding; returns (natural-order ids, total log-probability)."""
    with T.no_grad():
        v3, v_bar, va, beta_rows = _decode_prep(params, features, beta)
        state = DecoderState.zeros(1, params.hidden_dim, dtype=v3.data.dtype)
        prev = BEGIN_ID
        out = []
        total_lp = 0.0
        for _ in range(max_len):
            logits, state, _ = _step(state, beta_rows, [prev], v3, v_bar, params, va=va)
            logp = logits.data[0].astype(np.float64)
            logp -= logp.max()
            p = np.exp(logp)
            p /= p.sum()
            prev = int(rng.choice(len(p), p=p))
            total_lp += float(np.log(p[prev]))
            if prev == END_ID:
                break
            out.append(prev)
    return _oriented(out, params), total_lp


def beam_decode(params, features, beta, k, max_len=16):
    """Beam search over summed log-probabilities.

    Finished hypotheses retire when they emit the end token (or hit max_len);
    returns up to k of them as (natural-order ids, log_prob), best first,
    ties broken by lexicographic token order.
    """
    if k < 1:
        raise ContractError(f"beam width must be >= 1, got {k}")
    with T.no_grad():
        v3, v_bar, va, beta_rows = _decode_prep(params, features, beta)
        zero = DecoderState.zeros(1, params.hidden_dim, dtype=v3.data.dtype)
        live = [((), 0.0, zero)]
        finished = []
        for _ in range(max_len):
            if not live:
                break
            candidates = []
            for tokens, lp, state in live:
                prev = tokens[-1] if tokens else BEGIN_ID
                logits, new_state, _ = _step(state, beta_rows, [prev], v3, v_bar,
                                             params, va=va)
                raw = logits.data[0].astype(np.float64)
                shifted = raw - raw.max()
                step_lp = shifted - np.log(np.exp(shifted).sum())
                for w in range(step_lp.shape[0]):
                    candidates.append((tokens + (w,), lp + float(step_lp[w]), new_state))
            candidates.sort(key=lambda cand: (-cand[1], cand[0]))
            live = []
            for tokens, lp, state in candidates[:k]:
                if tokens[-1] == END_ID:
                    finished.append((tokens[:-1], lp))
                else:
                    live.append((tokens, lp, state))
            if len(finished) >= k:
                live = []
        finished.extend((tokens, lp) for tokens, lp, _ in live)
        finished.sort(key=lambda cand: (-cand[1], cand[0]))
    return [(_oriented(list(tokens), params), lp) for tokens, lp in finished[:k]]
