"""Cross-attention image-text matcher.

A bi-directional GRU encodes the caption into per-word features. Each word
attends over the region features: raw region-word cosines are clipped and
L2-normalized across words per region, a temperature softmax across regions
yields attention weights, and the cosine between each word and its attended
region vector is averaged into the global image-sentence score. Training
pushes a matched caption's score above a mismatched one by a fixed margin.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .checkpoint import meta_value, scalar, vocab_hash_tensor
from .errors import ContractError, DataError, DimensionError
from .tensor import Tensor

_TINY = 1e-12


@dataclass(frozen=True)
class MatcherPreset:
    embed_dim: int
    hidden_dim: int
    feature_dim: int
    project_regions: bool


# joint space equals the raw region width at desk scale, so no projection
DESK_PRESET = MatcherPreset(embed_dim=64, hidden_dim=64, feature_dim=64,
                            project_regions=False)
PAPER_PRESET = MatcherPreset(embed_dim=300, hidden_dim=1024, feature_dim=2048,
                             project_regions=True)
PRESETS = {"desk": DESK_PRESET, "paper": PAPER_PRESET}


@dataclass(frozen=True)
class MatcherConfig:
    margin: float = 0.2
    tau: float = 9.0

    def __post_init__(self):
        if self.margin <= 0 or self.tau <= 0:
            raise ContractError(
                f"margin and temperature must be positive, got {self.margin}, {self.tau}")


class MatcherParams:
    def __init__(self, embed, gru_fwd, gru_bwd, region_proj=None):
        self.embed = embed
        self.gru_fwd = gru_fwd
        self.gru_bwd = gru_bwd
        self.region_proj = region_proj

    @classmethod
    def init(cls, rng, vocab_size, preset=DESK_PRESET, dtype=np.float32):
        e, h = preset.embed_dim, preset.hidden_dim
        proj = None
        if preset.project_regions:
            proj = Tensor(T.xavier_uniform(rng, preset.feature_dim, h, dtype),
                          requires_grad=True)
        return cls(
            embed=Tensor(T.xavier_uniform(rng, vocab_size, e, dtype), requires_grad=True),
            gru_fwd=T.GRUCellParams.init(rng, e, h, dtype),
            gru_bwd=T.GRUCellParams.init(rng, e, h, dtype),
            region_proj=proj,
        )

    @property
    def hidden_dim(self):
        return self.gru_fwd.w_h.data.shape[0]

    @property
    def vocab_size(self):
        return self.embed.data.shape[0]

    def tensors(self):
        out = [self.embed, *self.gru_fwd.tensors(), *self.gru_bwd.tensors()]
        if self.region_proj is not None:
            out.append(self.region_proj)
        return out

    def named_tensors(self):
        named = {
            "matcher/embed": self.embed,
            "matcher/gru_fwd/w_x": self.gru_fwd.w_x,
            "matcher/gru_fwd/w_h": self.gru_fwd.w_h,
            "matcher/gru_fwd/b": self.gru_fwd.b,
            "matcher/gru_bwd/w_x": self.gru_bwd.w_x,
            "matcher/gru_bwd/w_h": self.gru_bwd.w_h,
            "matcher/gru_bwd/b": self.gru_bwd.b,
        }
        if self.region_proj is not None:
            named["matcher/region_proj"] = self.region_proj
        return named

    def to_checkpoint(self, config, vocab_fingerprint=None, extra=None):
        payload = {name: t.data for name, t in self.named_tensors().items()}
        payload["meta/tau"] = scalar(config.tau)
        payload["meta/margin"] = scalar(config.margin)
        if vocab_fingerprint is not None:
            payload["meta/vocab_hash"] = vocab_hash_tensor(vocab_fingerprint)
        if extra:
            payload.update(extra)
        return payload

    @classmethod
    def from_checkpoint(cls, payload, trainable=False):
        try:
            def t(name):
                return Tensor(payload[name].copy(), requires_grad=trainable)
            proj = (t("matcher/region_proj")
                    if "matcher/region_proj" in payload else None)
            params = cls(
                embed=t("matcher/embed"),
                gru_fwd=T.GRUCellParams(w_x=t("matcher/gru_fwd/w_x"),
                                        w_h=t("matcher/gru_fwd/w_h"),
                                        b=t("matcher/gru_fwd/b")),
                gru_bwd=T.GRUCellParams(w_x=t("matcher/gru_bwd/w_x"),
                                        w_h=t("matcher/gru_bwd/w_h"),
                                        b=t("matcher/gru_bwd/b")),
                region_proj=proj,
            )
        except KeyError as exc:
            raise DataError(f"checkpoint is missing tensor {exc.args[0]!r}") from exc
        config = MatcherConfig(margin=meta_value(payload, "meta/margin"),
                               tau=meta_value(payload, "meta/tau"))
        return params, config


@dataclass
class SimilarityBreakdown:
    s: Tensor       # raw region-word cosines [k, n]
    s_bar: Tensor   # clipped, per-region word-normalized cosines [k, n]
    alpha: Tensor   # attention over regions per word [k, n]
    a_v: Tensor     # attended region vector per word [n, width]
    r: Tensor       # per-word local similarity [n, 1]
    score: Tensor   # global scalar


def encode_text(tokens, params):
    """Per-word features from a bi-directional GRU: e_t = (fwd_t + bwd_t) / 2."""
    tokens = list(tokens)
    if not tokens:
        raise ContractError("encode_text needs a non-empty token sequence")
    if any(not 0 <= t < params.vocab_size for t in tokens):
        raise ContractError("token outside the matcher vocabulary")
    n = len(tokens)
    dtype = params.embed.data.dtype
    fwd = []
    h = Tensor(np.zeros((1, params.hidden_dim), dtype=dtype))
    for t in range(n):
        h = T.gru_cell(T.rows(params.embed, [tokens[t]]), h, params.gru_fwd)
        fwd.append(h)
    bwd = [None] * n
    h = Tensor(np.zeros((1, params.hidden_dim), dtype=dtype))
    for t in range(n - 1, -1, -1):
        h = T.gru_cell(T.rows(params.embed, [tokens[t]]), h, params.gru_bwd)
        bwd[t] = h
    merged = [T.mul(T.add(f, b), 0.5) for f, b in zip(fwd, bwd)]
    return T.concat(merged, axis=0)


def image_regions(features, params):
    """Region features in the joint space (projected when configured)."""
    feats = features if isinstance(features, Tensor) else Tensor(features)
    if params.region_proj is not None:
        if feats.data.shape[-1] != params.region_proj.data.shape[0]:
            raise DimensionError(
                f"region width {feats.data.shape[-1]} != "
                f"{params.region_proj.data.shape[0]}")
        return T.matmul(feats, params.region_proj)
    if feats.data.shape[-1] != params.hidden_dim:
        raise DimensionError(
            f"region width {feats.data.shape[-1]} != joint width {params.hidden_dim}")
    return feats


def _row_norms(x):
    return T.sqrt(T.clip_min(T.tsum(T.mul(x, x), axis=1, keepdims=True), _TINY))


def similarity(v, e, tau):
    """Stacked cross-attention similarity; returns the full breakdown."""
    if v.data.shape[-1] != e.data.shape[-1]:
        raise DimensionError(
            f"region/word widths differ: {v.data.shape} vs {e.data.shape}")
    norm_v = _row_norms(v)  # [k, 1]
    norm_e = _row_norms(e)  # [n, 1]
    s = T.div(T.matmul(v, T.transpose(e)), T.matmul(norm_v, T.transpose(norm_e)))
    clipped = T.relu(s)
    word_norm = T.sqrt(T.clip_min(T.tsum(T.mul(clipped, clipped), axis=1,
                                         keepdims=True), _TINY))
    s_bar = T.div(clipped, word_norm)
    alpha = T.softmax(T.mul(s_bar, tau), axis=0)
    a_v = T.matmul(T.transpose(alpha), v)  # [n, width]
    num = T.tsum(T.mul(e, a_v), axis=1, keepdims=True)
    den = T.mul(norm_e, _row_norms(a_v))
    r = T.div(num, T.clip_min(den, _TINY))
    score = T.tmean(r)
    return SimilarityBreakdown(s=s, s_bar=s_bar, alpha=alpha, a_v=a_v, r=r,
                               score=score)


def triplet_loss(score_pos, score_neg, margin):
    """Hinge on the score gap: [margin - S(I,T) + S(I,T_hat)]_+."""
    if margin <= 0:
        raise ContractError(f"margin must be positive, got {margin}")
    pos = score_pos if isinstance(score_pos, Tensor) else Tensor(np.asarray(score_pos))
    neg = score_neg if isinstance(score_neg, Tensor) else Tensor(np.asarray(score_neg))
    return T.relu(T.add(T.sub(margin, pos), neg))


def match_score(features, tokens, params, tau):
    """Global similarity of one caption to one image."""
    v = image_regions(features, params)
    e = encode_text(tokens, params)
    return similarity(v, e, tau).score


def select_caption(features, candidates, params, tau):
    """Index of the candidate most aligned to the image, plus all scores.

    Empty candidates score -inf so they are only chosen when nothing else
    exists; ties keep the lowest index.
    """
    candidates = list(candidates)
    if not candidates:
        raise ContractError("select_caption needs at least one candidate")
    with T.no_grad():
        v = image_regions(features, params)
        scores = []
        for tokens in candidates:
            if len(tokens) == 0:
                scores.append(float("-inf"))
                continue
            e = encode_text(tokens, params)
            scores.append(float(similarity(v, e, tau).score.data))
    best = 0
    for i, sc in enumerate(scores):
        if sc > scores[best]:
            best = i
    return best, scores
