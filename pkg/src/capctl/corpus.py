"""Synthetic scene corpus with attributed reference captions.

A scene is a handful of objects (noun, color, box) plus pairwise relations.
Region features are a fixed random projection of the object one-hots and
positions, with optional Gaussian noise, standing in for detector output.
Five reference captions per scene come from a closed template grammar that
realizes one of five tense categories per caption:

    1  no verb        "a dog with a frisbee"
    2  copula + verb  "a dog is holding a frisbee"
    3  -ing           "a dog holding a frisbee"
    4  finite verb    "a dog carries a frisbee"
    5  -ed            "a dog carried a frisbee"

Because the grammar is closed, the tense tagger and noun counter are exact,
which is what makes control compliance measurable.
"""
from __future__ import annotations

import json
import zlib
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ContractError, LexiconError
from .metrics import IdfStats, cider_d

# reserved token ids
PAD_ID, BEGIN_ID, END_ID, UNK_ID = 0, 1, 2, 3
RESERVED = ["<pad>", "<s>", "</s>", "<unk>"]

NOUNS = [
    "dog", "cat", "boy", "girl", "man", "woman", "bird", "horse",
    "frisbee", "ball", "kite", "tennis", "car", "train", "boat", "tree",
    "table", "chair", "mouth", "field",
]

PLURALS = {
    "dog": "dogs", "cat": "cats", "boy": "boys", "girl": "girls",
    "man": "men", "woman": "women", "bird": "birds", "horse": "horses",
    "frisbee": "frisbees", "ball": "balls", "kite": "kites",
    "car": "cars", "train": "trains", "boat": "boats", "tree": "trees",
    "table": "tables", "chair": "chairs", "mouth": "mouths",
    "field": "fields",
}

COLORS = ["red", "blue", "green", "yellow", "black", "white", "brown", "orange"]

SIZE_ADJECTIVES = ["big", "small", "young", "little"]

DETERMINERS = ["a", "the", "its"]

COPULAS = ["is"]

# lexeme -> (third person, -ing, -ed, past participle)
VERB_FORMS = {
    "hold": ("holds", "holding", "held", "held"),
    "carry": ("carries", "carrying", "carried", "carried"),
    "chase": ("chases", "chasing", "chased", "chased"),
    "follow": ("follows", "following", "followed", "followed"),
    "watch": ("watches", "watching", "watched", "watched"),
    "touch": ("touches", "touching", "touched", "touched"),
    "pull": ("pulls", "pulling", "pulled", "pulled"),
    "push": ("pushes", "pushing", "pushed", "pushed"),
    "play": ("plays", "playing", "played", "played"),
    "face": ("faces", "facing", "faced", "faced"),
}


@dataclass(frozen=True)
class Relation:
    name: str
    verbs: tuple
    prep: str


RELATIONS = [
    Relation("hold", ("hold", "carry"), "with"),
    Relation("chase", ("chase", "follow"), "behind"),
    Relation("watch", ("watch",), "near"),
    Relation("touch", ("touch",), "beside"),
    Relation("pull", ("pull",), "by"),
    Relation("push", ("push",), "against"),
    Relation("play", ("play",), "around"),
    Relation("face", ("face",), "toward"),
]

LOCATION_PREPS = ["in", "on", "under", "over"]

CONTROL_ATTRIBUTES = ("quality", "length", "tense", "nouns")


def substream(seed, *keys):
    """Named deterministic random substream of a master seed."""
    entropy = [int(seed)]
    for key in keys:
        entropy.append(zlib.crc32(key.encode()) if isinstance(key, str) else int(key))
    return np.random.default_rng(entropy)


class Vocabulary:
    """Bijective token/id mapping plus the closed lexical classes."""

    def __init__(self, tokens):
        if len(set(tokens)) != len(tokens):
            raise ConfigError("vocabulary tokens are not unique")
        if tokens[:4] != RESERVED:
            raise ConfigError("vocabulary must start with the reserved tokens")
        self.id_to_token = list(tokens)
        self.token_to_id = {t: i for i, t in enumerate(tokens)}
        nouns = set(NOUNS) | set(PLURALS.values())
        self.noun_ids = {self.token_to_id[t] for t in nouns if t in self.token_to_id}
        self.copula_ids = {self.token_to_id[t] for t in COPULAS if t in self.token_to_id}
        # token id -> set of verb form kinds ("base", "third", "ing", "ed", "participle")
        self.verb_kinds = {}
        for lexeme, (third, ing, ed, part) in VERB_FORMS.items():
            for word, kind in ((lexeme, "base"), (third, "third"), (ing, "ing"),
                               (ed, "ed"), (part, "participle")):
                tid = self.token_to_id.get(word)
                if tid is not None:
                    self.verb_kinds.setdefault(tid, set()).add(kind)

    @classmethod
    def default(cls):
        tokens = list(RESERVED)
        seen = set(tokens)

        def push(words):
            for w in words:
                if w not in seen:
                    seen.add(w)
                    tokens.append(w)

        push(DETERMINERS)
        push(COPULAS)
        push([r.prep for r in RELATIONS])
        push(LOCATION_PREPS)
        push(COLORS)
        push(SIZE_ADJECTIVES)
        push(NOUNS)
        push(sorted(PLURALS.values()))
        for lexeme in VERB_FORMS:
            push([lexeme, *VERB_FORMS[lexeme]])
        return cls(tokens)

    def __len__(self):
        return len(self.id_to_token)

    def encode(self, words):
        try:
            return [self.token_to_id[w] for w in words]
        except KeyError as exc:
            raise LexiconError(f"unknown token {exc.args[0]!r}") from exc

    def decode(self, ids):
        out = []
        for i in ids:
            if not 0 <= i < len(self.id_to_token):
                raise LexiconError(f"token id {i} outside vocabulary")
            out.append(self.id_to_token[i])
        return out

    def fingerprint(self):
        return zlib.crc32("\n".join(self.id_to_token).encode("utf-8"))

    def to_file(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("\n".join(self.id_to_token) + "\n")

    @classmethod
    def from_file(cls, path):
        with open(path, encoding="utf-8") as fh:
            tokens = [line.rstrip("\n") for line in fh if line.rstrip("\n")]
        return cls(tokens)


@dataclass
class Scene:
    scene_id: int
    objects: list  # (noun_id, color_id, (x, y, w, h))
    relations: list  # (subject_index, relation_id, object_index)


@dataclass
class RegionFeatureSet:
    scene_id: int
    features: np.ndarray  # [k, feature_dim] float32


@dataclass
class Caption:
    tokens: list
    length: int
    tense: int
    noun_count: int
    quality: float = 0.0

    def words(self, vocab):
        return vocab.decode(self.tokens)


@dataclass(frozen=True)
class ControlSignal:
    values: tuple
    layout: tuple

    def __post_init__(self):
        if not 1 <= len(self.values) <= 4 or len(self.values) != len(self.layout):
            raise ContractError(
                f"control signal needs 1..4 matching values/layout entries, "
                f"got {self.values} / {self.layout}")
        for attr, v in zip(self.layout, self.values):
            if attr not in CONTROL_ATTRIBUTES:
                raise ContractError(f"unknown control attribute {attr!r}")
            if attr != "quality" and (v < 0 or float(v) != float(int(v))):
                raise ContractError(f"{attr} control must be a non-negative integer, got {v}")

    @property
    def dim(self):
        return len(self.values)

    def as_array(self, dtype=np.float32):
        return np.asarray([self.values], dtype=dtype)

    @classmethod
    def for_attributes(cls, layout, values):
        layout = tuple(layout)
        values = tuple(float(v) for v in values)
        return cls(values=values, layout=layout)

    @classmethod
    def from_caption(cls, caption, layout):
        pull = {
            "quality": lambda c: float(c.quality),
            "length": lambda c: float(c.length),
            "tense": lambda c: float(c.tense),
            "nouns": lambda c: float(c.noun_count),
        }
        return cls(values=tuple(pull[a](caption) for a in layout), layout=tuple(layout))


def attribute_layout(control):
    """Map a control name from the CLI to a signal layout."""
    if control == "multi":
        return CONTROL_ATTRIBUTES
    if control not in CONTROL_ATTRIBUTES:
        raise ConfigError(f"unknown control {control!r}")
    return (control,)


@dataclass
class CorpusConfig:
    feature_dim: int = 64
    noise_sigma: float = 0.05
    min_objects: int = 3
    max_objects: int = 5
    train_scenes: int = 1600
    val_scenes: int = 200
    test_scenes: int = 200
    seed: int = 0
    include_self_quality: bool = False
    consensus_rate: float = 0.55  # share of references that mimic the canonical plan
    noun_count: int = len(NOUNS)
    color_count: int = len(COLORS)
    relation_count: int = len(RELATIONS)

    def validate(self):
        if self.noun_count <= 0 or self.color_count <= 0 or self.relation_count <= 0:
            raise ConfigError("empty lexicon")
        if not 2 <= self.min_objects <= self.max_objects <= 6:
            raise ConfigError(
                f"object count range [{self.min_objects}, {self.max_objects}] outside [2, 6]")
        if self.feature_dim <= 0:
            raise ConfigError("feature_dim must be positive")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be non-negative")
        if not 0.0 <= self.consensus_rate <= 1.0:
            raise ConfigError("consensus_rate must be in [0, 1]")
        return self


def generate_scene(rng, config, scene_id=0):
    config.validate()
    k = int(rng.integers(config.min_objects, config.max_objects + 1))
    objects = []
    for _ in range(k):
        noun_id = int(rng.integers(0, config.noun_count))
        color_id = int(rng.integers(0, config.color_count))
        position = tuple(float(x) for x in rng.uniform(0.0, 1.0, size=4))
        objects.append((noun_id, color_id, position))
    relations = [(0, int(rng.integers(0, config.relation_count)), 1)]
    if k >= 3 and rng.random() < 0.5:
        relations.append((1, int(rng.integers(0, config.relation_count)), 2))
    return Scene(scene_id=scene_id, objects=objects, relations=relations)


_projection_cache = {}


def _feature_projection(config):
    in_dim = config.noun_count + config.color_count + 4
    key = (config.seed, in_dim, config.feature_dim)
    proj = _projection_cache.get(key)
    if proj is None:
        rng = substream(config.seed, "feature-projection")
        proj = rng.normal(0.0, 1.0 / np.sqrt(in_dim),
                          size=(in_dim, config.feature_dim)).astype(np.float32)
        _projection_cache[key] = proj
    return proj


def region_features(scene, config, rng):
    proj = _feature_projection(config)
    in_dim = proj.shape[0]
    raw = np.zeros((len(scene.objects), in_dim), dtype=np.float32)
    for i, (noun_id, color_id, position) in enumerate(scene.objects):
        raw[i, noun_id] = 1.0
        raw[i, config.noun_count + color_id] = 1.0
        raw[i, config.noun_count + config.color_count:] = position
    feats = raw @ proj
    noise = rng.standard_normal(feats.shape).astype(np.float32) * config.noise_sigma
    return RegionFeatureSet(scene_id=scene.scene_id, features=feats + noise)


# ---------------------------------------------------------------------------
# caption grammar


@dataclass
class CaptionPlan:
    tense: int
    np_count: int
    dets: list
    adjs: list  # adjective word or None, per noun phrase
    verb: str
    preps: list  # location preposition per trailing noun phrase


def _noun_phrase(noun_word, det, adj):
    return [det, adj, noun_word] if adj else [det, noun_word]


def render_plan(scene, plan, vocab):
    """Deterministically realize a caption plan as token ids."""
    subj_i, rel_id, obj_i = scene.relations[0]
    rel = RELATIONS[rel_id]
    order = [subj_i, obj_i] + [i for i in range(len(scene.objects))
                               if i not in (subj_i, obj_i)]
    picked = order[:plan.np_count]
    words = _noun_phrase(NOUNS[scene.objects[picked[0]][0]], plan.dets[0], plan.adjs[0])
    third, ing, ed, _ = VERB_FORMS[plan.verb]
    if plan.tense == 1:
        words.append(rel.prep)
    elif plan.tense == 2:
        words.extend(["is", ing])
    elif plan.tense == 3:
        words.append(ing)
    elif plan.tense == 4:
        words.append(third)
    elif plan.tense == 5:
        words.append(ed)
    else:
        raise ContractError(f"tense {plan.tense} outside 1..5")
    words.extend(_noun_phrase(NOUNS[scene.objects[picked[1]][0]], plan.dets[1], plan.adjs[1]))
    for slot, obj_index in enumerate(picked[2:]):
        words.append(plan.preps[slot])
        words.extend(_noun_phrase(NOUNS[scene.objects[obj_index][0]],
                                  plan.dets[2 + slot], plan.adjs[2 + slot]))
    return vocab.encode(words)


def sample_plan(scene, rng, tense, plain=False):
    """Draw a caption plan.

    Plain plans model consensus phrasing: a fixed noun-phrase count, bare
    subject determiner, scene colors only, no size words. Ornate plans roam
    the whole grammar. Consensus captions being systematically plainer is
    what ties the per-sentence consensus score to a style the decoder can
    actually reproduce for unseen scenes.
    """
    max_nps = min(4, len(scene.objects))
    if plain:
        np_count = min(3, max_nps)
    else:
        np_count = int(rng.integers(2, max_nps + 1))
    dets = []
    adjs = []
    for i in range(np_count):
        if plain:
            dets.append("a" if i == 0 else ["a", "the"][int(rng.integers(0, 2))])
            adj_p = 0.6 if i == 0 else 0.35
            if rng.random() < adj_p:
                adjs.append(COLORS[scene.objects[i][1] % len(COLORS)])
            else:
                adjs.append(None)
            continue
        det_pool = ["a", "the"] if i < 2 else ["a", "the", "its"]
        dets.append(det_pool[int(rng.integers(0, len(det_pool)))])
        adjs.append(None)
    if not plain:
        # uniform adjective count keeps the caption length histogram flat
        n_adj = int(rng.integers(0, np_count + 1))
        for slot in rng.permutation(np_count)[:n_adj]:
            if rng.random() < 0.6:
                adjs[slot] = COLORS[scene.objects[int(slot)][1] % len(COLORS)]
            else:
                adjs[slot] = SIZE_ADJECTIVES[int(rng.integers(0, len(SIZE_ADJECTIVES)))]
    rel = RELATIONS[scene.relations[0][1]]
    verb = rel.verbs[int(rng.integers(0, len(rel.verbs)))]
    preps = [LOCATION_PREPS[int(rng.integers(0, len(LOCATION_PREPS)))]
             for _ in range(max(0, np_count - 2))]
    return CaptionPlan(tense=tense, np_count=np_count, dets=dets, adjs=adjs,
                       verb=verb, preps=preps)


def tag_tense(tokens, vocab):
    """Tense category 1..5 from the first verb-form token, scanning left to right."""
    for pos, tid in enumerate(tokens):
        if not 0 <= tid < len(vocab):
            raise LexiconError(f"token id {tid} outside vocabulary")
        if tid in vocab.copula_ids:
            nxt = tokens[pos + 1] if pos + 1 < len(tokens) else None
            if nxt is not None and nxt in vocab.verb_kinds and (
                    vocab.verb_kinds[nxt] & {"ing", "participle"}):
                return 2
            return 4  # bare copula reads as a finite verb
        kinds = vocab.verb_kinds.get(tid)
        if kinds:
            if "ing" in kinds:
                prev = tokens[pos - 1] if pos > 0 else None
                return 2 if prev in vocab.copula_ids else 3
            if kinds & {"base", "third"}:
                return 4
            prev = tokens[pos - 1] if pos > 0 else None
            if prev in vocab.copula_ids and "participle" in kinds:
                return 2
            return 5
    return 1


def count_nouns(tokens, vocab):
    total = 0
    for tid in tokens:
        if not 0 <= tid < len(vocab):
            raise LexiconError(f"token id {tid} outside vocabulary")
        if tid in vocab.noun_ids:
            total += 1
    return total


def annotate_tokens(tokens, vocab, quality=0.0):
    return Caption(tokens=list(tokens), length=len(tokens),
                   tense=tag_tense(tokens, vocab),
                   noun_count=count_nouns(tokens, vocab), quality=quality)


def render_references(scene, rng, vocab, consensus_rate=0.55):
    """Five references per scene.

    A scene-level canonical plan anchors a consensus: each reference either
    reuses that phrasing (possibly shifting tense) or is sampled fresh. The
    mix gives the per-sentence consensus score a wide spread, mirroring how
    human caption sets contain both typical and idiosyncratic phrasings.
    """
    from dataclasses import replace as _replace

    canonical_tense = 1 + int(rng.integers(0, 5))
    canonical = sample_plan(scene, rng, canonical_tense, plain=True)
    refs = []
    for _ in range(5):
        if rng.random() < consensus_rate:
            tense = canonical_tense if rng.random() < 0.6 else 1 + int(rng.integers(0, 5))
            plan = _replace(canonical, tense=tense)
        else:
            plan = sample_plan(scene, rng, 1 + int(rng.integers(0, 5)))
        refs.append(annotate_tokens(render_plan(scene, plan, vocab), vocab))
    return refs


def assign_quality(caption, other_references, idf_stats, vocab, include_self=False):
    """Leave-one-out CIDEr-D of a reference against its scene mates, 0..10."""
    if not other_references:
        raise ContractError("assign_quality needs at least one other reference")
    pool = list(other_references) + ([caption] if include_self else [])
    return cider_d(caption.words(vocab), [r.words(vocab) for r in pool], idf_stats)


# ---------------------------------------------------------------------------
# dataset build / load


@dataclass
class SceneRecord:
    scene_id: int
    features: np.ndarray
    captions: list


@dataclass
class Dataset:
    vocab: Vocabulary
    idf: IdfStats
    splits: dict
    config: dict


SPLIT_NAMES = ("train", "val", "test")


def _record_to_json(record, vocab):
    return {
        "scene_id": record.scene_id,
        "features": [[float(x) for x in row] for row in record.features],
        "captions": [
            {
                "tokens": c.words(vocab),
                "tense": c.tense,
                "noun_count": c.noun_count,
                "length": c.length,
                "quality": c.quality,
            }
            for c in record.captions
        ],
    }


def _record_from_json(payload, vocab):
    captions = [
        Caption(tokens=vocab.encode(c["tokens"]), length=int(c["length"]),
                tense=int(c["tense"]), noun_count=int(c["noun_count"]),
                quality=float(c["quality"]))
        for c in payload["captions"]
    ]
    features = np.asarray(payload["features"], dtype=np.float32)
    return SceneRecord(scene_id=int(payload["scene_id"]), features=features,
                       captions=captions)


def build_dataset(config, out_dir):
    """Generate, annotate, and serialize the three splits; returns the Dataset."""
    import os

    config.validate()
    for name, size in (("train", config.train_scenes), ("val", config.val_scenes),
                       ("test", config.test_scenes)):
        if size <= 0:
            raise ConfigError(f"{name} split size must be positive")
    os.makedirs(out_dir, exist_ok=True)
    vocab = Vocabulary.default()

    sizes = {"train": config.train_scenes, "val": config.val_scenes,
             "test": config.test_scenes}
    splits = {}
    next_id = 0
    for name in SPLIT_NAMES:
        records = []
        for _ in range(sizes[name]):
            rng = substream(config.seed, "scene", next_id)
            scene = generate_scene(rng, config, scene_id=next_id)
            feats = region_features(scene, config, rng)
            refs = render_references(scene, rng, vocab,
                                     consensus_rate=config.consensus_rate)
            records.append(SceneRecord(scene_id=next_id, features=feats.features,
                                       captions=refs))
            next_id += 1
        splits[name] = records

    idf = IdfStats.from_reference_sets(
        [[c.words(vocab) for c in rec.captions] for rec in splits["train"]])

    for records in splits.values():
        for rec in records:
            for i, cap in enumerate(rec.captions):
                others = [c for j, c in enumerate(rec.captions) if j != i]
                cap.quality = assign_quality(cap, others, idf, vocab,
                                             include_self=config.include_self_quality)

    for name in SPLIT_NAMES:
        with open(os.path.join(out_dir, f"{name}.jsonl"), "w", encoding="utf-8") as fh:
            for rec in splits[name]:
                fh.write(json.dumps(_record_to_json(rec, vocab), sort_keys=True) + "\n")
    vocab.to_file(os.path.join(out_dir, "vocab.txt"))
    with open(os.path.join(out_dir, "idf.json"), "w", encoding="utf-8") as fh:
        json.dump(idf.to_json_dict(), fh, sort_keys=True)
    config_dict = {
        "corpus.feature_dim": config.feature_dim,
        "corpus.noise_sigma": config.noise_sigma,
        "corpus.min_objects": config.min_objects,
        "corpus.max_objects": config.max_objects,
        "corpus.train_scenes": config.train_scenes,
        "corpus.val_scenes": config.val_scenes,
        "corpus.test_scenes": config.test_scenes,
        "corpus.seed": config.seed,
        "corpus.include_self_quality": config.include_self_quality,
    }
    write_config_file(os.path.join(out_dir, "config.txt"), config_dict)
    return Dataset(vocab=vocab, idf=idf, splits=splits, config=config_dict)


def write_config_file(path, values):
    lines = ["# effective configuration"]
    for key in sorted(values):
        lines.append(f"{key}={values[key]}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def read_config_file(path):
    values = {}
    with open(path, encoding="utf-8") as fh:
        for raw in fh:
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"malformed config line {raw!r}")
            key, value = line.split("=", 1)
            values[key.strip()] = value.strip()
    return values


def load_dataset(data_dir, splits=SPLIT_NAMES):
    import os

    vocab = Vocabulary.from_file(os.path.join(data_dir, "vocab.txt"))
    with open(os.path.join(data_dir, "idf.json"), encoding="utf-8") as fh:
        idf = IdfStats.from_json_dict(json.load(fh))
    loaded = {}
    for name in splits:
        records = []
        with open(os.path.join(data_dir, f"{name}.jsonl"), encoding="utf-8") as fh:
            for line in fh:
                records.append(_record_from_json(json.loads(line), vocab))
        loaded[name] = records
    config_path = os.path.join(data_dir, "config.txt")
    config = read_config_file(config_path) if os.path.exists(config_path) else {}
    return Dataset(vocab=vocab, idf=idf, splits=loaded, config=config)
