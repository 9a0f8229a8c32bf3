"""Command-line interface.

Subcommands wire corpus generation, captioner/matcher training, captioning,
evaluation, and the gradient check suite into reproducible runs. All
randomness derives from --seed through named substreams, every run echoes
its effective configuration next to its outputs, and no command writes
into its input dataset directory.

Exit codes: 0 success, 2 usage or configuration error, 3 data or
compatibility error, 4 empty result.
"""
from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import captioner as cap
from . import evaluator as ev
from . import matcher as mat
from . import tensor as T
from . import trainer as tr
from .checkpoint import load_checkpoint, save_checkpoint, scalar, meta_value, vocab_hash_value
from .corpus import (CONTROL_ATTRIBUTES, ControlSignal, CorpusConfig,
                     attribute_layout, build_dataset, load_dataset,
                     read_config_file, substream, write_config_file)
from .errors import (CapctlError, ConfigError, ContractError, DataError,
                     LexiconError)
from .tensor import Tensor

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_EMPTY = 4

CONTROL_CODES = {"quality": 0, "length": 1, "tense": 2, "nouns": 3, "multi": 4}
CONTROL_NAMES = {v: k for k, v in CONTROL_CODES.items()}


def _merge_config(defaults, config_path, overrides):
    """defaults < config file < explicit flags; unknown file keys rejected."""
    merged = dict(defaults)
    if config_path:
        file_values = read_config_file(config_path)
        unknown = set(file_values) - set(defaults)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        for key, raw in file_values.items():
            kind = type(defaults[key])
            if kind is bool:
                merged[key] = raw.lower() in ("1", "true", "yes")
            else:
                merged[key] = kind(raw)
    for key, value in overrides.items():
        if value is not None:
            merged[key] = value
    return merged


def _parse_betas(text):
    try:
        return tuple(float(v) for v in text.split(","))
    except ValueError as exc:
        raise ConfigError(f"bad control value list {text!r}") from exc


def _control_layout_from_meta(payload):
    code = int(meta_value(payload, "meta/control")) if "meta/control" in payload else None
    beta_dim = int(meta_value(payload, "meta/beta_dim"))
    if code is not None:
        return attribute_layout(CONTROL_NAMES[code])
    return CONTROL_ATTRIBUTES if beta_dim == 4 else ("quality",)


def _load_captioner(path, vocab):
    payload = load_checkpoint(path)
    if "meta/vocab_hash" in payload:
        if vocab_hash_value(payload["meta/vocab_hash"]) != vocab.fingerprint():
            raise DataError(f"checkpoint {path} was trained on a different vocabulary")
    params = cap.CaptionerParams.from_checkpoint(payload)
    return params, _control_layout_from_meta(payload)


def _load_matcher(path, vocab):
    payload = load_checkpoint(path)
    if "meta/vocab_hash" in payload:
        if vocab_hash_value(payload["meta/vocab_hash"]) != vocab.fingerprint():
            raise DataError(f"checkpoint {path} was trained on a different vocabulary")
    return mat.MatcherParams.from_checkpoint(payload)


def _beta_signal(layout, values):
    return ControlSignal.for_attributes(layout, values)


# ---------------------------------------------------------------------------
# gen-data


def cmd_gen_data(args):
    defaults = {
        "corpus.scenes": 100,
        "corpus.seed": 0,
        "corpus.feature_dim": 64,
        "corpus.noise_sigma": 0.05,
        "corpus.min_objects": 3,
        "corpus.max_objects": 5,
        "corpus.include_self_quality": False,
    }
    overrides = {
        "corpus.scenes": args.scenes,
        "corpus.seed": args.seed,
        "corpus.feature_dim": args.feat_dim,
        "corpus.noise_sigma": args.sigma,
    }
    if args.objects:
        lo, hi = (int(x) for x in args.objects.split(","))
        overrides["corpus.min_objects"] = lo
        overrides["corpus.max_objects"] = hi
    merged = _merge_config(defaults, args.config, overrides)
    n = int(merged["corpus.scenes"])
    if n <= 0:
        raise ConfigError("--scenes must be positive")
    if os.path.isdir(args.out) and os.listdir(args.out) and not args.force:
        raise ConfigError(f"output directory {args.out} is not empty (use --force)")
    train = int(n * 0.8)
    val = int(n * 0.1)
    test = n - train - val
    config = CorpusConfig(
        feature_dim=int(merged["corpus.feature_dim"]),
        noise_sigma=float(merged["corpus.noise_sigma"]),
        min_objects=int(merged["corpus.min_objects"]),
        max_objects=int(merged["corpus.max_objects"]),
        train_scenes=train, val_scenes=val, test_scenes=test,
        seed=int(merged["corpus.seed"]),
        include_self_quality=bool(merged["corpus.include_self_quality"]),
    )
    build_dataset(config, args.out)
    print(f"wrote {train}/{val}/{test} scenes to {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# train


def cmd_train(args):
    dataset = load_dataset(args.data)
    direction = {"fwd": "forward", "bwd": "backward"}[args.direction]
    preset_sched = tr.TRAIN_PRESETS[args.preset][args.mode]
    defaults = {
        "train.epochs": preset_sched["epochs"],
        "train.batch_size": 32,
        "train.lr": preset_sched["lr"],
        "train.lr_decay_factor": preset_sched["lr_decay_factor"],
        "train.lr_decay_every": preset_sched["lr_decay_every"],
        "train.seed": 0,
        "train.clip_norm": 5.0,
        "train.val_limit": 100,
        "train.max_len": 16,
    }
    overrides = {
        "train.epochs": args.epochs,
        "train.batch_size": args.batch_size,
        "train.lr": args.lr,
        "train.seed": args.seed,
    }
    merged = _merge_config(defaults, args.config, overrides)
    layout = attribute_layout(args.control)
    config = tr.TrainConfig(
        mode=args.mode,
        epochs=int(merged["train.epochs"]),
        batch_size=int(merged["train.batch_size"]),
        lr=float(merged["train.lr"]),
        lr_decay_factor=float(merged["train.lr_decay_factor"]),
        lr_decay_every=int(merged["train.lr_decay_every"]),
        seed=int(merged["train.seed"]),
        control=args.control,
        beta_policy="from-label" if args.mode == "xe" else "fixed",
        beta_value=_parse_betas(args.beta) if args.beta else (),
        clip_norm=float(merged["train.clip_norm"]),
        val_limit=int(merged["train.val_limit"]),
        max_len=int(merged["train.max_len"]),
    ).validate()

    if args.mode == "scst":
        if not args.init:
            raise ConfigError("scst training needs --init with an xe checkpoint")
        params, _ = _load_captioner(args.init, dataset.vocab)
        if params.direction != direction:
            raise DataError(
                f"--direction {args.direction} but checkpoint is {params.direction}")
        if params.beta_dim != len(layout):
            raise DataError(
                f"--control {args.control} needs beta_dim {len(layout)} "
                f"but checkpoint has {params.beta_dim}")
        for t in params.tensors():
            t.requires_grad = True
    else:
        params = cap.CaptionerParams.init(
            substream(config.seed, "init"), len(dataset.vocab),
            beta_dim=len(layout), direction=direction,
            preset=cap.PRESETS[args.preset])

    extra = {"meta/control": scalar(CONTROL_CODES[args.control])}
    trainer_fn = tr.train_xe if args.mode == "xe" else tr.train_scst
    payload, log = trainer_fn(params, dataset, config, ckpt_path=args.ckpt)
    payload.update(extra)
    save_checkpoint(args.ckpt, payload)
    log.to_jsonl(args.ckpt + ".log.jsonl")
    write_config_file(args.ckpt + ".config.txt",
                      {**merged, "train.mode": args.mode,
                       "train.control": args.control,
                       "train.direction": args.direction,
                       "train.preset": args.preset})
    final = log.records[-1]
    print(f"trained {args.mode} {args.direction} model: "
          f"loss {final.mean_loss:.4f}"
          + (f", val cider {final.val_cider:.3f}" if final.val_cider is not None else ""))
    return EXIT_OK


def cmd_train_matcher(args):
    dataset = load_dataset(args.data)
    fwd, fwd_layout = _load_captioner(args.fwd, dataset.vocab)
    bwd, _ = _load_captioner(args.bwd, dataset.vocab)
    if fwd.direction != "forward" or bwd.direction != "backward":
        raise DataError("--fwd must be a forward checkpoint and --bwd a backward one")
    defaults = {
        "matcher.epochs": tr.TRAIN_PRESETS[args.preset]["matcher"]["epochs"],
        "matcher.batch_size": 32,
        "matcher.lr": tr.TRAIN_PRESETS[args.preset]["matcher"]["lr"],
        "matcher.seed": 0,
        "matcher.margin": 0.2,
        "matcher.tau": 9.0,
    }
    overrides = {
        "matcher.epochs": args.epochs,
        "matcher.seed": args.seed,
        "matcher.margin": args.margin,
        "matcher.tau": args.tau,
    }
    merged = _merge_config(defaults, args.config, overrides)
    beta_values = _parse_betas(args.beta) if args.beta else (4.0,) * len(fwd_layout)
    beta = _beta_signal(fwd_layout, beta_values)
    pairs = tr.make_matcher_pairs(fwd, bwd, dataset, beta)
    if not pairs:
        print("no usable caption pairs: forward and backward decodes always tie",
              file=sys.stderr)
        return EXIT_EMPTY
    matcher_config = mat.MatcherConfig(margin=float(merged["matcher.margin"]),
                                       tau=float(merged["matcher.tau"]))
    params = mat.MatcherParams.init(
        substream(int(merged["matcher.seed"]), "matcher-init"),
        len(dataset.vocab), preset=mat.PRESETS[args.preset])
    config = tr.TrainConfig(
        mode="matcher", epochs=int(merged["matcher.epochs"]),
        batch_size=int(merged["matcher.batch_size"]),
        lr=float(merged["matcher.lr"]), seed=int(merged["matcher.seed"]),
    ).validate()
    payload, log = tr.train_matcher(params, pairs, config,
                                    matcher_config=matcher_config,
                                    vocab_fingerprint=dataset.vocab.fingerprint())
    save_checkpoint(args.out, payload)
    log.to_jsonl(args.out + ".log.jsonl")
    write_config_file(args.out + ".config.txt", merged)
    print(f"trained matcher on {len(pairs)} pairs: "
          f"final loss {log.records[-1].mean_loss:.4f}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# caption


def cmd_caption(args):
    dataset = load_dataset(args.data)
    params, layout = _load_captioner(args.ckpt, dataset.vocab)
    values = _parse_betas(args.beta)
    if len(values) != params.beta_dim:
        raise ConfigError(
            f"--beta needs {params.beta_dim} value(s), got {len(values)}")
    beta = _beta_signal(layout, values)
    record = None
    for split in ("test", "val", "train"):
        for rec in dataset.splits.get(split, []):
            if rec.scene_id == args.scene:
                record = rec
                break
        if record is not None:
            break
    if record is None:
        raise DataError(f"scene {args.scene} not found in {args.data}")

    candidates = []
    if args.beam > 1:
        beams = cap.beam_decode(params, record.features, beta, k=args.beam,
                                max_len=args.max_len)
        candidates = [tokens for tokens, _ in beams]
    else:
        candidates = [cap.greedy_decode(params, record.features, beta,
                                        max_len=args.max_len)]
    if args.bwd:
        bwd, _ = _load_captioner(args.bwd, dataset.vocab)
        candidates.append(cap.greedy_decode(bwd, record.features, beta,
                                            max_len=args.max_len))
    if args.matcher and len(candidates) > 1:
        matcher_params, matcher_config = _load_matcher(args.matcher, dataset.vocab)
        index, scores = mat.select_caption(record.features, candidates,
                                           matcher_params, matcher_config.tau)
    else:
        index, scores = 0, None
    print(" ".join(dataset.vocab.decode(candidates[index])))
    if args.verbose and scores is not None:
        for i, (tokens, score) in enumerate(zip(candidates, scores)):
            marker = "*" if i == index else " "
            print(f"{marker} [{score:+.4f}] {' '.join(dataset.vocab.decode(tokens))}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval


def _parse_study(text):
    if "=" not in text or ".." not in text:
        raise ConfigError(f"--control-study wants ATTR=lo..hi, got {text!r}")
    attr, span = text.split("=", 1)
    lo, hi = span.split("..", 1)
    if attr not in ("length", "tense", "nouns"):
        raise ConfigError(f"control study attribute must be length|tense|nouns, "
                          f"got {attr!r}")
    return attr, list(range(int(lo), int(hi) + 1))


def cmd_eval(args):
    if args.beta_sweep and args.control_study:
        raise ConfigError("--beta-sweep conflicts with --control-study")
    dataset = load_dataset(args.data)
    records = dataset.splits.get(args.split)
    if not records:
        raise DataError(f"split {args.split!r} is empty or missing")
    fwd, layout = _load_captioner(args.fwd, dataset.vocab)
    threshold = args.poor_threshold / 100.0 if args.poor_threshold is not None else None

    if args.beta_sweep:
        values = [float(v) for v in args.beta_sweep.split(",")]
        sweep = ev.beta_sweep(fwd, values, records, dataset.idf, dataset.vocab,
                              attribute=layout[0], max_len=args.max_len,
                              threshold=threshold)
        payload = {"sweep": [{"beta": v, "report": r.to_json_dict()}
                             for v, r in sweep]}
    elif args.control_study:
        attr, values = _parse_study(args.control_study)
        rows = ev.control_study(fwd, attr, values, records, dataset.idf,
                                dataset.vocab, max_len=args.max_len)
        payload = {"study": {"attribute": attr, "rows": rows}}
    else:
        values = _parse_betas(args.beta) if args.beta else (4.0,) * len(layout)
        beta = _beta_signal(layout, values)
        backward = None
        matcher_params = None
        matcher_config = None
        if args.bwd:
            backward, _ = _load_captioner(args.bwd, dataset.vocab)
        if args.matcher:
            matcher_params, matcher_config = _load_matcher(args.matcher, dataset.vocab)
        sut = ev.SystemUnderTest(
            forward=fwd, backward=backward, matcher_params=matcher_params,
            matcher_config=matcher_config,
            decode="beam" if args.beam > 1 else "greedy", beam_k=args.beam,
            beta=beta, max_len=args.max_len)
        report, _ = ev.eval_system(sut, records, dataset.idf, dataset.vocab,
                                   threshold=threshold,
                                   csv_path=args.report + ".scenes.csv")
        payload = report.to_json_dict()
        print(f"bleu1 {report.bleu1:.4f}  bleu4 {report.bleu4:.4f}  "
              f"cider {report.cider:.4f} (x100: {100 * report.cider:.1f})  "
              f"poor {report.poor_quality_fraction:.3f}")
    with open(args.report, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, sort_keys=True, indent=2)
    write_config_file(args.report + ".config.txt", {
        "eval.split": args.split, "eval.beam": args.beam,
        "eval.beta": args.beta or "", "eval.beta_sweep": args.beta_sweep or "",
        "eval.control_study": args.control_study or "",
        "eval.poor_threshold": ("" if args.poor_threshold is None
                                 else args.poor_threshold),
    })
    return EXIT_OK


# ---------------------------------------------------------------------------
# grad-check


def _broken_scale(x):
    """Fault-injection hook: forward doubles, backward pretends it tripled."""
    out = Tensor(x.data * 2.0)
    if x.requires_grad:
        out.requires_grad = True
        out._parents = (x,)

        def bw(g):
            if x.grad is None:
                x.grad = 3.0 * g
            else:
                x.grad += 3.0 * g
        out._backward = bw
    return out


def grad_check_suite(seed=0, corrupt=False):
    """(name, max relative error) for every kernel and both full models."""
    rng = np.random.default_rng(seed)

    def f64(shape):
        return Tensor(rng.normal(size=shape), requires_grad=True, dtype=np.float64)

    checks = []

    a, b = f64((3, 4)), f64((4, 2))
    fn = _broken_scale if corrupt else (lambda t: t)
    checks.append(("matmul", lambda params: T.tsum(T.tanh(T.matmul(fn(params[0]),
                                                                   params[1]))),
                   [a, b]))

    x = f64((2, 5))
    w = Tensor(rng.normal(size=(2, 5)), dtype=np.float64)
    checks.append(("softmax", lambda params: T.tsum(T.mul(T.softmax(params[0], axis=1),
                                                          w)), [x]))

    lstm = T.LSTMCellParams.init(rng, 3, 4, dtype=np.float64)
    xs = [Tensor(rng.normal(size=(1, 3)), dtype=np.float64) for _ in range(2)]

    def lstm_loss(params):
        h = Tensor(np.zeros((1, 4)))
        c = Tensor(np.zeros((1, 4)))
        for xt in xs:
            h, c = T.lstm_cell(xt, h, c, lstm)
        return T.tsum(h)

    checks.append(("lstm_cell", lstm_loss, lstm.tensors()))

    gru = T.GRUCellParams.init(rng, 3, 4, dtype=np.float64)

    def gru_loss(params):
        h = Tensor(np.zeros((1, 4)))
        for xt in xs:
            h = T.gru_cell(xt, h, gru)
        return T.tsum(h)

    checks.append(("gru_cell", gru_loss, gru.tensors()))

    c1, c2 = f64((2, 3)), f64((2, 2))
    wc = Tensor(rng.normal(size=(2, 5)), dtype=np.float64)
    checks.append(("concat", lambda params: T.tsum(T.mul(T.concat(params, axis=1), wc)),
                   [c1, c2]))

    from .corpus import Caption
    tiny = cap.CaptionerPreset(feature_dim=3, proj_dim=3, embed_dim=2,
                               hidden_dim=3, attention_dim=2)
    cp = cap.CaptionerParams.init(np.random.default_rng(seed + 1), vocab_size=6,
                                  beta_dim=1, preset=tiny, dtype=np.float64)
    feats = rng.normal(size=(2, 3))
    ref = Caption(tokens=[4, 5], length=2, tense=1, noun_count=0)
    beta = ControlSignal(values=(1.5,), layout=("quality",))

    def xe(params):
        v, v_bar = cap.project_features(feats, cp)
        return cap.xe_loss(cp, beta, ref, v, v_bar)

    checks.append(("captioner_xe", xe, cp.tensors()))

    mtiny = mat.MatcherPreset(embed_dim=2, hidden_dim=3, feature_dim=3,
                              project_regions=False)
    mp = mat.MatcherParams.init(np.random.default_rng(seed + 2), vocab_size=6,
                                preset=mtiny, dtype=np.float64)
    mfeats = Tensor(rng.normal(size=(2, 3)), dtype=np.float64)

    def triplet(params):
        pos = mat.similarity(mat.image_regions(mfeats, mp),
                             mat.encode_text([4, 5], mp), tau=9.0).score
        neg = mat.similarity(mat.image_regions(mfeats, mp),
                             mat.encode_text([5, 4, 4], mp), tau=9.0).score
        return mat.triplet_loss(pos, neg, 0.2)

    checks.append(("matcher_triplet", triplet, mp.tensors()))

    results = []
    for name, build_loss, params in checks:
        results.append((name, T.finite_diff_check(build_loss, params, step=1e-5)))
    return results


def cmd_grad_check(args):
    results = grad_check_suite(seed=args.seed, corrupt=args.corrupt)
    failed = False
    for name, err in results:
        ok = err < 1e-4
        failed = failed or not ok
        print(f"{name:<18} {err:12.3e}  {'PASS' if ok else 'FAIL'}")
    return EXIT_OK if not failed else 1


# ---------------------------------------------------------------------------


def build_parser():
    parser = argparse.ArgumentParser(prog="capctl",
                                     description="controllable captioning toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic scene dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--scenes", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--feat-dim", type=int, dest="feat_dim")
    p.add_argument("--sigma", type=float)
    p.add_argument("--objects", help="MIN,MAX object count range")
    p.add_argument("--force", action="store_true")
    p.add_argument("--config")
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train", help="train a captioner (xe or scst)")
    p.add_argument("--data", required=True)
    p.add_argument("--direction", choices=("fwd", "bwd"), required=True)
    p.add_argument("--control", choices=("quality", "length", "tense", "nouns", "multi"),
                   required=True)
    p.add_argument("--mode", choices=("xe", "scst"), required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--init")
    p.add_argument("--preset", choices=("desk", "paper"), default="desk")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--lr", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--beta", help="fixed control values for scst, comma separated")
    p.add_argument("--config")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("train-matcher", help="train the caption matcher")
    p.add_argument("--data", required=True)
    p.add_argument("--fwd", required=True)
    p.add_argument("--bwd", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--preset", choices=("desk", "paper"), default="desk")
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--beta")
    p.add_argument("--margin", type=float)
    p.add_argument("--tau", type=float)
    p.add_argument("--config")
    p.set_defaults(fn=cmd_train_matcher)

    p = sub.add_parser("caption", help="caption one scene")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--scene", type=int, required=True)
    p.add_argument("--beta", required=True)
    p.add_argument("--beam", type=int, default=1)
    p.add_argument("--bwd")
    p.add_argument("--matcher")
    p.add_argument("--max-len", type=int, default=16, dest="max_len")
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(fn=cmd_caption)

    p = sub.add_parser("eval", help="evaluate a system on a split")
    p.add_argument("--data", required=True)
    p.add_argument("--fwd", required=True)
    p.add_argument("--bwd")
    p.add_argument("--matcher")
    p.add_argument("--beam", type=int, default=1)
    p.add_argument("--beta")
    p.add_argument("--beta-sweep", dest="beta_sweep")
    p.add_argument("--control-study", dest="control_study")
    p.add_argument("--report", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--max-len", type=int, default=16, dest="max_len")
    p.add_argument("--poor-threshold", type=float, dest="poor_threshold",
                   help="poor-quality cutoff on the x100 reporting scale")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("grad-check", help="finite-difference check of all kernels")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--corrupt", action="store_true", help=argparse.SUPPRESS)
    p.set_defaults(fn=cmd_grad_check)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, ContractError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, LexiconError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except CapctlError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
