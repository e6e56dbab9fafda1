"""Command-line interface: one subcommand per pipeline stage.

Exit codes: 0 ok, 2 usage error, 3 data error, 4 numeric failure.  Logs go
to stderr; everything else goes to the files named by ``--out``.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import accentid as aid
from . import evaluation as ev
from . import pipeline as P
from . import synth
from .dataio import (FormatError, ManifestError, ModelFile, load_manifest, load_model,
                     read_ivectors, save_model, write_ivectors)
from .nnet import DivergenceError, TrainConfig
from .tvm import TotalVariabilityModel, train_tvm
from .ubm import UbmModel

log = logging.getLogger("accent_forge")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
LOG_ENV = "ACCENT_FORGE_LOG"


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# argument types and checks

def _positive_int(text):
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}")
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {v}")
    return v


def _nonneg_int(text):
    v = int(text)
    if v < 0:
        raise argparse.ArgumentTypeError(f"expected a non-negative integer, got {v}")
    return v


def _layer_sizes(text):
    try:
        sizes = tuple(int(s) for s in text.split(",") if s.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")
    if not sizes or min(sizes) < 1:
        raise argparse.ArgumentTypeError(f"layer sizes must be positive, got {text!r}")
    return sizes


def _weights(text):
    try:
        return [float(s) for s in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _need_file(args, *flags):
    for flag in flags:
        value = getattr(args, flag.lstrip("-").replace("-", "_"))
        paths = value if isinstance(value, list) else [value]
        for p in paths:
            if p is None:
                continue
            if not Path(p).exists():
                raise UsageError(f"{flag}: no such file or directory: {p}")


def _need_out_parent(path):
    parent = Path(path).resolve().parent
    if not parent.is_dir():
        raise UsageError(f"--out: directory {parent} does not exist")


def _preset(args) -> P.Preset:
    return P.PRESETS[args.preset]


def _default(args, name, value):
    if getattr(args, name, None) is None:
        setattr(args, name, value)


# ---------------------------------------------------------------------------
# shared loading helpers

def _manifest(args):
    path = Path(args.manifest)
    return load_manifest(path), path.parent


def _ivector_map(path, records):
    ids, vecs = read_ivectors(path)
    table = dict(zip(ids, vecs))
    missing = [r.utt_id for r in records if r.utt_id not in table]
    if missing:
        raise FormatError(f"{path}: no i-vector for {len(missing)} manifest entries, e.g. {missing[0]!r}")
    return table


def _posteriors_or_none(args, records, base):
    if args.posterior_source == "external":
        return P.load_posteriors(records, base)
    return None


def _languages(records):
    return sorted({r.language for r in records})


# ---------------------------------------------------------------------------
# subcommands

def cmd_synth(args):
    if args.config is not None:
        _need_file(args, "--config")
        cfg = synth.load_config(args.config)
        text = Path(args.config).read_text(encoding="utf-8")
        explicit_seed = any(line.split("#", 1)[0].split("=", 1)[0].strip() == "seed"
                            for line in text.splitlines())
    else:
        cfg, explicit_seed = synth.SynthConfig(), False
    if not explicit_seed:
        cfg = replace(cfg, seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    corpus = synth.generate_corpus(cfg, out)
    log.info("wrote %d utterances to %s", len(corpus.records), out)


def cmd_train_ubm(args):
    pre = _preset(args)
    _default(args, "components", pre.components)
    _default(args, "iters", pre.ubm_iters)
    _need_file(args, "--manifest")
    _need_out_parent(args.out)
    records, base = _manifest(args)
    features = P.load_features(records, base)
    posteriors = _posteriors_or_none(args, records, base)
    ubm, history = P.fit_ubm(records, features, replace(pre, components=args.components,
                                                        ubm_iters=args.iters), args.seed, posteriors)
    mf = ubm.to_model_file()
    mf.meta["ubm.source"] = args.posterior_source
    if history:
        mf.meta["ubm.loglik"] = ",".join(repr(float(v)) for v in history)
    save_model(args.out, mf)
    log.info("UBM with %d components written to %s", ubm.weights.shape[0], args.out)


def cmd_train_tvm(args):
    pre = _preset(args)
    _default(args, "rank", pre.rank_gmm if args.posterior_source == "gmm" else pre.rank_external)
    _default(args, "iters", pre.tvm_iters)
    _need_file(args, "--ubm", "--manifest")
    _need_out_parent(args.out)
    ubm = UbmModel.from_model_file(load_model(args.ubm))
    records, base = _manifest(args)
    features = P.load_features(records, base)
    posteriors = _posteriors_or_none(args, records, base)
    train = [r for r in records if r.split == "train"]
    stats = P.compute_stats(ubm, train, features, posteriors, args.threads)
    tvm = train_tvm(ubm, [stats[r.utt_id] for r in train], args.rank, args.iters, args.seed,
                    threads=args.threads)
    save_model(args.out, tvm.to_model_file())
    log.info("rank-%d total variability model written to %s", args.rank, args.out)


def cmd_extract(args):
    _need_file(args, "--ubm", "--tvm", "--manifest")
    _need_out_parent(args.out)
    ubm = UbmModel.from_model_file(load_model(args.ubm))
    tvm = TotalVariabilityModel.from_model_file(load_model(args.tvm))
    if tvm.sigma.shape != ubm.covars.reshape(-1).shape:
        raise FormatError(f"--tvm has supervector size {tvm.sigma.size}, "
                          f"--ubm implies {ubm.covars.size}")
    records, base = _manifest(args)
    features = P.load_features(records, base)
    posteriors = _posteriors_or_none(args, records, base)
    vecs = P.extract_all(tvm, ubm, records, features, posteriors, args.threads)
    write_ivectors(args.out, [r.utt_id for r in records], vecs)
    log.info("%d i-vectors of dimension %d written to %s", *vecs.shape, args.out)


def _siamese_pre(args) -> P.Preset:
    pre = _preset(args)
    return replace(pre, n_pos=args.pos if args.pos is not None else pre.n_pos,
                   n_neg=args.neg if args.neg is not None else pre.n_neg,
                   hidden=args.hidden or pre.hidden,
                   embed=args.embed or pre.embed,
                   dropout0=pre.dropout0 if args.dropout0 is None else args.dropout0,
                   siamese_epochs=args.epochs or pre.siamese_epochs,
                   siamese_lr=args.lr or pre.siamese_lr,
                   siamese_batch=args.batch or pre.siamese_batch,
                   head_epochs=args.head_epochs or pre.head_epochs)


def _train_twin(args, records, ivecs, pre, shared):
    languages = _languages(records)
    acc_train = P.subset(records, ivecs, "accented", "train")
    nat_train = P.subset(records, ivecs, "native", "train")
    pairs = aid.build_pairs(acc_train, nat_train, pre.n_pos, pre.n_neg, args.seed, languages)
    spec = aid.twin_spec(acc_train.vectors.shape[1], pre.hidden, pre.embed, pre.dropout0, args.seed)
    cfg = P.siamese_config(pre, args.seed, optimizer=getattr(args, "optimizer", None) or "rmsprop")
    twin, _ = aid.train_siamese(pairs, spec, cfg, shared=shared)
    enrollment = aid.EnrollmentSet.build(nat_train, languages, 4, args.seed)
    head = aid.train_siamese4_head(twin, enrollment, P.subset(records, ivecs, "accented", "dev"),
                                   config=P.head_config(pre, args.seed))
    return twin, enrollment, head


def cmd_train_siamese(args):
    pre = _siamese_pre(args)
    _need_file(args, "--ivectors", "--manifest")
    _need_out_parent(args.out)
    records, _ = _manifest(args)
    ivecs = _ivector_map(args.ivectors, records)
    twin, enrollment, head = _train_twin(args, records, ivecs, pre, shared=True)
    mf = twin.to_model_file(ModelFile())
    head.to_model_file(mf)
    mf.meta["model.kind"] = "siamese"
    save_model(args.out, mf)
    enrollment.save(args.enrollment)
    log.info("twin network written to %s, enrollment set to %s", args.out, args.enrollment)


def cmd_train_baseline(args):
    variant = args.model.replace("-", "_")
    pre = _preset(args)
    _need_file(args, "--ivectors", "--manifest")
    _need_out_parent(args.out)
    if variant == "nnet_nonid_twin" and args.enrollment is None:
        raise UsageError("--enrollment: required for nnet-nonid-twin")
    records, _ = _manifest(args)
    ivecs = _ivector_map(args.ivectors, records)
    languages = _languages(records)
    acc_train = P.subset(records, ivecs, "accented", "train")
    if variant == "lda":
        mf = aid.train_lda(acc_train.vectors, acc_train.languages, languages).to_model_file(ModelFile())
    elif variant == "nnet_nonid_twin":
        args.pos = args.neg = args.embed = args.dropout0 = args.head_epochs = None
        twin_pre = replace(_siamese_pre(args), hidden=pre.hidden)
        twin, enrollment, head = _train_twin(args, records, ivecs, twin_pre, shared=False)
        mf = twin.to_model_file(ModelFile())
        head.to_model_file(mf)
        mf.meta["model.kind"] = "nnet_nonid_twin"
        enrollment.save(args.enrollment)
    else:
        cfg = TrainConfig(optimizer="adam", learning_rate=args.lr or pre.nnet_lr,
                          batch_size=args.batch or pre.nnet_batch,
                          epochs=pre.nnet_epochs if args.epochs is None else args.epochs,
                          seed=args.seed, patience=pre.patience)
        clf = aid.train_baseline_nnet(variant, acc_train, cfg, languages, args.hidden or pre.nnet_hidden,
                                      dev=P.subset(records, ivecs, "accented", "dev"),
                                      native=P.subset(records, ivecs, "native", "train"), seed=args.seed)
        mf = clf.to_model_file(ModelFile())
    mf.meta.setdefault("model.kind", variant)
    save_model(args.out, mf)
    log.info("%s model written to %s", args.model, args.out)


def cmd_predict(args):
    _need_file(args, "--system", "--ivectors", "--manifest", "--enrollment")
    _need_out_parent(args.out)
    mf = load_model(args.system)
    records, _ = _manifest(args)
    chosen = [r for r in records if r.split == args.split and r.kind == args.kind]
    if not chosen:
        raise ManifestError(f"no {args.kind} utterances in split {args.split!r}")
    ivecs = _ivector_map(args.ivectors, chosen)
    ids = [r.utt_id for r in chosen]
    x = np.array([ivecs[u] for u in ids])
    kind = mf.meta.get("model.kind")
    if kind in ("siamese", "nnet_nonid_twin"):
        if args.enrollment is None:
            raise UsageError("--enrollment: required for twin-network systems")
        strategy = "siamese4" if kind == "nnet_nonid_twin" else (args.strategy or "siamese-4").replace("-", "")
        twin = aid.Twin.from_model_file(mf)
        head = aid.Siamese4Head.from_model_file(mf)
        enrollment = aid.EnrollmentSet.load(args.enrollment)
        if enrollment.means[enrollment.languages[0]].shape[0] != x.shape[1]:
            raise FormatError("--enrollment i-vector dimension differs from --ivectors")
        cfg = aid.StrategyConfig(strategy, seed=args.seed)
        scores = aid.score_strategy(twin, enrollment, x, cfg, head)
        name = args.name or (kind if kind == "nnet_nonid_twin" else strategy)
        score_kind = "posterior" if cfg.higher_is_better else "distance"
        languages = enrollment.languages
    else:
        if args.strategy is not None:
            raise UsageError("--strategy: only meaningful for twin-network systems")
        clf = aid.load_classifier(mf)
        scores = clf.scores(x)
        name = args.name or kind
        score_kind = "posterior" if clf.higher_is_better else "distance"
        languages = clf.languages
    preds = ev.PredictionSet.from_scores(name, ids, languages, scores, score_kind)
    preds.to_jsonl(args.out)
    log.info("%d predictions from %s written to %s", len(preds), name, args.out)


def _write_csv(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def cmd_evaluate(args):
    _need_file(args, "--preds", "--truth", "--families")
    from .plotting import bubble_confusion

    records = load_manifest(args.truth)
    chosen = [r for r in records if r.split == args.split and r.kind == "accented"]
    truth = {r.utt_id: r.language for r in chosen}
    strengths = {r.utt_id: r.strength for r in chosen}
    languages = _languages(records)
    families = None
    if args.families:
        with open(args.families, encoding="utf-8") as fh:
            families = json.load(fh)
    elif args.confusion and set(languages) <= set(ev.DEFAULT_FAMILIES):
        families = ev.DEFAULT_FAMILIES
    sets = [ev.PredictionSet.from_jsonl(p) for p in args.preds]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    summary = {}
    rows = []
    for preds in sets:
        nbest = {n: ev.nbest_accuracy(preds, truth, n) for n in range(1, args.nbest + 1)}
        entry = {"n_utterances": len(truth), "nbest": {str(n): a for n, a in nbest.items()}}
        rows.append([preds.system] + [nbest[n] for n in nbest])
        if args.strength:
            entry["strength"] = ev.strength_breakdown(preds, truth, strengths)
        if args.confusion:
            stem = preds.system.replace("/", "_")
            result = ev.confusion_matrix(preds, truth, languages, families)
            mat = result if families is None else result[0]
            _write_csv(out / f"confusion_{stem}.csv", ["true\\predicted"] + languages,
                       [[l] + list(map(int, r)) for l, r in zip(languages, mat)])
            bubble_confusion(mat, languages, out / f"confusion_{stem}.png", preds.system)
            if families is not None:
                _, fmat, fams = result
                _write_csv(out / f"confusion_{stem}_families.csv", ["true\\predicted"] + fams,
                           [[f] + list(map(int, r)) for f, r in zip(fams, fmat)])
                bubble_confusion(fmat, fams, out / f"confusion_{stem}_families.png",
                                 f"{preds.system} (families)")
        summary[preds.system] = entry
    header = ["system"] + [f"{n}-best" for n in range(1, args.nbest + 1)]
    text = ev.format_table(header, rows)
    if args.strength:
        srows = []
        for preds in sets:
            b = summary[preds.system]["strength"]["buckets"]
            srows.append([preds.system] + [b[s]["accuracy"] for s in (1, 2, 3, 4)])
        shares = summary[sets[0].system]["strength"]["buckets"]
        srows.append(["share %"] + [shares[s]["share"] for s in (1, 2, 3, 4)])
        text += "\n" + ev.format_table(["system", "s1", "s2", "s3", "s4"], srows)
    (out / "table.txt").write_text(text, encoding="utf-8")
    with open(out / "summary.json", "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
    log.info("evaluation of %d systems written to %s", len(sets), out)


def cmd_fuse(args):
    _need_file(args, "--preds")
    _need_out_parent(args.out)
    sets = [ev.PredictionSet.from_jsonl(p) for p in args.preds]
    if args.mode == "majority":
        if args.tiebreak is None:
            raise UsageError("--tiebreak: required for majority fusion")
        fused = ev.fuse_majority(sets, args.tiebreak, args.name or "majority")
    else:
        weights = args.weights if args.weights is not None else [1.0 / len(sets)] * len(sets)
        fused = ev.fuse_weighted(sets, weights, args.name or "weighted")
    fused.to_jsonl(args.out)
    log.info("%s fusion of %d systems written to %s", args.mode, len(sets), args.out)


# ---------------------------------------------------------------------------
# parser

def _global_flags(suppress: bool) -> argparse.ArgumentParser:
    # subcommands repeat the global flags; their copies must not reset values given earlier
    def d(value):
        return argparse.SUPPRESS if suppress else value
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=d(0), help="random seed (default 0)")
    common.add_argument("--threads", type=_positive_int, default=d(1),
                        help="worker threads for per-utterance work; 1 is bit-reproducible")
    common.add_argument("--log-level", default=d("INFO"),
                        choices=["DEBUG", "INFO", "WARNING", "ERROR"],
                        help=f"overridden by ${LOG_ENV}")
    common.add_argument("--preset", default=d("full"), choices=sorted(P.PRESETS),
                        help="default hyperparameters: full-size ('full') or laptop-scale ('desk')")
    return common


def build_parser() -> argparse.ArgumentParser:
    common = _global_flags(suppress=True)
    parser = argparse.ArgumentParser(prog="accent-forge", parents=[_global_flags(suppress=False)],
                                     description="Accent identification from i-vectors with twin networks.")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic corpus")
    p.add_argument("--config", help="flat key = value file; missing keys keep their defaults")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train-ubm", parents=[common], help="fit the universal background model")
    p.add_argument("--manifest", required=True)
    p.add_argument("--components", type=_positive_int, help="mixture size (full preset: 2048)")
    p.add_argument("--iters", type=_nonneg_int, help="EM iterations (10)")
    p.add_argument("--posterior-source", choices=["gmm", "external"], default="gmm")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_ubm)

    p = sub.add_parser("train-tvm", parents=[common], help="fit the total variability matrix")
    p.add_argument("--ubm", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--rank", type=_positive_int, help="i-vector dimension (400 gmm, 300 external)")
    p.add_argument("--iters", type=_nonneg_int, help="EM iterations (5)")
    p.add_argument("--posterior-source", choices=["gmm", "external"], default="gmm")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_tvm)

    p = sub.add_parser("extract", parents=[common], help="extract length-normalized i-vectors")
    p.add_argument("--ubm", required=True)
    p.add_argument("--tvm", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--posterior-source", choices=["gmm", "external"], default="gmm")
    p.add_argument("--out", required=True, help="FM01 matrix; utterance ids go to <out>.ids")
    p.set_defaults(func=cmd_extract)

    def twin_flags(p):
        p.add_argument("--pos", type=_positive_int, help="positive pairs (100000)")
        p.add_argument("--neg", type=_positive_int, help="negative pairs (900000)")
        p.add_argument("--hidden", type=_layer_sizes, help="hidden layer sizes (128,128)")
        p.add_argument("--embed", type=_positive_int, help="twin output size (32)")
        p.add_argument("--dropout0", type=float, help="dropout on the first layer (0.2)")
        p.add_argument("--optimizer", choices=["rmsprop", "adam", "sgd"], default="rmsprop")
        p.add_argument("--epochs", type=_nonneg_int)
        p.add_argument("--lr", type=float)
        p.add_argument("--batch", type=_positive_int)
        p.add_argument("--head-epochs", type=_nonneg_int)

    p = sub.add_parser("train-siamese", parents=[common], help="train the twin network and its head")
    p.add_argument("--ivectors", required=True)
    p.add_argument("--manifest", required=True)
    twin_flags(p)
    p.add_argument("--enrollment", required=True, help="directory for the native enrollment set")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_siamese)

    p = sub.add_parser("train-baseline", parents=[common], help="train a comparison classifier")
    p.add_argument("--model", required=True,
                   choices=["lda", "nnet", "nnet-append", "nnet-nonid-twin", "nnet-transfer"])
    p.add_argument("--ivectors", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--hidden", type=_layer_sizes, help="hidden layer sizes (128)")
    p.add_argument("--optimizer", choices=["rmsprop", "adam", "sgd"], default="rmsprop",
                   help="twin optimizer for nnet-nonid-twin")
    p.add_argument("--epochs", type=_nonneg_int, help="training epochs (the twin's for nnet-nonid-twin)")
    p.add_argument("--lr", type=float)
    p.add_argument("--batch", type=_positive_int)
    p.add_argument("--enrollment", help="enrollment directory written by nnet-nonid-twin")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_baseline)

    p = sub.add_parser("predict", parents=[common], help="score i-vectors with a trained system")
    p.add_argument("--system", required=True, help="model file from train-siamese or train-baseline")
    p.add_argument("--ivectors", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", default="test", choices=["train", "dev", "test"])
    p.add_argument("--kind", default="accented", choices=["accented", "native"])
    p.add_argument("--strategy", choices=["siamese-1", "siamese-2", "siamese-3", "siamese-4"])
    p.add_argument("--enrollment")
    p.add_argument("--name", help="system name recorded in the predictions")
    p.add_argument("--out", required=True, help="JSON-lines predictions")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", parents=[common], help="accuracy tables, confusion matrices, plots")
    p.add_argument("--preds", required=True, nargs="+")
    p.add_argument("--truth", required=True, help="manifest holding true labels")
    p.add_argument("--split", default="test", choices=["train", "dev", "test"])
    p.add_argument("--nbest", type=_positive_int, default=3)
    p.add_argument("--confusion", action="store_true", help="write confusion CSVs and bubble plots")
    p.add_argument("--families", help="JSON map language -> family")
    p.add_argument("--strength", action="store_true")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("fuse", parents=[common], help="combine three or more prediction files")
    p.add_argument("--preds", required=True, nargs="+")
    p.add_argument("--mode", required=True, choices=["majority", "weighted"])
    p.add_argument("--weights", type=_weights, help="one weight per --preds file, e.g. 0.3,0.3,0.4")
    p.add_argument("--tiebreak", help="system whose top choice settles three-way disagreements")
    p.add_argument("--name")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fuse)
    return parser


def _configure_logging(level: str) -> None:
    level = os.environ.get(LOG_ENV, level).upper()
    root = logging.getLogger("accent_forge")
    root.handlers.clear()
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    root.addHandler(handler)
    root.setLevel(getattr(logging, level, logging.INFO))
    root.propagate = False


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits on its own for --help and bad flags
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    _configure_logging(args.log_level)
    try:
        args.func(args)
    except UsageError as exc:
        print(f"accent-forge {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DivergenceError, np.linalg.LinAlgError, FloatingPointError) as exc:
        log.error("numeric failure: %s", exc)
        return EXIT_NUMERIC
    except (ManifestError, FormatError, ValueError, KeyError, FileNotFoundError) as exc:
        log.error("data error: %s", exc)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
