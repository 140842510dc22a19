"""Command line entry point: ``psdiora <subcommand> [options]``.

Every subcommand accepts ``--config FILE`` holding ``key=value`` lines
named after the long flags (dashes or underscores); explicit flags win.
Each run writes ``<output>.manifest.json`` recording the arguments and
their hash.

Exit codes: 0 ok, 1 usage, 2 data error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import platform
import sys
import time

import numpy as np
from threadpoolctl import threadpool_limits

from . import constraints as cons
from . import evaluation, synth
from . import diff_core as dc
from . import train as train_mod
from .chart import SentenceTooLong
from .corpus_io import (
    CorpusFormatError,
    build_vocab,
    gold_to_brackets,
    load_constraints,
    load_corpus,
    load_gazetteer,
    load_predictions,
    write_constraints,
    write_predictions,
)
from .objective import PsSvmVariant, instance_loss

logger = logging.getLogger("psdiora")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _truthy(v):
    if isinstance(v, bool):
        return v
    s = str(v).strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off", ""):
        return False
    raise UsageError(f"not a boolean: {v!r}")


def read_config_file(path):
    """``key=value`` lines; ``#`` starts a comment."""
    values = {}
    try:
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise UsageError(f"{path}:{lineno}: expected key=value")
                k, v = line.split("=", 1)
                values[k.strip().replace("-", "_")] = v.strip()
    except FileNotFoundError:
        raise DataError(f"config file not found: {path}") from None
    return values


def _apply_config(sub, argv, args):
    """Re-parse ``argv`` with config-file values as defaults so flags still win."""
    values = read_config_file(args.config)
    actions = {a.dest: a for a in sub._actions}
    defaults = {}
    for k, v in values.items():
        if k not in actions or k in ("config", "help"):
            raise UsageError(f"unknown config key {k!r}")
        act = actions[k]
        if isinstance(act, (argparse._StoreTrueAction, argparse._StoreFalseAction)):
            defaults[k] = _truthy(v)
        elif act.type is not None:
            try:
                defaults[k] = act.type(v)
            except (TypeError, ValueError):
                raise UsageError(f"bad value for {k}: {v!r}") from None
        else:
            defaults[k] = v
    sub.set_defaults(**defaults)
    return sub.parse_args(argv)


def _manifest(args, output, extra=None):
    items = {k: v for k, v in vars(args).items() if k not in ("func",) and not callable(v)}
    record = {
        "command": args.command,
        "args": items,
        "config_hash": dc.config_hash(items),
        "created": time.strftime("%Y-%m-%dT%H:%M:%S"),
        "python": platform.python_version(),
        "numpy": np.__version__,
    }
    record.update(extra or {})
    with open(str(output) + ".manifest.json", "w", encoding="utf-8") as fh:
        json.dump(record, fh, indent=2, sort_keys=True, default=str)
    return record["config_hash"]


def _args_hash(args):
    return dc.config_hash({k: v for k, v in vars(args).items() if k != "func" and not callable(v)})


def _load(path, fmt):
    try:
        return load_corpus(path, fmt)
    except FileNotFoundError:
        raise DataError(f"corpus not found: {path}") from None


def _load_z(path, sentences):
    if not path:
        return None
    try:
        return load_constraints(path, sentences)
    except FileNotFoundError:
        raise DataError(f"constraints file not found: {path}") from None


def _parse_header(path):
    """``key=value`` pairs from leading ``#`` lines of an artifact."""
    meta = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.startswith("#"):
                break
            for tok in line[1:].split():
                if "=" in tok:
                    k, v = tok.split("=", 1)
                    meta[k] = v
    return meta


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args):
    corpus = synth.generate(args.n, seed=args.seed, constraint_fraction=args.fraction, noise=args.noise)
    os.makedirs(args.out_dir, exist_ok=True)
    h = _args_hash(args)
    sizes = [int(x) for x in args.split.split(",")] if args.split else [len(corpus.sentences)]
    if sum(sizes) != len(corpus.sentences):
        raise UsageError("--split sizes must add up to --n")
    names = ["train", "valid", "test"][: len(sizes)] if len(sizes) > 1 else ["corpus"]
    start = 0
    for name, size in zip(names, sizes):
        part = corpus.sentences[start:start + size]
        z = {s.id - start: corpus.constraints[s.id] for s in part if s.id in corpus.constraints}
        with open(os.path.join(args.out_dir, f"{name}.ptb"), "w", encoding="utf-8") as fh:
            fh.writelines(gold_to_brackets(s) + "\n" for s in part)
        write_constraints(z, os.path.join(args.out_dir, f"{name}.constraints.tsv"), header=f"source=synthetic config={h}")
        start += size
    with open(os.path.join(args.out_dir, "entities.txt"), "w", encoding="utf-8") as fh:
        fh.writelines(p + "\n" for p in corpus.entities)
    _manifest(args, os.path.join(args.out_dir, "synth"), {"resampled": corpus.resampled})
    print(f"wrote {len(corpus.sentences)} sentences ({corpus.constraints.count()} constraints) to {args.out_dir}")
    return EXIT_OK


def cmd_extract(args):
    sentences = _load(args.corpus, args.format)
    if args.method == "gazetteer":
        if not args.gazetteer:
            raise UsageError("--gazetteer is required for --method gazetteer")
        try:
            phrases = load_gazetteer(args.gazetteer)
        except FileNotFoundError:
            raise DataError(f"gazetteer not found: {args.gazetteer}") from None
        z = cons.match_gazetteer(sentences, cons.GazetteerIndex(phrases))
        extra = {"gazetteer_size": len(phrases)}
    elif args.method == "pmi":
        lex = cons.induce_pmi_phrases([s.tokens for s in sentences], args.passes, args.threshold, args.min_count)
        z = cons.match_pmi(sentences, lex)
        extra = {"lexicon_size": len(lex), "threshold": lex.threshold}
        print(f"induced {len(lex)} phrases (threshold {lex.threshold:g}, {args.passes} passes)")
        if args.lexicon_out:
            with open(args.lexicon_out, "w", encoding="utf-8") as fh:
                fh.writelines(" ".join(p) + "\n" for p in sorted(lex.phrases))
    else:
        labels = [x for x in (args.labels or "").split(",") if x]
        z = cons.synth_constraints(sentences, labels)
        extra = {"labels": labels}
    if args.target_count is not None or args.forbid_nesting:
        target = args.target_count if args.target_count is not None else sum(len(v) for v in z.values())
        z = cons.restrict_constraints(z, target, args.forbid_nesting, args.seed)
        extra["shortfall"] = z.shortfall
    h = _args_hash(args)
    write_constraints(z, args.out, header=f"source={args.method} config={h}")
    _manifest(args, args.out, extra)
    print(f"wrote {sum(len(v) for v in z.values())} constraints over {len(z)} sentences to {args.out}")
    return EXIT_OK


_TRAIN_KEYS = [f.name for f in train_mod.dataclasses.fields(train_mod.TrainConfig)]


def _train_config(args):
    values = {k: getattr(args, k) for k in _TRAIN_KEYS if getattr(args, k, None) is not None}
    try:
        return train_mod.TrainConfig(**values)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def cmd_train(args):
    config = _train_config(args)
    sentences = _load(args.train, args.format)
    valid = _load(args.valid, args.format) if args.valid else None
    z = _load_z(args.constraints, sentences)
    vz = _load_z(args.valid_constraints, valid) if valid else None
    init = None
    if args.init and args.resume:
        raise UsageError("--init and --resume are exclusive")
    if args.init or args.resume:
        params, old_config, vocab, meta, _ = _load_model(args.init or args.resume)
        if old_config.dim != config.dim:
            raise DataError(f"checkpoint dimension {old_config.dim} differs from config {config.dim}")
        if args.resume and old_config.resume_hash() != config.resume_hash():
            raise DataError("config hash of the resumed checkpoint differs from this run's config")
        init = params if args.init else None
    else:
        vocab = build_vocab(sentences, args.vocab_size, args.min_count)
    result = train_mod.train(
        sentences,
        vocab,
        config,
        constraints=z,
        valid=valid,
        valid_constraints=vz,
        init_params=init,
        resume=args.resume,
        log_path=args.log or args.out + ".log",
        checkpoint_path=args.out,
    )
    if result.best_index is None or not os.path.exists(args.out):
        train_mod.save_model(args.out, result.params, config, vocab)
    _manifest(args, args.out, {"train_config_hash": config.hash(), "vocab_hash": vocab.digest(), "status": result.status})
    best = result.best_f1
    print(f"status={result.status} epochs={result.epochs_run} best_val_F1={best if best is None else f'{best:.2f}'}")
    if result.status == "diverged":
        print("training diverged; last good checkpoint retained", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def _load_model(path):
    try:
        return train_mod.load_model(path)
    except FileNotFoundError:
        raise DataError(f"checkpoint not found: {path}") from None
    except (KeyError, ValueError) as exc:
        raise DataError(f"incompatible checkpoint {path}: {exc}") from None


def cmd_parse(args):
    params, config, vocab, meta, _ = _load_model(args.model)
    if args.expect_config and args.expect_config != meta["config_hash"]:
        raise DataError(f"checkpoint config hash {meta['config_hash']} != expected {args.expect_config}")
    sentences = _load(args.corpus, args.format)
    z = _load_z(args.constraints, sentences)
    trees = train_mod.parse(params, sentences, vocab, z, mode=args.mode, epsilon=args.epsilon)
    header = f"config={meta['config_hash']} vocab={meta['vocab_hash']}"
    write_predictions(trees, [s.tokens for s in sentences], args.out, header=header)
    _manifest(
        args,
        args.out,
        {"model_config_hash": meta["config_hash"], "vocab_hash": meta["vocab_hash"], "decoder": "ccky" if z else "cky"},
    )
    print(f"wrote {len(trees)} trees to {args.out}")
    return EXIT_OK


def cmd_eval(args):
    gold = _load(args.gold, "ptb_brackets")
    runs = []
    vocab_hashes = {}
    for path in args.pred:
        try:
            trees, toks = load_predictions(path)
        except FileNotFoundError:
            raise DataError(f"predictions not found: {path}") from None
        meta = _parse_header(path)
        if "vocab" in meta:
            vocab_hashes[path] = meta["vocab"]
        if len(trees) != len(gold):
            raise DataError(f"{path}: {len(trees)} predictions for {len(gold)} gold sentences")
        for t, s in zip(toks, gold):
            if len(t) != len(s):
                raise DataError(f"{path}: length mismatch on sentence {s.id}")
        runs.append((path, trees, meta))
    if len(set(vocab_hashes.values())) > 1:
        raise DataError(f"prediction files come from different vocabularies: {vocab_hashes}")
    if args.expect_vocab and any(v != args.expect_vocab for v in vocab_hashes.values()):
        raise DataError("prediction vocabulary hash differs from --expect-vocab")
    z = _load_z(args.constraints, gold)
    policy = evaluation.resolved_policy(gold, args.punct)
    h = _args_hash(args)
    rows, kv = [], {"config": h, "punct_policy": policy}
    for idx, (path, trees, meta) in enumerate(runs):
        f1 = evaluation.corpus_f1(trees, gold, policy)
        row = {"predictions": os.path.basename(path), "F1": f1}
        kv[f"run{idx}.path"] = path
        kv[f"run{idx}.model_config"] = meta.get("config", "")
        kv[f"run{idx}.F1"] = f"{f1:.6f}"
        if z:
            r = evaluation.span_recall(trees, z, [s.id for s in gold])
            row["R_z"] = r
            kv[f"run{idx}.R_z"] = f"{r:.6f}"
        rows.append(row)
    out = [evaluation.format_report(rows, f"punct_policy={policy} config={h}")]
    if args.bucket:
        for path, trees, _ in runs:
            rep = evaluation.bucket_report(trees, gold, z, policy)
            brows = [{"label": lab, **vals} for lab, vals in rep.items()]
            out.append(evaluation.format_report(brows, f"buckets: {os.path.basename(path)}"))
    if args.upper_bound:
        ub = evaluation.binarized_upper_bound(gold, policy)
        kv["upper_bound"] = f"{ub:.6f}"
        out.append(f"binarized gold upper bound: {ub:.1f}")
    text = "\n\n".join(out)
    print(text)
    if args.report:
        with open(args.report, "w", encoding="utf-8") as fh:
            fh.write(text + "\n")
        evaluation.write_kv(args.report + ".kv", kv)
        _manifest(args, args.report)
    return EXIT_OK


def cmd_stats(args):
    sentences = _load(args.corpus, "ptb_brackets")
    z = _load_z(args.constraints, sentences)
    stats = cons.constraint_stats(z or {}, sentences)
    h = _args_hash(args)
    print(f"config={h}")
    print(cons.format_stats(stats))
    if args.out:
        kv = {"config": h, "EM": stats["EM"], "C": stats["C"], "n_z": stats["n_z"], "total_coverage": stats["total_coverage"]}
        kv.update({f"label.{k}": v for k, v in stats["per_label"].items()})
        evaluation.write_kv(args.out, kv)
        _manifest(args, args.out)
    return EXIT_OK


def cmd_gradcheck(args):
    rng = np.random.default_rng(args.seed)
    params = dc.ModelParams.init(args.vocab, args.dim, seed=args.seed, scale=args.scale)
    ids = rng.integers(0, args.vocab, size=args.n)
    if args.n < 3:
        raise UsageError("--n must be at least 3 to place a constraint")
    a = int(rng.integers(0, args.n - 2))
    z = {(a, a + 2)}
    failed = False
    for name in args.variants.split(","):
        try:
            variant = PsSvmVariant(name, args.margin)
        except ValueError as exc:
            raise UsageError(str(exc)) from None
        report = dc.grad_check(
            lambda prm, v=variant: instance_loss(ids, z, prm, v),
            params,
            eps=args.eps,
            tol=args.tol,
        )
        ok = report.passed(args.tol)
        failed |= not ok
        print(f"variant={variant.name} max_rel_error={report.max_rel_error:.3e} coords={report.n_checked} {'PASS' if ok else 'FAIL'}")
    return EXIT_NUMERIC if failed else EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing


def build_parser():
    p = _Parser(prog="psdiora", description="Distantly supervised latent tree induction.")
    p.add_argument("--threads", type=int, default=1, help="BLAS threads")
    p.add_argument("-v", "--verbose", action="store_true")
    subs = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, func, help_):
        sp = subs.add_parser(name, help=help_)
        sp.add_argument("--config", help="key=value file; flags override it")
        sp.set_defaults(func=func)
        return sp

    sp = add("synth", cmd_synth, "generate a synthetic corpus with entity constraints")
    sp.add_argument("--n", type=int, default=2000)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--fraction", type=float, default=0.5, help="share of sentences carrying constraints")
    sp.add_argument("--noise", type=float, default=0.0)
    sp.add_argument("--split", help="comma separated train,valid,test sizes")
    sp.add_argument("--out-dir", required=True)

    sp = add("extract-constraints", cmd_extract, "mine span constraints")
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--format", choices=("tokens", "ptb_brackets"), default="tokens")
    sp.add_argument("--method", choices=("gazetteer", "pmi", "synth"), required=True)
    sp.add_argument("--gazetteer")
    sp.add_argument("--passes", type=int, default=2)
    sp.add_argument("--threshold", type=float)
    sp.add_argument("--min-count", type=int, default=5)
    sp.add_argument("--lexicon-out")
    sp.add_argument("--labels", help="comma separated constituent labels (method synth)")
    sp.add_argument("--target-count", type=int)
    sp.add_argument("--forbid-nesting", action="store_true")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True)

    sp = add("train", cmd_train, "train a model")
    sp.add_argument("--train", required=True)
    sp.add_argument("--valid")
    sp.add_argument("--format", choices=("tokens", "ptb_brackets"), default="ptb_brackets")
    sp.add_argument("--constraints")
    sp.add_argument("--valid-constraints")
    sp.add_argument("--init", help="start from this checkpoint's weights")
    sp.add_argument("--resume", help="continue this checkpoint's run")
    sp.add_argument("--out", required=True)
    sp.add_argument("--log")
    sp.add_argument("--vocab-size", type=int, default=10000)
    sp.add_argument("--min-count", type=int, default=1)
    defaults = train_mod.TrainConfig()
    for f in train_mod.dataclasses.fields(train_mod.TrainConfig):
        flag = "--" + f.name.replace("_", "-")
        kind = type(getattr(defaults, f.name))
        if kind is bool:
            sp.add_argument(flag, type=_truthy, default=None, metavar="BOOL")
        else:
            sp.add_argument(flag, type=kind, default=None, help=f"default {getattr(defaults, f.name)}")

    sp = add("parse", cmd_parse, "decode a corpus with a trained model")
    sp.add_argument("--model", required=True)
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--format", choices=("tokens", "ptb_brackets"), default="tokens")
    sp.add_argument("--constraints", help="decode with constrained CKY")
    sp.add_argument("--mode", choices=("lexicographic", "epsilon"), default="lexicographic")
    sp.add_argument("--epsilon", type=float, default=1.0)
    sp.add_argument("--expect-config")
    sp.add_argument("--out", required=True)

    sp = add("eval", cmd_eval, "score predictions against gold trees")
    sp.add_argument("--gold", required=True)
    sp.add_argument("--pred", action="append", required=True)
    sp.add_argument("--punct", choices=evaluation.PUNCT_POLICIES, default="auto")
    sp.add_argument("--constraints")
    sp.add_argument("--bucket", action="store_true")
    sp.add_argument("--upper-bound", action="store_true")
    sp.add_argument("--expect-vocab")
    sp.add_argument("--report")

    sp = add("stats", cmd_stats, "constraint agreement statistics")
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--constraints", required=True)
    sp.add_argument("--out")

    sp = add("gradcheck", cmd_gradcheck, "finite-difference gradient check")
    sp.add_argument("--dim", type=int, default=4)
    sp.add_argument("--n", type=int, default=5)
    sp.add_argument("--vocab", type=int, default=7)
    sp.add_argument("--scale", type=float, default=0.5)
    sp.add_argument("--margin", type=float, default=1.0)
    sp.add_argument("--variants", default="NCBL,MinDifference,Rescale,StructuredRamp")
    sp.add_argument("--eps", type=float, default=1e-5)
    sp.add_argument("--tol", type=float, default=1e-4)
    sp.add_argument("--seed", type=int, default=0)
    return p


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if exc.code is not None else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.config:
            sub = parser._subparsers._group_actions[0].choices[args.command]
            top = parser.parse_known_args(argv)[0]
            idx = argv.index(args.command)
            sub_args = _apply_config(sub, argv[idx + 1:], args)
            for k in ("threads", "verbose", "command"):
                setattr(sub_args, k, getattr(top, k))
            args = sub_args
        with threadpool_limits(limits=max(1, args.threads)):
            return args.func(args)
    except SystemExit as exc:
        return exc.code
    except UsageError as exc:
        print(f"psdiora: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, CorpusFormatError, FileNotFoundError, SentenceTooLong) as exc:
        print(f"psdiora: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except dc.NumericalError as exc:
        print(f"psdiora: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
